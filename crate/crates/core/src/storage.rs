//! Merkle-protected dataset and code images.
//!
//! Images are split into fixed 4096-byte blocks. Leaves are `H(0x00 ‖ block)`,
//! inner nodes `H(0x01 ‖ left ‖ right)`, and an unpaired node at the end of a
//! level is promoted unchanged. A dataset commitment is `H(0x02 ‖ salt ‖ root)`;
//! code measurements are the bare root.
//!
//! Image file layout (all integers little-endian):
//!
//! ```text
//! header  (26 bytes): "VFLD" | version u16 | block_size u32 | record_width u32
//!                     | text_width u32 | record_count u64
//! payload (block_count * block_size bytes):
//!         record_count u64 | record_width u32 | text_width u32
//!         | rows | zero padding
//! row:    record_width * f64 (features, then label) | text_width bytes (NUL padded)
//! ```
//!
//! The payload repeats the shape fields so the Merkle root binds them; a header
//! that disagrees with the payload prefix is rejected.

use std::fs::File;
use std::io::{Read, Seek, SeekFrom};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::crypto::{domain, hash_parts, Digest};
use crate::error::{Error, Result};

pub const BLOCK_SIZE: usize = 4096;
pub const IMAGE_MAGIC: &[u8; 4] = b"VFLD";
pub const IMAGE_VERSION: u16 = 1;
pub const HEADER_LEN: usize = 26;
const PAYLOAD_PREFIX_LEN: usize = 16;

fn leaf_hash(block: &[u8]) -> Result<Digest> {
    if block.len() > BLOCK_SIZE {
        return Err(Error::BlockTooLarge { len: block.len(), block_size: BLOCK_SIZE });
    }
    if block.len() == BLOCK_SIZE {
        return Ok(hash_parts(domain::MERKLE_LEAF, &[block]));
    }
    let pad = vec![0u8; BLOCK_SIZE - block.len()];
    Ok(hash_parts(domain::MERKLE_LEAF, &[block, &pad]))
}

fn node_hash(left: &Digest, right: &Digest) -> Digest {
    hash_parts(domain::MERKLE_NODE, &[&left.0, &right.0])
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MerkleTree {
    /// `levels[0]` are the leaves, the last level holds only the root.
    levels: Vec<Vec<Digest>>,
}

/// Sibling path for one leaf. The path shape follows from `(index, leaf_count)`,
/// so a proof cannot be replayed at a different position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MerkleProof {
    pub leaf_count: u64,
    pub siblings: Vec<Digest>,
}

impl MerkleTree {
    /// Blocks shorter than [`BLOCK_SIZE`] are zero padded.
    pub fn build<B: AsRef<[u8]>>(blocks: &[B]) -> Result<Self> {
        if blocks.is_empty() {
            return Err(Error::Empty("merkle tree needs at least one block"));
        }
        let leaves = blocks.iter().map(|b| leaf_hash(b.as_ref())).collect::<Result<Vec<_>>>()?;
        Ok(Self::from_leaves(leaves))
    }

    /// Chunk a byte image into blocks and build the tree.
    pub fn from_image(bytes: &[u8]) -> Result<Self> {
        if bytes.is_empty() {
            return Err(Error::Empty("image has no bytes"));
        }
        let blocks: Vec<&[u8]> = bytes.chunks(BLOCK_SIZE).collect();
        Self::build(&blocks)
    }

    fn from_leaves(leaves: Vec<Digest>) -> Self {
        let mut levels = vec![leaves];
        while levels.last().map_or(0, Vec::len) > 1 {
            let prev = levels.last().expect("non-empty");
            let next = prev
                .chunks(2)
                .map(|pair| match pair {
                    [l, r] => node_hash(l, r),
                    [single] => *single,
                    _ => unreachable!(),
                })
                .collect();
            levels.push(next);
        }
        MerkleTree { levels }
    }

    pub fn root(&self) -> Digest {
        self.levels.last().expect("at least one level")[0]
    }

    pub fn leaf_count(&self) -> u64 {
        self.levels[0].len() as u64
    }

    pub fn leaves(&self) -> &[Digest] {
        &self.levels[0]
    }

    pub fn proof(&self, index: u64) -> Option<MerkleProof> {
        if index >= self.leaf_count() {
            return None;
        }
        let mut idx = index as usize;
        let mut siblings = Vec::new();
        for level in &self.levels[..self.levels.len() - 1] {
            let width = level.len();
            if idx % 2 == 1 {
                siblings.push(level[idx - 1]);
            } else if idx + 1 < width {
                siblings.push(level[idx + 1]);
            }
            idx /= 2;
        }
        Some(MerkleProof { leaf_count: self.leaf_count(), siblings })
    }
}

pub fn merkle_build<B: AsRef<[u8]>>(blocks: &[B]) -> Result<MerkleTree> {
    MerkleTree::build(blocks)
}

/// Recompute the root from one block and its sibling path.
pub fn merkle_verify_block(root: &Digest, index: u64, block: &[u8], proof: &MerkleProof) -> bool {
    if index >= proof.leaf_count {
        return false;
    }
    let Ok(mut acc) = leaf_hash(block) else {
        return false;
    };
    let mut idx = index;
    let mut width = proof.leaf_count;
    let mut siblings = proof.siblings.iter();
    while width > 1 {
        if idx % 2 == 1 {
            let Some(left) = siblings.next() else { return false };
            acc = node_hash(left, &acc);
        } else if idx + 1 < width {
            let Some(right) = siblings.next() else { return false };
            acc = node_hash(&acc, right);
        }
        idx /= 2;
        width = width.div_ceil(2);
    }
    siblings.next().is_none() && acc == *root
}

/// Merkle root of a code image.
pub fn code_measurement(code_image: &[u8]) -> Result<Digest> {
    Ok(MerkleTree::from_image(code_image)?.root())
}

pub type Salt = [u8; 16];

/// Salted commitment to a dataset image root.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct DataCommitment {
    pub root: Digest,
    pub salt: Salt,
    pub commitment: Digest,
}

impl DataCommitment {
    pub fn new(root: Digest, salt: Salt) -> Self {
        DataCommitment { root, salt, commitment: commit(&root, &salt) }
    }

    pub fn is_consistent(&self) -> bool {
        commit(&self.root, &self.salt) == self.commitment
    }
}

pub fn commit(root: &Digest, salt: &Salt) -> Digest {
    hash_parts(domain::COMMITMENT, &[salt, &root.0])
}

/// JSON sidecar written next to an image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sidecar {
    pub root: Digest,
    #[serde(with = "salt_hex")]
    pub salt: Salt,
    pub commitment: Digest,
    pub block_count: u64,
    pub block_size: u32,
}

impl Sidecar {
    pub fn data_commitment(&self) -> Result<DataCommitment> {
        let c = DataCommitment::new(self.root, self.salt);
        if c.commitment != self.commitment {
            return Err(Error::Malformed("sidecar commitment does not match H(salt, root)".into()));
        }
        Ok(c)
    }
}

pub mod salt_hex {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(salt: &[u8; 16], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(salt))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<[u8; 16], D::Error> {
        let s = String::deserialize(d)?;
        let mut out = [0u8; 16];
        hex::decode_to_slice(&s, &mut out).map_err(serde::de::Error::custom)?;
        Ok(out)
    }
}

/// One training record: numeric columns (features then label) plus an
/// optional free-text column used only by sanitization.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingRow {
    pub values: Vec<f64>,
    pub text: String,
}

impl TrainingRow {
    pub fn new(values: Vec<f64>) -> Self {
        TrainingRow { values, text: String::new() }
    }

    pub fn with_text(values: Vec<f64>, text: impl Into<String>) -> Self {
        TrainingRow { values, text: text.into() }
    }

    pub fn features(&self) -> &[f64] {
        &self.values[..self.values.len() - 1]
    }

    pub fn label(&self) -> f64 {
        self.values[self.values.len() - 1]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ImageHeader {
    pub version: u16,
    pub block_size: u32,
    pub record_width: u32,
    pub text_width: u32,
    pub record_count: u64,
}

impl ImageHeader {
    fn row_bytes(&self) -> usize {
        self.record_width as usize * 8 + self.text_width as usize
    }

    fn to_bytes(self) -> [u8; HEADER_LEN] {
        let mut out = [0u8; HEADER_LEN];
        out[..4].copy_from_slice(IMAGE_MAGIC);
        out[4..6].copy_from_slice(&self.version.to_le_bytes());
        out[6..10].copy_from_slice(&self.block_size.to_le_bytes());
        out[10..14].copy_from_slice(&self.record_width.to_le_bytes());
        out[14..18].copy_from_slice(&self.text_width.to_le_bytes());
        out[18..26].copy_from_slice(&self.record_count.to_le_bytes());
        out
    }

    fn parse(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN || &bytes[..4] != IMAGE_MAGIC {
            return Err(Error::Malformed("not a VFLD image".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
        let h = ImageHeader {
            version: u16::from_le_bytes([bytes[4], bytes[5]]),
            block_size: u32_at(6),
            record_width: u32_at(10),
            text_width: u32_at(14),
            record_count: u64::from_le_bytes(bytes[18..26].try_into().expect("8 bytes")),
        };
        if h.version != IMAGE_VERSION {
            return Err(Error::Malformed(format!("unsupported image version {}", h.version)));
        }
        if h.block_size as usize != BLOCK_SIZE {
            return Err(Error::Malformed(format!("unsupported block size {}", h.block_size)));
        }
        if h.record_width == 0 || h.record_count == 0 {
            return Err(Error::Malformed("image declares no records".into()));
        }
        Ok(h)
    }

    fn payload_prefix(&self) -> [u8; PAYLOAD_PREFIX_LEN] {
        let mut out = [0u8; PAYLOAD_PREFIX_LEN];
        out[..8].copy_from_slice(&self.record_count.to_le_bytes());
        out[8..12].copy_from_slice(&self.record_width.to_le_bytes());
        out[12..16].copy_from_slice(&self.text_width.to_le_bytes());
        out
    }

    fn payload_len(&self) -> Option<usize> {
        let used = (self.record_count as usize)
            .checked_mul(self.row_bytes())?
            .checked_add(PAYLOAD_PREFIX_LEN)?;
        Some(used.div_ceil(BLOCK_SIZE) * BLOCK_SIZE)
    }

    fn block_count(&self) -> u64 {
        (self.payload_len().unwrap_or(0) / BLOCK_SIZE) as u64
    }
}

/// A packed, immutable dataset image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetImage {
    pub header: ImageHeader,
    payload: Arc<Vec<u8>>,
}

impl DatasetImage {
    pub fn payload(&self) -> &[u8] {
        &self.payload
    }

    pub fn block_count(&self) -> u64 {
        (self.payload.len() / BLOCK_SIZE) as u64
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.payload.len());
        out.extend_from_slice(&self.header.to_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    /// Parse an image. Only the layout is checked here; integrity is checked
    /// by [`mount_dataset`].
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let header = ImageHeader::parse(bytes)?;
        let payload = &bytes[HEADER_LEN..];
        if Some(payload.len()) != header.payload_len() {
            return Err(Error::Malformed("payload length does not match header".into()));
        }
        Ok(DatasetImage { header, payload: Arc::new(payload.to_vec()) })
    }

    pub fn tree(&self) -> MerkleTree {
        MerkleTree::from_image(&self.payload).expect("payload is never empty")
    }

    pub fn sidecar(&self, commitment: &DataCommitment) -> Sidecar {
        Sidecar {
            root: commitment.root,
            salt: commitment.salt,
            commitment: commitment.commitment,
            block_count: self.block_count(),
            block_size: BLOCK_SIZE as u32,
        }
    }

    /// Decode every row without Merkle checks. Test and tooling use only;
    /// exclaves read through a [`DatasetHandle`].
    pub fn decode_rows_unverified(&self) -> Vec<TrainingRow> {
        (0..self.header.record_count)
            .map(|i| {
                let start = PAYLOAD_PREFIX_LEN + i as usize * self.header.row_bytes();
                decode_row(&self.header, &self.payload[start..start + self.header.row_bytes()])
            })
            .collect()
    }

    /// Commitment of this image under `salt`.
    pub fn commitment(&self, salt: Salt) -> DataCommitment {
        DataCommitment::new(self.tree().root(), salt)
    }
}

fn decode_row(header: &ImageHeader, bytes: &[u8]) -> TrainingRow {
    let width = header.record_width as usize;
    let values = bytes[..width * 8]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let text_bytes = &bytes[width * 8..];
    let end = text_bytes.iter().position(|&b| b == 0).unwrap_or(text_bytes.len());
    TrainingRow { values, text: String::from_utf8_lossy(&text_bytes[..end]).into_owned() }
}

/// Pack rows into an image and commit to it with `salt`.
pub fn pack_dataset(rows: &[TrainingRow], salt: Salt) -> Result<(DatasetImage, DataCommitment)> {
    let first = rows.first().ok_or(Error::Empty("dataset has no records"))?;
    let record_width = first.values.len();
    if record_width == 0 {
        return Err(Error::Malformed("records need at least a label column".into()));
    }
    let mut text_width = 0usize;
    for (i, r) in rows.iter().enumerate() {
        if r.values.len() != record_width {
            return Err(Error::Malformed(format!(
                "record {i} has {} columns, expected {record_width}",
                r.values.len()
            )));
        }
        if r.text.as_bytes().contains(&0) {
            return Err(Error::Malformed(format!("record {i} text contains NUL")));
        }
        text_width = text_width.max(r.text.len());
    }
    let header = ImageHeader {
        version: IMAGE_VERSION,
        block_size: BLOCK_SIZE as u32,
        record_width: record_width as u32,
        text_width: text_width as u32,
        record_count: rows.len() as u64,
    };
    let payload_len = header.payload_len().ok_or(Error::Malformed("dataset too large".into()))?;
    let mut payload = Vec::with_capacity(payload_len);
    payload.extend_from_slice(&header.payload_prefix());
    for r in rows {
        for v in &r.values {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        payload.extend_from_slice(r.text.as_bytes());
        payload.resize(payload.len() + text_width - r.text.len(), 0);
    }
    payload.resize(payload_len, 0);

    let image = DatasetImage { header, payload: Arc::new(payload) };
    let commitment = image.commitment(salt);
    Ok((image, commitment))
}

enum Backing {
    Memory(Arc<Vec<u8>>),
    File { file: File, payload_offset: u64 },
}

impl Backing {
    fn read_block(&mut self, index: u64) -> Result<Vec<u8>> {
        let start = index as usize * BLOCK_SIZE;
        match self {
            Backing::Memory(payload) => payload
                .get(start..start + BLOCK_SIZE)
                .map(<[u8]>::to_vec)
                .ok_or(Error::IntegrityViolation { block: index }),
            Backing::File { file, payload_offset } => {
                let mut buf = vec![0u8; BLOCK_SIZE];
                file.seek(SeekFrom::Start(*payload_offset + start as u64))?;
                file.read_exact(&mut buf).map_err(|_| Error::IntegrityViolation { block: index })?;
                Ok(buf)
            }
        }
    }
}

/// A mounted image. Every block handed out has been checked against the
/// root on that read.
pub struct DatasetHandle {
    backing: Backing,
    header: ImageHeader,
    tree: MerkleTree,
    commitment: DataCommitment,
    cursor: u64,
}

impl std::fmt::Debug for DatasetHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DatasetHandle")
            .field("header", &self.header)
            .field("commitment", &self.commitment)
            .field("cursor", &self.cursor)
            .finish()
    }
}

fn mount_backing(mut backing: Backing, header: ImageHeader, expected: &DataCommitment) -> Result<DatasetHandle> {
    let block_count = header.block_count();
    let blocks = (0..block_count).map(|i| backing.read_block(i)).collect::<Result<Vec<_>>>()?;
    let tree = MerkleTree::build(&blocks)?;
    let found = commit(&tree.root(), &expected.salt);
    if found != expected.commitment {
        return Err(Error::CommitmentMismatch { expected: expected.commitment, found });
    }
    if blocks[0][..PAYLOAD_PREFIX_LEN] != header.payload_prefix() {
        return Err(Error::Malformed("image header disagrees with committed payload".into()));
    }
    Ok(DatasetHandle { backing, header, tree, commitment: *expected, cursor: 0 })
}

/// Mount an in-memory image, checking it against `expected`.
pub fn mount_dataset(image: &DatasetImage, expected: &DataCommitment) -> Result<DatasetHandle> {
    mount_backing(Backing::Memory(Arc::clone(&image.payload)), image.header, expected)
}

/// Mount an image file. Blocks are re-read from disk on every access.
pub fn mount_dataset_file(path: &Path, expected: &DataCommitment) -> Result<DatasetHandle> {
    let mut file = File::open(path)?;
    let mut head = [0u8; HEADER_LEN];
    file.read_exact(&mut head).map_err(|_| Error::Malformed("truncated image header".into()))?;
    let header = ImageHeader::parse(&head)?;
    let expected_len = HEADER_LEN as u64 + header.block_count() * BLOCK_SIZE as u64;
    if file.metadata()?.len() != expected_len {
        return Err(Error::Malformed("image file length does not match header".into()));
    }
    mount_backing(Backing::File { file, payload_offset: HEADER_LEN as u64 }, header, expected)
}

impl DatasetHandle {
    pub fn record_count(&self) -> u64 {
        self.header.record_count
    }

    pub fn record_width(&self) -> usize {
        self.header.record_width as usize
    }

    pub fn commitment(&self) -> &DataCommitment {
        &self.commitment
    }

    fn verified_block(&mut self, index: u64) -> Result<Vec<u8>> {
        let block = self.backing.read_block(index)?;
        let proof = self.tree.proof(index).ok_or(Error::IntegrityViolation { block: index })?;
        if !merkle_verify_block(&self.tree.root(), index, &block, &proof) {
            return Err(Error::IntegrityViolation { block: index });
        }
        Ok(block)
    }

    pub fn read_record(&mut self, index: u64) -> Result<TrainingRow> {
        if index >= self.header.record_count {
            return Err(Error::OutOfRange { index, count: self.header.record_count });
        }
        let row_bytes = self.header.row_bytes();
        let start = PAYLOAD_PREFIX_LEN + index as usize * row_bytes;
        let end = start + row_bytes;
        let first = (start / BLOCK_SIZE) as u64;
        let last = ((end - 1) / BLOCK_SIZE) as u64;
        let mut buf = Vec::with_capacity((last - first + 1) as usize * BLOCK_SIZE);
        for b in first..=last {
            buf.extend_from_slice(&self.verified_block(b)?);
        }
        let off = start - first as usize * BLOCK_SIZE;
        Ok(decode_row(&self.header, &buf[off..off + row_bytes]))
    }

    /// Read the record under the cursor and advance it.
    pub fn next_record(&mut self) -> Option<Result<TrainingRow>> {
        if self.cursor >= self.header.record_count {
            return None;
        }
        let r = self.read_record(self.cursor);
        self.cursor += 1;
        Some(r)
    }

    pub fn rewind(&mut self) {
        self.cursor = 0;
    }

    pub fn read_all(&mut self) -> Result<Vec<TrainingRow>> {
        (0..self.header.record_count).map(|i| self.read_record(i)).collect()
    }
}

pub fn read_record(handle: &mut DatasetHandle, index: u64) -> Result<TrainingRow> {
    handle.read_record(index)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::hash_parts;
    use std::io::Write;

    fn block(fill: u8) -> Vec<u8> {
        vec![fill; BLOCK_SIZE]
    }

    fn leaf(b: &[u8]) -> Digest {
        hash_parts(domain::MERKLE_LEAF, &[b])
    }

    fn rows(n: usize, width: usize) -> Vec<TrainingRow> {
        (0..n)
            .map(|i| {
                let vals = (0..width).map(|j| (i * width + j) as f64 * 0.5 - 3.0).collect();
                TrainingRow::with_text(vals, format!("row-{i}"))
            })
            .collect()
    }

    #[test]
    fn root_shapes() {
        let (b0, b1, b2) = (block(1), block(2), block(3));
        assert_eq!(merkle_build(&[&b0]).unwrap().root(), leaf(&b0));
        assert_eq!(
            merkle_build(&[&b0, &b1]).unwrap().root(),
            hash_parts(domain::MERKLE_NODE, &[&leaf(&b0).0, &leaf(&b1).0])
        );
        let l01 = hash_parts(domain::MERKLE_NODE, &[&leaf(&b0).0, &leaf(&b1).0]);
        assert_eq!(
            merkle_build(&[&b0, &b1, &b2]).unwrap().root(),
            hash_parts(domain::MERKLE_NODE, &[&l01.0, &leaf(&b2).0])
        );
        assert!(matches!(merkle_build::<Vec<u8>>(&[]), Err(Error::Empty(_))));
    }

    #[test]
    fn short_blocks_are_zero_padded() {
        let short = vec![9u8; 100];
        let mut padded = short.clone();
        padded.resize(BLOCK_SIZE, 0);
        assert_eq!(merkle_build(&[&short]).unwrap().root(), merkle_build(&[&padded]).unwrap().root());
        assert!(matches!(
            merkle_build(&[vec![0u8; BLOCK_SIZE + 1]]),
            Err(Error::BlockTooLarge { .. })
        ));
    }

    #[test]
    fn proofs_verify_and_bind_index() {
        let blocks: Vec<Vec<u8>> = (0..4u8).map(block).collect();
        let tree = merkle_build(&blocks).unwrap();
        let root = tree.root();
        for (i, b) in blocks.iter().enumerate() {
            let proof = tree.proof(i as u64).unwrap();
            assert!(merkle_verify_block(&root, i as u64, b, &proof));
            // Brute force every (block, index) pair with this proof.
            for (j, other) in blocks.iter().enumerate() {
                for k in 0..6u64 {
                    let expect = j == i && k == i as u64;
                    assert_eq!(merkle_verify_block(&root, k, other, &proof), expect, "i={i} j={j} k={k}");
                }
            }
        }
        assert!(tree.proof(4).is_none());
    }

    #[test]
    fn odd_trees_reject_promoted_position_games() {
        let blocks: Vec<Vec<u8>> = (0..5u8).map(block).collect();
        let tree = merkle_build(&blocks).unwrap();
        let proof = tree.proof(4).unwrap();
        assert!(merkle_verify_block(&tree.root(), 4, &blocks[4], &proof));
        assert!(!merkle_verify_block(&tree.root(), 5, &blocks[4], &proof));
        let mut long = proof.clone();
        long.siblings.push(Digest::ZERO);
        assert!(!merkle_verify_block(&tree.root(), 4, &blocks[4], &long));
    }

    #[test]
    fn flipped_bit_fails() {
        let blocks: Vec<Vec<u8>> = (0..3u8).map(block).collect();
        let tree = merkle_build(&blocks).unwrap();
        let mut b = blocks[1].clone();
        b[77] ^= 0x10;
        assert!(!merkle_verify_block(&tree.root(), 1, &b, &tree.proof(1).unwrap()));
    }

    #[test]
    fn pack_round_trip_and_salt() {
        let rs = rows(300, 5);
        let (img, c1) = pack_dataset(&rs, [1u8; 16]).unwrap();
        assert_eq!(img.payload().len() as u64, img.block_count() * BLOCK_SIZE as u64);
        assert!(c1.is_consistent());
        let mut h = mount_dataset(&img, &c1).unwrap();
        assert_eq!(h.read_all().unwrap(), rs);

        let (_, c2) = pack_dataset(&rs, [2u8; 16]).unwrap();
        assert_eq!(c1.root, c2.root);
        assert_ne!(c1.commitment, c2.commitment);

        let mut changed = rs.clone();
        changed[123].values[2] += 1e-9;
        let (_, c3) = pack_dataset(&changed, [1u8; 16]).unwrap();
        assert_ne!(c1.root, c3.root);
    }

    #[test]
    fn pack_rejects_bad_input() {
        assert!(matches!(pack_dataset(&[], [0; 16]), Err(Error::Empty(_))));
        let ragged = vec![TrainingRow::new(vec![1.0, 2.0]), TrainingRow::new(vec![1.0])];
        assert!(pack_dataset(&ragged, [0; 16]).is_err());
    }

    #[test]
    fn image_bytes_round_trip() {
        let (img, c) = pack_dataset(&rows(10, 3), [5u8; 16]).unwrap();
        let back = DatasetImage::from_bytes(&img.to_bytes()).unwrap();
        assert_eq!(back, img);
        assert_eq!(back.commitment(c.salt), c);
        let sc = img.sidecar(&c);
        let json = serde_json::to_string(&sc).unwrap();
        let sc2: Sidecar = serde_json::from_str(&json).unwrap();
        assert_eq!(sc2.data_commitment().unwrap(), c);
        for key in ["root", "salt", "commitment", "block_count", "block_size"] {
            assert!(json.contains(&format!("\"{key}\"")));
        }
    }

    #[test]
    fn mount_detects_tamper_and_stale_commitment() {
        let rs = rows(50, 4);
        let (img, c) = pack_dataset(&rs, [3u8; 16]).unwrap();
        let mut bytes = img.to_bytes();
        bytes[HEADER_LEN + 40] ^= 1;
        let bad = DatasetImage::from_bytes(&bytes).unwrap();
        assert!(matches!(mount_dataset(&bad, &c), Err(Error::CommitmentMismatch { .. })));

        let (_, other) = pack_dataset(&rows(51, 4), [3u8; 16]).unwrap();
        assert!(matches!(mount_dataset(&img, &other), Err(Error::CommitmentMismatch { .. })));
    }

    #[test]
    fn header_must_match_payload_prefix() {
        let (img, c) = pack_dataset(&rows(20, 2), [3u8; 16]).unwrap();
        let mut bytes = img.to_bytes();
        // Lie about the record count in the unauthenticated header.
        bytes[18] = 10;
        let lied = DatasetImage::from_bytes(&bytes).unwrap();
        assert!(matches!(mount_dataset(&lied, &c), Err(Error::Malformed(_))));
    }

    #[test]
    fn read_out_of_range() {
        let (img, c) = pack_dataset(&rows(5, 2), [0u8; 16]).unwrap();
        let mut h = mount_dataset(&img, &c).unwrap();
        assert!(matches!(h.read_record(5), Err(Error::OutOfRange { index: 5, count: 5 })));
        let mut n = 0;
        while let Some(r) = h.next_record() {
            r.unwrap();
            n += 1;
        }
        assert_eq!(n, 5);
    }

    #[test]
    fn file_overwrite_mid_session_is_detected() {
        let rs = rows(400, 6);
        let (img, c) = pack_dataset(&rs, [8u8; 16]).unwrap();
        let mut tmp = tempfile::NamedTempFile::new().unwrap();
        tmp.write_all(&img.to_bytes()).unwrap();
        tmp.flush().unwrap();

        let mut h = mount_dataset_file(tmp.path(), &c).unwrap();
        assert_eq!(h.read_record(0).unwrap(), rs[0]);
        assert_eq!(h.read_record(399).unwrap(), rs[399]);

        // Overwrite part of block 1 behind the handle's back.
        let mut f = std::fs::OpenOptions::new().write(true).open(tmp.path()).unwrap();
        f.seek(SeekFrom::Start((HEADER_LEN + BLOCK_SIZE + 10) as u64)).unwrap();
        f.write_all(&[0xAB; 8]).unwrap();
        f.flush().unwrap();

        let row_bytes = 6 * 8 + "row-399".len();
        let in_block1 = ((BLOCK_SIZE + 10 - PAYLOAD_PREFIX_LEN) / row_bytes) as u64;
        assert!(matches!(h.read_record(in_block1), Err(Error::IntegrityViolation { block: 1 })));
        // Untouched blocks still read fine.
        assert_eq!(h.read_record(0).unwrap(), rs[0]);
    }

    #[test]
    fn code_measurement_is_unsalted_root() {
        let code = b"exclave code v1".repeat(1000);
        let m = code_measurement(&code).unwrap();
        assert_eq!(m, MerkleTree::from_image(&code).unwrap().root());
        let mut tampered = code.clone();
        tampered[5000] ^= 1;
        assert_ne!(m, code_measurement(&tampered).unwrap());
    }
}
