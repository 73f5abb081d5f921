//! SHA-256 digests and Ed25519 signatures.
//!
//! Every multi-part hash in the crate goes through [`hash_parts`] with a
//! one-byte domain tag, so two different part sequences can never collide by
//! concatenation. Tags in use are listed in [`domain`].

use std::fmt;
use std::str::FromStr;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use ed25519_dalek::{Signer as _, SigningKey, VerifyingKey};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest as _, Sha256};

use crate::error::Error;

/// Identifier recorded in signed envelopes.
pub const SIGNATURE_SCHEME: &str = "ed25519";

/// Single-byte domain separation tags.
pub mod domain {
    pub const MERKLE_LEAF: u8 = 0x00;
    pub const MERKLE_NODE: u8 = 0x01;
    pub const COMMITMENT: u8 = 0x02;
    pub const PCR_EXTEND: u8 = 0x03;
    pub const REPORT: u8 = 0x04;
    pub const ENDORSEMENT: u8 = 0x05;
    pub const ISSUER: u8 = 0x06;
    pub const KEY_DERIVE: u8 = 0x07;
    pub const SEED_DERIVE: u8 = 0x08;
}

/// A SHA-256 output.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Digest(pub [u8; 32]);

impl Digest {
    pub const ZERO: Digest = Digest([0u8; 32]);

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Result<Self, Error> {
        let mut out = [0u8; 32];
        if s.len() != 64 || s.bytes().any(|b| b.is_ascii_uppercase()) {
            return Err(Error::Malformed(format!("digest must be 64 lowercase hex chars: {s:?}")));
        }
        hex::decode_to_slice(s, &mut out).map_err(|e| Error::Malformed(format!("digest hex: {e}")))?;
        Ok(Digest(out))
    }

    /// First 8 hex chars, for human-readable identifiers.
    pub fn short(&self) -> String {
        hex::encode(&self.0[..4])
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", self.to_hex())
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl FromStr for Digest {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Digest::from_hex(s)
    }
}

impl Serialize for Digest {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for Digest {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Digest::from_hex(&s).map_err(serde::de::Error::custom)
    }
}

pub fn hash_bytes(data: &[u8]) -> Digest {
    Digest(Sha256::digest(data).into())
}

/// `H(tag ‖ part_0 ‖ part_1 ‖ ...)`. Callers must only use this with
/// fixed-width parts, or with at most one variable-width part in last
/// position.
pub fn hash_parts(tag: u8, parts: &[&[u8]]) -> Digest {
    let mut h = Sha256::new();
    h.update([tag]);
    for p in parts {
        h.update(p);
    }
    Digest(h.finalize().into())
}

/// Derive a 32-byte seed for a named purpose from a master seed.
pub fn derive_seed(master: &[u8; 32], purpose: &str) -> [u8; 32] {
    hash_parts(domain::KEY_DERIVE, &[master, purpose.as_bytes()]).0
}

/// Derive a 64-bit RNG seed from a base seed and a context string.
pub fn derive_u64(base: u64, context: &str) -> u64 {
    let d = hash_parts(domain::SEED_DERIVE, &[&base.to_le_bytes(), context.as_bytes()]);
    u64::from_le_bytes(d.0[..8].try_into().expect("8 bytes"))
}

/// Public half of a signing key.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct VerifyKey(pub [u8; 32]);

impl VerifyKey {
    pub fn to_base64(&self) -> String {
        B64.encode(self.0)
    }

    pub fn from_base64(s: &str) -> Result<Self, Error> {
        let raw = B64.decode(s).map_err(|e| Error::Malformed(format!("verify key base64: {e}")))?;
        let arr: [u8; 32] = raw
            .try_into()
            .map_err(|_| Error::Malformed("verify key must be 32 bytes".into()))?;
        Ok(VerifyKey(arr))
    }
}

impl fmt::Debug for VerifyKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "VerifyKey({})", self.to_base64())
    }
}

impl Serialize for VerifyKey {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_base64())
    }
}

impl<'de> Deserialize<'de> for VerifyKey {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        VerifyKey::from_base64(&s).map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Signature(pub [u8; 64]);

impl Signature {
    pub fn to_base64(&self) -> String {
        B64.encode(self.0)
    }

    pub fn from_base64(s: &str) -> Result<Self, Error> {
        let raw = B64.decode(s).map_err(|e| Error::Malformed(format!("signature base64: {e}")))?;
        let arr: [u8; 64] = raw
            .try_into()
            .map_err(|_| Error::Malformed("signature must be 64 bytes".into()))?;
        Ok(Signature(arr))
    }
}

impl fmt::Debug for Signature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Signature({})", self.to_base64())
    }
}

impl Serialize for Signature {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_base64())
    }
}

impl<'de> Deserialize<'de> for Signature {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Signature::from_base64(&s).map_err(serde::de::Error::custom)
    }
}

/// An Ed25519 key pair. Deliberately not `Serialize`; `Debug` only shows the
/// public half.
#[derive(Clone)]
pub struct KeyPair {
    signing: SigningKey,
}

impl KeyPair {
    pub fn from_seed(seed: &[u8; 32]) -> Self {
        KeyPair { signing: SigningKey::from_bytes(seed) }
    }

    pub fn verify_key(&self) -> VerifyKey {
        VerifyKey(self.signing.verifying_key().to_bytes())
    }

    pub fn sign(&self, msg: &[u8]) -> Signature {
        Signature(self.signing.sign(msg).to_bytes())
    }
}

impl fmt::Debug for KeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KeyPair").field("verify_key", &self.verify_key()).finish_non_exhaustive()
    }
}

pub fn keygen(seed: &[u8; 32]) -> KeyPair {
    KeyPair::from_seed(seed)
}

pub fn sign(key: &KeyPair, msg: &[u8]) -> Signature {
    key.sign(msg)
}

/// Strict Ed25519 verification. Malformed keys verify nothing.
pub fn verify(key: &VerifyKey, msg: &[u8], sig: &Signature) -> bool {
    let Ok(vk) = VerifyingKey::from_bytes(&key.0) else {
        return false;
    };
    let sig = ed25519_dalek::Signature::from_bytes(&sig.0);
    vk.verify_strict(msg, &sig).is_ok()
}
