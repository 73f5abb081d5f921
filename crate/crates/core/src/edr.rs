//! Exclave data records: construction, canonical encoding, issuer
//! endorsement and the append-only record store.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::attestation::{pcr_extend, verify_report, AttestationReport};
use crate::crypto::{self, domain, hash_bytes, Digest, KeyPair, Signature, VerifyKey};
use crate::error::{Error, Result};

/// Serialize as JSON with keys sorted at every level and no whitespace.
///
/// Relies on `serde_json::Map` being ordered, which holds as long as the
/// `preserve_order` feature is off.
pub fn canonical_json<T: Serialize>(value: &T) -> Vec<u8> {
    let v = serde_json::to_value(value).expect("record types always serialize");
    serde_json::to_vec(&v).expect("values always serialize")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Sanitize,
    Train,
    Dp,
    Aggregate,
    ModelUpdate,
}

impl TaskKind {
    pub const ALL: [TaskKind; 5] =
        [TaskKind::Sanitize, TaskKind::Train, TaskKind::Dp, TaskKind::Aggregate, TaskKind::ModelUpdate];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Sanitize => "sanitize",
            TaskKind::Train => "train",
            TaskKind::Dp => "dp",
            TaskKind::Aggregate => "aggregate",
            TaskKind::ModelUpdate => "model_update",
        }
    }

    /// Data-provider side tasks; the rest run at the model provider.
    pub fn is_provider_task(self) -> bool {
        matches!(self, TaskKind::Sanitize | TaskKind::Train | TaskKind::Dp)
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for TaskKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        TaskKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Malformed(format!("unknown task kind {s:?}")))
    }
}

/// Round number used for the one-off sanitization stage.
pub const PRE_TRAINING_ROUND: i64 = -1;

/// Standard input/output labels.
pub mod labels {
    pub const GLOBAL_MODEL: &str = "model:global";
    pub const AGG_DIFF: &str = "model:agg_diff";
    pub const DATASET_COMMITMENT: &str = "dataset:commitment";
    pub const DIFF_PREFIX: &str = "model:diff:";
    pub const MODEL_PREFIX: &str = "model:";

    pub fn diff(provider: &str) -> String {
        format!("{DIFF_PREFIX}{provider}")
    }

    pub fn params(kind: super::TaskKind) -> String {
        format!("params:{}", kind.as_str())
    }

    /// The provider named in a `model:diff:<provider>` label.
    pub fn diff_provider(label: &str) -> Option<&str> {
        label.strip_prefix(DIFF_PREFIX).filter(|p| !p.is_empty())
    }

    pub fn is_valid(label: &str) -> bool {
        match label.split_once(':') {
            Some((role, prop)) => !role.is_empty() && !prop.is_empty(),
            None => false,
        }
    }
}

/// One attested data transformation: `(inputs, code, outputs)` plus the job
/// metadata needed to place it in the dataflow graph.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Edr {
    pub exclave_id: String,
    pub participant_id: String,
    pub task_kind: TaskKind,
    pub round: i64,
    pub inputs: BTreeMap<String, Digest>,
    pub code: Digest,
    pub outputs: BTreeMap<String, Digest>,
}

impl Edr {
    pub fn validate(&self) -> Result<()> {
        if self.inputs.is_empty() || self.outputs.is_empty() {
            return Err(Error::Malformed("EDR input and output maps must be non-empty".into()));
        }
        if let Some(bad) = self.inputs.keys().chain(self.outputs.keys()).find(|l| !labels::is_valid(l)) {
            return Err(Error::Malformed(format!("bad EDR label {bad:?}")));
        }
        if self.round < PRE_TRAINING_ROUND {
            return Err(Error::Malformed(format!("bad round {}", self.round)));
        }
        Ok(())
    }
}

pub fn edr_canonicalize(edr: &Edr) -> Vec<u8> {
    canonical_json(edr)
}

pub fn edr_digest(edr: &Edr) -> Digest {
    hash_bytes(&edr_canonicalize(edr))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EndorsedEdr {
    pub edr: Edr,
    pub report: AttestationReport,
    pub issuer_id: String,
    pub issuer_sig: Signature,
}

impl EndorsedEdr {
    pub fn digest(&self) -> Digest {
        edr_digest(&self.edr)
    }

    pub fn to_json_line(&self) -> String {
        String::from_utf8(canonical_json(self)).expect("JSON is UTF-8")
    }
}

fn issuer_message(digest: &Digest) -> [u8; 33] {
    let mut m = [0u8; 33];
    m[0] = domain::ISSUER;
    m[1..].copy_from_slice(&digest.0);
    m
}

pub fn edr_endorse(edr: Edr, report: AttestationReport, issuer: &KeyPair, issuer_id: &str) -> Result<EndorsedEdr> {
    let digest = edr_digest(&edr);
    if report.edr_digest != digest {
        return Err(Error::DigestMismatch);
    }
    Ok(EndorsedEdr {
        edr,
        report,
        issuer_id: issuer_id.to_string(),
        issuer_sig: issuer.sign(&issuer_message(&digest)),
    })
}

/// Why a stored record failed verification.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    MalformedRecord,
    InvalidAttestation,
    DigestMismatch,
    CodeMeasurementMismatch,
    UnknownIssuer,
    InvalidIssuerSignature,
    IssuerMismatch,
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            RejectReason::MalformedRecord => "malformed record",
            RejectReason::InvalidAttestation => "attestation report does not verify",
            RejectReason::DigestMismatch => "report does not cover this EDR",
            RejectReason::CodeMeasurementMismatch => "EDR code differs from attested PCR11",
            RejectReason::UnknownIssuer => "issuer is not registered",
            RejectReason::InvalidIssuerSignature => "issuer signature does not verify",
            RejectReason::IssuerMismatch => "issuer is not the participant that ran the task",
        };
        f.write_str(s)
    }
}

pub type IssuerRegistry = BTreeMap<String, VerifyKey>;

pub fn edr_check(e: &EndorsedEdr, platform_root: &VerifyKey, issuers: &IssuerRegistry) -> Result<(), RejectReason> {
    if e.edr.validate().is_err() {
        return Err(RejectReason::MalformedRecord);
    }
    if !verify_report(&e.report, platform_root) {
        return Err(RejectReason::InvalidAttestation);
    }
    let digest = edr_digest(&e.edr);
    if e.report.edr_digest != digest {
        return Err(RejectReason::DigestMismatch);
    }
    if e.report.pcr11 != pcr_extend(&Digest::ZERO, &e.edr.code) {
        return Err(RejectReason::CodeMeasurementMismatch);
    }
    let key = issuers.get(&e.issuer_id).ok_or(RejectReason::UnknownIssuer)?;
    if !crypto::verify(key, &issuer_message(&digest), &e.issuer_sig) {
        return Err(RejectReason::InvalidIssuerSignature);
    }
    if e.issuer_id != e.edr.participant_id {
        return Err(RejectReason::IssuerMismatch);
    }
    Ok(())
}

pub fn edr_verify(e: &EndorsedEdr, platform_root: &VerifyKey, issuers: &IssuerRegistry) -> bool {
    edr_check(e, platform_root, issuers).is_ok()
}

struct StoreInner {
    records: Vec<EndorsedEdr>,
    sink: Option<BufWriter<File>>,
}

/// Append-only record store, optionally mirrored to an `edrs.ndjson` file.
pub struct EdrStore {
    inner: Mutex<StoreInner>,
}

impl Default for EdrStore {
    fn default() -> Self {
        Self::in_memory()
    }
}

impl EdrStore {
    pub fn in_memory() -> Self {
        EdrStore { inner: Mutex::new(StoreInner { records: Vec::new(), sink: None }) }
    }

    /// Create (truncating) a file-backed store.
    pub fn create(path: &Path) -> Result<Self> {
        let f = OpenOptions::new().create(true).write(true).truncate(true).open(path)?;
        Ok(EdrStore { inner: Mutex::new(StoreInner { records: Vec::new(), sink: Some(BufWriter::new(f)) }) })
    }

    /// Returns the zero-based sequence number of the record.
    pub fn append(&self, e: EndorsedEdr) -> Result<u64> {
        let mut inner = self.inner.lock().expect("store lock poisoned");
        if let Some(sink) = inner.sink.as_mut() {
            sink.write_all(e.to_json_line().as_bytes())?;
            sink.write_all(b"\n")?;
        }
        inner.records.push(e);
        Ok(inner.records.len() as u64 - 1)
    }

    pub fn snapshot(&self) -> Vec<EndorsedEdr> {
        self.inner.lock().expect("store lock poisoned").records.clone()
    }

    pub fn len(&self) -> usize {
        self.inner.lock().expect("store lock poisoned").records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn flush(&self) -> Result<()> {
        if let Some(sink) = self.inner.lock().expect("store lock poisoned").sink.as_mut() {
            sink.flush()?;
        }
        Ok(())
    }
}

pub fn store_append(store: &EdrStore, e: EndorsedEdr) -> Result<u64> {
    store.append(e)
}

pub fn store_snapshot(store: &EdrStore) -> Vec<EndorsedEdr> {
    store.snapshot()
}

/// Records read from an `edrs.ndjson` file. Lines that do not parse are
/// counted rather than failing the whole load.
#[derive(Debug, Clone, Default)]
pub struct LoadedStore {
    pub records: Vec<EndorsedEdr>,
    pub malformed_lines: usize,
}

pub fn parse_ndjson(text: &str) -> LoadedStore {
    let mut out = LoadedStore::default();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        match serde_json::from_str::<EndorsedEdr>(line) {
            Ok(e) => out.records.push(e),
            Err(_) => out.malformed_lines += 1,
        }
    }
    out
}

pub fn read_ndjson(path: &Path) -> Result<LoadedStore> {
    let mut out = LoadedStore::default();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<EndorsedEdr>(&line) {
            Ok(e) => out.records.push(e),
            Err(_) => out.malformed_lines += 1,
        }
    }
    Ok(out)
}

pub fn write_ndjson(path: &Path, records: &[EndorsedEdr]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        w.write_all(r.to_json_line().as_bytes())?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}
