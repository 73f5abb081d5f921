//! Simulated exclaves. An [`Exclave`] owns its secure processor, runs one
//! kind of task, hashes every payload crossing its request/response boundary
//! and emits an endorsed EDR per successful task.

use std::collections::BTreeMap;
use std::path::PathBuf;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::attestation::{Endorsement, SecureProcessor};
use crate::crypto::{derive_seed, derive_u64, hash_bytes, Digest, KeyPair, VerifyKey};
use crate::edr::{canonical_json, edr_digest, edr_endorse, labels, Edr, EndorsedEdr, TaskKind};
use crate::error::{Error, Result};
use crate::storage::{self, code_measurement, mount_dataset, mount_dataset_file, DataCommitment, DatasetHandle, DatasetImage, Salt};
use crate::tasks::{self, DpParams, Hyperparams};
use crate::ModelVector;

/// Stand-in for the hardware platform: holds the root key that endorses every
/// secure processor it launches.
pub struct Platform {
    root: KeyPair,
    seed: [u8; 32],
}

impl Platform {
    pub fn new(seed: [u8; 32]) -> Self {
        Platform { root: KeyPair::from_seed(&derive_seed(&seed, "platform-root")), seed }
    }

    pub fn root_pub(&self) -> VerifyKey {
        self.root.verify_key()
    }

    pub(crate) fn new_processor(&self, exclave_id: &str) -> (SecureProcessor, Endorsement) {
        SecureProcessor::create(&self.root, &derive_seed(&self.seed, &format!("attestation/{exclave_id}")))
    }
}

/// Deterministic reference code image for a task kind. Its Merkle root is
/// what job allowlists contain.
pub fn reference_code_image(kind: TaskKind) -> Vec<u8> {
    let unit = format!("vfl-exclave task={} abi=1\n", kind.as_str());
    unit.as_bytes().iter().copied().cycle().take(3 * storage::BLOCK_SIZE + 517).collect()
}

pub fn reference_code_measurement(kind: TaskKind) -> Digest {
    code_measurement(&reference_code_image(kind)).expect("reference image is non-empty")
}

#[derive(Debug, Clone)]
pub struct ExclaveConfig {
    pub exclave_id: String,
    pub participant_id: String,
    pub task_kind: TaskKind,
    pub code_image: Vec<u8>,
    pub issuer: KeyPair,
}

/// Task parameters carried in a request and hashed into `params:<kind>`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskParams {
    None,
    Train(Hyperparams),
    Dp(DpParams),
    Sanitize(SanitizeParams),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SanitizeParams {
    pub denylist: Vec<String>,
    #[serde(with = "storage::salt_hex")]
    pub output_salt: Salt,
}

impl TaskParams {
    pub fn digest(&self) -> Digest {
        hash_bytes(&canonical_json(self))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommitmentJson {
    pub root: Digest,
    #[serde(with = "storage::salt_hex")]
    pub salt: Salt,
    pub commitment: Digest,
}

impl From<DataCommitment> for CommitmentJson {
    fn from(c: DataCommitment) -> Self {
        CommitmentJson { root: c.root, salt: c.salt, commitment: c.commitment }
    }
}

impl From<CommitmentJson> for DataCommitment {
    fn from(c: CommitmentJson) -> Self {
        DataCommitment { root: c.root, salt: c.salt, commitment: c.commitment }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSource {
    Image(DatasetImage),
    File(PathBuf),
}

impl Serialize for DatasetSource {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        #[derive(Serialize)]
        #[serde(rename_all = "snake_case")]
        enum Repr<'a> {
            Image(String),
            File(&'a PathBuf),
        }
        match self {
            DatasetSource::Image(img) => Repr::Image(B64.encode(img.to_bytes())).serialize(s),
            DatasetSource::File(p) => Repr::File(p).serialize(s),
        }
    }
}

impl<'de> Deserialize<'de> for DatasetSource {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(rename_all = "snake_case")]
        enum Repr {
            Image(String),
            File(PathBuf),
        }
        match Repr::deserialize(d)? {
            Repr::Image(b) => {
                let bytes = B64.decode(b).map_err(serde::de::Error::custom)?;
                DatasetImage::from_bytes(&bytes).map(DatasetSource::Image).map_err(serde::de::Error::custom)
            }
            Repr::File(p) => Ok(DatasetSource::File(p)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRef {
    pub source: DatasetSource,
    #[serde(with = "commitment_json")]
    pub expected: DataCommitment,
}

mod commitment_json {
    use super::*;

    pub fn serialize<S: Serializer>(c: &DataCommitment, s: S) -> std::result::Result<S::Ok, S::Error> {
        CommitmentJson::from(*c).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<DataCommitment, D::Error> {
        CommitmentJson::deserialize(d).map(Into::into)
    }
}

mod opt_commitment_json {
    use super::*;

    pub fn serialize<S: Serializer>(c: &Option<DataCommitment>, s: S) -> std::result::Result<S::Ok, S::Error> {
        c.map(CommitmentJson::from).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Option<DataCommitment>, D::Error> {
        Ok(Option::<CommitmentJson>::deserialize(d)?.map(Into::into))
    }
}

mod payloads_b64 {
    use super::*;

    pub fn serialize<S: Serializer>(m: &BTreeMap<String, Vec<u8>>, s: S) -> std::result::Result<S::Ok, S::Error> {
        m.iter().map(|(k, v)| (k, B64.encode(v))).collect::<BTreeMap<_, _>>().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<BTreeMap<String, Vec<u8>>, D::Error> {
        BTreeMap::<String, String>::deserialize(d)?
            .into_iter()
            .map(|(k, v)| B64.decode(v).map(|b| (k, b)).map_err(serde::de::Error::custom))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRequest {
    pub task_kind: TaskKind,
    pub round: i64,
    #[serde(with = "payloads_b64")]
    pub payloads: BTreeMap<String, Vec<u8>>,
    pub dataset: Option<DatasetRef>,
    pub params: TaskParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskResponse {
    #[serde(with = "payloads_b64")]
    pub payloads: BTreeMap<String, Vec<u8>>,
    /// Set by sanitization: the commitment of the produced image.
    #[serde(with = "opt_commitment_json")]
    pub dataset_commitment: Option<DataCommitment>,
    pub endorsed_edr: EndorsedEdr,
}

pub struct Exclave {
    exclave_id: String,
    participant_id: String,
    task_kind: TaskKind,
    code: Digest,
    issuer: KeyPair,
    processor: SecureProcessor,
}

impl std::fmt::Debug for Exclave {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Exclave")
            .field("exclave_id", &self.exclave_id)
            .field("task_kind", &self.task_kind)
            .field("code", &self.code)
            .finish_non_exhaustive()
    }
}

pub fn exclave_launch(config: ExclaveConfig, platform: &Platform) -> Result<Exclave> {
    let code = code_measurement(&config.code_image)?;
    let (mut processor, _) = platform.new_processor(&config.exclave_id);
    processor.measure_code(&code)?;
    Ok(Exclave {
        exclave_id: config.exclave_id,
        participant_id: config.participant_id,
        task_kind: config.task_kind,
        code,
        issuer: config.issuer,
        processor,
    })
}

fn take_model(payloads: &BTreeMap<String, Vec<u8>>, label: &str) -> Result<ModelVector> {
    let bytes = payloads.get(label).ok_or_else(|| Error::MissingPayload(label.to_string()))?;
    ModelVector::from_bytes(bytes)
}

fn mount(dataset: &DatasetRef) -> Result<DatasetHandle> {
    match &dataset.source {
        DatasetSource::Image(img) => mount_dataset(img, &dataset.expected),
        DatasetSource::File(path) => mount_dataset_file(path, &dataset.expected),
    }
}

struct TaskOutput {
    payloads: BTreeMap<String, Vec<u8>>,
    /// Output entries that are not payload hashes (dataset commitments).
    extra_outputs: BTreeMap<String, Digest>,
    dataset_commitment: Option<DataCommitment>,
}

impl TaskOutput {
    fn single(label: String, bytes: Vec<u8>) -> Self {
        TaskOutput { payloads: [(label, bytes)].into_iter().collect(), extra_outputs: BTreeMap::new(), dataset_commitment: None }
    }
}

impl Exclave {
    pub fn exclave_id(&self) -> &str {
        &self.exclave_id
    }

    pub fn participant_id(&self) -> &str {
        &self.participant_id
    }

    pub fn task_kind(&self) -> TaskKind {
        self.task_kind
    }

    pub fn code_measurement(&self) -> Digest {
        self.code
    }

    pub fn pcr11(&self) -> Digest {
        self.processor.pcr().read(crate::attestation::PCR_CODE)
    }

    fn run(&self, req: &TaskRequest, dataset: Option<&mut DatasetHandle>) -> Result<TaskOutput> {
        let ctx = format!("{}/{}/{}", self.task_kind, self.participant_id, req.round);
        match (self.task_kind, &req.params) {
            (TaskKind::Train, TaskParams::Train(hp)) => {
                let global = take_model(&req.payloads, labels::GLOBAL_MODEL)?;
                let data = dataset.ok_or_else(|| Error::InvalidParam("training needs a dataset".into()))?;
                let hp = Hyperparams { seed: derive_u64(hp.seed, &ctx), ..*hp };
                let diff = tasks::local_train(&global, data, &hp)?;
                Ok(TaskOutput::single(labels::diff(&self.participant_id), diff.to_bytes()))
            }
            (TaskKind::Dp, TaskParams::Dp(dp)) => {
                let mut diffs = req.payloads.keys().filter(|l| labels::diff_provider(l).is_some());
                let (Some(label), None) = (diffs.next(), diffs.next()) else {
                    return Err(Error::InvalidParam("DP task takes exactly one model diff".into()));
                };
                let diff = take_model(&req.payloads, label)?;
                let dp = DpParams { seed: derive_u64(dp.seed, &ctx), ..*dp };
                Ok(TaskOutput::single(label.clone(), tasks::svt_dp(&diff, &dp).to_bytes()))
            }
            (TaskKind::Aggregate, TaskParams::None) => {
                let updates = req
                    .payloads
                    .iter()
                    .map(|(label, bytes)| {
                        if labels::diff_provider(label).is_none() {
                            return Err(Error::InvalidParam(format!("unexpected aggregation input {label:?}")));
                        }
                        Ok((ModelVector::from_bytes(bytes)?, 1.0))
                    })
                    .collect::<Result<Vec<_>>>()?;
                let agg = tasks::aggregate_fedavg(&updates)?;
                Ok(TaskOutput::single(labels::AGG_DIFF.to_string(), agg.to_bytes()))
            }
            (TaskKind::ModelUpdate, TaskParams::None) => {
                let prev = take_model(&req.payloads, labels::GLOBAL_MODEL)?;
                let agg = take_model(&req.payloads, labels::AGG_DIFF)?;
                let next = tasks::model_update(&prev, &agg)?;
                Ok(TaskOutput::single(labels::GLOBAL_MODEL.to_string(), next.to_bytes()))
            }
            (TaskKind::Sanitize, TaskParams::Sanitize(p)) => {
                let data = dataset.ok_or_else(|| Error::InvalidParam("sanitization needs a dataset".into()))?;
                let rows = data.read_all()?;
                let denylist: Vec<Vec<u8>> = p.denylist.iter().map(|s| s.as_bytes().to_vec()).collect();
                let kept = tasks::sanitize(&rows, &denylist);
                let (image, commitment) = storage::pack_dataset(&kept, p.output_salt)?;
                Ok(TaskOutput {
                    payloads: [("dataset:image".to_string(), image.to_bytes())].into_iter().collect(),
                    extra_outputs: [(labels::DATASET_COMMITMENT.to_string(), commitment.commitment)].into_iter().collect(),
                    dataset_commitment: Some(commitment),
                })
            }
            (kind, params) => Err(Error::InvalidParam(format!("{kind} exclave cannot take parameters {params:?}"))),
        }
    }

    /// Run one task and attest it. Nothing is emitted if any step fails.
    pub fn handle_task(&mut self, req: &TaskRequest) -> Result<TaskResponse> {
        if req.task_kind != self.task_kind {
            return Err(Error::TaskKindMismatch {
                expected: self.task_kind.to_string(),
                got: req.task_kind.to_string(),
            });
        }
        let mut inputs: BTreeMap<String, Digest> =
            req.payloads.iter().map(|(label, bytes)| (label.clone(), hash_bytes(bytes))).collect();
        if !matches!(req.params, TaskParams::None) {
            inputs.insert(labels::params(self.task_kind), req.params.digest());
        }

        let mut handle = match (&req.dataset, self.task_kind) {
            (Some(ds), TaskKind::Train | TaskKind::Sanitize) => {
                let h = mount(ds)?;
                inputs.insert(labels::DATASET_COMMITMENT.to_string(), h.commitment().commitment);
                Some(h)
            }
            (None, TaskKind::Train | TaskKind::Sanitize) => {
                return Err(Error::InvalidParam(format!("{} task needs a dataset", self.task_kind)))
            }
            (Some(_), _) => return Err(Error::InvalidParam(format!("{} task takes no dataset", self.task_kind))),
            (None, _) => None,
        };

        let out = self.run(req, handle.as_mut())?;

        let mut outputs: BTreeMap<String, Digest> =
            out.payloads.iter().map(|(label, bytes)| (label.clone(), hash_bytes(bytes))).collect();
        outputs.extend(out.extra_outputs);

        let edr = Edr {
            exclave_id: self.exclave_id.clone(),
            participant_id: self.participant_id.clone(),
            task_kind: self.task_kind,
            round: req.round,
            inputs,
            code: self.code,
            outputs,
        };
        edr.validate()?;
        let report = self.processor.attest(&edr_digest(&edr))?;
        let endorsed_edr = edr_endorse(edr, report, &self.issuer, &self.participant_id)?;
        Ok(TaskResponse { payloads: out.payloads, dataset_commitment: out.dataset_commitment, endorsed_edr })
    }
}

pub fn handle_task(exclave: &mut Exclave, request: &TaskRequest) -> Result<TaskResponse> {
    exclave.handle_task(request)
}
