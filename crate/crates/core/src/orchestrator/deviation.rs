//! Protocol deviations the untrusted orchestrator can inject.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attestation::SecureProcessor;
use crate::crypto::KeyPair;
use crate::edr::{edr_digest, edr_endorse, labels, TaskKind};
use crate::error::{Error, Result};
use crate::exclave::{DatasetRef, DatasetSource, ExclaveConfig, TaskRequest, TaskResponse};
use crate::storage::{pack_dataset, DatasetImage};

use super::job::{JobDescription, JobSecrets};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeviationKind {
    ForgeEdr,
    TransitTamper,
    SkipDp,
    DropUpdate,
    DatasetSwap,
    SkipSanitization,
    CodeTamper,
}

impl DeviationKind {
    pub const ALL: [DeviationKind; 7] = [
        DeviationKind::ForgeEdr,
        DeviationKind::TransitTamper,
        DeviationKind::SkipDp,
        DeviationKind::DropUpdate,
        DeviationKind::DatasetSwap,
        DeviationKind::SkipSanitization,
        DeviationKind::CodeTamper,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DeviationKind::ForgeEdr => "forge_edr",
            DeviationKind::TransitTamper => "transit_tamper",
            DeviationKind::SkipDp => "skip_dp",
            DeviationKind::DropUpdate => "drop_update",
            DeviationKind::DatasetSwap => "dataset_swap",
            DeviationKind::SkipSanitization => "skip_sanitization",
            DeviationKind::CodeTamper => "code_tamper",
        }
    }
}

impl fmt::Display for DeviationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Which payload a transit tamper hits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TamperedPayload {
    /// A provider's DP output on its way to aggregation.
    Diff,
    /// The global model on its way to one provider's training task.
    Global,
    /// The aggregated diff on its way to the model update task.
    AggDiff,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InjectionDetails {
    /// Task whose record is forged or whose code is tampered.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<TaskKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub payload: Option<TamperedPayload>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Injection {
    pub kind: DeviationKind,
    pub target: String,
    /// Round the deviation applies to. `dataset_swap` applies from this round
    /// on; `code_tamper` and `skip_sanitization` ignore it. Absent means
    /// every round.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub round: Option<i64>,
    #[serde(default)]
    pub details: InjectionDetails,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviationScript {
    pub injections: Vec<Injection>,
}

impl DeviationScript {
    pub fn single(injection: Injection) -> Self {
        DeviationScript { injections: vec![injection] }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }

    pub fn validate(&self, job: &JobDescription) -> Result<()> {
        for inj in &self.injections {
            if !job.is_participant(&inj.target) {
                return Err(Error::Job(format!("deviation target {:?} is not in the job", inj.target)));
            }
            let is_provider = job.provider(&inj.target).is_some();
            let provider_only = matches!(
                inj.kind,
                DeviationKind::SkipDp | DeviationKind::DropUpdate | DeviationKind::DatasetSwap | DeviationKind::SkipSanitization
            );
            if provider_only && !is_provider {
                return Err(Error::Job(format!("{} must target a data provider", inj.kind)));
            }
            if inj.kind == DeviationKind::SkipSanitization && !job.sanitization_required() {
                return Err(Error::Job("skip_sanitization needs a job with a sanitize stage".into()));
            }
            if let Some(task) = inj.details.task {
                if task.is_provider_task() != is_provider {
                    return Err(Error::Job(format!("{} does not run task {task}", inj.target)));
                }
            }
        }
        Ok(())
    }

    pub fn matching(&self, kind: DeviationKind) -> impl Iterator<Item = &Injection> {
        self.injections.iter().filter(move |i| i.kind == kind)
    }

    /// True if an injection of `kind` targets `participant` at `round`.
    pub fn hits(&self, kind: DeviationKind, participant: &str, round: i64) -> bool {
        self.matching(kind).any(|i| i.target == participant && i.round.is_none_or(|r| r == round))
    }
}

impl Injection {
    fn round_matches(&self, round: i64) -> bool {
        match self.kind {
            DeviationKind::DatasetSwap => self.round.is_none_or(|r| round >= r),
            DeviationKind::CodeTamper | DeviationKind::SkipSanitization => true,
            _ => self.round.is_none_or(|r| r == round),
        }
    }

    fn default_task(&self, target_is_provider: bool) -> TaskKind {
        self.details.task.unwrap_or(if target_is_provider { TaskKind::Train } else { TaskKind::Aggregate })
    }
}

/// What the adversary needs beyond the step itself.
pub struct DeviationContext<'a> {
    pub job: &'a JobDescription,
    /// Pre-sanitization dataset of each provider.
    pub raw_datasets: &'a BTreeMap<String, DatasetRef>,
    pub secrets: &'a JobSecrets,
}

/// A step of the job in flight, at one of the interception points.
pub enum InFlight<'a> {
    Launch { participant: &'a str, config: &'a mut ExclaveConfig },
    Request { participant: &'a str, request: &'a mut TaskRequest },
    Response { participant: &'a str, response: &'a mut TaskResponse },
}

fn flip_model_byte(bytes: &mut [u8]) {
    // Lowest mantissa byte of the first value: stays finite.
    if bytes.len() > 4 {
        bytes[4] ^= 0x01;
    } else if let Some(b) = bytes.last_mut() {
        *b ^= 0x01;
    }
}

fn image_of(source: &DatasetSource) -> Result<DatasetImage> {
    match source {
        DatasetSource::Image(img) => Ok(img.clone()),
        DatasetSource::File(p) => DatasetImage::from_bytes(&std::fs::read(p)?),
    }
}

/// A second image that differs from `ds` in one value, under the same salt.
pub fn swapped_dataset(ds: &DatasetRef) -> Result<DatasetRef> {
    let mut rows = image_of(&ds.source)?.decode_rows_unverified();
    rows[0].values[0] += 1.0;
    let (img, c) = pack_dataset(&rows, ds.expected.salt)?;
    Ok(DatasetRef { source: DatasetSource::Image(img), expected: c })
}

/// Apply one injection to a step. Steps that the injection does not match are
/// left untouched.
pub fn apply_deviation(inj: &Injection, step: InFlight<'_>, ctx: &DeviationContext<'_>) -> Result<()> {
    let target_is_provider = ctx.job.provider(&inj.target).is_some();
    match (inj.kind, step) {
        (DeviationKind::CodeTamper, InFlight::Launch { participant, config }) => {
            if participant == inj.target && config.task_kind == inj.default_task(target_is_provider) {
                config.code_image[0] ^= 0xff;
            }
        }
        (DeviationKind::TransitTamper, InFlight::Request { participant, request }) => {
            if !inj.round_matches(request.round) {
                return Ok(());
            }
            let payload = inj.details.payload.unwrap_or(if target_is_provider {
                TamperedPayload::Diff
            } else {
                TamperedPayload::AggDiff
            });
            let label = match payload {
                TamperedPayload::Diff if request.task_kind == TaskKind::Aggregate => labels::diff(&inj.target),
                TamperedPayload::Global if request.task_kind == TaskKind::Train && participant == inj.target => {
                    labels::GLOBAL_MODEL.to_string()
                }
                TamperedPayload::AggDiff if request.task_kind == TaskKind::ModelUpdate => labels::AGG_DIFF.to_string(),
                _ => return Ok(()),
            };
            if let Some(bytes) = request.payloads.get_mut(&label) {
                flip_model_byte(bytes);
            }
        }
        (DeviationKind::DatasetSwap, InFlight::Request { participant, request }) => {
            if participant == inj.target && request.task_kind == TaskKind::Train && inj.round_matches(request.round) {
                if let Some(ds) = request.dataset.as_ref() {
                    request.dataset = Some(swapped_dataset(ds)?);
                }
            }
        }
        (DeviationKind::SkipSanitization, InFlight::Request { participant, request }) => {
            if participant == inj.target && request.task_kind == TaskKind::Train {
                let raw = ctx
                    .raw_datasets
                    .get(participant)
                    .ok_or_else(|| Error::Job(format!("no raw dataset for {participant}")))?;
                request.dataset = Some(raw.clone());
            }
        }
        (DeviationKind::ForgeEdr, InFlight::Response { participant, response }) => {
            let edr = &response.endorsed_edr.edr;
            if participant != inj.target
                || edr.task_kind != inj.default_task(target_is_provider)
                || !inj.round_matches(edr.round)
            {
                return Ok(());
            }
            let mut forged = edr.clone();
            if let Some(first) = forged.outputs.values_mut().next() {
                first.0[0] ^= 0x01;
            }
            // Attest with a processor the platform never endorsed.
            let rogue_root = KeyPair::from_seed(&ctx.secrets.derive_seed("rogue-root"));
            let (mut rogue, _) = SecureProcessor::create(&rogue_root, &ctx.secrets.derive_seed("rogue-processor"));
            rogue.measure_code(&forged.code)?;
            let report = rogue.attest(&edr_digest(&forged))?;
            let issuer = ctx
                .secrets
                .issuer(participant)
                .ok_or_else(|| Error::Job(format!("no issuer key for {participant}")))?;
            response.endorsed_edr = edr_endorse(forged, report, issuer, participant)?;
        }
        // skip_dp and drop_update remove whole steps; the runner handles them.
        _ => {}
    }
    Ok(())
}
