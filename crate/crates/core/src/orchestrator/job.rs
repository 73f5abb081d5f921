use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::crypto::{derive_seed, hash_parts, Digest, KeyPair, VerifyKey};
use crate::edr::{IssuerRegistry, TaskKind};
use crate::error::{Error, Result};
use crate::exclave::Platform;
use crate::storage::{DataCommitment, Salt, Sidecar};
use crate::tasks::{self, DpParams, Hyperparams, PRNG_ALGORITHM};
use crate::ModelVector;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelProvider {
    pub participant_id: String,
    pub issuer_pub: VerifyKey,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderSpec {
    pub participant_id: String,
    /// Image file, relative to the job file's directory.
    pub image: PathBuf,
    pub sidecar: PathBuf,
    /// Registered dataset commitment.
    pub commitment: Digest,
    pub issuer_pub: VerifyKey,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InitialModel {
    pub dim: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SanitizeSpec {
    pub denylist: Vec<String>,
}

/// The protocol all participants agreed on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobDescription {
    pub job_id: String,
    /// Master seed for the simulation's keys and salts.
    pub seed: u64,
    pub platform_root_pub: VerifyKey,
    pub model_provider: ModelProvider,
    pub providers: Vec<ProviderSpec>,
    pub rounds: u32,
    pub pipeline: Vec<TaskKind>,
    pub initial_model: InitialModel,
    pub hyperparams: Hyperparams,
    pub dp: DpParams,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sanitize: Option<SanitizeSpec>,
    pub code_allowlist: BTreeMap<TaskKind, BTreeSet<Digest>>,
    pub prng: String,
}

const CORE_PIPELINE: [TaskKind; 4] = [TaskKind::Train, TaskKind::Dp, TaskKind::Aggregate, TaskKind::ModelUpdate];

impl JobDescription {
    pub fn load(path: &Path) -> Result<Self> {
        let job: JobDescription = serde_json::from_slice(&std::fs::read(path)?)?;
        job.validate()?;
        Ok(job)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::Job("rounds must be >= 1".into()));
        }
        if self.providers.is_empty() {
            return Err(Error::Job("job has no data providers".into()));
        }
        let mut ids = BTreeSet::new();
        ids.insert(self.model_provider.participant_id.as_str());
        for p in &self.providers {
            if !ids.insert(p.participant_id.as_str()) {
                return Err(Error::Job(format!("duplicate participant id {:?}", p.participant_id)));
            }
            if p.participant_id.is_empty() || p.participant_id.contains(['/', ':']) {
                return Err(Error::Job(format!("bad participant id {:?}", p.participant_id)));
            }
        }
        let core: Vec<TaskKind> = self.pipeline.iter().copied().filter(|k| *k != TaskKind::Sanitize).collect();
        let sanitize_ok = match self.pipeline.iter().position(|k| *k == TaskKind::Sanitize) {
            None => true,
            Some(0) => self.pipeline.iter().filter(|k| **k == TaskKind::Sanitize).count() == 1,
            Some(_) => false,
        };
        if core != CORE_PIPELINE || !sanitize_ok {
            return Err(Error::Job(format!(
                "pipeline must be [sanitize?, train, dp, aggregate, model_update], got {:?}",
                self.pipeline
            )));
        }
        if self.sanitization_required() != self.sanitize.is_some() {
            return Err(Error::Job("sanitize stage and sanitize settings must appear together".into()));
        }
        for kind in &self.pipeline {
            if self.code_allowlist.get(kind).is_none_or(BTreeSet::is_empty) {
                return Err(Error::Job(format!("code allowlist for {kind} is empty")));
            }
        }
        if self.prng != PRNG_ALGORITHM {
            return Err(Error::Job(format!("unsupported prng {:?}", self.prng)));
        }
        if self.initial_model.dim == 0 {
            return Err(Error::Job("model dimension must be >= 1".into()));
        }
        self.hyperparams.validate()?;
        self.dp.validate()?;
        Ok(())
    }

    pub fn sanitization_required(&self) -> bool {
        self.pipeline.contains(&TaskKind::Sanitize)
    }

    pub fn provider(&self, id: &str) -> Option<&ProviderSpec> {
        self.providers.iter().find(|p| p.participant_id == id)
    }

    pub fn provider_ids(&self) -> Vec<String> {
        self.providers.iter().map(|p| p.participant_id.clone()).collect()
    }

    pub fn is_participant(&self, id: &str) -> bool {
        id == self.model_provider.participant_id || self.provider(id).is_some()
    }

    pub fn issuer_registry(&self) -> IssuerRegistry {
        let mut reg: IssuerRegistry =
            self.providers.iter().map(|p| (p.participant_id.clone(), p.issuer_pub)).collect();
        reg.insert(self.model_provider.participant_id.clone(), self.model_provider.issuer_pub);
        reg
    }

    pub fn initial_model(&self) -> ModelVector {
        tasks::initial_model(self.initial_model.dim, self.initial_model.seed)
    }

    pub fn initial_model_digest(&self) -> Digest {
        crate::crypto::hash_bytes(&self.initial_model().to_bytes())
    }
}

/// Private key material every participant derives from the job's master
/// seed. Real deployments would hold these separately.
pub struct JobSecrets {
    master: [u8; 32],
    pub platform: Platform,
    issuers: BTreeMap<String, KeyPair>,
}

pub fn master_seed(seed: u64) -> [u8; 32] {
    hash_parts(crate::crypto::domain::KEY_DERIVE, &[b"job-master", &seed.to_le_bytes()]).0
}

impl JobSecrets {
    pub fn derive(seed: u64, participants: impl IntoIterator<Item = String>) -> Self {
        let master = master_seed(seed);
        let platform = Platform::new(derive_seed(&master, "platform"));
        let issuers = participants
            .into_iter()
            .map(|id| {
                let key = KeyPair::from_seed(&derive_seed(&master, &format!("issuer/{id}")));
                (id, key)
            })
            .collect();
        JobSecrets { master, platform, issuers }
    }

    /// Derive the secrets for `job` and check they match its public keys.
    pub fn for_job(job: &JobDescription) -> Result<Self> {
        let mut ids = job.provider_ids();
        ids.push(job.model_provider.participant_id.clone());
        let s = Self::derive(job.seed, ids);
        if s.platform.root_pub() != job.platform_root_pub {
            return Err(Error::Job("platform root key does not match job seed".into()));
        }
        for (id, key) in job.issuer_registry() {
            if s.issuer(&id).map(|k| k.verify_key()) != Some(key) {
                return Err(Error::Job(format!("issuer key for {id} does not match job seed")));
            }
        }
        Ok(s)
    }

    pub fn issuer(&self, id: &str) -> Option<&KeyPair> {
        self.issuers.get(id)
    }

    pub fn derive_seed(&self, purpose: &str) -> [u8; 32] {
        derive_seed(&self.master, purpose)
    }

    pub fn salt(&self, purpose: &str) -> Salt {
        self.derive_seed(purpose)[..16].try_into().expect("16 bytes")
    }
}

/// Resolve a provider's image/sidecar paths and check the sidecar against the
/// registered commitment.
pub fn load_sidecar(base: &Path, p: &ProviderSpec) -> Result<(PathBuf, DataCommitment)> {
    let sidecar: Sidecar = serde_json::from_slice(&std::fs::read(base.join(&p.sidecar))?)?;
    let commitment = sidecar.data_commitment()?;
    if commitment.commitment != p.commitment {
        return Err(Error::Job(format!(
            "sidecar commitment for {} differs from the registered commitment",
            p.participant_id
        )));
    }
    Ok((base.join(&p.image), commitment))
}
