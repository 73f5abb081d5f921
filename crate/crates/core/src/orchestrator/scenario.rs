//! Synthetic jobs: datasets, sidecars and a job description on disk.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use crate::edr::TaskKind;
use crate::error::Result;
use crate::exclave::reference_code_measurement;
use crate::storage::{pack_dataset, TrainingRow};
use crate::tasks::{DpParams, Hyperparams, TaskRng, PRNG_ALGORITHM};

use super::job::{InitialModel, JobDescription, JobSecrets, ModelProvider, ProviderSpec, SanitizeSpec};

pub const DENYLIST_TOKEN: &str = "BAD";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScenarioOptions {
    pub providers: usize,
    pub rounds: u32,
    /// Model dimension, bias included. Rows carry `dim - 1` features.
    pub dim: usize,
    pub records: usize,
    pub seed: u64,
    pub sanitize: bool,
}

impl Default for ScenarioOptions {
    fn default() -> Self {
        ScenarioOptions { providers: 4, rounds: 3, dim: 17, records: 256, seed: 7, sanitize: false }
    }
}

pub fn provider_id(i: usize) -> String {
    format!("dp{i}")
}

pub const MODEL_PROVIDER_ID: &str = "mp";

/// Linearly separable-ish rows from a shared hidden weight vector. Roughly
/// one row in eight carries the denylisted token.
pub fn synthetic_rows(features: usize, records: usize, seed: u64, provider: usize) -> Vec<TrainingRow> {
    let mut truth_rng = TaskRng::new(seed);
    let truth: Vec<f64> = (0..features).map(|_| truth_rng.open01() * 2.0 - 1.0).collect();
    let mut rng = TaskRng::new(seed ^ ((provider as u64 + 1) << 32));
    (0..records)
        .map(|i| {
            let x: Vec<f64> = (0..features).map(|_| rng.open01() * 2.0 - 1.0).collect();
            let z: f64 = x.iter().zip(&truth).map(|(a, b)| a * b).sum::<f64>() + 0.1 * (rng.open01() - 0.5);
            let mut values = x;
            values.push(if z > 0.0 { 1.0 } else { 0.0 });
            let text = if rng.index(8) == 0 { format!("row {i} {DENYLIST_TOKEN}") } else { format!("row {i}") };
            TrainingRow::with_text(values, text)
        })
        .collect()
}

pub fn default_hyperparams(seed: u64) -> Hyperparams {
    Hyperparams { learning_rate: 0.5, steps: 20, batch_size: 16, l2: 1e-4, seed }
}

pub fn default_dp(seed: u64) -> DpParams {
    DpParams { threshold: 0.01, scale: 0.002, max_releases: 8, release_scale: 0.001, seed }
}

/// Write datasets, sidecars and `job.json` into `dir`. Returns the job path.
pub fn generate_job(dir: &Path, opts: &ScenarioOptions) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let ids: Vec<String> = (0..opts.providers).map(provider_id).collect();
    let mut all_ids = ids.clone();
    all_ids.push(MODEL_PROVIDER_ID.to_string());
    let secrets = JobSecrets::derive(opts.seed, all_ids);

    let mut providers = Vec::new();
    for (i, id) in ids.iter().enumerate() {
        let rows = synthetic_rows(opts.dim - 1, opts.records, opts.seed, i);
        let (image, commitment) = pack_dataset(&rows, secrets.salt(&format!("dataset-salt/{id}")))?;
        let image_name = PathBuf::from(format!("{id}.vfld"));
        let sidecar_name = PathBuf::from(format!("{id}.vfld.json"));
        std::fs::write(dir.join(&image_name), image.to_bytes())?;
        std::fs::write(dir.join(&sidecar_name), serde_json::to_vec_pretty(&image.sidecar(&commitment))?)?;
        providers.push(ProviderSpec {
            participant_id: id.clone(),
            image: image_name,
            sidecar: sidecar_name,
            commitment: commitment.commitment,
            issuer_pub: secrets.issuer(id).expect("derived").verify_key(),
        });
    }

    let mut pipeline = Vec::new();
    if opts.sanitize {
        pipeline.push(TaskKind::Sanitize);
    }
    pipeline.extend([TaskKind::Train, TaskKind::Dp, TaskKind::Aggregate, TaskKind::ModelUpdate]);
    let code_allowlist: BTreeMap<TaskKind, BTreeSet<_>> =
        pipeline.iter().map(|k| (*k, [reference_code_measurement(*k)].into_iter().collect())).collect();

    let job = JobDescription {
        job_id: format!("synthetic-{}", opts.seed),
        seed: opts.seed,
        platform_root_pub: secrets.platform.root_pub(),
        model_provider: ModelProvider {
            participant_id: MODEL_PROVIDER_ID.to_string(),
            issuer_pub: secrets.issuer(MODEL_PROVIDER_ID).expect("derived").verify_key(),
        },
        providers,
        rounds: opts.rounds,
        pipeline,
        initial_model: InitialModel { dim: opts.dim, seed: opts.seed },
        hyperparams: default_hyperparams(opts.seed.wrapping_add(1)),
        dp: default_dp(opts.seed.wrapping_add(2)),
        sanitize: opts.sanitize.then(|| SanitizeSpec { denylist: vec![DENYLIST_TOKEN.to_string()] }),
        code_allowlist,
        prng: PRNG_ALGORITHM.to_string(),
    };
    job.validate()?;
    let path = dir.join("job.json");
    job.save(&path)?;
    Ok(path)
}
