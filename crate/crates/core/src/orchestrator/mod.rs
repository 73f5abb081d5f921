//! The untrusted orchestrator: drives rounds through exclave connectors and
//! moves payloads between them. It never signs anything. It doubles as the
//! adversary through [`DeviationScript`].

pub mod deviation;
pub mod job;
pub mod scenario;

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::edr::{labels, EdrStore, TaskKind, PRE_TRAINING_ROUND};
use crate::error::{Error, Result};
use crate::exclave::{
    exclave_launch, reference_code_image, DatasetRef, DatasetSource, Exclave, ExclaveConfig, SanitizeParams,
    TaskParams, TaskRequest, TaskResponse,
};
use crate::storage::DatasetImage;
use crate::ModelVector;

pub use deviation::{
    apply_deviation, DeviationContext, DeviationKind, DeviationScript, InFlight, Injection, InjectionDetails,
    TamperedPayload,
};
pub use job::{JobDescription, JobSecrets, ModelProvider, ProviderSpec};

/// The orchestrator's handle on one exclave.
pub struct Connector {
    exclave: Mutex<Exclave>,
}

impl Connector {
    pub fn new(exclave: Exclave) -> Self {
        Connector { exclave: Mutex::new(exclave) }
    }
}

/// Pass a request to the exclave behind `connector`.
pub fn invoke_exclave(connector: &Connector, request: &TaskRequest) -> Result<TaskResponse> {
    connector.exclave.lock().expect("exclave lock poisoned").handle_task(request)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOptions {
    /// Run the provider branches of a round on separate threads.
    pub concurrent: bool,
    /// Keep every request/response pair.
    pub trace: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions { concurrent: true, trace: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub participant: String,
    pub request: TaskRequest,
    pub response: TaskResponse,
}

#[derive(Debug, Clone)]
pub struct JobOutcome {
    pub final_model: ModelVector,
    pub edr_count: usize,
    pub trace: Vec<TraceEntry>,
}

struct Runner<'a> {
    job: &'a JobDescription,
    secrets: JobSecrets,
    deviations: DeviationScript,
    connectors: BTreeMap<(String, TaskKind), Connector>,
    raw_datasets: BTreeMap<String, DatasetRef>,
    store: &'a EdrStore,
    trace: Option<Mutex<Vec<TraceEntry>>>,
}

impl Runner<'_> {
    fn ctx(&self) -> DeviationContext<'_> {
        DeviationContext { job: self.job, raw_datasets: &self.raw_datasets, secrets: &self.secrets }
    }

    fn invoke(&self, participant: &str, mut request: TaskRequest) -> Result<TaskResponse> {
        let ctx = self.ctx();
        for inj in &self.deviations.injections {
            apply_deviation(inj, InFlight::Request { participant, request: &mut request }, &ctx)?;
        }
        let connector = self
            .connectors
            .get(&(participant.to_string(), request.task_kind))
            .ok_or_else(|| Error::Job(format!("no {} exclave for {participant}", request.task_kind)))?;
        let mut response = invoke_exclave(connector, &request).map_err(|e| Error::Exclave {
            exclave: format!("{participant}/{}", request.task_kind),
            round: request.round,
            source: Box::new(e),
        })?;
        for inj in &self.deviations.injections {
            apply_deviation(inj, InFlight::Response { participant, response: &mut response }, &ctx)?;
        }
        self.store.append(response.endorsed_edr.clone())?;
        if let Some(trace) = &self.trace {
            trace.lock().expect("trace lock poisoned").push(TraceEntry {
                participant: participant.to_string(),
                request,
                response: response.clone(),
            });
        }
        Ok(response)
    }

    fn launch(&mut self, participant: &str, kind: TaskKind) -> Result<()> {
        let mut config = ExclaveConfig {
            exclave_id: format!("{participant}/{kind}"),
            participant_id: participant.to_string(),
            task_kind: kind,
            code_image: reference_code_image(kind),
            issuer: self
                .secrets
                .issuer(participant)
                .cloned()
                .ok_or_else(|| Error::Job(format!("no issuer key for {participant}")))?,
        };
        let ctx = self.ctx();
        for inj in &self.deviations.injections {
            apply_deviation(inj, InFlight::Launch { participant, config: &mut config }, &ctx)?;
        }
        let exclave = exclave_launch(config, &self.secrets.platform)?;
        self.connectors.insert((participant.to_string(), kind), Connector::new(exclave));
        Ok(())
    }

    fn sanitize_all(&self) -> Result<BTreeMap<String, DatasetRef>> {
        let spec = self.job.sanitize.as_ref().ok_or_else(|| Error::Job("job has no sanitize settings".into()))?;
        let mut out = BTreeMap::new();
        for (pid, raw) in &self.raw_datasets {
            let req = TaskRequest {
                task_kind: TaskKind::Sanitize,
                round: PRE_TRAINING_ROUND,
                payloads: BTreeMap::new(),
                dataset: Some(raw.clone()),
                params: TaskParams::Sanitize(SanitizeParams {
                    denylist: spec.denylist.clone(),
                    output_salt: self.secrets.salt(&format!("sanitized-salt/{pid}")),
                }),
            };
            let resp = self.invoke(pid, req)?;
            let commitment =
                resp.dataset_commitment.ok_or_else(|| Error::Job("sanitizer returned no commitment".into()))?;
            let bytes = resp
                .payloads
                .get("dataset:image")
                .ok_or_else(|| Error::MissingPayload("dataset:image".into()))?;
            let image = DatasetImage::from_bytes(bytes)?;
            out.insert(pid.clone(), DatasetRef { source: DatasetSource::Image(image), expected: commitment });
        }
        Ok(out)
    }

    /// Train then DP for one provider; returns the payload sent to aggregation.
    fn provider_branch(&self, pid: &str, round: i64, global: &[u8], dataset: &DatasetRef) -> Result<Vec<u8>> {
        let train = self.invoke(
            pid,
            TaskRequest {
                task_kind: TaskKind::Train,
                round,
                payloads: [(labels::GLOBAL_MODEL.to_string(), global.to_vec())].into_iter().collect(),
                dataset: Some(dataset.clone()),
                params: TaskParams::Train(self.job.hyperparams),
            },
        )?;
        let label = labels::diff(pid);
        let diff = train.payloads.get(&label).cloned().ok_or_else(|| Error::MissingPayload(label.clone()))?;
        if self.deviations.hits(DeviationKind::SkipDp, pid, round) {
            return Ok(diff);
        }
        let dp = self.invoke(
            pid,
            TaskRequest {
                task_kind: TaskKind::Dp,
                round,
                payloads: [(label.clone(), diff)].into_iter().collect(),
                dataset: None,
                params: TaskParams::Dp(self.job.dp),
            },
        )?;
        dp.payloads.get(&label).cloned().ok_or(Error::MissingPayload(label))
    }

    fn run_round(
        &self,
        round: i64,
        global: Vec<u8>,
        datasets: &BTreeMap<String, DatasetRef>,
        concurrent: bool,
    ) -> Result<Vec<u8>> {
        let branches: Vec<(String, Result<Vec<u8>>)> = if concurrent {
            std::thread::scope(|s| {
                let handles: Vec<_> = datasets
                    .iter()
                    .map(|(pid, ds)| (pid, s.spawn(|| self.provider_branch(pid, round, &global, ds))))
                    .collect();
                handles
                    .into_iter()
                    .map(|(pid, h)| (pid.clone(), h.join().expect("provider branch panicked")))
                    .collect()
            })
        } else {
            datasets.iter().map(|(pid, ds)| (pid.clone(), self.provider_branch(pid, round, &global, ds))).collect()
        };

        let mut agg_payloads = BTreeMap::new();
        for (pid, result) in branches {
            let update = result?;
            if !self.deviations.hits(DeviationKind::DropUpdate, &pid, round) {
                agg_payloads.insert(labels::diff(&pid), update);
            }
        }
        let mp = &self.job.model_provider.participant_id;
        let agg = self.invoke(
            mp,
            TaskRequest {
                task_kind: TaskKind::Aggregate,
                round,
                payloads: agg_payloads,
                dataset: None,
                params: TaskParams::None,
            },
        )?;
        let agg_diff = agg
            .payloads
            .get(labels::AGG_DIFF)
            .cloned()
            .ok_or_else(|| Error::MissingPayload(labels::AGG_DIFF.into()))?;
        let update = self.invoke(
            mp,
            TaskRequest {
                task_kind: TaskKind::ModelUpdate,
                round,
                payloads: [(labels::GLOBAL_MODEL.to_string(), global), (labels::AGG_DIFF.to_string(), agg_diff)]
                    .into_iter()
                    .collect(),
                dataset: None,
                params: TaskParams::None,
            },
        )?;
        update
            .payloads
            .get(labels::GLOBAL_MODEL)
            .cloned()
            .ok_or_else(|| Error::MissingPayload(labels::GLOBAL_MODEL.into()))
    }
}

/// Run `job` end to end, appending every endorsed record to `store`.
///
/// `base_dir` is the directory that dataset paths in the job are relative to.
pub fn run_job(
    job: &JobDescription,
    base_dir: &Path,
    deviations: Option<&DeviationScript>,
    store: &EdrStore,
    options: RunOptions,
) -> Result<JobOutcome> {
    job.validate()?;
    let deviations = deviations.cloned().unwrap_or_default();
    deviations.validate(job)?;

    let mut raw_datasets = BTreeMap::new();
    for p in &job.providers {
        let (image, commitment) = job::load_sidecar(base_dir, p)?;
        raw_datasets.insert(p.participant_id.clone(), DatasetRef { source: DatasetSource::File(image), expected: commitment });
    }

    let mut runner = Runner {
        job,
        secrets: JobSecrets::for_job(job)?,
        deviations,
        connectors: BTreeMap::new(),
        raw_datasets,
        store,
        trace: options.trace.then(|| Mutex::new(Vec::new())),
    };

    for p in &job.providers {
        for kind in job.pipeline.iter().filter(|k| k.is_provider_task()) {
            runner.launch(&p.participant_id, *kind)?;
        }
    }
    for kind in job.pipeline.iter().filter(|k| !k.is_provider_task()) {
        runner.launch(&job.model_provider.participant_id, *kind)?;
    }

    let datasets =
        if job.sanitization_required() { runner.sanitize_all()? } else { runner.raw_datasets.clone() };

    let mut global = job.initial_model().to_bytes();
    for round in 0..job.rounds as i64 {
        global = runner.run_round(round, global, &datasets, options.concurrent)?;
    }
    store.flush()?;

    Ok(JobOutcome {
        final_model: ModelVector::from_bytes(&global)?,
        edr_count: store.len(),
        trace: runner.trace.map(|t| t.into_inner().expect("trace lock poisoned")).unwrap_or_default(),
    })
}
