//! Offline auditor: verifies stored EDRs, builds the EDR dataflow graph (EDG)
//! and checks the job's claims against it.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::crypto::{Digest, VerifyKey};
use crate::edr::{edr_check, edr_digest, labels, Edr, EndorsedEdr, IssuerRegistry, RejectReason, TaskKind, PRE_TRAINING_ROUND};
use crate::exclave::TaskParams;
use crate::orchestrator::JobDescription;

/// One verified EDR.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vertex {
    pub id: String,
    pub digest: Digest,
    pub participant: String,
    pub kind: TaskKind,
    pub round: i64,
    pub code: Digest,
    pub inputs: BTreeMap<String, Digest>,
    pub outputs: BTreeMap<String, Digest>,
}

impl Vertex {
    pub fn from_edr(edr: &Edr) -> Self {
        let digest = edr_digest(edr);
        Vertex {
            id: format!("{}/{}/r{}@{}", edr.task_kind, edr.participant_id, edr.round, digest.short()),
            digest,
            participant: edr.participant_id.clone(),
            kind: edr.task_kind,
            round: edr.round,
            code: edr.code,
            inputs: edr.inputs.clone(),
            outputs: edr.outputs.clone(),
        }
    }
}

pub type EdgeLabel = (String, Digest);
/// Edges keyed by (producer, consumer) vertex index.
pub type EdgeMap = BTreeMap<(usize, usize), BTreeSet<EdgeLabel>>;

/// A value may flow within a round or into the next one. Pre-training
/// outputs flow into any round.
pub fn rounds_compatible(producer: i64, consumer: i64) -> bool {
    producer == PRE_TRAINING_ROUND || consumer == producer || consumer == producer + 1
}

/// Reference construction: compare every ordered pair of vertices.
pub fn edges_naive(vertices: &[Vertex]) -> EdgeMap {
    let mut edges = EdgeMap::new();
    for (ci, c) in vertices.iter().enumerate() {
        for (pi, p) in vertices.iter().enumerate() {
            if pi == ci || !rounds_compatible(p.round, c.round) {
                continue;
            }
            for (label, d) in &c.inputs {
                if p.outputs.get(label) == Some(d) {
                    edges.entry((pi, ci)).or_default().insert((label.clone(), *d));
                }
            }
        }
    }
    edges
}

/// Same edges as [`edges_naive`], through an index on (label, digest).
pub fn edges_indexed(vertices: &[Vertex]) -> EdgeMap {
    let mut index: HashMap<(&str, &Digest), Vec<usize>> = HashMap::new();
    for (pi, p) in vertices.iter().enumerate() {
        for (label, d) in &p.outputs {
            index.entry((label.as_str(), d)).or_default().push(pi);
        }
    }
    let mut edges = EdgeMap::new();
    for (ci, c) in vertices.iter().enumerate() {
        for (label, d) in &c.inputs {
            for &pi in index.get(&(label.as_str(), d)).into_iter().flatten() {
                if pi != ci && rounds_compatible(vertices[pi].round, c.round) {
                    edges.entry((pi, ci)).or_default().insert((label.clone(), *d));
                }
            }
        }
    }
    edges
}

#[derive(Debug, Clone)]
pub struct Edg {
    pub vertices: Vec<Vertex>,
    pub edges: EdgeMap,
    /// Per consumer: input label to the producers supplying it.
    incoming: Vec<BTreeMap<String, Vec<usize>>>,
}

impl Edg {
    /// Build the graph over `vertices`. Duplicates (same digest) collapse and
    /// the order is canonicalized, so the result does not depend on the
    /// order records were stored in.
    pub fn new(vertices: impl IntoIterator<Item = Vertex>) -> Self {
        let mut unique: BTreeMap<Digest, Vertex> = BTreeMap::new();
        for v in vertices {
            unique.entry(v.digest).or_insert(v);
        }
        let mut vertices: Vec<Vertex> = unique.into_values().collect();
        vertices.sort_by(|a, b| {
            (a.round, a.kind, &a.participant, a.digest).cmp(&(b.round, b.kind, &b.participant, b.digest))
        });
        let edges = edges_indexed(&vertices);
        let mut incoming = vec![BTreeMap::<String, Vec<usize>>::new(); vertices.len()];
        for (&(p, c), labels) in &edges {
            for (label, _) in labels {
                incoming[c].entry(label.clone()).or_default().push(p);
            }
        }
        Edg { vertices, edges, incoming }
    }

    /// Producers whose output matches consumer `c`'s input `label`.
    pub fn suppliers(&self, c: usize, label: &str) -> &[usize] {
        self.incoming[c].get(label).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn find(&self, kind: TaskKind, participant: &str, round: i64) -> Vec<usize> {
        (0..self.vertices.len())
            .filter(|&i| {
                let v = &self.vertices[i];
                v.kind == kind && v.participant == participant && v.round == round
            })
            .collect()
    }

    pub fn stats(&self) -> EdgStats {
        let mut by_kind = BTreeMap::new();
        for v in &self.vertices {
            *by_kind.entry(v.kind.as_str().to_string()).or_insert(0) += 1;
        }
        EdgStats {
            vertices: self.vertices.len(),
            edges: self.edges.len(),
            edge_labels: self.edges.values().map(BTreeSet::len).sum(),
            by_kind,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgStats {
    pub vertices: usize,
    pub edges: usize,
    pub edge_labels: usize,
    pub by_kind: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RejectedRecord {
    /// Position in the store.
    pub index: usize,
    pub digest: Digest,
    pub participant_id: String,
    pub issuer_id: String,
    pub task_kind: TaskKind,
    pub round: i64,
    pub reason: RejectReason,
}

/// Verify every record and build the graph from the ones that pass.
pub fn build_edg(
    records: &[EndorsedEdr],
    platform_root: &VerifyKey,
    issuers: &IssuerRegistry,
) -> (Edg, Vec<RejectedRecord>) {
    let mut accepted = Vec::new();
    let mut rejected = Vec::new();
    for (index, e) in records.iter().enumerate() {
        match edr_check(e, platform_root, issuers) {
            Ok(()) => accepted.push(Vertex::from_edr(&e.edr)),
            Err(reason) => rejected.push(RejectedRecord {
                index,
                digest: e.digest(),
                participant_id: e.edr.participant_id.clone(),
                issuer_id: e.issuer_id.clone(),
                task_kind: e.edr.task_kind,
                round: e.edr.round,
                reason,
            }),
        }
    }
    (Edg::new(accepted), rejected)
}

/// What the auditor needs from the job description.
#[derive(Debug, Clone)]
pub struct AuditPolicy {
    pub platform_root: VerifyKey,
    pub issuers: IssuerRegistry,
    pub model_provider: String,
    pub providers: Vec<String>,
    pub rounds: u32,
    pub code_allowlist: BTreeMap<TaskKind, BTreeSet<Digest>>,
    /// Registered dataset commitment per provider.
    pub registered: BTreeMap<String, Digest>,
    pub initial_model: Digest,
    pub train_params: Digest,
    pub dp_params: Digest,
    pub sanitization_required: bool,
    /// Digest of the model the job handed out, if the auditor was given it.
    pub final_model: Option<Digest>,
}

impl AuditPolicy {
    pub fn from_job(job: &JobDescription) -> Self {
        AuditPolicy {
            platform_root: job.platform_root_pub,
            issuers: job.issuer_registry(),
            model_provider: job.model_provider.participant_id.clone(),
            providers: job.provider_ids(),
            rounds: job.rounds,
            code_allowlist: job.code_allowlist.clone(),
            registered: job.providers.iter().map(|p| (p.participant_id.clone(), p.commitment)).collect(),
            initial_model: job.initial_model_digest(),
            train_params: TaskParams::Train(job.hyperparams).digest(),
            dp_params: TaskParams::Dp(job.dp).digest(),
            sanitization_required: job.sanitization_required(),
            final_model: None,
        }
    }

    pub fn with_final_model(mut self, digest: Digest) -> Self {
        self.final_model = Some(digest);
        self
    }

    fn final_round(&self) -> i64 {
        self.rounds as i64 - 1
    }

    /// Participant expected to produce a value carrying `label`.
    fn owner_of<'a>(&'a self, label: &'a str) -> Option<&'a str> {
        if let Some(p) = labels::diff_provider(label) {
            return Some(p);
        }
        (label == labels::GLOBAL_MODEL || label == labels::AGG_DIFF).then_some(self.model_provider.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClaimStatus {
    Pass,
    Fail,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClaimResult {
    pub id: u8,
    pub name: String,
    pub status: ClaimStatus,
    pub evidence: Vec<String>,
    pub blamed: Vec<String>,
}

impl ClaimResult {
    pub fn passed(&self) -> bool {
        self.status == ClaimStatus::Pass
    }
}

pub const CLAIM_NAMES: [&str; 5] =
    ["code_integrity", "dataflow_integrity", "pipeline_conformance", "dataset_integrity", "sanitization"];

#[derive(Default)]
struct Findings {
    evidence: Vec<String>,
    blamed: BTreeSet<String>,
    failed: bool,
}

impl Findings {
    fn fail<'a>(&mut self, blame: impl IntoIterator<Item = &'a str>, msg: String) {
        self.failed = true;
        self.blamed.extend(blame.into_iter().map(str::to_string));
        self.evidence.push(msg);
    }

    fn finish(self, id: u8) -> ClaimResult {
        ClaimResult {
            id,
            name: CLAIM_NAMES[id as usize - 1].to_string(),
            status: if self.failed { ClaimStatus::Fail } else { ClaimStatus::Pass },
            evidence: self.evidence,
            blamed: self.blamed.into_iter().collect(),
        }
    }
}

/// Every task ran code on the job's allowlist for its kind.
pub fn check_claim1(edg: &Edg, policy: &AuditPolicy) -> ClaimResult {
    let mut f = Findings::default();
    for v in &edg.vertices {
        if !policy.code_allowlist.get(&v.kind).is_some_and(|set| set.contains(&v.code)) {
            f.fail([v.participant.as_str()], format!("{} ran code {} not allowlisted for {}", v.id, v.code.short(), v.kind));
        }
    }
    f.finish(1)
}


/// Every model value a task consumed was produced by a verified task, and
/// the final model comes out of the last round's update.
pub fn check_claim2(edg: &Edg, policy: &AuditPolicy) -> ClaimResult {
    let mut f = Findings::default();
    for (c, v) in edg.vertices.iter().enumerate() {
        for (label, d) in &v.inputs {
            if !label.starts_with(labels::MODEL_PREFIX) {
                continue;
            }
            if label == labels::GLOBAL_MODEL && v.round == 0 && *d == policy.initial_model {
                continue;
            }
            if edg.suppliers(c, label).is_empty() {
                let mut blame = vec![v.participant.as_str()];
                blame.extend(policy.owner_of(label));
                f.fail(blame, format!("{} consumed {label}={} which no verified record produced", v.id, d.short()));
            }
        }
    }
    let finals = edg.find(TaskKind::ModelUpdate, &policy.model_provider, policy.final_round());
    if finals.is_empty() {
        f.fail(
            [policy.model_provider.as_str()],
            format!("missing vertices: no verified model update for final round {}", policy.final_round()),
        );
    }
    if let Some(model) = policy.final_model {
        let traced = finals.iter().any(|&i| edg.vertices[i].outputs.get(labels::GLOBAL_MODEL) == Some(&model));
        if !traced {
            f.fail(
                [policy.model_provider.as_str()],
                format!("final model {} is not the output of a final-round update", model.short()),
            );
        }
    }
    f.finish(2)
}

struct PipelineCheck<'a> {
    edg: &'a Edg,
    policy: &'a AuditPolicy,
    f: Findings,
}

impl PipelineCheck<'_> {
    /// The unique vertex of this kind, participant and round. Counts were
    /// checked separately.
    fn one(&self, kind: TaskKind, participant: &str, round: i64) -> Option<usize> {
        match self.edg.find(kind, participant, round).as_slice() {
            [i] => Some(*i),
            _ => None,
        }
    }

    /// Input `label` of `c` came from `expected`, or equals `allowed`.
    /// Values nobody produced are left to the dataflow claim.
    fn expect_supplier(&mut self, c: usize, label: &str, expected: Option<usize>, allowed: Option<Digest>, owner: &str) {
        let v = &self.edg.vertices[c];
        let Some(d) = v.inputs.get(label) else {
            self.f.fail([v.participant.as_str()], format!("{} has no {label} input", v.id));
            return;
        };
        if allowed == Some(*d) {
            return;
        }
        let suppliers = self.edg.suppliers(c, label);
        if suppliers.is_empty() {
            return;
        }
        if expected.is_some_and(|e| suppliers.contains(&e)) {
            return;
        }
        let from: Vec<&str> = suppliers.iter().map(|&s| self.edg.vertices[s].id.as_str()).collect();
        let want = match expected {
            Some(e) => self.edg.vertices[e].id.clone(),
            None => format!("a task of {owner}"),
        };
        self.f.fail([owner], format!("{} took {label} from {} instead of {want}", v.id, from.join(", ")));
    }

    fn expect_params(&mut self, c: usize, kind: TaskKind, expected: Digest) {
        let v = &self.edg.vertices[c];
        let label = labels::params(kind);
        if v.inputs.get(&label) != Some(&expected) {
            self.f.fail([v.participant.as_str()], format!("{} ran with {label} other than the job's", v.id));
        }
    }

    fn run(mut self) -> ClaimResult {
        let policy = self.policy;
        let mp = policy.model_provider.as_str();
        for v in &self.edg.vertices {
            let is_provider = policy.providers.contains(&v.participant);
            let placed = if v.kind.is_provider_task() { is_provider } else { v.participant == mp };
            if !placed {
                self.f.fail([v.participant.as_str()], format!("{} runs a task outside its role", v.id));
            }
            let round_ok = match v.kind {
                TaskKind::Sanitize => v.round == PRE_TRAINING_ROUND,
                _ => (0..policy.rounds as i64).contains(&v.round),
            };
            if !round_ok {
                self.f.fail([v.participant.as_str()], format!("{} is outside the job's rounds", v.id));
            }
        }

        for r in 0..policy.rounds as i64 {
            for p in &policy.providers {
                for kind in [TaskKind::Train, TaskKind::Dp] {
                    let n = self.edg.find(kind, p, r).len();
                    if n != 1 {
                        self.f.fail([p.as_str()], format!("missing vertices: expected one {kind} record for {p} in round {r}, found {n}"));
                    }
                }
            }
            for kind in [TaskKind::Aggregate, TaskKind::ModelUpdate] {
                let n = self.edg.find(kind, mp, r).len();
                if n != 1 {
                    self.f.fail([mp], format!("missing vertices: expected one {kind} record for {mp} in round {r}, found {n}"));
                }
            }
        }

        for r in 0..policy.rounds as i64 {
            let prev_update = if r == 0 { None } else { self.one(TaskKind::ModelUpdate, mp, r - 1) };
            let initial = (r == 0).then_some(policy.initial_model);
            for p in &policy.providers {
                let train = self.one(TaskKind::Train, p, r);
                if let Some(t) = train {
                    self.expect_params(t, TaskKind::Train, policy.train_params);
                    self.expect_supplier(t, labels::GLOBAL_MODEL, prev_update, initial, mp);
                }
                if let Some(d) = self.one(TaskKind::Dp, p, r) {
                    self.expect_params(d, TaskKind::Dp, policy.dp_params);
                    let v = &self.edg.vertices[d];
                    let diffs: Vec<&String> = v.inputs.keys().filter(|l| labels::diff_provider(l).is_some()).collect();
                    if diffs.len() != 1 || *diffs[0] != labels::diff(p) {
                        self.f.fail([p.as_str()], format!("{} did not take exactly {}'s diff", v.id, p));
                    } else {
                        self.expect_supplier(d, &labels::diff(p), train, None, p);
                    }
                }
            }
            if let Some(a) = self.one(TaskKind::Aggregate, mp, r) {
                let v = &self.edg.vertices[a];
                let present: BTreeSet<&str> = v.inputs.keys().filter_map(|l| labels::diff_provider(l)).collect();
                for p in &policy.providers {
                    if !present.contains(p.as_str()) {
                        self.f.fail([mp], format!("{} is missing the update of {p}", v.id));
                    }
                }
                for extra in present.iter().filter(|p| !policy.providers.iter().any(|q| q == *p)) {
                    self.f.fail([mp], format!("{} aggregated an update from unknown provider {extra}", v.id));
                }
                for p in &policy.providers {
                    if present.contains(p.as_str()) {
                        let dp = self.one(TaskKind::Dp, p, r);
                        self.expect_supplier(a, &labels::diff(p), dp, None, p);
                    }
                }
            }
            if let Some(u) = self.one(TaskKind::ModelUpdate, mp, r) {
                let agg = self.one(TaskKind::Aggregate, mp, r);
                self.expect_supplier(u, labels::AGG_DIFF, agg, None, mp);
                self.expect_supplier(u, labels::GLOBAL_MODEL, prev_update, initial, mp);
            }
        }
        self.f.finish(3)
    }
}

/// Each round trained, applied DP to every provider's update, aggregated all
/// of them and updated the model, with the agreed parameters.
pub fn check_claim3(edg: &Edg, policy: &AuditPolicy) -> ClaimResult {
    PipelineCheck { edg, policy, f: Findings::default() }.run()
}

fn train_commitments<'a>(edg: &'a Edg, provider: &'a str) -> impl Iterator<Item = (&'a Vertex, Option<&'a Digest>)> {
    edg.vertices
        .iter()
        .filter(move |v| v.kind == TaskKind::Train && v.participant == provider)
        .map(|v| (v, v.inputs.get(labels::DATASET_COMMITMENT)))
}

/// Commitments produced by the provider's sanitizer from its registered dataset.
fn sanitized_commitments(edg: &Edg, provider: &str, registered: Option<&Digest>) -> BTreeSet<Digest> {
    edg.vertices
        .iter()
        .filter(|v| v.kind == TaskKind::Sanitize && v.participant == provider)
        .filter(|v| registered.is_some() && v.inputs.get(labels::DATASET_COMMITMENT) == registered)
        .filter_map(|v| v.outputs.get(labels::DATASET_COMMITMENT).copied())
        .collect()
}

/// Every provider trained on its registered dataset, or the sanitized form
/// of it, and on the same dataset in every round.
pub fn check_claim4(edg: &Edg, policy: &AuditPolicy) -> ClaimResult {
    let mut f = Findings::default();
    for p in &policy.providers {
        let registered = policy.registered.get(p);
        let mut accepted = sanitized_commitments(edg, p, registered);
        accepted.extend(registered.copied());
        let mut seen = BTreeSet::new();
        if train_commitments(edg, p).next().is_none() {
            f.fail([p.as_str()], format!("missing vertices: no verified train record for {p}"));
        }
        for (v, c) in train_commitments(edg, p) {
            match c {
                None => f.fail([p.as_str()], format!("{} records no dataset commitment", v.id)),
                Some(c) => {
                    seen.insert(*c);
                    if !accepted.contains(c) {
                        f.fail([p.as_str()], format!("{} trained on dataset {} not registered for {p}", v.id, c.short()));
                    }
                }
            }
        }
        if seen.len() > 1 {
            f.fail([p.as_str()], format!("{p} trained on {} different datasets", seen.len()));
        }
    }
    f.finish(4)
}

/// Every provider trained on the sanitizer's output for its registered
/// dataset. Vacuous for jobs without a sanitization stage.
pub fn check_claim5(edg: &Edg, policy: &AuditPolicy) -> ClaimResult {
    let mut f = Findings::default();
    if !policy.sanitization_required {
        return f.finish(5);
    }
    for p in &policy.providers {
        let sanitized = sanitized_commitments(edg, p, policy.registered.get(p));
        if sanitized.is_empty() {
            f.fail([p.as_str()], format!("missing vertices: no verified sanitize record for {p}"));
        }
        if train_commitments(edg, p).next().is_none() {
            f.fail([p.as_str()], format!("missing vertices: no verified train record for {p}"));
        }
        for (v, c) in train_commitments(edg, p) {
            if !c.is_some_and(|c| sanitized.contains(c)) {
                f.fail([p.as_str()], format!("{} trained on a dataset the sanitizer did not produce", v.id));
            }
        }
    }
    f.finish(5)
}

#[derive(Debug, Clone, Serialize)]
pub struct AuditReport {
    pub passed: bool,
    pub claims: Vec<ClaimResult>,
    pub rejected_records: usize,
    pub malformed_lines: usize,
    pub rejected: Vec<RejectedRecord>,
    pub edg_stats: EdgStats,
}

impl AuditReport {
    pub fn claim(&self, id: u8) -> Option<&ClaimResult> {
        self.claims.iter().find(|c| c.id == id)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Audit `records` (plus `malformed_lines` store lines that did not parse).
/// The audit passes only if every claim holds and no record was rejected.
pub fn audit(records: &[EndorsedEdr], malformed_lines: usize, policy: &AuditPolicy) -> AuditReport {
    let (edg, rejected) = build_edg(records, &policy.platform_root, &policy.issuers);
    audit_edg(&edg, rejected, malformed_lines, policy)
}

pub fn audit_edg(edg: &Edg, rejected: Vec<RejectedRecord>, malformed_lines: usize, policy: &AuditPolicy) -> AuditReport {
    let claims = vec![
        check_claim1(edg, policy),
        check_claim2(edg, policy),
        check_claim3(edg, policy),
        check_claim4(edg, policy),
        check_claim5(edg, policy),
    ];
    AuditReport {
        passed: claims.iter().all(ClaimResult::passed) && rejected.is_empty() && malformed_lines == 0,
        claims,
        rejected_records: rejected.len(),
        malformed_lines,
        rejected,
        edg_stats: edg.stats(),
    }
}

fn dot_escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"")
}

/// Graphviz rendering of the graph.
pub fn export_dot(edg: &Edg) -> String {
    let mut out = String::from("digraph edg {\n  rankdir=LR;\n  node [shape=box];\n");
    for v in &edg.vertices {
        let _ = writeln!(
            out,
            "  \"{}\" [label=\"{}\\n{}\\nround {}\"];",
            dot_escape(&v.id),
            v.kind,
            dot_escape(&v.participant),
            v.round
        );
    }
    for (&(p, c), labels) in &edg.edges {
        let names: Vec<&str> = labels.iter().map(|(l, _)| l.as_str()).collect();
        let _ = writeln!(
            out,
            "  \"{}\" -> \"{}\" [label=\"{}\"];",
            dot_escape(&edg.vertices[p].id),
            dot_escape(&edg.vertices[c].id),
            dot_escape(&names.join(","))
        );
    }
    out.push_str("}\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::hash_bytes;

    fn vertex(kind: TaskKind, participant: &str, round: i64, inputs: &[(&str, u8)], outputs: &[(&str, u8)]) -> Vertex {
        let map = |xs: &[(&str, u8)]| xs.iter().map(|(l, b)| (l.to_string(), hash_bytes(&[*b]))).collect();
        Vertex::from_edr(&Edr {
            exclave_id: format!("{participant}/{kind}"),
            participant_id: participant.into(),
            task_kind: kind,
            round,
            inputs: map(inputs),
            code: Digest::ZERO,
            outputs: map(outputs),
        })
    }

    #[test]
    fn edges_need_label_digest_and_round() {
        let vs = vec![
            vertex(TaskKind::Train, "a", 0, &[], &[("model:diff:a", 1)]),
            vertex(TaskKind::Dp, "a", 0, &[("model:diff:a", 1)], &[("model:diff:a", 2)]),
            // Same digest under another label: no edge.
            vertex(TaskKind::Dp, "b", 0, &[("model:diff:b", 1)], &[]),
            // Two rounds later: no edge.
            vertex(TaskKind::Dp, "a", 2, &[("model:diff:a", 1)], &[]),
        ];
        let e = edges_naive(&vs);
        assert_eq!(e.len(), 1);
        assert!(e.contains_key(&(0, 1)));
        assert_eq!(e, edges_indexed(&vs));
    }

    #[test]
    fn pre_training_outputs_reach_every_round() {
        let vs = vec![
            vertex(TaskKind::Sanitize, "a", -1, &[], &[("dataset:commitment", 9)]),
            vertex(TaskKind::Train, "a", 5, &[("dataset:commitment", 9)], &[]),
        ];
        assert_eq!(edges_indexed(&vs).len(), 1);
    }

    #[test]
    fn graph_dedups_and_is_order_independent() {
        let a = vertex(TaskKind::Train, "a", 0, &[], &[("model:diff:a", 1)]);
        let b = vertex(TaskKind::Dp, "a", 0, &[("model:diff:a", 1)], &[]);
        let g1 = Edg::new(vec![a.clone(), b.clone(), a.clone()]);
        let g2 = Edg::new(vec![b, a]);
        assert_eq!(g1.vertices, g2.vertices);
        assert_eq!(g1.edges, g2.edges);
        assert_eq!(g1.suppliers(1, "model:diff:a"), &[0]);
    }

    #[test]
    fn dot_lists_vertices_and_edges() {
        let g = Edg::new(vec![
            vertex(TaskKind::Train, "a", 0, &[], &[("model:diff:a", 1)]),
            vertex(TaskKind::Dp, "a", 0, &[("model:diff:a", 1)], &[]),
        ]);
        let dot = export_dot(&g);
        assert!(dot.starts_with("digraph edg {"));
        assert_eq!(dot.matches(" -> ").count(), 1);
        assert!(dot.contains("model:diff:a"));
    }
}
