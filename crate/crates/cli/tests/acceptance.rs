//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use serde_json::Value;

use vfl_core::attestation::{sp_attest, sp_create, sp_measure_code, verify_report};
use vfl_core::auditor::{edges_indexed, edges_naive, Vertex};
use vfl_core::crypto::{hash_bytes, Digest, KeyPair};
use vfl_core::edr::{edr_endorse, edr_verify, read_ndjson, Edr, EndorsedEdr, IssuerRegistry, TaskKind};
use vfl_core::storage::{merkle_build, merkle_verify_block, mount_dataset, pack_dataset, DatasetImage, TrainingRow, BLOCK_SIZE};
use vfl_core::tasks::{logistic_gradient, logistic_loss, svt_dp, DpParams, Model, TaskRng};

// Pinned tolerances.
const E2E_TIME_LIMIT: Duration = Duration::from_secs(60);
const FAITHFUL_EDRS: usize = 30;
const FAITHFUL_EDRS_SANITIZED: usize = 34;
const DETECTION_SEEDS: [u64; 3] = [1, 2, 3];
const FAITHFUL_CONTROLS: usize = 20;
const EDG_SETS: usize = 200;
const EDG_MAX_VERTICES: usize = 200;
const MERKLE_CORRUPTIONS: usize = 10_000;
const ATTEST_FUZZ_CASES: usize = 1_000;
const GRADIENT_INSTANCES: usize = 100;
const GRADIENT_REL_TOL: f64 = 1e-6;
const FD_STEP: f64 = 1e-5;
const LAPLACE_DRAWS: usize = 1_000_000;
const LAPLACE_SCALE: f64 = 1.5;
const LAPLACE_VAR_TOL: f64 = 0.03;
const HASH_RATIO_RANGE: (f64, f64) = (1.5, 2.5);
const ATTEST_RATIO_LIMIT: f64 = 2.0;
const MIB: usize = 1 << 20;

type Criterion = (&'static str, fn() -> Outcome);

struct Outcome {
    ok: bool,
    detail: String,
}

fn pass(detail: impl Into<String>) -> Outcome {
    Outcome { ok: true, detail: detail.into() }
}

fn fail(detail: impl Into<String>) -> Outcome {
    Outcome { ok: false, detail: detail.into() }
}

fn vfl(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_vfl")).args(args).output().expect("spawn vfl");
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

struct Scenario {
    providers: usize,
    rounds: u32,
    dim: usize,
    records: usize,
    seed: u64,
    sanitize: bool,
}

fn init_job(dir: &Path, sc: &Scenario) -> PathBuf {
    let (p, r, d, n, seed) =
        (sc.providers.to_string(), sc.rounds.to_string(), sc.dim.to_string(), sc.records.to_string(), sc.seed.to_string());
    let mut args = vec![
        "job", "init", "--dir", s(dir), "--providers", &p, "--rounds", &r, "--dim", &d, "--records", &n, "--seed", &seed,
    ];
    if sc.sanitize {
        args.push("--sanitize");
    }
    let (code, _, err) = vfl(&args);
    assert_eq!(code, 0, "job init failed: {err}");
    dir.join("job.json")
}

fn run_and_audit(job: &Path, out: &Path, tag: &str, inject: Option<&Path>) -> (i32, Value, PathBuf, PathBuf) {
    let store = out.join(format!("{tag}.ndjson"));
    let model = out.join(format!("{tag}.model"));
    let report = out.join(format!("{tag}.report.json"));
    let mut args = vec!["job", "run", "--job", s(job), "--store", s(&store), "--model-out", s(&model)];
    if let Some(i) = inject {
        args.extend(["--inject", s(i)]);
    }
    let (code, _, err) = vfl(&args);
    assert_eq!(code, 0, "job run failed: {err}");
    let (code, _, _) = vfl(&["audit", "--job", s(job), "--store", s(&store), "--report", s(&report), "--model", s(&model)]);
    let report: Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    (code, report, store, model)
}

fn claim(report: &Value, id: u64) -> &Value {
    report["claims"].as_array().unwrap().iter().find(|c| c["id"] == id).unwrap()
}

fn claim_failed_naming(report: &Value, id: u64, target: &str) -> bool {
    let c = claim(report, id);
    let names = |key: &str| c[key].as_array().unwrap().iter().any(|v| v.as_str().unwrap().contains(target));
    c["status"] == "fail" && (names("blamed") || names("evidence"))
}

fn all_claims_pass(report: &Value) -> bool {
    report["claims"].as_array().unwrap().iter().all(|c| c["status"] == "pass")
}

fn digest_multiset(store: &Path) -> BTreeMap<Digest, usize> {
    let mut m = BTreeMap::new();
    for r in read_ndjson(store).unwrap().records {
        *m.entry(r.digest()).or_insert(0) += 1;
    }
    m
}

fn criterion1() -> Outcome {
    let mut notes = Vec::new();
    for (sanitize, expected) in [(false, FAITHFUL_EDRS), (true, FAITHFUL_EDRS_SANITIZED)] {
        let dir = tempfile::tempdir().unwrap();
        let job = init_job(dir.path(), &Scenario { providers: 4, rounds: 3, dim: 17, records: 256, seed: 7, sanitize });
        let start = Instant::now();
        let (code, report, store_a, model_a) = run_and_audit(&job, dir.path(), "a", None);
        let elapsed = start.elapsed();
        let (_, _, store_b, model_b) = run_and_audit(&job, dir.path(), "b", None);
        let edrs = read_ndjson(&store_a).unwrap().records.len();
        let same_model = std::fs::read(&model_a).unwrap() == std::fs::read(&model_b).unwrap();
        let same_store = digest_multiset(&store_a) == digest_multiset(&store_b);
        if code != 0 || !all_claims_pass(&report) {
            return fail(format!("sanitize={sanitize}: audit exit {code}"));
        }
        if elapsed >= E2E_TIME_LIMIT {
            return fail(format!("sanitize={sanitize}: run+audit took {elapsed:?}"));
        }
        if edrs != expected {
            return fail(format!("sanitize={sanitize}: {edrs} EDRs, expected {expected}"));
        }
        if !same_model || !same_store {
            return fail(format!("sanitize={sanitize}: runs differ (model {same_model}, store {same_store})"));
        }
        notes.push(format!("{edrs} EDRs in {:.2}s", elapsed.as_secs_f64()));
    }
    pass(notes.join(", "))
}

fn criterion2() -> Outcome {
    // (kind, claims that may carry the detection)
    let matrix: [(&str, &[u64]); 7] = [
        ("forge_edr", &[2, 3]),
        ("transit_tamper", &[2]),
        ("skip_dp", &[3]),
        ("drop_update", &[3]),
        ("dataset_swap", &[4]),
        ("skip_sanitization", &[5]),
        ("code_tamper", &[1]),
    ];
    let mut detected = 0;
    for seed in DETECTION_SEEDS {
        let dir = tempfile::tempdir().unwrap();
        let job = init_job(dir.path(), &Scenario { providers: 4, rounds: 3, dim: 9, records: 64, seed, sanitize: true });
        for (i, (kind, claims)) in matrix.iter().enumerate() {
            let target = format!("dp{}", (seed as usize + i) % 4);
            let script = dir.path().join(format!("{kind}.json"));
            let body = serde_json::json!({"injections": [{"kind": kind, "target": target, "round": 1}]});
            std::fs::write(&script, body.to_string()).unwrap();
            let (code, report, _, _) = run_and_audit(&job, dir.path(), kind, Some(&script));
            if code != 1 {
                return fail(format!("{kind} seed {seed}: audit exit {code}"));
            }
            if !claims.iter().any(|&c| claim_failed_naming(&report, c, &target)) {
                return fail(format!("{kind} seed {seed}: claims {claims:?} did not fail naming {target}"));
            }
            if *kind == "forge_edr" && report["rejected_records"].as_u64() != Some(1) {
                return fail(format!("forge_edr seed {seed}: forged record not rejected"));
            }
            detected += 1;
        }
    }
    for i in 0..FAITHFUL_CONTROLS {
        let dir = tempfile::tempdir().unwrap();
        let sc = Scenario {
            providers: 2 + i % 4,
            rounds: 1 + (i / 4 % 4) as u32,
            dim: 5 + i % 7,
            records: 32 + 8 * i,
            seed: 100 + i as u64,
            sanitize: i % 2 == 1,
        };
        let job = init_job(dir.path(), &sc);
        let (code, report, _, _) = run_and_audit(&job, dir.path(), "faithful", None);
        if code != 0 || !all_claims_pass(&report) {
            return fail(format!("false positive on control {i} (P={}, R={})", sc.providers, sc.rounds));
        }
    }
    pass(format!("{detected}/21 deviations detected, 0/{FAITHFUL_CONTROLS} false positives"))
}

fn random_vertex(rng: &mut TaskRng, i: usize) -> Vertex {
    const LABELS: [&str; 4] = ["model:global", "model:diff:a", "model:agg_diff", "dataset:commitment"];
    let map = |rng: &mut TaskRng| {
        let n = rng.index(4);
        (0..n)
            .map(|_| (LABELS[rng.index(LABELS.len())].to_string(), hash_bytes(&[rng.index(6) as u8])))
            .collect::<BTreeMap<_, _>>()
    };
    let inputs = map(rng);
    let outputs = map(rng);
    Vertex::from_edr(&Edr {
        exclave_id: format!("x{i}"),
        participant_id: format!("p{}", rng.index(3)),
        task_kind: TaskKind::ALL[rng.index(5)],
        round: rng.index(5) as i64 - 1,
        inputs,
        code: Digest::ZERO,
        outputs,
    })
}

fn criterion3() -> Outcome {
    let mut rng = TaskRng::new(3);
    let mut edges = 0;
    for set in 0..EDG_SETS {
        let n = rng.index(EDG_MAX_VERTICES + 1);
        let vs: Vec<Vertex> = (0..n).map(|i| random_vertex(&mut rng, i)).collect();
        let naive = edges_naive(&vs);
        if naive != edges_indexed(&vs) {
            return fail(format!("set {set} ({n} vertices) differs"));
        }
        edges += naive.len();
    }
    pass(format!("{EDG_SETS} sets equal, {edges} edges compared"))
}

fn criterion4() -> Outcome {
    let mut rng = TaskRng::new(4);
    let rows: Vec<TrainingRow> = (0..600)
        .map(|i| TrainingRow::with_text((0..6).map(|_| rng.open01() * 4.0 - 2.0).collect(), format!("r{i}")))
        .collect();
    let (image, commitment) = pack_dataset(&rows, [9; 16]).unwrap();
    let bytes = image.to_bytes();
    let decoded = DatasetImage::from_bytes(&bytes).unwrap();
    let mut handle = mount_dataset(&decoded, &commitment).unwrap();
    if handle.read_all().unwrap() != rows || decoded.decode_rows_unverified() != rows {
        return fail("pack/read round trip lost data");
    }
    let blocks: Vec<&[u8]> = image.payload().chunks(BLOCK_SIZE).collect();
    let tree = merkle_build(&blocks).unwrap();
    for (i, b) in blocks.iter().enumerate() {
        if !merkle_verify_block(&tree.root(), i as u64, b, &tree.proof(i as u64).unwrap()) {
            return fail(format!("honest proof for block {i} rejected"));
        }
    }
    for case in 0..MERKLE_CORRUPTIONS {
        let bit = rng.index(bytes.len() * 8);
        let mut corrupted = bytes.clone();
        corrupted[bit / 8] ^= 1 << (bit % 8);
        let mounted = DatasetImage::from_bytes(&corrupted)
            .and_then(|img| mount_dataset(&img, &commitment))
            .and_then(|mut h| h.read_all());
        if mounted.is_ok() {
            return fail(format!("corruption {case} (bit {bit}) undetected on mount"));
        }
        let block = rng.index(blocks.len());
        let mut b = blocks[block].to_vec();
        let bit = rng.index(b.len() * 8);
        b[bit / 8] ^= 1 << (bit % 8);
        if merkle_verify_block(&tree.root(), block as u64, &b, &tree.proof(block as u64).unwrap()) {
            return fail(format!("corrupted block {block} passed its proof"));
        }
    }
    pass(format!("{MERKLE_CORRUPTIONS} image and {MERKLE_CORRUPTIONS} block corruptions detected, {} proofs verify", blocks.len()))
}

fn criterion5() -> Outcome {
    let root = KeyPair::from_seed(&[1; 32]);
    let issuer = KeyPair::from_seed(&[2; 32]);
    let registry: IssuerRegistry = [("dp0".to_string(), issuer.verify_key())].into_iter().collect();
    let edr = Edr {
        exclave_id: "dp0/train".into(),
        participant_id: "dp0".into(),
        task_kind: TaskKind::Train,
        round: 2,
        inputs: [("model:global".to_string(), hash_bytes(b"g")), ("dataset:commitment".to_string(), hash_bytes(b"c"))]
            .into_iter()
            .collect(),
        code: hash_bytes(b"code"),
        outputs: [("model:diff:dp0".to_string(), hash_bytes(b"d"))].into_iter().collect(),
    };
    let (mut sp, _) = sp_create(&root, &[3; 32]);
    sp_measure_code(&mut sp, &edr.code).unwrap();
    let report = sp_attest(&mut sp, &vfl_core::edr::edr_digest(&edr)).unwrap();
    if !verify_report(&report, &root.verify_key()) {
        return fail("honest report rejected");
    }
    let endorsed = edr_endorse(edr.clone(), report.clone(), &issuer, "dp0").unwrap();
    if !edr_verify(&endorsed, &root.verify_key(), &registry) {
        return fail("honest EDR rejected");
    }
    let line = endorsed.to_json_line().into_bytes();
    let mut rng = TaskRng::new(5);
    for case in 0..ATTEST_FUZZ_CASES {
        let mut m = line.clone();
        let at = rng.index(m.len());
        m[at] ^= 1 + rng.index(255) as u8;
        let accepted = std::str::from_utf8(&m)
            .ok()
            .and_then(|t| serde_json::from_str::<EndorsedEdr>(t).ok())
            .is_some_and(|e| edr_verify(&e, &root.verify_key(), &registry));
        if accepted {
            return fail(format!("mutation {case} at byte {at} accepted"));
        }
    }
    let rogue = KeyPair::from_seed(&[4; 32]);
    let (mut rogue_sp, _) = sp_create(&rogue, &[3; 32]);
    sp_measure_code(&mut rogue_sp, &edr.code).unwrap();
    let rogue_report = sp_attest(&mut rogue_sp, &vfl_core::edr::edr_digest(&edr)).unwrap();
    if verify_report(&rogue_report, &root.verify_key()) {
        return fail("report from unendorsed key accepted");
    }
    let rogue_edr = edr_endorse(edr, rogue_report, &issuer, "dp0").unwrap();
    if edr_verify(&rogue_edr, &root.verify_key(), &registry) {
        return fail("EDR attested by unendorsed key accepted");
    }
    pass(format!("honest verify, {ATTEST_FUZZ_CASES}/{ATTEST_FUZZ_CASES} mutations rejected, unendorsed key rejected"))
}

fn criterion6() -> Outcome {
    let mut rng = TaskRng::new(6);
    let mut worst = 0.0f64;
    for _ in 0..GRADIENT_INSTANCES {
        let dim = 2 + rng.index(10);
        let rows: Vec<TrainingRow> = (0..1 + rng.index(20))
            .map(|_| {
                let mut v: Vec<f64> = (0..dim - 1).map(|_| rng.open01() * 4.0 - 2.0).collect();
                v.push((rng.index(2)) as f64);
                TrainingRow::new(v)
            })
            .collect();
        let w = Model::new((0..dim).map(|_| rng.open01() * 2.0 - 1.0).collect::<Vec<f64>>());
        let l2 = rng.open01() * 0.1;
        let g = logistic_gradient(&w, &rows, l2);
        let mut num = 0.0f64;
        let mut den = 0.0f64;
        for k in 0..dim {
            let mut plus = w.clone();
            plus.params[k] += FD_STEP;
            let mut minus = w.clone();
            minus.params[k] -= FD_STEP;
            let fd = (logistic_loss(&plus, &rows, l2) - logistic_loss(&minus, &rows, l2)) / (2.0 * FD_STEP);
            num += (g.params[k] - fd).powi(2);
            den += g.params[k].powi(2);
        }
        worst = worst.max(num.sqrt() / den.sqrt().max(1e-12));
    }
    if worst > GRADIENT_REL_TOL {
        return fail(format!("gradient relative error {worst:.3e}"));
    }

    let mut lap = TaskRng::new(66);
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..LAPLACE_DRAWS {
        let x = lap.laplace(LAPLACE_SCALE);
        sum += x;
        sum_sq += x * x;
    }
    let n = LAPLACE_DRAWS as f64;
    let var = sum_sq / n - (sum / n).powi(2);
    let expected = 2.0 * LAPLACE_SCALE * LAPLACE_SCALE;
    let var_err = (var / expected - 1.0).abs();
    if var_err > LAPLACE_VAR_TOL {
        return fail(format!("Laplace variance {var:.4} vs {expected:.4}"));
    }

    let diff = Model::new(vec![0.3, -2.0, 0.0, 5.5, -0.01]);
    let identity = svt_dp(&diff, &DpParams { threshold: 0.1, scale: 0.0, max_releases: 3, release_scale: 0.5, seed: 1 });
    let zeroed = svt_dp(&diff, &DpParams { threshold: 0.1, scale: 0.5, max_releases: 0, release_scale: 0.5, seed: 1 });
    if identity != diff || zeroed != Model::zeros(5) {
        return fail("svt_dp boundary cases wrong");
    }
    pass(format!("gradient rel err {worst:.2e}, Laplace variance off by {:.2}%, svt_dp boundaries hold", var_err * 100.0))
}

fn min_time(reps: usize, mut f: impl FnMut()) -> Duration {
    (0..reps)
        .map(|_| {
            let t = Instant::now();
            f();
            t.elapsed()
        })
        .min()
        .unwrap()
}

fn criterion7() -> Outcome {
    let big = vec![0xa5u8; 128 * MIB];
    let t64 = min_time(5, || {
        std::hint::black_box(hash_bytes(&big[..64 * MIB]));
    });
    let t128 = min_time(5, || {
        std::hint::black_box(hash_bytes(&big));
    });
    let hash_ratio = t128.as_secs_f64() / t64.as_secs_f64();
    if !(HASH_RATIO_RANGE.0..=HASH_RATIO_RANGE.1).contains(&hash_ratio) {
        return fail(format!("hash 128 MiB / 64 MiB = {hash_ratio:.2}"));
    }

    let small = hash_bytes(&big[..1024]);
    let large = hash_bytes(&big[..64 * MIB]);
    let root = KeyPair::from_seed(&[7; 32]);
    let (mut sp, _) = sp_create(&root, &[8; 32]);
    sp_measure_code(&mut sp, &hash_bytes(b"code")).unwrap();
    let mut per_call = |d: &Digest| {
        let mut samples: Vec<Duration> = (0..201)
            .map(|_| {
                let t = Instant::now();
                std::hint::black_box(sp_attest(&mut sp, d).unwrap());
                t.elapsed()
            })
            .collect();
        samples.sort();
        samples[100]
    };
    let a = per_call(&small);
    let b = per_call(&large);
    let attest_ratio = a.max(b).as_secs_f64() / a.min(b).as_secs_f64();
    if attest_ratio >= ATTEST_RATIO_LIMIT {
        return fail(format!("sp_attest median {a:?} vs {b:?}"));
    }
    pass(format!("hash ratio {hash_ratio:.2}, attest ratio {attest_ratio:.2} ({a:?} vs {b:?})"))
}

fn main() {
    let criteria: [Criterion; 7] = [
        ("faithful end-to-end run", criterion1),
        ("deviation detection matrix", criterion2),
        ("naive vs indexed EDG edges", criterion3),
        ("Merkle integrity", criterion4),
        ("attestation and EDR verification", criterion5),
        ("numerical kernels", criterion6),
        ("hashing and attestation cost", criterion7),
    ];
    let mut failures = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let out = f();
        let status = if out.ok { "PASS" } else { "FAIL" };
        println!("{status} criterion {}: {name}: {}", i + 1, out.detail);
        failures += usize::from(!out.ok);
    }
    if failures > 0 {
        std::process::exit(1);
    }
}
