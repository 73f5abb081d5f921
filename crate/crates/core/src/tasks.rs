//! Deterministic FL task kernels: local logistic-regression training,
//! sparse-vector DP release, FedAvg, model update and denylist sanitization.
//!
//! All kernels are generic over [`Scalar`]; the protocol runs on `f64`
//! (see [`crate::ModelVector`]). Reductions are sequential and left to right
//! so results are bit-reproducible.

use std::fmt::Debug;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand_chacha::ChaCha20Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::storage::{DatasetHandle, TrainingRow};

/// Name of the generator behind every seeded draw. Recorded in job files.
pub const PRNG_ALGORITHM: &str = "chacha20";

pub trait Scalar: Float + FromPrimitive + ToPrimitive + Debug + Send + Sync + 'static {
    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("f64 converts to every float type")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("float converts to f64")
    }
}

impl<T> Scalar for T where T: Float + FromPrimitive + ToPrimitive + Debug + Send + Sync + 'static {}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<S> {
    pub params: Vec<S>,
}

impl<S: Scalar> Model<S> {
    pub fn new(params: Vec<S>) -> Self {
        Model { params }
    }

    pub fn zeros(dim: usize) -> Self {
        Model { params: vec![S::zero(); dim] }
    }

    pub fn dim(&self) -> usize {
        self.params.len()
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|v| v.is_finite())
    }

    fn check_dim(&self, other: &Self) -> Result<()> {
        if self.dim() != other.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), got: other.dim() });
        }
        Ok(())
    }

    /// Wire form: `u32` dimension then little-endian `f64` values.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + 8 * self.dim());
        out.extend_from_slice(&(self.dim() as u32).to_le_bytes());
        for v in &self.params {
            out.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(Error::Malformed("model payload shorter than header".into()));
        }
        let dim = u32::from_le_bytes(bytes[..4].try_into().expect("4 bytes")) as usize;
        let body = &bytes[4..];
        if body.len() != dim * 8 {
            return Err(Error::Malformed(format!(
                "model payload declares dimension {dim} but carries {} bytes",
                body.len()
            )));
        }
        let params: Vec<S> = body
            .chunks_exact(8)
            .map(|c| S::from_f64_lossy(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
            .collect();
        let m = Model { params };
        if !m.is_finite() {
            return Err(Error::NonFinite);
        }
        Ok(m)
    }
}

/// Seeded generator used by every randomized task.
pub struct TaskRng(ChaCha20Rng);

impl TaskRng {
    pub fn new(seed: u64) -> Self {
        TaskRng(ChaCha20Rng::seed_from_u64(seed))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    /// Uniform on the open interval (0, 1).
    pub fn open01(&mut self) -> f64 {
        ((self.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform index in `0..bound`.
    pub fn index(&mut self, bound: usize) -> usize {
        ((self.next_u64() as u128 * bound as u128) >> 64) as usize
    }

    /// Laplace(0, scale) by inverse CDF.
    pub fn laplace(&mut self, scale: f64) -> f64 {
        let u = self.open01() - 0.5;
        -scale * u.signum() * (1.0 - 2.0 * u.abs()).ln()
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.index(i + 1);
            items.swap(i, j);
        }
    }
}

/// Deterministic starting model with small uniform weights in [-0.01, 0.01).
pub fn initial_model<S: Scalar>(dim: usize, seed: u64) -> Model<S> {
    let mut rng = TaskRng::new(seed);
    Model { params: (0..dim).map(|_| S::from_f64_lossy((rng.open01() - 0.5) * 0.02)).collect() }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub learning_rate: f64,
    pub steps: u32,
    pub batch_size: u32,
    pub l2: f64,
    pub seed: u64,
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidParam("learning_rate must be finite and >= 0".into()));
        }
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return Err(Error::InvalidParam("l2 must be finite and >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidParam("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpParams {
    pub threshold: f64,
    /// Laplace scale for the threshold and per-coordinate noise. Zero disables
    /// the mechanism.
    pub scale: f64,
    pub max_releases: u32,
    pub release_scale: f64,
    pub seed: u64,
}

impl DpParams {
    pub fn disabled() -> Self {
        DpParams { threshold: 0.0, scale: 0.0, max_releases: 0, release_scale: 0.0, seed: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.threshold.is_finite() {
            return Err(Error::InvalidParam("threshold must be finite".into()));
        }
        if !(self.scale >= 0.0 && self.scale.is_finite() && self.release_scale >= 0.0 && self.release_scale.is_finite()) {
            return Err(Error::InvalidParam("DP scales must be finite and >= 0".into()));
        }
        Ok(())
    }
}

fn sigmoid<S: Scalar>(z: S) -> S {
    if z >= S::zero() {
        S::one() / (S::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (S::one() + e)
    }
}

/// Feature row with the bias input appended, plus a ±1 label.
struct Sample<S> {
    x: Vec<S>,
    y: S,
}

fn to_samples<S: Scalar>(rows: &[TrainingRow]) -> Vec<Sample<S>> {
    rows.iter()
        .map(|r| {
            let mut x: Vec<S> = r.features().iter().map(|&v| S::from_f64_lossy(v)).collect();
            x.push(S::one());
            let y = if r.label() > 0.0 { S::one() } else { -S::one() };
            Sample { x, y }
        })
        .collect()
}

fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    a.iter().zip(b).fold(S::zero(), |acc, (&x, &y)| acc + x * y)
}

fn add_sample_gradient<S: Scalar>(grad: &mut [S], w: &[S], s: &Sample<S>) {
    let margin = s.y * dot(&s.x, w);
    let coef = -s.y * sigmoid(-margin);
    for (g, &xi) in grad.iter_mut().zip(&s.x) {
        *g = *g + coef * xi;
    }
}

/// `(1/n) Σ log(1 + exp(-y x·w)) + (l2/2) ‖w‖²` over the given rows.
pub fn logistic_loss<S: Scalar>(w: &Model<S>, rows: &[TrainingRow], l2: S) -> S {
    let samples = to_samples::<S>(rows);
    let n = S::from_usize(samples.len()).expect("row count fits");
    let data = samples.iter().fold(S::zero(), |acc, s| {
        let m = -s.y * dot(&s.x, &w.params);
        // log(1 + e^m) without overflow.
        let term = if m > S::zero() { m + (-m).exp().ln_1p() } else { m.exp().ln_1p() };
        acc + term
    });
    let half = S::from_f64_lossy(0.5);
    data / n + half * l2 * dot(&w.params, &w.params)
}

/// Full-batch analytic gradient of [`logistic_loss`].
pub fn logistic_gradient<S: Scalar>(w: &Model<S>, rows: &[TrainingRow], l2: S) -> Model<S> {
    let samples = to_samples::<S>(rows);
    let n = S::from_usize(samples.len()).expect("row count fits");
    let mut grad = vec![S::zero(); w.dim()];
    for s in &samples {
        add_sample_gradient(&mut grad, &w.params, s);
    }
    for (g, &wi) in grad.iter_mut().zip(&w.params) {
        *g = *g / n + l2 * wi;
    }
    Model { params: grad }
}

/// Mini-batch gradient descent on in-memory rows. Returns `w_final - w_global`.
pub fn train_on_rows<S: Scalar>(global: &Model<S>, rows: &[TrainingRow], hp: &Hyperparams) -> Result<Model<S>> {
    hp.validate()?;
    let first = rows.first().ok_or(Error::Empty("training dataset has no records"))?;
    if first.values.len() != global.dim() {
        return Err(Error::DimensionMismatch { expected: global.dim(), got: first.values.len() });
    }
    let samples = to_samples::<S>(rows);
    let lr = S::from_f64_lossy(hp.learning_rate);
    let l2 = S::from_f64_lossy(hp.l2);
    let batch = hp.batch_size as usize;
    let inv_batch = S::one() / S::from_usize(batch).expect("batch size fits");

    let mut rng = TaskRng::new(hp.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    rng.shuffle(&mut order);
    let mut pos = 0;

    let mut w = global.params.clone();
    let mut grad = vec![S::zero(); w.len()];
    for _ in 0..hp.steps {
        grad.iter_mut().for_each(|g| *g = S::zero());
        for _ in 0..batch {
            if pos == order.len() {
                rng.shuffle(&mut order);
                pos = 0;
            }
            add_sample_gradient(&mut grad, &w, &samples[order[pos]]);
            pos += 1;
        }
        for (wi, &gi) in w.iter_mut().zip(&grad) {
            *wi = *wi - lr * (gi * inv_batch + l2 * *wi);
        }
    }

    let diff = Model { params: w.iter().zip(&global.params).map(|(&a, &b)| a - b).collect::<Vec<S>>() };
    if !diff.is_finite() {
        return Err(Error::NonFinite);
    }
    Ok(diff)
}

/// Local training against a mounted dataset. Every record is read through
/// the verified handle.
pub fn local_train<S: Scalar>(global: &Model<S>, data: &mut DatasetHandle, hp: &Hyperparams) -> Result<Model<S>> {
    if data.record_width() != global.dim() {
        return Err(Error::DimensionMismatch { expected: global.dim(), got: data.record_width() });
    }
    let rows = data.read_all()?;
    train_on_rows(global, &rows, hp)
}

/// Sparse-vector release of a model diff. At most `max_releases` coordinates
/// are released (with Laplace noise), every other coordinate is zeroed.
/// With `scale == 0` the input is returned unchanged.
pub fn svt_dp<S: Scalar>(diff: &Model<S>, dp: &DpParams) -> Model<S> {
    if dp.scale == 0.0 {
        return diff.clone();
    }
    let mut rng = TaskRng::new(dp.seed);
    let rho = rng.laplace(dp.scale);
    let bar = dp.threshold + rho;
    let mut releases = 0u32;
    let params = diff
        .params
        .iter()
        .map(|&v| {
            let nu = rng.laplace(2.0 * dp.scale);
            if v.to_f64_lossy().abs() + nu >= bar && releases < dp.max_releases {
                releases += 1;
                v + S::from_f64_lossy(rng.laplace(dp.release_scale))
            } else {
                S::zero()
            }
        })
        .collect();
    Model { params }
}

/// Weighted mean `Σ wₖ vₖ / Σ wₖ`, accumulated as a running mean so that
/// identical inputs come back bit-exactly.
pub fn aggregate_fedavg<S: Scalar>(updates: &[(Model<S>, S)]) -> Result<Model<S>> {
    let (first, _) = updates.first().ok_or(Error::Empty("no updates to aggregate"))?;
    let mut mean = Model::zeros(first.dim());
    let mut total = S::zero();
    for (v, w) in updates {
        first.check_dim(v)?;
        if w.partial_cmp(&S::zero()) != Some(std::cmp::Ordering::Greater) || !w.is_finite() {
            return Err(Error::InvalidParam("aggregation weights must be positive".into()));
        }
        total = total + *w;
        let ratio = *w / total;
        for (m, &x) in mean.params.iter_mut().zip(&v.params) {
            *m = *m + ratio * (x - *m);
        }
    }
    Ok(mean)
}

pub fn model_update<S: Scalar>(prev_global: &Model<S>, agg_diff: &Model<S>) -> Result<Model<S>> {
    prev_global.check_dim(agg_diff)?;
    let out = Model { params: prev_global.params.iter().zip(&agg_diff.params).map(|(&a, &b)| a + b).collect::<Vec<S>>() };
    if !out.is_finite() {
        return Err(Error::NonFinite);
    }
    Ok(out)
}

fn contains(haystack: &[u8], needle: &[u8]) -> bool {
    needle.is_empty() || haystack.windows(needle.len()).any(|w| w == needle)
}

/// Drop every record whose text column contains a denylisted byte pattern.
/// An empty pattern matches every record.
pub fn sanitize(rows: &[TrainingRow], denylist: &[Vec<u8>]) -> Vec<TrainingRow> {
    rows.iter()
        .filter(|r| !denylist.iter().any(|p| contains(r.text.as_bytes(), p)))
        .cloned()
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(v: &[f64]) -> Model<f64> {
        Model::new(v.to_vec())
    }

    fn hp(lr: f64, steps: u32) -> Hyperparams {
        Hyperparams { learning_rate: lr, steps, batch_size: 4, l2: 0.01, seed: 9 }
    }

    fn rows(n: usize, features: usize, seed: u64) -> Vec<TrainingRow> {
        let mut rng = TaskRng::new(seed);
        (0..n)
            .map(|_| {
                let mut v: Vec<f64> = (0..features).map(|_| rng.open01() * 2.0 - 1.0).collect();
                let label = if v.iter().sum::<f64>() > 0.0 { 1.0 } else { -1.0 };
                v.push(label);
                TrainingRow::new(v)
            })
            .collect()
    }

    #[test]
    fn zero_lr_or_steps_gives_zero_diff() {
        let data = rows(20, 3, 1);
        let g = m(&[0.1, -0.2, 0.3, 0.0]);
        assert_eq!(train_on_rows(&g, &data, &hp(0.0, 10)).unwrap(), Model::zeros(4));
        assert_eq!(train_on_rows(&g, &data, &hp(0.5, 0)).unwrap(), Model::zeros(4));
    }

    #[test]
    fn single_step_single_sample() {
        // Bias-only model: x = [1], y = +1, w = [0].
        let data = vec![TrainingRow::new(vec![1.0])];
        let h = Hyperparams { learning_rate: 1.0, steps: 1, batch_size: 1, l2: 0.0, seed: 0 };
        let diff = train_on_rows(&m(&[0.0]), &data, &h).unwrap();
        assert_eq!(diff.params, vec![0.5]);

        // Finite-difference oracle for the same gradient.
        let eps = 1e-6;
        let fd = (logistic_loss(&m(&[eps]), &data, 0.0) - logistic_loss(&m(&[-eps]), &data, 0.0)) / (2.0 * eps);
        assert!((fd - (-0.5)).abs() < 1e-9);
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let data = rows(64, 5, 2);
        let g = initial_model::<f64>(6, 3);
        let h = Hyperparams { learning_rate: 0.5, steps: 50, batch_size: 8, l2: 0.001, seed: 5 };
        let d1 = train_on_rows(&g, &data, &h).unwrap();
        let d2 = train_on_rows(&g, &data, &h).unwrap();
        assert_eq!(d1.to_bytes(), d2.to_bytes());
        let trained = model_update(&g, &d1).unwrap();
        assert!(logistic_loss(&trained, &data, 0.001) < logistic_loss(&g, &data, 0.001));
    }

    #[test]
    fn training_dimension_mismatch() {
        let data = rows(4, 3, 2);
        assert!(matches!(train_on_rows(&m(&[0.0; 3]), &data, &hp(0.1, 1)), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn training_rejects_bad_hyperparams() {
        let data = rows(4, 1, 2);
        let mut h = hp(0.1, 1);
        h.batch_size = 0;
        assert!(train_on_rows(&m(&[0.0; 2]), &data, &h).is_err());
        h = hp(-1.0, 1);
        assert!(train_on_rows(&m(&[0.0; 2]), &data, &h).is_err());
    }

    #[test]
    fn training_works_in_f32() {
        let data = rows(32, 2, 7);
        let g = initial_model::<f32>(3, 1);
        let d = train_on_rows(&g, &data, &hp(0.2, 20)).unwrap();
        assert!(d.is_finite());
        let d64 = train_on_rows(&initial_model::<f64>(3, 1), &data, &hp(0.2, 20)).unwrap();
        for (a, b) in d.params.iter().zip(&d64.params) {
            assert!((*a as f64 - b).abs() < 1e-4);
        }
    }

    #[test]
    fn svt_special_cases() {
        let diff = m(&[0.5, -1.0, 2.0, 0.0, 3.0]);
        let off = DpParams { scale: 0.0, ..DpParams::disabled() };
        assert_eq!(svt_dp(&diff, &off), diff);
        let capped = DpParams { threshold: -100.0, scale: 1.0, max_releases: 0, release_scale: 1.0, seed: 1 };
        assert_eq!(svt_dp(&diff, &capped), Model::zeros(5));
    }

    #[test]
    fn svt_release_cap() {
        let diff = Model::new((0..50).map(|i| i as f64).collect::<Vec<_>>());
        for seed in 0..20 {
            let dp = DpParams { threshold: 1.0, scale: 0.5, max_releases: 7, release_scale: 0.1, seed };
            let out = svt_dp(&diff, &dp);
            assert!(out.params.iter().filter(|v| **v != 0.0).count() <= 7);
            assert_eq!(out, svt_dp(&diff, &dp));
        }
    }

    #[test]
    fn fedavg_examples() {
        let out = aggregate_fedavg(&[(m(&[1.0, 2.0]), 1.0), (m(&[3.0, 4.0]), 1.0)]).unwrap();
        assert_eq!(out.params, vec![2.0, 3.0]);
        let single = aggregate_fedavg(&[(m(&[1.5, -2.0]), 3.0)]).unwrap();
        assert_eq!(single.params, vec![1.5, -2.0]);
        let weighted = aggregate_fedavg(&[(m(&[0.0, 0.0]), 0.25), (m(&[4.0, 8.0]), 0.75)]).unwrap();
        assert_eq!(weighted.params, vec![3.0, 6.0]);
    }

    #[test]
    fn fedavg_errors() {
        assert!(matches!(aggregate_fedavg::<f64>(&[]), Err(Error::Empty(_))));
        assert!(matches!(
            aggregate_fedavg(&[(m(&[1.0]), 1.0), (m(&[1.0, 2.0]), 1.0)]),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(aggregate_fedavg(&[(m(&[1.0]), 0.0)]).is_err());
    }

    #[test]
    fn fedavg_identical_copies_are_exact() {
        let v = m(&[0.1, 1.0 / 3.0, -7.25e-5, 123456.789]);
        for n in 1..9 {
            let ups: Vec<_> = (0..n).map(|_| (v.clone(), 4.0)).collect();
            assert_eq!(aggregate_fedavg(&ups).unwrap(), v);
            let ups: Vec<_> = (0..n).map(|i| (v.clone(), 0.3 + i as f64)).collect();
            let out = aggregate_fedavg(&ups).unwrap();
            for (a, b) in out.params.iter().zip(&v.params) {
                assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
            }
        }
    }

    #[test]
    fn model_update_examples() {
        assert_eq!(model_update(&m(&[1.0, 1.0]), &m(&[0.0, 0.0])).unwrap(), m(&[1.0, 1.0]));
        assert_eq!(model_update(&m(&[0.0, 0.0]), &m(&[2.0, -1.0])).unwrap(), m(&[2.0, -1.0]));
        assert_eq!(model_update(&m(&[1.0, 1.0]), &m(&[2.0, -1.0])).unwrap(), m(&[3.0, 0.0]));
        assert!(model_update(&m(&[1.0]), &m(&[1.0, 2.0])).is_err());
    }

    #[test]
    fn sanitize_rules() {
        let rs = vec![
            TrainingRow::with_text(vec![1.0], "fine"),
            TrainingRow::with_text(vec![2.0], "this is BAD"),
            TrainingRow::with_text(vec![3.0], "also fine"),
        ];
        assert_eq!(sanitize(&rs, &[]), rs);
        let out = sanitize(&rs, &[b"BAD".to_vec()]);
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].values, vec![1.0]);
        assert_eq!(out[1].values, vec![3.0]);
        assert!(sanitize(&rs, &[b"fine".to_vec(), b"BAD".to_vec()]).is_empty());
    }

    #[test]
    fn model_bytes() {
        let v = m(&[1.0, -0.5]);
        let b = v.to_bytes();
        assert_eq!(b.len(), 4 + 16);
        assert_eq!(&b[..4], &2u32.to_le_bytes());
        assert_eq!(Model::<f64>::from_bytes(&b).unwrap(), v);
        assert!(Model::<f64>::from_bytes(&b[..10]).is_err());
        let mut nan = b.clone();
        nan[4..12].copy_from_slice(&f64::NAN.to_le_bytes());
        assert!(matches!(Model::<f64>::from_bytes(&nan), Err(Error::NonFinite)));
    }

    #[test]
    fn open01_bounds_and_index_range() {
        let mut r = TaskRng::new(0);
        for _ in 0..10_000 {
            let u = r.open01();
            assert!(u > 0.0 && u < 1.0);
            assert!(r.index(7) < 7);
        }
    }
}
