//! Device-side mini-batch SGD on the proximally regularized loss, and server-side mixing.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataPoint, LabeledDataset};

#[derive(Debug, Error, PartialEq)]
pub enum TrainError {
    #[error("non-finite loss")]
    NonFiniteLoss,
    #[error("non-finite gradient")]
    NonFiniteGradient,
    #[error("batch exceeds dataset ({batch} > {size})")]
    BatchExceedsDataset { batch: usize, size: usize },
    #[error("batch size must be at least 1")]
    EmptyBatch,
    #[error("number of SGD iterations must be at least 1")]
    ZeroIterations,
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("models belong to different tasks ({0} vs {1})")]
    TaskMismatch(usize, usize),
    #[error("empty dataset or partition")]
    EmptyData,
}

/// Per-sample loss with a hand-coded gradient.
pub trait LossModel: Send + Sync {
    fn dim(&self) -> usize;
    fn loss(&self, w: &[f64], p: &DataPoint) -> f64;
    /// Accumulate `scale * ∇_w loss(w, p)` into `out`.
    fn add_grad(&self, w: &[f64], p: &DataPoint, scale: f64, out: &mut [f64]);
    /// Predicted label, used for accuracy.
    fn predict(&self, w: &[f64], x: &[f64]) -> usize;
}

/// L(w, d) = ½‖w − x_d‖². Labels are ignored; the minimiser of a dataset is its mean.
#[derive(Debug, Clone, Copy)]
pub struct Quadratic {
    pub dim: usize,
}

impl LossModel for Quadratic {
    fn dim(&self) -> usize {
        self.dim
    }

    fn loss(&self, w: &[f64], p: &DataPoint) -> f64 {
        0.5 * w.iter().zip(&p.features).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
    }

    fn add_grad(&self, w: &[f64], p: &DataPoint, scale: f64, out: &mut [f64]) {
        for ((o, a), b) in out.iter_mut().zip(w).zip(&p.features) {
            *o += scale * (a - b);
        }
    }

    fn predict(&self, _w: &[f64], _x: &[f64]) -> usize {
        0
    }
}

/// Multinomial logistic regression with a bias per class.
///
/// Weights are laid out class-major: class c owns `w[c*(F+1) .. (c+1)*(F+1)]`, bias last.
#[derive(Debug, Clone, Copy)]
pub struct Logistic {
    pub features: usize,
    pub classes: usize,
}

impl Logistic {
    fn logits(&self, w: &[f64], x: &[f64]) -> Vec<f64> {
        let stride = self.features + 1;
        (0..self.classes)
            .map(|c| {
                let row = &w[c * stride..(c + 1) * stride];
                row[..self.features].iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + row[self.features]
            })
            .collect()
    }

    fn softmax(z: &[f64]) -> Vec<f64> {
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|v| v / s).collect()
    }
}

impl LossModel for Logistic {
    fn dim(&self) -> usize {
        (self.features + 1) * self.classes
    }

    fn loss(&self, w: &[f64], p: &DataPoint) -> f64 {
        let z = self.logits(w, &p.features);
        let top = (0..z.len()).fold(0, |b, c| if z[c] > z[b] { c } else { b });
        // ln_1p keeps precision when the top class dominates
        let rest: f64 = (0..z.len()).filter(|&c| c != top).map(|c| (z[c] - z[top]).exp()).sum();
        (z[top] - z[p.label]) + rest.ln_1p()
    }

    fn add_grad(&self, w: &[f64], p: &DataPoint, scale: f64, out: &mut [f64]) {
        let prob = Self::softmax(&self.logits(w, &p.features));
        let stride = self.features + 1;
        for c in 0..self.classes {
            let r = prob[c] - if c == p.label { 1.0 } else { 0.0 };
            let k = scale * r;
            let row = &mut out[c * stride..(c + 1) * stride];
            for (o, x) in row[..self.features].iter_mut().zip(&p.features) {
                *o += k * x;
            }
            row[self.features] += k;
        }
    }

    fn predict(&self, w: &[f64], x: &[f64]) -> usize {
        let z = self.logits(w, x);
        let mut best = 0;
        for c in 1..z.len() {
            if z[c] > z[best] {
                best = c;
            }
        }
        best
    }
}

/// Loss family selector used by configuration files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Quadratic,
    Logistic,
}

impl LossKind {
    pub fn model(self, features: usize, classes: usize) -> Box<dyn LossModel> {
        match self {
            LossKind::Quadratic => Box::new(Quadratic { dim: features }),
            LossKind::Logistic => Box::new(Logistic { features, classes }),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub weights: Vec<f64>,
    pub task_id: usize,
    /// Aggregation index the model derives from.
    pub version: usize,
}

impl ModelState {
    pub fn zeros(dim: usize, task_id: usize) -> Self {
        ModelState { weights: vec![0.0; dim], task_id, version: 0 }
    }
}

/// Everything a local run did. `weights[l]` is the iterate at which `grads[l]` was taken.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdTrace {
    pub eta: f64,
    pub weights: Vec<Vec<f64>>,
    pub grads: Vec<Vec<f64>>,
    pub batch_indices: Vec<Vec<usize>>,
}

impl SgdTrace {
    /// η Σ_l g^l, which telescopes to w^0 − w^F.
    pub fn accumulated_step(&self) -> Vec<f64> {
        let mut a = vec![0.0; self.grads.first().map_or(0, Vec::len)];
        for g in &self.grads {
            for (x, v) in a.iter_mut().zip(g) {
                *x += self.eta * v;
            }
        }
        a
    }
}

/// Local-run traces indexed `[device][g]`, present where the device was dispatched at `g`.
pub type SgdTraces = Vec<Vec<Option<SgdTrace>>>;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Mean loss over `data` plus (ρ/2)‖w − w0‖².
pub fn regularized_loss(
    w: &[f64],
    w0: &[f64],
    rho: f64,
    loss: &dyn LossModel,
    data: &LabeledDataset,
) -> Result<f64, TrainError> {
    if w.len() != w0.len() {
        return Err(TrainError::DimensionMismatch(w.len(), w0.len()));
    }
    if data.is_empty() {
        return Err(TrainError::EmptyData);
    }
    let mean = data.points.iter().map(|p| loss.loss(w, p)).sum::<f64>() / data.len() as f64;
    let v = mean + 0.5 * rho * sq_dist(w, w0);
    if v.is_finite() {
        Ok(v)
    } else {
        Err(TrainError::NonFiniteLoss)
    }
}

/// (1/B) Σ_{d∈batch} ∇L(w, d) + ρ(w − w0).
pub fn regularized_gradient(
    w: &[f64],
    w0: &[f64],
    rho: f64,
    loss: &dyn LossModel,
    batch: &[&DataPoint],
) -> Result<Vec<f64>, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    if w.len() != w0.len() {
        return Err(TrainError::DimensionMismatch(w.len(), w0.len()));
    }
    let mut g: Vec<f64> = w.iter().zip(w0).map(|(a, b)| rho * (a - b)).collect();
    let s = 1.0 / batch.len() as f64;
    for p in batch {
        loss.add_grad(w, p, s, &mut g);
    }
    if g.iter().all(|v| v.is_finite()) {
        Ok(g)
    } else {
        Err(TrainError::NonFiniteGradient)
    }
}

/// Mean gradient of the unregularized loss over a whole dataset.
pub fn full_gradient(w: &[f64], loss: &dyn LossModel, data: &LabeledDataset) -> Vec<f64> {
    let mut g = vec![0.0; w.len()];
    let s = 1.0 / data.len() as f64;
    for p in &data.points {
        loss.add_grad(w, p, s, &mut g);
    }
    g
}

/// Run `e` SGD steps from `w0` with mini-batches drawn without replacement per step.
#[allow(clippy::too_many_arguments)]
pub fn local_train(
    w0: &ModelState,
    e: usize,
    batch_size: usize,
    eta: f64,
    rho: f64,
    loss: &dyn LossModel,
    data: &LabeledDataset,
    rng_seed: u64,
) -> Result<(ModelState, SgdTrace), TrainError> {
    if e == 0 {
        return Err(TrainError::ZeroIterations);
    }
    if batch_size == 0 {
        return Err(TrainError::EmptyBatch);
    }
    if batch_size > data.len() {
        return Err(TrainError::BatchExceedsDataset { batch: batch_size, size: data.len() });
    }
    if w0.weights.len() != loss.dim() {
        return Err(TrainError::DimensionMismatch(w0.weights.len(), loss.dim()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut w = w0.weights.clone();
    let mut trace = SgdTrace {
        eta,
        weights: Vec::with_capacity(e),
        grads: Vec::with_capacity(e),
        batch_indices: Vec::with_capacity(e),
    };
    for _ in 0..e {
        let idx = rand::seq::index::sample(&mut rng, data.len(), batch_size).into_vec();
        let batch: Vec<&DataPoint> = idx.iter().map(|&k| &data.points[k]).collect();
        let g = regularized_gradient(&w, &w0.weights, rho, loss, &batch)?;
        let next: Vec<f64> = w.iter().zip(&g).map(|(a, b)| a - eta * b).collect();
        trace.weights.push(std::mem::replace(&mut w, next));
        trace.grads.push(g);
        trace.batch_indices.push(idx);
    }
    Ok((ModelState { weights: w, task_id: w0.task_id, version: w0.version }, trace))
}

/// (1 − α) w_global + α w_local, with the version advanced by one.
pub fn aggregate(
    w_global: &ModelState,
    w_local: &ModelState,
    alpha: f64,
) -> Result<ModelState, TrainError> {
    if w_global.task_id != w_local.task_id {
        return Err(TrainError::TaskMismatch(w_global.task_id, w_local.task_id));
    }
    if w_global.weights.len() != w_local.weights.len() {
        return Err(TrainError::DimensionMismatch(w_global.weights.len(), w_local.weights.len()));
    }
    let weights = w_global
        .weights
        .iter()
        .zip(&w_local.weights)
        .map(|(g, l)| (1.0 - alpha) * g + alpha * l)
        .collect();
    Ok(ModelState { weights, task_id: w_global.task_id, version: w_global.version + 1 })
}

/// Device-mean of per-device mean losses.
pub fn global_loss(
    w: &ModelState,
    partitions: &[LabeledDataset],
    loss: &dyn LossModel,
) -> Result<f64, TrainError> {
    if partitions.is_empty() {
        return Err(TrainError::EmptyData);
    }
    let mut total = 0.0;
    for part in partitions {
        total += regularized_loss(&w.weights, &w.weights, 0.0, loss, part)?;
    }
    Ok(total / partitions.len() as f64)
}

/// Gradient of [`global_loss`].
pub fn global_gradient(
    w: &[f64],
    partitions: &[LabeledDataset],
    loss: &dyn LossModel,
) -> Result<Vec<f64>, TrainError> {
    if partitions.is_empty() || partitions.iter().any(|p| p.is_empty()) {
        return Err(TrainError::EmptyData);
    }
    let mut g = vec![0.0; w.len()];
    let s = 1.0 / partitions.len() as f64;
    for part in partitions {
        for (a, b) in g.iter_mut().zip(full_gradient(w, loss, part)) {
            *a += s * b;
        }
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn origin() -> LabeledDataset {
        LabeledDataset::new(vec![DataPoint { features: vec![0.0], label: 0 }], 1).unwrap()
    }

    #[test]
    fn hand_values() {
        let q = Quadratic { dim: 1 };
        let d = origin();
        assert_eq!(regularized_loss(&[1.0], &[0.0], 1.0, &q, &d).unwrap(), 1.0);
        let g = regularized_gradient(&[1.0], &[1.0], 1.0, &q, &[&d.points[0]]).unwrap();
        assert_eq!(g, vec![1.0]);
        let w0 = ModelState { weights: vec![1.0], task_id: 0, version: 0 };
        let (wf, _) = local_train(&w0, 1, 1, 0.1, 1.0, &q, &d, 0).unwrap();
        assert!((wf.weights[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn aggregation_examples() {
        let m = |w: Vec<f64>| ModelState { weights: w, task_id: 0, version: 3 };
        let a = aggregate(&m(vec![0.0, 2.0]), &m(vec![2.0, 0.0]), 0.5).unwrap();
        assert_eq!(a.weights, vec![1.0, 1.0]);
        assert_eq!(a.version, 4);
        assert_eq!(aggregate(&m(vec![4.0]), &m(vec![0.0]), 0.25).unwrap().weights, vec![3.0]);
        assert_eq!(aggregate(&m(vec![4.0]), &m(vec![0.0]), 0.0).unwrap().weights, vec![4.0]);
    }

    #[test]
    fn batch_larger_than_data_is_rejected() {
        let q = Quadratic { dim: 1 };
        let w0 = ModelState::zeros(1, 0);
        let err = local_train(&w0, 1, 2, 0.1, 0.0, &q, &origin(), 0).unwrap_err();
        assert_eq!(err.to_string(), "batch exceeds dataset (2 > 1)");
    }

    #[test]
    fn two_device_mean_of_means() {
        let q = Quadratic { dim: 1 };
        let p = |x: f64| LabeledDataset::new(vec![DataPoint { features: vec![x], label: 0 }], 1).unwrap();
        // losses ½·(√2)² = 1 and ½·(√6)² = 3
        let parts = vec![p(2f64.sqrt()), p(6f64.sqrt())];
        let v = global_loss(&ModelState::zeros(1, 0), &parts, &q).unwrap();
        assert!((v - 2.0).abs() < 1e-12);
    }
}
