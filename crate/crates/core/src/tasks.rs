//! Desk-scale objectives with synthetic data.
//!
//! Parameter layouts:
//! - quadratic / linear / constant: `θ` as-is, batches are empty.
//! - logistic: `[w_0 .. w_{f-1}, b]`.
//! - mlp: `W1 (hidden × inputs, row-major) ‖ b1 (hidden) ‖ W2 (classes × hidden) ‖ b2 (classes)`,
//!   `tanh` hidden activation, softmax cross-entropy output.
//!
//! Losses are accumulated in `f64`, left to right over examples, so the same
//! `(θ, batch)` always produces the same bits.

use thiserror::Error;

use crate::params::ParameterVector;
use crate::rng::{mix_triple, GaussianStream, SplitMix64};

/// Shard id reserved for the held-out evaluation set.
pub const EVAL_SHARD: u64 = u64::MAX;

const DATA_DOMAIN: u64 = 0xD474_0000_0000_0001;
const LABEL_DOMAIN: u64 = 0xD474_0000_0000_0002;
const TEACHER_DOMAIN: u64 = 0xD474_0000_0000_0003;
const INIT_DOMAIN: u64 = 0xD474_0000_0000_0004;

#[derive(Debug, Error, PartialEq)]
pub enum TaskError {
    #[error("parameter dimension mismatch: task expects {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("batch width {got} does not match task input width {expected}")]
    BatchMismatch { expected: usize, got: usize },
    #[error("invalid task configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TaskKind {
    /// `½‖θ‖²`.
    Quadratic { dim: usize },
    /// `c·θ` with `c` drawn from the dataset seed.
    Linear { dim: usize },
    /// A loss that ignores `θ`.
    Constant { dim: usize, value: f64 },
    /// Binary linear probe with a planted teacher.
    Logistic { features: usize },
    /// Two-layer perceptron classifying a planted linear teacher.
    Mlp {
        inputs: usize,
        hidden: usize,
        classes: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub kind: TaskKind,
    pub dataset_seed: u64,
    pub batch_size: usize,
    pub eval_size: usize,
}

/// A minibatch; `inputs` is `len × width`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub batch_id: u64,
    pub width: usize,
    pub inputs: Vec<f32>,
    pub labels: Vec<u32>,
}

impl Batch {
    pub fn empty(batch_id: u64) -> Self {
        Self {
            batch_id,
            width: 0,
            inputs: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.inputs[i * self.width..(i + 1) * self.width]
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Task {
    pub fn new(kind: TaskKind, dataset_seed: u64) -> Self {
        Self {
            kind,
            dataset_seed,
            batch_size: 32,
            eval_size: 1024,
        }
    }

    pub fn with_batch_size(mut self, batch_size: usize) -> Self {
        self.batch_size = batch_size;
        self
    }

    pub fn with_eval_size(mut self, eval_size: usize) -> Self {
        self.eval_size = eval_size;
        self
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            TaskKind::Quadratic { .. } => "quadratic",
            TaskKind::Linear { .. } => "linear",
            TaskKind::Constant { .. } => "constant",
            TaskKind::Logistic { .. } => "logistic",
            TaskKind::Mlp { .. } => "mlp",
        }
    }

    pub fn dim(&self) -> usize {
        match self.kind {
            TaskKind::Quadratic { dim } | TaskKind::Linear { dim } | TaskKind::Constant { dim, .. } => dim,
            TaskKind::Logistic { features } => features + 1,
            TaskKind::Mlp {
                inputs,
                hidden,
                classes,
            } => hidden * inputs + hidden + classes * hidden + classes,
        }
    }

    /// Width of one input row (0 for data-free objectives).
    pub fn input_width(&self) -> usize {
        match self.kind {
            TaskKind::Logistic { features } => features,
            TaskKind::Mlp { inputs, .. } => inputs,
            _ => 0,
        }
    }

    pub fn is_classifier(&self) -> bool {
        matches!(self.kind, TaskKind::Logistic { .. } | TaskKind::Mlp { .. })
    }

    pub fn validate(&self) -> Result<(), TaskError> {
        if self.dim() == 0 {
            return Err(TaskError::Invalid("dimension must be positive".into()));
        }
        if let TaskKind::Mlp { classes, .. } = self.kind {
            if classes < 2 {
                return Err(TaskError::Invalid("mlp needs at least two classes".into()));
            }
        }
        if self.is_classifier() && self.batch_size == 0 {
            return Err(TaskError::Invalid("batch size must be positive".into()));
        }
        Ok(())
    }

    fn check_dim(&self, got: usize) -> Result<(), TaskError> {
        let expected = self.dim();
        if expected != got {
            return Err(TaskError::DimensionMismatch { expected, got });
        }
        Ok(())
    }

    fn check_batch(&self, batch: &Batch) -> Result<(), TaskError> {
        if self.is_classifier() && batch.width != self.input_width() {
            return Err(TaskError::BatchMismatch {
                expected: self.input_width(),
                got: batch.width,
            });
        }
        Ok(())
    }

    /// Deterministic initial parameters shared by every founding peer.
    pub fn init_params(&self, init_seed: u64) -> ParameterVector {
        let mut z = GaussianStream::new(mix_triple(init_seed, INIT_DOMAIN, self.dataset_seed));
        let values = match self.kind {
            TaskKind::Quadratic { dim } | TaskKind::Linear { dim } => {
                (0..dim).map(|_| z.next_normal_f32()).collect()
            }
            TaskKind::Constant { dim, .. } => vec![0.0; dim],
            TaskKind::Logistic { features } => vec![0.0; features + 1],
            TaskKind::Mlp {
                inputs,
                hidden,
                classes,
            } => {
                let s1 = 1.0 / (inputs as f64).sqrt();
                let s2 = 1.0 / (hidden as f64).sqrt();
                let mut v = Vec::with_capacity(self.dim());
                v.extend((0..hidden * inputs).map(|_| (z.next_normal() * s1) as f32));
                v.extend(std::iter::repeat_n(0.0, hidden));
                v.extend((0..classes * hidden).map(|_| (z.next_normal() * s2) as f32));
                v.extend(std::iter::repeat_n(0.0, classes));
                v
            }
        };
        ParameterVector::new(values)
    }

    fn teacher(&self) -> Vec<f64> {
        let rows = match self.kind {
            TaskKind::Logistic { features } => features,
            TaskKind::Mlp {
                inputs, classes, ..
            } => inputs * classes,
            TaskKind::Linear { dim } => dim,
            _ => 0,
        };
        GaussianStream::new(mix_triple(self.dataset_seed, TEACHER_DOMAIN, 0))
            .take(rows)
            .collect()
    }

    /// Batch `batch_id` of data shard `shard`; a pure function of
    /// `(dataset_seed, shard, batch_id)`.
    pub fn batch(&self, shard: u64, batch_id: u64) -> Batch {
        self.batch_of_size(shard, batch_id, self.batch_size)
    }

    /// The fixed held-out set.
    pub fn eval_batch(&self) -> Batch {
        self.batch_of_size(EVAL_SHARD, 0, self.eval_size)
    }

    fn batch_of_size(&self, shard: u64, batch_id: u64, size: usize) -> Batch {
        if !self.is_classifier() {
            return Batch::empty(batch_id);
        }
        let width = self.input_width();
        let mut x = GaussianStream::new(mix_triple(self.dataset_seed ^ DATA_DOMAIN, shard, batch_id));
        let mut u = SplitMix64::new(mix_triple(self.dataset_seed ^ LABEL_DOMAIN, shard, batch_id));
        let teacher = self.teacher();
        let mut inputs = Vec::with_capacity(size * width);
        let mut labels = Vec::with_capacity(size);
        for _ in 0..size {
            let row: Vec<f32> = (0..width).map(|_| x.next_normal_f32()).collect();
            let label = match self.kind {
                TaskKind::Logistic { .. } => {
                    let logit: f64 = row.iter().zip(&teacher).map(|(a, w)| *a as f64 * w).sum();
                    // Noisy labels: P(y = 1) = σ(2·w*·x).
                    u32::from(u.next_open_unit() < sigmoid(2.0 * logit))
                }
                TaskKind::Mlp { classes, .. } => {
                    let mut best = 0;
                    let mut best_score = f64::NEG_INFINITY;
                    for c in 0..classes {
                        let w = &teacher[c * width..(c + 1) * width];
                        let score: f64 = row.iter().zip(w).map(|(a, w)| *a as f64 * w).sum();
                        if score > best_score {
                            best_score = score;
                            best = c as u32;
                        }
                    }
                    best
                }
                _ => unreachable!(),
            };
            inputs.extend_from_slice(&row);
            labels.push(label);
        }
        Batch {
            batch_id,
            width,
            inputs,
            labels,
        }
    }

    /// Mean loss of `theta` on `batch`.
    pub fn loss(&self, theta: &[f32], batch: &Batch) -> Result<f64, TaskError> {
        self.loss_at(theta, batch)
    }

    /// Same objective evaluated on parameters of any precision; used by
    /// finite-difference checks that need `f64` steps.
    pub fn loss_at<T: Copy + Into<f64>>(&self, theta: &[T], batch: &Batch) -> Result<f64, TaskError> {
        self.check_dim(theta.len())?;
        self.check_batch(batch)?;
        let th = |i: usize| -> f64 { theta[i].into() };
        Ok(match self.kind {
            TaskKind::Quadratic { dim } => 0.5 * (0..dim).map(|i| th(i) * th(i)).sum::<f64>(),
            TaskKind::Linear { dim } => {
                let c = self.teacher();
                (0..dim).map(|i| c[i] * th(i)).sum()
            }
            TaskKind::Constant { value, .. } => value,
            TaskKind::Logistic { features } => {
                if batch.is_empty() {
                    return Ok(0.0);
                }
                let mut total = 0.0;
                for (i, &y) in batch.labels.iter().enumerate() {
                    let logit = logistic_logit(&th, batch.row(i), features);
                    let sign = if y == 1 { 1.0 } else { -1.0 };
                    total += softplus(-sign * logit);
                }
                total / batch.len() as f64
            }
            TaskKind::Mlp {
                inputs,
                hidden,
                classes,
            } => {
                if batch.is_empty() {
                    return Ok(0.0);
                }
                let net = MlpView::new(&th, inputs, hidden, classes);
                let mut total = 0.0;
                let mut h = vec![0.0; hidden];
                let mut o = vec![0.0; classes];
                for (i, &y) in batch.labels.iter().enumerate() {
                    net.forward(batch.row(i), &mut h, &mut o);
                    total += log_sum_exp(&o) - o[y as usize];
                }
                total / batch.len() as f64
            }
        })
    }

    /// Exact gradient of [`Task::loss`].
    pub fn analytic_gradient<T: Copy + Into<f64>>(
        &self,
        theta: &[T],
        batch: &Batch,
    ) -> Result<Vec<f64>, TaskError> {
        self.check_dim(theta.len())?;
        self.check_batch(batch)?;
        let th = |i: usize| -> f64 { theta[i].into() };
        let dim = self.dim();
        Ok(match self.kind {
            TaskKind::Quadratic { .. } => (0..dim).map(th).collect(),
            TaskKind::Linear { .. } => self.teacher(),
            TaskKind::Constant { .. } => vec![0.0; dim],
            TaskKind::Logistic { features } => {
                let mut grad = vec![0.0; dim];
                if batch.is_empty() {
                    return Ok(grad);
                }
                let n = batch.len() as f64;
                for (i, &y) in batch.labels.iter().enumerate() {
                    let row = batch.row(i);
                    let r = sigmoid(logistic_logit(&th, row, features)) - y as f64;
                    for (g, x) in grad.iter_mut().zip(row) {
                        *g += r * *x as f64 / n;
                    }
                    grad[features] += r / n;
                }
                grad
            }
            TaskKind::Mlp {
                inputs,
                hidden,
                classes,
            } => {
                let mut grad = vec![0.0; dim];
                if batch.is_empty() {
                    return Ok(grad);
                }
                let net = MlpView::new(&th, inputs, hidden, classes);
                let n = batch.len() as f64;
                let mut h = vec![0.0; hidden];
                let mut o = vec![0.0; classes];
                let mut dh = vec![0.0; hidden];
                for (i, &y) in batch.labels.iter().enumerate() {
                    let x = batch.row(i);
                    net.forward(x, &mut h, &mut o);
                    let lse = log_sum_exp(&o);
                    dh.iter_mut().for_each(|v| *v = 0.0);
                    for c in 0..classes {
                        let p = (o[c] - lse).exp();
                        let d_o = (p - f64::from(u8::from(c as u32 == y))) / n;
                        for j in 0..hidden {
                            grad[net.w2 + c * hidden + j] += d_o * h[j];
                            dh[j] += d_o * th(net.w2 + c * hidden + j);
                        }
                        grad[net.b2 + c] += d_o;
                    }
                    for j in 0..hidden {
                        let d_pre = dh[j] * (1.0 - h[j] * h[j]);
                        for k in 0..inputs {
                            grad[net.w1 + j * inputs + k] += d_pre * x[k] as f64;
                        }
                        grad[net.b1 + j] += d_pre;
                    }
                }
                grad
            }
        })
    }

    /// Fraction of `batch` classified correctly; `None` for non-classifiers.
    pub fn accuracy(&self, theta: &[f32], batch: &Batch) -> Result<Option<f64>, TaskError> {
        self.check_dim(theta.len())?;
        self.check_batch(batch)?;
        if batch.is_empty() {
            return Ok(None);
        }
        let th = |i: usize| -> f64 { theta[i] as f64 };
        let correct = match self.kind {
            TaskKind::Logistic { features } => batch
                .labels
                .iter()
                .enumerate()
                .filter(|(i, &y)| u32::from(logistic_logit(&th, batch.row(*i), features) > 0.0) == y)
                .count(),
            TaskKind::Mlp {
                inputs,
                hidden,
                classes,
            } => {
                let net = MlpView::new(&th, inputs, hidden, classes);
                let mut h = vec![0.0; hidden];
                let mut o = vec![0.0; classes];
                let mut correct = 0;
                for (i, &y) in batch.labels.iter().enumerate() {
                    net.forward(batch.row(i), &mut h, &mut o);
                    let pred = o
                        .iter()
                        .enumerate()
                        .fold((0, f64::NEG_INFINITY), |best, (c, &v)| if v > best.1 { (c, v) } else { best })
                        .0;
                    correct += usize::from(pred as u32 == y);
                }
                correct
            }
            _ => return Ok(None),
        };
        Ok(Some(correct as f64 / batch.len() as f64))
    }
}

fn logistic_logit(th: &impl Fn(usize) -> f64, row: &[f32], features: usize) -> f64 {
    let mut z = 0.0;
    for (k, x) in row.iter().enumerate() {
        z += th(k) * *x as f64;
    }
    z + th(features)
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Offsets of the MLP blocks inside the flat parameter vector.
struct MlpView<'a, F: Fn(usize) -> f64> {
    th: &'a F,
    inputs: usize,
    hidden: usize,
    classes: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

impl<'a, F: Fn(usize) -> f64> MlpView<'a, F> {
    fn new(th: &'a F, inputs: usize, hidden: usize, classes: usize) -> Self {
        let w1 = 0;
        let b1 = w1 + hidden * inputs;
        let w2 = b1 + hidden;
        let b2 = w2 + classes * hidden;
        Self {
            th,
            inputs,
            hidden,
            classes,
            w1,
            b1,
            w2,
            b2,
        }
    }

    fn forward(&self, x: &[f32], h: &mut [f64], o: &mut [f64]) {
        let th = self.th;
        for j in 0..self.hidden {
            let mut a = th(self.b1 + j);
            for k in 0..self.inputs {
                a += th(self.w1 + j * self.inputs + k) * x[k] as f64;
            }
            h[j] = a.tanh();
        }
        for c in 0..self.classes {
            let mut a = th(self.b2 + c);
            for j in 0..self.hidden {
                a += th(self.w2 + c * self.hidden + j) * h[j];
            }
            o[c] = a;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mlp() -> Task {
        Task::new(
            TaskKind::Mlp {
                inputs: 5,
                hidden: 4,
                classes: 3,
            },
            11,
        )
        .with_batch_size(8)
    }

    #[test]
    fn quadratic_values() {
        let t = Task::new(TaskKind::Quadratic { dim: 2 }, 0);
        let b = t.batch(0, 0);
        assert_eq!(t.loss(&[0.0, 0.0], &b).unwrap(), 0.0);
        assert_eq!(t.loss(&[3.0, 4.0], &b).unwrap(), 12.5);
        assert_eq!(t.analytic_gradient(&[3.0f32, 4.0], &b).unwrap(), vec![3.0, 4.0]);
    }

    #[test]
    fn logistic_at_origin_is_ln2() {
        let t = Task::new(TaskKind::Logistic { features: 6 }, 3).with_batch_size(64);
        let b = t.batch(0, 5);
        let loss = t.loss(&[0.0; 7], &b).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn logistic_gradient_at_origin_closed_form() {
        let t = Task::new(TaskKind::Logistic { features: 4 }, 9).with_batch_size(16);
        let b = t.batch(2, 1);
        let g = t.analytic_gradient(&[0.0f32; 5], &b).unwrap();
        let n = b.len() as f64;
        for k in 0..4 {
            let expected: f64 = (0..b.len())
                .map(|i| (0.5 - b.labels[i] as f64) * b.row(i)[k] as f64)
                .sum::<f64>()
                / n;
            assert!((g[k] - expected).abs() < 1e-14);
        }
        let bias: f64 = b.labels.iter().map(|&y| 0.5 - y as f64).sum::<f64>() / n;
        assert!((g[4] - bias).abs() < 1e-14);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let t = mlp();
        let b = t.batch(0, 0);
        assert_eq!(
            t.loss(&[0.0f32; 3], &b),
            Err(TaskError::DimensionMismatch {
                expected: t.dim(),
                got: 3
            })
        );
        assert!(t.analytic_gradient(&[0.0f32; 3], &b).is_err());
    }

    #[test]
    fn batches_are_pure_functions_of_ids() {
        let t = mlp();
        assert_eq!(t.batch(1, 7), t.batch(1, 7));
        assert_ne!(t.batch(1, 7), t.batch(2, 7));
        assert_ne!(t.batch(1, 7), t.batch(1, 8));
    }

    #[test]
    fn loss_is_bitwise_repeatable() {
        let t = mlp();
        let theta = t.init_params(4);
        let b = t.batch(0, 3);
        let a = t.loss(&theta, &b).unwrap();
        let c = t.loss(&theta, &b).unwrap();
        assert_eq!(a.to_bits(), c.to_bits());
    }

    #[test]
    fn mlp_dimension_layout() {
        let t = Task::new(
            TaskKind::Mlp {
                inputs: 16,
                hidden: 48,
                classes: 4,
            },
            0,
        );
        assert_eq!(t.dim(), 16 * 48 + 48 + 4 * 48 + 4);
        assert_eq!(t.init_params(0).len(), t.dim());
    }

    #[test]
    fn accuracy_only_for_classifiers() {
        let q = Task::new(TaskKind::Quadratic { dim: 3 }, 0);
        assert_eq!(q.accuracy(&[0.0; 3], &q.eval_batch()).unwrap(), None);
        let t = mlp().with_eval_size(50);
        let acc = t.accuracy(&t.init_params(1), &t.eval_batch()).unwrap().unwrap();
        assert!((0.0..=1.0).contains(&acc));
    }
}
