//! Cost oracles for the per-agent finite-sum problems.
//!
//! Two families are supported: least squares, where a sample is a target
//! vector `d` and the sample cost is `½‖x − d‖²`, and multiclass softmax
//! regression, where the model holds one weight block per class.

mod data;
mod idx;

use thiserror::Error;

use crate::model::{shifted_mean, AgentId, ModelVector};
use crate::rng::{Purpose, RngStream};

pub use data::{partition_iid, partition_noniid, Dataset};
pub use idx::{load_idx_dataset, parse_idx_images, parse_idx_labels, DataError};

use rand_distr::{Distribution, StandardNormal};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProblemError {
    #[error("sample index {index} out of range for a shard of {len} samples")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("unsupported operation: {0}")]
    Unsupported(&'static str),
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

/// Which cost family a problem uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProblemKind {
    LeastSquares,
    Softmax { classes: usize },
}

#[derive(Debug, Clone, PartialEq)]
enum ShardData {
    /// `len × dim` targets, row-major.
    LeastSquares { targets: Vec<f64> },
    /// `len × feature_dim` features, row-major, with one label per row.
    Softmax {
        features: Vec<f64>,
        labels: Vec<usize>,
        feature_dim: usize,
        classes: usize,
    },
}

/// The ordered samples held by one agent.
#[derive(Debug, Clone, PartialEq)]
pub struct Shard {
    owner: AgentId,
    len: usize,
    dim: usize,
    data: ShardData,
}

impl Shard {
    /// Least-squares shard; `targets` holds `targets.len() / dim` rows.
    pub fn least_squares(owner: AgentId, dim: usize, targets: Vec<f64>) -> Result<Self, ProblemError> {
        if dim == 0 || !targets.len().is_multiple_of(dim) {
            return Err(ProblemError::DimensionMismatch {
                expected: dim,
                actual: targets.len(),
            });
        }
        Ok(Self {
            owner,
            len: targets.len() / dim,
            dim,
            data: ShardData::LeastSquares { targets },
        })
    }

    pub fn softmax(
        owner: AgentId,
        feature_dim: usize,
        classes: usize,
        features: Vec<f64>,
        labels: Vec<usize>,
    ) -> Result<Self, ProblemError> {
        if feature_dim == 0 || features.len() != labels.len() * feature_dim {
            return Err(ProblemError::DimensionMismatch {
                expected: labels.len() * feature_dim,
                actual: features.len(),
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(ProblemError::LabelOutOfRange { label, classes });
        }
        Ok(Self {
            owner,
            len: labels.len(),
            dim: feature_dim * classes,
            data: ShardData::Softmax {
                features,
                labels,
                feature_dim,
                classes,
            },
        })
    }

    pub fn owner(&self) -> AgentId {
        self.owner
    }

    /// Number of samples `J`.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Model dimension `p`.
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn kind(&self) -> ProblemKind {
        match self.data {
            ShardData::LeastSquares { .. } => ProblemKind::LeastSquares,
            ShardData::Softmax { classes, .. } => ProblemKind::Softmax { classes },
        }
    }

    /// Least-squares target row `j`.
    pub fn target(&self, j: usize) -> Option<&[f64]> {
        match &self.data {
            ShardData::LeastSquares { targets } if j < self.len => {
                Some(&targets[j * self.dim..(j + 1) * self.dim])
            }
            _ => None,
        }
    }

    /// Softmax sample `j` as `(features, label)`.
    pub fn sample(&self, j: usize) -> Option<(&[f64], usize)> {
        match &self.data {
            ShardData::Softmax {
                features,
                labels,
                feature_dim,
                ..
            } if j < self.len => Some((&features[j * feature_dim..(j + 1) * feature_dim], labels[j])),
            _ => None,
        }
    }

    /// Labels of a softmax shard.
    pub fn labels(&self) -> Option<&[usize]> {
        match &self.data {
            ShardData::Softmax { labels, .. } => Some(labels),
            ShardData::LeastSquares { .. } => None,
        }
    }

    fn check(&self, j: usize, x: &[f64]) -> Result<(), ProblemError> {
        if j >= self.len {
            return Err(ProblemError::IndexOutOfRange {
                index: j,
                len: self.len,
            });
        }
        if x.len() != self.dim {
            return Err(ProblemError::DimensionMismatch {
                expected: self.dim,
                actual: x.len(),
            });
        }
        Ok(())
    }

    /// Writes `F'_{w,j}(x)` into `out` and returns the sample loss.
    ///
    /// Panics if `j` or the slice lengths are out of range; use
    /// [`sample_grad`](Self::sample_grad) for a checked call.
    pub fn grad_into(&self, j: usize, x: &[f64], out: &mut [f64]) -> f64 {
        match &self.data {
            ShardData::LeastSquares { targets } => {
                let d = &targets[j * self.dim..(j + 1) * self.dim];
                let mut loss = 0.0;
                for ((o, xi), di) in out.iter_mut().zip(x).zip(d) {
                    *o = xi - di;
                    loss += 0.5 * (xi - di) * (xi - di);
                }
                loss
            }
            ShardData::Softmax {
                features,
                labels,
                feature_dim,
                classes,
            } => {
                let a = &features[j * feature_dim..(j + 1) * feature_dim];
                softmax_grad_into(x, a, labels[j], *classes, out)
            }
        }
    }

    /// Loss of sample `j` at `x`.
    pub fn sample_loss(&self, j: usize, x: &[f64]) -> f64 {
        match &self.data {
            ShardData::LeastSquares { targets } => {
                let d = &targets[j * self.dim..(j + 1) * self.dim];
                x.iter().zip(d).map(|(xi, di)| 0.5 * (xi - di) * (xi - di)).sum()
            }
            ShardData::Softmax {
                features,
                labels,
                feature_dim,
                classes,
            } => {
                let a = &features[j * feature_dim..(j + 1) * feature_dim];
                let logits = logits(x, a, *classes);
                log_sum_exp(&logits) - logits[labels[j]]
            }
        }
    }

    pub fn sample_grad(&self, j: usize, x: &ModelVector) -> Result<ModelVector, ProblemError> {
        self.check(j, x.as_slice())?;
        let mut out = ModelVector::zeros(self.dim);
        self.grad_into(j, x.as_slice(), out.as_mut_slice());
        Ok(out)
    }

    /// `F'_w(x) = (1/J) Σ_j F'_{w,j}(x)`.
    pub fn full_grad(&self, x: &[f64]) -> ModelVector {
        let grads: Vec<Vec<f64>> = (0..self.len)
            .map(|j| {
                let mut g = vec![0.0; self.dim];
                self.grad_into(j, x, &mut g);
                g
            })
            .collect();
        shifted_mean(self.dim, grads.iter().map(Vec::as_slice))
            .map(ModelVector::from)
            .unwrap_or_else(|| ModelVector::zeros(self.dim))
    }

    /// `F_w(x)`, the mean sample loss.
    pub fn loss(&self, x: &[f64]) -> f64 {
        if self.len == 0 {
            return 0.0;
        }
        (0..self.len).map(|j| self.sample_loss(j, x)).sum::<f64>() / self.len as f64
    }

    /// Mean squared deviation of the sample gradients from the full gradient
    /// at `x`: the empirical `δ_w²`.
    pub fn gradient_variance(&self, x: &[f64]) -> f64 {
        if self.len == 0 {
            return 0.0;
        }
        let full = self.full_grad(x);
        let mut g = vec![0.0; self.dim];
        let mut total = 0.0;
        for j in 0..self.len {
            self.grad_into(j, x, &mut g);
            total += g
                .iter()
                .zip(full.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
        }
        total / self.len as f64
    }
}

fn logits(x: &[f64], a: &[f64], classes: usize) -> Vec<f64> {
    let d = a.len();
    (0..classes)
        .map(|m| x[m * d..(m + 1) * d].iter().zip(a).map(|(w, f)| w * f).sum())
        .collect()
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + v.iter().map(|z| (z - max).exp()).sum::<f64>().ln()
}

fn softmax_grad_into(x: &[f64], a: &[f64], label: usize, classes: usize, out: &mut [f64]) -> f64 {
    let d = a.len();
    let z = logits(x, a, classes);
    let lse = log_sum_exp(&z);
    for (m, zm) in z.iter().enumerate() {
        let coeff = (zm - lse).exp() - if m == label { 1.0 } else { 0.0 };
        for (o, f) in out[m * d..(m + 1) * d].iter_mut().zip(a) {
            *o = coeff * f;
        }
    }
    lse - z[label]
}

/// Gradient `x − d_{w,j}` of a least-squares sample cost.
pub fn least_squares_grad(shard: &Shard, j: usize, x: &ModelVector) -> Result<ModelVector, ProblemError> {
    if shard.kind() != ProblemKind::LeastSquares {
        return Err(ProblemError::Unsupported("least-squares gradient on a softmax shard"));
    }
    shard.sample_grad(j, x)
}

/// Cross-entropy loss and gradient of softmax sample `j`.
pub fn softmax_loss_and_grad(
    shard: &Shard,
    j: usize,
    x: &ModelVector,
    classes: usize,
) -> Result<(f64, ModelVector), ProblemError> {
    match shard.kind() {
        ProblemKind::Softmax { classes: c } if c == classes => {}
        ProblemKind::Softmax { classes: c } => {
            return Err(ProblemError::DimensionMismatch {
                expected: c,
                actual: classes,
            })
        }
        ProblemKind::LeastSquares => {
            return Err(ProblemError::Unsupported("softmax gradient on a least-squares shard"))
        }
    }
    shard.check(j, x.as_slice())?;
    let mut g = ModelVector::zeros(shard.dim());
    let loss = shard.grad_into(j, x.as_slice(), g.as_mut_slice());
    Ok((loss, g))
}

/// Class with the largest logit; ties go to the lowest class index.
pub fn softmax_predict(x: &[f64], features: &[f64], classes: usize) -> usize {
    let z = logits(x, features, classes);
    let mut best = 0;
    for (m, v) in z.iter().enumerate().skip(1) {
        if *v > z[best] {
            best = m;
        }
    }
    best
}

/// A complete problem: one shard per agent (Byzantine agents included).
#[derive(Debug, Clone, PartialEq)]
pub struct Problem {
    dim: usize,
    kind: ProblemKind,
    shards: Vec<Shard>,
}

impl Problem {
    pub fn new(shards: Vec<Shard>) -> Result<Self, ProblemError> {
        let first = shards
            .first()
            .ok_or_else(|| ProblemError::InvalidInput("a problem needs at least one shard".into()))?;
        let (dim, kind) = (first.dim(), first.kind());
        for (w, s) in shards.iter().enumerate() {
            if s.dim() != dim {
                return Err(ProblemError::DimensionMismatch {
                    expected: dim,
                    actual: s.dim(),
                });
            }
            if s.kind() != kind {
                return Err(ProblemError::InvalidInput(format!("shard {w} has a different cost family")));
            }
            if s.owner() != w {
                return Err(ProblemError::InvalidInput(format!("shard {w} is owned by agent {}", s.owner())));
            }
        }
        Ok(Self { dim, kind, shards })
    }

    /// Scalar least-squares problem from explicit per-agent samples.
    pub fn least_squares_scalar(samples: &[Vec<f64>]) -> Result<Self, ProblemError> {
        let shards = samples
            .iter()
            .enumerate()
            .map(|(w, s)| Shard::least_squares(w, 1, s.clone()))
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(shards)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn kind(&self) -> ProblemKind {
        self.kind
    }

    pub fn n_agents(&self) -> usize {
        self.shards.len()
    }

    pub fn shard(&self, agent: AgentId) -> &Shard {
        &self.shards[agent]
    }

    pub fn shards(&self) -> &[Shard] {
        &self.shards
    }

    pub fn full_grad(&self, agent: AgentId, x: &[f64]) -> ModelVector {
        self.shards[agent].full_grad(x)
    }

    /// `(1/|agents|) Σ_w F_w(x)`.
    pub fn average_loss(&self, agents: &[AgentId], x: &[f64]) -> f64 {
        agents.iter().map(|&w| self.shards[w].loss(x)).sum::<f64>() / agents.len().max(1) as f64
    }

    /// Gradient of [`average_loss`](Self::average_loss).
    pub fn average_grad(&self, agents: &[AgentId], x: &[f64]) -> ModelVector {
        let grads: Vec<ModelVector> = agents.iter().map(|&w| self.full_grad(w, x)).collect();
        shifted_mean(self.dim, grads.iter().map(ModelVector::as_slice))
            .map(ModelVector::from)
            .unwrap_or_else(|| ModelVector::zeros(self.dim))
    }
}

/// Scalar least-squares problem with `J` standard-normal samples per agent,
/// each agent drawing from its own stream.
pub fn synth_least_squares(n_agents: usize, samples: usize, seed: u64) -> Result<Problem, ProblemError> {
    let shards = (0..n_agents)
        .map(|w| {
            let mut rng = RngStream::new(seed, w, Purpose::SyntheticData, 0).rng();
            let d: Vec<f64> = (0..samples).map(|_| StandardNormal.sample(&mut rng)).collect();
            Shard::least_squares(w, 1, d)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Problem::new(shards)
}
