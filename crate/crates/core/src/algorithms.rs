//! One-round update rules for the regular agents.
//!
//! DRSA, BRAVO-SAGA and BRAVO-LSVRG share the update
//! `x ← x − α (g + λ Σ_v sign(x − m_v))` and differ only in the gradient
//! estimate `g`. DPSGD mixes neighbor messages with a doubly stochastic matrix
//! and takes a plain stochastic gradient step.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{shifted_mean, sign, AgentId, ModelVector};
use crate::problems::{ProblemError, Shard};
use crate::rng::RngStream;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AlgorithmError {
    #[error("step size must be positive and finite, got {0}")]
    BadStep(f64),
    #[error("mixing row {row} sums to {sum}, not 1")]
    NotRowStochastic { row: usize, sum: f64 },
    #[error("unknown algorithm `{0}` (expected dpsgd, drsa, bravo-saga or bravo-lsvrg)")]
    UnknownAlgorithm(String),
    #[error(transparent)]
    Problem(#[from] ProblemError),
}

/// The four supported methods.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Algorithm {
    #[serde(rename = "dpsgd")]
    Dpsgd,
    #[serde(rename = "drsa")]
    Drsa,
    #[serde(rename = "bravo-saga")]
    BravoSaga,
    #[serde(rename = "bravo-lsvrg")]
    BravoLsvrg,
}

impl Algorithm {
    pub const ALL: [Algorithm; 4] = [
        Algorithm::Dpsgd,
        Algorithm::Drsa,
        Algorithm::BravoSaga,
        Algorithm::BravoLsvrg,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Dpsgd => "dpsgd",
            Algorithm::Drsa => "drsa",
            Algorithm::BravoSaga => "bravo-saga",
            Algorithm::BravoLsvrg => "bravo-lsvrg",
        }
    }

    /// Whether the method uses the TV-penalty subgradient.
    pub fn is_tv_penalized(self) -> bool {
        !matches!(self, Algorithm::Dpsgd)
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = AlgorithmError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| AlgorithmError::UnknownAlgorithm(s.to_string()))
    }
}

/// Step-size schedule `α^k`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepSchedule {
    Constant { alpha: f64 },
    /// `α₀ / (k + 1)`
    Inverse { alpha0: f64 },
    /// `α₀ / √(k + 1)`
    InverseSqrt { alpha0: f64 },
}

impl StepSchedule {
    pub fn validate(&self) -> Result<(), AlgorithmError> {
        let a = self.base();
        if a > 0.0 && a.is_finite() {
            Ok(())
        } else {
            Err(AlgorithmError::BadStep(a))
        }
    }

    pub fn base(&self) -> f64 {
        match *self {
            StepSchedule::Constant { alpha } => alpha,
            StepSchedule::Inverse { alpha0 } | StepSchedule::InverseSqrt { alpha0 } => alpha0,
        }
    }

    pub fn is_constant(&self) -> bool {
        matches!(self, StepSchedule::Constant { .. })
    }
}

pub fn step_size(schedule: &StepSchedule, k: u64) -> f64 {
    match *schedule {
        StepSchedule::Constant { alpha } => alpha,
        StepSchedule::Inverse { alpha0 } => alpha0 / (k as f64 + 1.0),
        StepSchedule::InverseSqrt { alpha0 } => alpha0 / (k as f64 + 1.0).sqrt(),
    }
}

/// Writes `λ Σ_m sign(x − m)` over all received messages into `out`.
///
/// Signs are summed as integers before scaling, so the result is exactly
/// `λ` times an integer.
pub fn tv_subgradient_into<'a, I>(x: &[f64], received: I, lambda: f64, out: &mut [f64])
where
    I: IntoIterator<Item = &'a [f64]>,
{
    out.iter_mut().for_each(|o| *o = 0.0);
    for m in received {
        for ((o, xi), mi) in out.iter_mut().zip(x).zip(m) {
            *o += sign(xi - mi);
        }
    }
    out.iter_mut().for_each(|o| *o *= lambda);
}

/// `λ Σ_m sign(x_w − m)`; regular and Byzantine messages are not told apart.
pub fn tv_subgradient(x_w: &ModelVector, received: &[&ModelVector], lambda: f64) -> ModelVector {
    let mut out = ModelVector::zeros(x_w.dim());
    tv_subgradient_into(
        x_w.as_slice(),
        received.iter().map(|m| m.as_slice()),
        lambda,
        out.as_mut_slice(),
    );
    out
}

/// In-place `x ← x − α (g + tv)`.
pub fn apply_step(x: &mut [f64], grad: &[f64], tv: &[f64], alpha: f64) {
    for ((xi, gi), ti) in x.iter_mut().zip(grad).zip(tv) {
        *xi -= alpha * (gi + ti);
    }
}

/// DRSA update with a raw stochastic gradient.
pub fn drsa_step(x_w: &ModelVector, batch_grad: &ModelVector, tv: &ModelVector, alpha: f64) -> ModelVector {
    let mut next = x_w.clone();
    apply_step(next.as_mut_slice(), batch_grad.as_slice(), tv.as_slice(), alpha);
    next
}

/// BRAVO update with a corrected (variance-reduced) gradient.
pub fn bravo_step(x_w: &ModelVector, g: &ModelVector, tv: &ModelVector, alpha: f64) -> ModelVector {
    drsa_step(x_w, g, tv, alpha)
}

/// `b` sample indices drawn uniformly with replacement from `0..len`.
pub fn draw_batch(stream: RngStream, len: usize, batch_size: usize) -> Vec<usize> {
    let mut rng = stream.rng();
    (0..batch_size).map(|_| rng.random_range(0..len)).collect()
}

/// Mean of the sample gradients over `indices`.
pub fn batch_grad(shard: &Shard, indices: &[usize], x: &[f64]) -> ModelVector {
    let grads: Vec<Vec<f64>> = indices
        .iter()
        .map(|&j| {
            let mut g = vec![0.0; shard.dim()];
            shard.grad_into(j, x, &mut g);
            g
        })
        .collect();
    ModelVector::from(shifted_mean(shard.dim(), grads.iter().map(Vec::as_slice)).expect("non-empty batch"))
}

fn check_indices(shard: &Shard, indices: &[usize]) -> Result<(), ProblemError> {
    match indices.iter().find(|&&j| j >= shard.len()) {
        Some(&index) => Err(ProblemError::IndexOutOfRange {
            index,
            len: shard.len(),
        }),
        None if indices.is_empty() => Err(ProblemError::InvalidInput("empty batch".into())),
        None => Ok(()),
    }
}

/// SAGA gradient table for one agent.
///
/// Stores one gradient per sample and the mean of the table. The mean is
/// updated incrementally and recomputed from scratch every `J` writes.
#[derive(Debug, Clone, PartialEq)]
pub struct SagaState {
    dim: usize,
    len: usize,
    table: Vec<f64>,
    mean: Vec<f64>,
    writes_since_refresh: usize,
    /// Points `φ_{w,j}` at which each stored gradient was taken; kept only
    /// when Lyapunov tracking is on.
    anchors: Option<Vec<f64>>,
}

impl SagaState {
    /// Table initialized with `F'_{w,j}(x0)` for every `j`.
    pub fn new(shard: &Shard, x0: &[f64], track_anchors: bool) -> Self {
        let (dim, len) = (shard.dim(), shard.len());
        let mut table = vec![0.0; dim * len];
        for (j, row) in table.chunks_exact_mut(dim).enumerate() {
            shard.grad_into(j, x0, row);
        }
        let anchors = track_anchors.then(|| x0.repeat(len));
        let mut state = Self {
            dim,
            len,
            table,
            mean: vec![0.0; dim],
            writes_since_refresh: 0,
            anchors,
        };
        state.refresh_mean();
        state
    }

    pub fn row(&self, j: usize) -> &[f64] {
        &self.table[j * self.dim..(j + 1) * self.dim]
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn tracks_anchors(&self) -> bool {
        self.anchors.is_some()
    }

    /// Recomputes the table mean from the stored rows.
    pub fn refresh_mean(&mut self) {
        if let Some(m) = shifted_mean(self.dim, self.table.chunks_exact(self.dim)) {
            self.mean = m;
        }
        self.writes_since_refresh = 0;
    }

    /// `(1/J) Σ_j ‖φ_j − x*‖²`, or `None` without anchor tracking.
    pub fn anchor_spread(&self, x_star: &[f64]) -> Option<f64> {
        let anchors = self.anchors.as_ref()?;
        let total: f64 = anchors
            .chunks_exact(self.dim)
            .map(|phi| phi.iter().zip(x_star).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
            .sum();
        Some(total / self.len as f64)
    }

    /// Corrected gradient averaged over a batch, then table update.
    ///
    /// Each drawn index contributes `F'_i(x) + (mean − stored_i)` with the
    /// table as it was before this call; afterwards every drawn row is
    /// overwritten with its fresh gradient.
    pub fn corrected_grad(&mut self, shard: &Shard, indices: &[usize], x: &[f64]) -> ModelVector {
        let dim = self.dim;
        let mut fresh = vec![0.0; dim * indices.len()];
        let mut corrected = vec![0.0; dim * indices.len()];
        for (n, &i) in indices.iter().enumerate() {
            let f = &mut fresh[n * dim..(n + 1) * dim];
            shard.grad_into(i, x, f);
            let stored = &self.table[i * dim..(i + 1) * dim];
            for c in 0..dim {
                corrected[n * dim + c] = f[c] + (self.mean[c] - stored[c]);
            }
        }
        let g = shifted_mean(dim, corrected.chunks_exact(dim)).expect("non-empty batch");

        let scale = 1.0 / self.len as f64;
        for (n, &i) in indices.iter().enumerate() {
            let f = &fresh[n * dim..(n + 1) * dim];
            let row = &mut self.table[i * dim..(i + 1) * dim];
            for ((m, fc), rc) in self.mean.iter_mut().zip(f).zip(row.iter()) {
                *m += (fc - rc) * scale;
            }
            row.copy_from_slice(f);
            if let Some(anchors) = self.anchors.as_mut() {
                anchors[i * dim..(i + 1) * dim].copy_from_slice(x);
            }
            self.writes_since_refresh += 1;
        }
        if self.writes_since_refresh >= self.len {
            self.refresh_mean();
        }
        ModelVector::from(g)
    }
}

/// Single-index SAGA step: returns `g` and advances the table.
pub fn saga_grad(state: &mut SagaState, shard: &Shard, i: usize, x_w: &ModelVector) -> Result<ModelVector, ProblemError> {
    check_indices(shard, &[i])?;
    Ok(state.corrected_grad(shard, &[i], x_w.as_slice()))
}

/// Loopless-SVRG reference point and its cached full gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct LsvrgState {
    y: ModelVector,
    full_grad_at_y: ModelVector,
}

impl LsvrgState {
    pub fn new(shard: &Shard, x0: &[f64]) -> Self {
        Self {
            y: ModelVector::from(x0),
            full_grad_at_y: shard.full_grad(x0),
        }
    }

    pub fn reference(&self) -> &ModelVector {
        &self.y
    }

    pub fn full_grad_at_reference(&self) -> &ModelVector {
        &self.full_grad_at_y
    }

    /// Corrected gradient at `x` using the current reference; the reference
    /// then moves to `x` if `refresh` is set.
    pub fn corrected_grad(&mut self, shard: &Shard, indices: &[usize], x: &[f64], refresh: bool) -> ModelVector {
        let dim = shard.dim();
        let mut at_x = vec![0.0; dim];
        let mut at_y = vec![0.0; dim];
        let mut corrected = vec![0.0; dim * indices.len()];
        for (n, &i) in indices.iter().enumerate() {
            shard.grad_into(i, x, &mut at_x);
            shard.grad_into(i, self.y.as_slice(), &mut at_y);
            for c in 0..dim {
                corrected[n * dim + c] = at_x[c] + (self.full_grad_at_y[c] - at_y[c]);
            }
        }
        let g = shifted_mean(dim, corrected.chunks_exact(dim)).expect("non-empty batch");
        if refresh {
            self.y = ModelVector::from(x);
            self.full_grad_at_y = shard.full_grad(x);
        }
        ModelVector::from(g)
    }
}

/// Draws the refresh coin (probability `1/J`) from `stream`.
pub fn lsvrg_coin(stream: RngStream, len: usize) -> bool {
    len <= 1 || stream.rng().random_bool(1.0 / len as f64)
}

/// Single-index LSVRG step with the coin drawn from `coin`.
pub fn lsvrg_grad(
    state: &mut LsvrgState,
    shard: &Shard,
    i: usize,
    x_w: &ModelVector,
    coin: RngStream,
) -> Result<ModelVector, ProblemError> {
    check_indices(shard, &[i])?;
    let refresh = lsvrg_coin(coin, shard.len());
    Ok(state.corrected_grad(shard, &[i], x_w.as_slice(), refresh))
}

/// Checks that every row of `w` is nonnegative and sums to 1.
pub fn check_row_stochastic(w: &DMatrix<f64>) -> Result<(), AlgorithmError> {
    for (row, r) in w.row_iter().enumerate() {
        let sum = r.sum();
        if (sum - 1.0).abs() > 1e-9 || r.iter().any(|v| *v < 0.0) {
            return Err(AlgorithmError::NotRowStochastic { row, sum });
        }
    }
    Ok(())
}

/// DPSGD update for agent `w`: `Σ_v W[w][v] m_v − α g`.
///
/// `messages` is indexed by agent id and holds what each agent broadcast this
/// round (its own model for `w` itself).
pub fn dpsgd_step(
    messages: &[ModelVector],
    weights: &DMatrix<f64>,
    w: AgentId,
    batch_grad: &ModelVector,
    alpha: f64,
) -> ModelVector {
    let mut next = ModelVector::zeros(batch_grad.dim());
    for (v, m) in messages.iter().enumerate() {
        let weight = weights[(w, v)];
        if weight != 0.0 {
            next.axpy(weight, m);
        }
    }
    next.axpy(-alpha, batch_grad);
    next
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Purpose;
    use approx::assert_relative_eq;

    fn ls(values: &[f64]) -> Shard {
        Shard::least_squares(0, 1, values.to_vec()).unwrap()
    }

    #[test]
    fn step_schedules() {
        assert_eq!(step_size(&StepSchedule::Inverse { alpha0: 0.01 }, 0), 0.01);
        assert_eq!(step_size(&StepSchedule::InverseSqrt { alpha0: 0.01 }, 3), 0.005);
        for k in [0, 1, 99, 10_000] {
            assert_eq!(step_size(&StepSchedule::Constant { alpha: 0.0008 }, k), 0.0008);
        }
        assert!(StepSchedule::Constant { alpha: 0.0 }.validate().is_err());
        assert!(StepSchedule::Inverse { alpha0: f64::NAN }.validate().is_err());
    }

    #[test]
    fn algorithm_names_round_trip() {
        for a in Algorithm::ALL {
            assert_eq!(a.name().parse::<Algorithm>().unwrap(), a);
        }
        assert!("sgd".parse::<Algorithm>().is_err());
    }

    #[test]
    fn tv_examples() {
        let x = ModelVector::from(vec![1.0, -2.0]);
        assert_eq!(tv_subgradient(&x, &[&x, &x], 0.3).as_slice(), &[0.0, 0.0]);
        let one = ModelVector::from(vec![1.0]);
        let zero = ModelVector::from(vec![0.0]);
        assert_eq!(tv_subgradient(&one, &[&zero], 0.5).as_slice(), &[0.5]);
    }

    #[test]
    fn tv_bounded_by_neighbor_count() {
        let mut rng = RngStream::global(1, Purpose::Attack).rng();
        for _ in 0..100 {
            let x = ModelVector::from((0..5).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>());
            let msgs: Vec<ModelVector> = (0..rng.random_range(0..7))
                .map(|_| ModelVector::from((0..5).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>()))
                .collect();
            let refs: Vec<&ModelVector> = msgs.iter().collect();
            let lambda = 0.37;
            let tv = tv_subgradient(&x, &refs, lambda);
            assert!(tv.norm_inf() <= lambda * msgs.len() as f64 + 1e-15);
        }
    }

    #[test]
    fn drsa_examples() {
        let x = ModelVector::from(vec![1.0]);
        let g = ModelVector::from(vec![0.5]);
        let tv = ModelVector::from(vec![0.1]);
        assert_eq!(drsa_step(&x, &g, &tv, 0.0), x);
        assert_relative_eq!(drsa_step(&x, &g, &tv, 0.1)[0], 0.94, epsilon = 1e-15);
    }

    #[test]
    fn drsa_without_neighbors_is_gradient_descent() {
        let s = ls(&[3.0]);
        let mut x = ModelVector::from(vec![0.0]);
        let none = ModelVector::zeros(1);
        for _ in 0..200 {
            let g = s.sample_grad(0, &x).unwrap();
            x = drsa_step(&x, &g, &none, 0.1);
        }
        assert_relative_eq!(x[0], 3.0, epsilon = 1e-8);
    }

    #[test]
    fn bravo_examples() {
        let x = ModelVector::from(vec![0.7]);
        let zero = ModelVector::zeros(1);
        assert_eq!(bravo_step(&x, &zero, &zero, 0.3), x);
        // Lower-bound cancellation: g = −λ|B_w|, tv = +λ|B_w|.
        let x0 = ModelVector::zeros(1);
        let g = ModelVector::from(vec![-0.2]);
        let tv = ModelVector::from(vec![0.2]);
        assert_eq!(bravo_step(&x0, &g, &tv, 0.05), x0);
        // α = 1 with J = 1 jumps to the sample.
        let s = ls(&[2.5]);
        let g = s.sample_grad(0, &ModelVector::from(vec![-4.0])).unwrap();
        assert_eq!(bravo_step(&ModelVector::from(vec![-4.0]), &g, &zero, 1.0)[0], 2.5);
    }

    #[test]
    fn saga_at_initialization_returns_full_gradient() {
        let s = ls(&[0.5, -1.0, 2.0, 4.0]);
        let x0 = [0.3];
        let full = s.full_grad(&x0);
        for i in 0..4 {
            let mut st = SagaState::new(&s, &x0, false);
            let g = saga_grad(&mut st, &s, i, &ModelVector::from(x0.to_vec())).unwrap();
            assert_relative_eq!(g[0], full[0], epsilon = 1e-14);
        }
    }

    #[test]
    fn saga_updates_table_row_and_mean() {
        let s = ls(&[0.0, 1.0, 2.0]);
        let mut st = SagaState::new(&s, &[0.0], true);
        let x = ModelVector::from(vec![1.0]);
        saga_grad(&mut st, &s, 1, &x).unwrap();
        assert_eq!(st.row(1), &[0.0]);
        let exact: f64 = (0..3).map(|j| st.row(j)[0]).sum::<f64>() / 3.0;
        assert_relative_eq!(st.mean()[0], exact, epsilon = 1e-15);
        assert_relative_eq!(st.anchor_spread(&[0.0]).unwrap(), 1.0 / 3.0, epsilon = 1e-15);
        assert!(saga_grad(&mut st, &s, 3, &x).is_err());
    }

    #[test]
    fn lsvrg_with_reference_at_iterate_is_full_gradient() {
        let s = ls(&[0.5, -1.0, 2.0, 4.0]);
        let x = [1.5];
        let full = s.full_grad(&x);
        let mut st = LsvrgState::new(&s, &x);
        for i in 0..4 {
            let g = st.corrected_grad(&s, &[i], &x, false);
            assert_relative_eq!(g[0], full[0], epsilon = 1e-14);
        }
    }

    #[test]
    fn lsvrg_single_sample_always_refreshes() {
        let s = ls(&[2.0]);
        let mut st = LsvrgState::new(&s, &[0.0]);
        for k in 0..5 {
            let x = ModelVector::from(vec![k as f64]);
            let g = lsvrg_grad(&mut st, &s, 0, &x, RngStream::new(0, 0, Purpose::LsvrgCoin, k)).unwrap();
            assert_eq!(g[0], k as f64 - 2.0);
            assert_eq!(st.reference(), &x);
        }
    }

    #[test]
    fn lsvrg_coin_frequency() {
        let hits = (0..20_000)
            .filter(|&k| lsvrg_coin(RngStream::new(3, 1, Purpose::LsvrgCoin, k), 10))
            .count();
        // Binomial(20000, 0.1): sd ≈ 42.
        assert!((1790..=2210).contains(&hits), "{hits}");
    }

    #[test]
    fn dpsgd_examples() {
        let w = DMatrix::from_element(2, 2, 0.5);
        check_row_stochastic(&w).unwrap();
        let msgs = vec![ModelVector::from(vec![0.0]), ModelVector::from(vec![2.0])];
        let zero = ModelVector::zeros(1);
        assert_eq!(dpsgd_step(&msgs, &w, 0, &zero, 0.1)[0], 1.0);
        assert_eq!(dpsgd_step(&msgs, &w, 1, &zero, 0.1)[0], 1.0);

        let same = vec![ModelVector::from(vec![3.0, -1.0]); 2];
        assert_eq!(dpsgd_step(&same, &w, 0, &ModelVector::zeros(2), 0.1), same[0]);

        let bad = DMatrix::from_row_slice(2, 2, &[0.5, 0.6, 0.5, 0.5]);
        assert!(matches!(check_row_stochastic(&bad), Err(AlgorithmError::NotRowStochastic { row: 0, .. })));
    }

    #[test]
    fn dpsgd_byzantine_shift_is_linear() {
        // Agent 0 mixes with weight ρ = 1/4 a Byzantine message M·1.
        let w = DMatrix::from_element(4, 4, 0.25);
        let honest = vec![ModelVector::from(vec![1.0, 1.0]); 4];
        let mut attacked = honest.clone();
        attacked[3] = ModelVector::from(vec![1.0 + 40.0, 1.0 + 40.0]);
        let g = ModelVector::zeros(2);
        let base = dpsgd_step(&honest, &w, 0, &g, 0.1);
        let shifted = dpsgd_step(&attacked, &w, 0, &g, 0.1);
        for c in 0..2 {
            assert_relative_eq!(shifted[c] - base[c], 0.25 * 40.0, epsilon = 1e-12);
        }
    }
}
