//! Model vectors and stacked multi-agent states.
//!
//! Every agent carries a dense `f64` vector of the same length `p`. A
//! [`StackedState`] collects the models of the regular agents keyed by agent
//! id; its flat concatenation follows ascending id order.

use std::collections::BTreeMap;
use std::ops::{Index, IndexMut};

use thiserror::Error;

/// Agents are identified by their index in the network, `0..N`.
pub type AgentId = usize;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("non-finite entry at coordinate {index}")]
    NonFinite { index: usize },
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("agent sets differ between stacked states")]
    AgentSetMismatch,
}

/// A single agent's model.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelVector(Vec<f64>);

impl ModelVector {
    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn filled(dim: usize, value: f64) -> Self {
        Self(vec![value; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.0.iter()
    }

    /// First coordinate that is NaN or infinite, if any.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.0.iter().position(|v| !v.is_finite())
    }

    pub fn ensure_finite(&self) -> Result<(), ModelError> {
        match self.first_non_finite() {
            Some(index) => Err(ModelError::NonFinite { index }),
            None => Ok(()),
        }
    }

    pub fn norm_sq(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum()
    }

    pub fn norm_inf(&self) -> f64 {
        self.0.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self(self.0.iter().map(|v| v * factor).collect())
    }

    /// `self += factor * other`.
    pub fn axpy(&mut self, factor: f64, other: &ModelVector) {
        debug_assert_eq!(self.dim(), other.dim());
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += factor * b;
        }
    }

    pub fn sub(&self, other: &ModelVector) -> Self {
        debug_assert_eq!(self.dim(), other.dim());
        Self(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect())
    }

    pub fn dist_sq(&self, other: &ModelVector) -> f64 {
        debug_assert_eq!(self.dim(), other.dim());
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }
}

impl From<Vec<f64>> for ModelVector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

impl From<&[f64]> for ModelVector {
    fn from(v: &[f64]) -> Self {
        Self(v.to_vec())
    }
}

impl Index<usize> for ModelVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl IndexMut<usize> for ModelVector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.0[i]
    }
}

/// Scalar sign with `sign(0) = 0`.
#[inline]
pub fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Entrywise sign. Exact zeros (either signed zero) map to 0.
pub fn sign_vec(v: &ModelVector) -> Result<ModelVector, ModelError> {
    v.ensure_finite()?;
    Ok(ModelVector(v.0.iter().map(|&x| sign(x)).collect()))
}

/// Mean of equally-weighted vectors computed as `v_0 + (1/n) Σ (v_i - v_0)`.
///
/// Shifting by the first element keeps the result bit-exact when all inputs
/// are identical, which plain summation does not guarantee.
pub fn shifted_mean<'a, I>(dim: usize, vectors: I) -> Option<Vec<f64>>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let mut iter = vectors.into_iter();
    let first = iter.next()?;
    debug_assert_eq!(first.len(), dim);
    let mut acc = vec![0.0; dim];
    let mut count = 1usize;
    for v in iter {
        for ((a, x), f) in acc.iter_mut().zip(v).zip(first) {
            *a += x - f;
        }
        count += 1;
    }
    let n = count as f64;
    Some(first.iter().zip(&acc).map(|(f, a)| f + a / n).collect())
}

/// Models of the regular agents, ordered by ascending agent id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct StackedState {
    per_agent: BTreeMap<AgentId, ModelVector>,
}

impl StackedState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Every listed agent gets a copy of `model`.
    pub fn replicate(agents: &[AgentId], model: &ModelVector) -> Self {
        Self {
            per_agent: agents.iter().map(|&a| (a, model.clone())).collect(),
        }
    }

    pub fn insert(&mut self, agent: AgentId, model: ModelVector) -> Option<ModelVector> {
        self.per_agent.insert(agent, model)
    }

    pub fn get(&self, agent: AgentId) -> Option<&ModelVector> {
        self.per_agent.get(&agent)
    }

    pub fn len(&self) -> usize {
        self.per_agent.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_agent.is_empty()
    }

    pub fn agents(&self) -> impl Iterator<Item = AgentId> + '_ {
        self.per_agent.keys().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (AgentId, &ModelVector)> {
        self.per_agent.iter().map(|(&a, m)| (a, m))
    }

    /// Shared model dimension, or `None` for an empty state.
    pub fn dim(&self) -> Option<usize> {
        self.per_agent.values().next().map(ModelVector::dim)
    }

    /// Concatenation of all models in ascending agent order.
    pub fn stack(&self) -> Vec<f64> {
        self.per_agent
            .values()
            .flat_map(|m| m.as_slice().iter().copied())
            .collect()
    }

    /// Inverse of [`stack`](Self::stack) for the given (sorted) agent list.
    pub fn unstack(agents: &[AgentId], dim: usize, flat: &[f64]) -> Result<Self, ModelError> {
        if flat.len() != agents.len() * dim {
            return Err(ModelError::DimensionMismatch {
                expected: agents.len() * dim,
                actual: flat.len(),
            });
        }
        let mut sorted = agents.to_vec();
        sorted.sort_unstable();
        let per_agent = sorted
            .iter()
            .enumerate()
            .map(|(i, &a)| (a, ModelVector::from(&flat[i * dim..(i + 1) * dim])))
            .collect();
        Ok(Self { per_agent })
    }
}

impl FromIterator<(AgentId, ModelVector)> for StackedState {
    fn from_iter<T: IntoIterator<Item = (AgentId, ModelVector)>>(iter: T) -> Self {
        Self {
            per_agent: iter.into_iter().collect(),
        }
    }
}

/// `Σ_w ‖a_w − b_w‖²` over a shared agent set.
pub fn sq_dist(a: &StackedState, b: &StackedState) -> Result<f64, ModelError> {
    if a.len() != b.len() || a.agents().zip(b.agents()).any(|(x, y)| x != y) {
        return Err(ModelError::AgentSetMismatch);
    }
    let mut total = 0.0;
    for ((_, x), (_, y)) in a.iter().zip(b.iter()) {
        if x.dim() != y.dim() {
            return Err(ModelError::DimensionMismatch {
                expected: x.dim(),
                actual: y.dim(),
            });
        }
        total += x.dist_sq(y);
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn sign_of_zero_is_zero() {
        let s = sign_vec(&ModelVector::from(vec![0.0, -0.0])).unwrap();
        assert_eq!(s.as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn sign_of_mixed_entries() {
        let s = sign_vec(&ModelVector::from(vec![3.2, -0.5, 7.0])).unwrap();
        assert_eq!(s.as_slice(), &[1.0, -1.0, 1.0]);
    }

    #[test]
    fn sign_rejects_nan() {
        let err = sign_vec(&ModelVector::from(vec![1.0, f64::NAN])).unwrap_err();
        assert_eq!(err, ModelError::NonFinite { index: 1 });
        assert!(sign_vec(&ModelVector::from(vec![f64::INFINITY])).is_err());
    }

    fn state(entries: &[(AgentId, Vec<f64>)]) -> StackedState {
        entries
            .iter()
            .map(|(a, v)| (*a, ModelVector::from(v.clone())))
            .collect()
    }

    #[test]
    fn sq_dist_examples() {
        let a = state(&[(0, vec![1.0, 2.0])]);
        let b = state(&[(0, vec![0.0, 0.0])]);
        assert_eq!(sq_dist(&a, &a).unwrap(), 0.0);
        assert_eq!(sq_dist(&a, &b).unwrap(), 5.0);

        let c = state(&[(1, vec![1.0, 1.0, 1.0]), (4, vec![2.0, 2.0, 2.0])]);
        let d = state(&[(1, vec![0.0; 3]), (4, vec![1.0; 3])]);
        assert_eq!(sq_dist(&c, &d).unwrap(), 6.0);
    }

    #[test]
    fn sq_dist_rejects_mismatched_agents() {
        let a = state(&[(0, vec![1.0])]);
        let b = state(&[(1, vec![1.0])]);
        assert_eq!(sq_dist(&a, &b), Err(ModelError::AgentSetMismatch));
        let c = state(&[(0, vec![1.0]), (1, vec![1.0])]);
        assert_eq!(sq_dist(&a, &c), Err(ModelError::AgentSetMismatch));
    }

    #[test]
    fn shifted_mean_is_exact_for_identical_rows() {
        let row = vec![-0.2, 0.1, 1.0 / 3.0];
        let rows = vec![row.clone(); 37];
        let mean = shifted_mean(3, rows.iter().map(Vec::as_slice)).unwrap();
        assert_eq!(mean, row);
        assert!(shifted_mean(3, std::iter::empty()).is_none());
    }

    fn finite_vec() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(
            prop_oneof![Just(0.0), Just(-0.0), -1e6..1e6f64],
            0..24,
        )
    }

    proptest! {
        #[test]
        fn sign_entries_are_ternary(v in finite_vec()) {
            let s = sign_vec(&ModelVector::from(v.clone())).unwrap();
            for (x, sx) in v.iter().zip(s.iter()) {
                prop_assert!(*sx == -1.0 || *sx == 0.0 || *sx == 1.0);
                prop_assert_eq!(*sx == 0.0, *x == 0.0);
            }
        }

        #[test]
        fn sign_is_odd(v in prop::collection::vec(1e-9..1e6f64, 1..16), flips in prop::collection::vec(any::<bool>(), 16)) {
            let v: Vec<f64> = v.iter().zip(&flips).map(|(x, f)| if *f { -x } else { *x }).collect();
            let pos = sign_vec(&ModelVector::from(v.clone())).unwrap();
            let neg = sign_vec(&ModelVector::from(v).scaled(-1.0)).unwrap();
            prop_assert_eq!(pos.scaled(-1.0), neg);
        }

        #[test]
        fn stack_unstack_round_trip(dim in 0usize..6, ids in prop::collection::btree_set(0usize..40, 0..8), seed in any::<u64>()) {
            let agents: Vec<AgentId> = ids.into_iter().collect();
            let mut x = seed;
            let s: StackedState = agents.iter().map(|&a| {
                let v = (0..dim).map(|_| {
                    x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    f64::from_bits((x >> 12) | 0x3ff0_0000_0000_0000) - 1.5
                }).collect::<Vec<_>>();
                (a, ModelVector::from(v))
            }).collect();
            let back = StackedState::unstack(&agents, dim, &s.stack()).unwrap();
            prop_assert_eq!(back.stack().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                            s.stack().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
            prop_assert_eq!(back, s);
        }

        #[test]
        fn sq_dist_is_a_squared_metric(a in prop::collection::vec(-1e3..1e3f64, 1..6), b in prop::collection::vec(-1e3..1e3f64, 1..6)) {
            let n = a.len().min(b.len());
            let sa = state(&[(2, a[..n].to_vec())]);
            let sb = state(&[(2, b[..n].to_vec())]);
            let ab = sq_dist(&sa, &sb).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert_eq!(ab, sq_dist(&sb, &sa).unwrap());
            prop_assert_eq!(ab == 0.0, a[..n] == b[..n]);
        }
    }
}
