//! Messages broadcast by Byzantine agents.
//!
//! Each Byzantine agent sends one message per round to all of its neighbors.
//! Generators only read the round snapshot; they never touch regular state.

use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::model::{AgentId, ModelVector};
use crate::rng::{Purpose, RngStream};
use crate::topology::Network;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AttackError {
    #[error("gaussian attack needs a positive finite standard deviation, got {0}")]
    BadStd(f64),
    #[error("sign-flip constant must be finite, got {0}")]
    BadScale(f64),
    #[error("sample-duplicating target {0} is not a regular agent")]
    TargetNotRegular(AgentId),
    #[error("attack kind `none` requires zero Byzantine agents, found {0}")]
    ByzantineWithoutAttack(usize),
}

/// Which attack the Byzantine agents run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AttackSpec {
    None,
    /// i.i.d. `N(0, std²)` entries.
    Gaussian { std: f64 },
    /// `c` times the agent's honestly computed model.
    SignFlip { c: f64 },
    /// Colluding copy of one regular agent's current model.
    SampleDuplicate { target: AgentId },
    /// The all `−1` vector used by the lower-bound construction.
    LowerBound,
}

impl AttackSpec {
    pub fn validate(&self, net: &Network) -> Result<(), AttackError> {
        match *self {
            AttackSpec::None if net.byzantine_count() > 0 => {
                Err(AttackError::ByzantineWithoutAttack(net.byzantine_count()))
            }
            AttackSpec::Gaussian { std } if !(std > 0.0 && std.is_finite()) => Err(AttackError::BadStd(std)),
            AttackSpec::SignFlip { c } if !c.is_finite() => Err(AttackError::BadScale(c)),
            AttackSpec::SampleDuplicate { target }
                if target >= net.n_agents() || net.is_byzantine(target) =>
            {
                Err(AttackError::TargetNotRegular(target))
            }
            _ => Ok(()),
        }
    }

    /// Whether Byzantine agents must maintain an honest shadow model.
    pub fn needs_shadow_models(&self) -> bool {
        matches!(self, AttackSpec::SignFlip { .. })
    }

    pub fn name(&self) -> &'static str {
        match self {
            AttackSpec::None => "none",
            AttackSpec::Gaussian { .. } => "gaussian",
            AttackSpec::SignFlip { .. } => "sign_flip",
            AttackSpec::SampleDuplicate { .. } => "sample_duplicate",
            AttackSpec::LowerBound => "lowerbound",
        }
    }
}

pub fn gaussian_attack(dim: usize, stream: RngStream, std: f64) -> ModelVector {
    let normal = Normal::new(0.0, std).expect("validated standard deviation");
    let mut rng = stream.rng();
    ModelVector::from((0..dim).map(|_| normal.sample(&mut rng)).collect::<Vec<_>>())
}

pub fn sign_flip_attack(x_true: &ModelVector, c: f64) -> ModelVector {
    x_true.scaled(c)
}

pub fn sample_duplicate_attack(target_model: &ModelVector) -> ModelVector {
    target_model.clone()
}

pub fn lowerbound_attack(dim: usize) -> ModelVector {
    ModelVector::filled(dim, -1.0)
}

/// Read-only view of round `k` handed to the attack generators.
#[derive(Debug, Clone, Copy)]
pub struct RoundSnapshot<'a> {
    pub round: u64,
    pub seed: u64,
    pub dim: usize,
    /// Current models of all agents, indexed by id: true models for regular
    /// agents, shadow models (if maintained) for Byzantine ones.
    pub models: &'a [ModelVector],
}

/// The message Byzantine agent `agent` broadcasts in this round.
///
/// The receiver is not an input: every neighbor gets the same message. A
/// per-edge attack would add the receiving agent here.
pub fn byzantine_message(spec: &AttackSpec, agent: AgentId, snapshot: &RoundSnapshot<'_>) -> ModelVector {
    match *spec {
        AttackSpec::None => snapshot.models[agent].clone(),
        AttackSpec::Gaussian { std } => gaussian_attack(
            snapshot.dim,
            RngStream::new(snapshot.seed, agent, Purpose::Attack, snapshot.round),
            std,
        ),
        AttackSpec::SignFlip { c } => sign_flip_attack(&snapshot.models[agent], c),
        AttackSpec::SampleDuplicate { target } => sample_duplicate_attack(&snapshot.models[target]),
        AttackSpec::LowerBound => lowerbound_attack(snapshot.dim),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::sign_vec;

    #[test]
    fn gaussian_mean_concentrates() {
        let std = 100.0;
        let v = gaussian_attack(100_000, RngStream::new(1, 0, Purpose::Attack, 0), std);
        let mean = v.iter().sum::<f64>() / v.dim() as f64;
        assert!(mean.abs() < 5.0 * std / (1e5f64).sqrt(), "mean {mean}");
        let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / v.dim() as f64;
        assert!((var.sqrt() - std).abs() < 1.0, "std {}", var.sqrt());
    }

    #[test]
    fn gaussian_is_reproducible() {
        let s = RngStream::new(8, 3, Purpose::Attack, 12);
        assert_eq!(gaussian_attack(16, s, 100.0), gaussian_attack(16, s, 100.0));
    }

    #[test]
    fn sign_flip_examples() {
        let x = ModelVector::from(vec![1.0, -2.0]);
        assert_eq!(sign_flip_attack(&x, -4.0).as_slice(), &[-4.0, 8.0]);
        assert_eq!(sign_flip_attack(&x, 1.0), x);
        assert_eq!(sign_flip_attack(&x, 0.0).as_slice(), &[0.0, -0.0]);
    }

    #[test]
    fn lowerbound_message() {
        let z = lowerbound_attack(3);
        assert_eq!(z.as_slice(), &[-1.0, -1.0, -1.0]);
        let pushed = sign_vec(&ModelVector::zeros(3).sub(&z)).unwrap();
        assert_eq!(pushed.as_slice(), &[1.0, 1.0, 1.0]);
    }

    fn snapshot_models() -> Vec<ModelVector> {
        vec![
            ModelVector::from(vec![0.3, 0.7]),
            ModelVector::from(vec![1.0, 2.0]),
            ModelVector::from(vec![5.0, 5.0]),
            ModelVector::from(vec![9.0, 9.0]),
        ]
    }

    #[test]
    fn duplicating_agents_collude() {
        let models = snapshot_models();
        let snap = RoundSnapshot {
            round: 4,
            seed: 1,
            dim: 2,
            models: &models,
        };
        let spec = AttackSpec::SampleDuplicate { target: 0 };
        let a = byzantine_message(&spec, 2, &snap);
        let b = byzantine_message(&spec, 3, &snap);
        assert_eq!(a.as_slice(), &[0.3, 0.7]);
        assert_eq!(a, b);
        let moved = byzantine_message(&AttackSpec::SampleDuplicate { target: 1 }, 2, &snap);
        assert_eq!(moved, models[1]);
    }

    #[test]
    fn lowerbound_ignores_round() {
        let models = snapshot_models();
        let at = |round| {
            byzantine_message(
                &AttackSpec::LowerBound,
                3,
                &RoundSnapshot {
                    round,
                    seed: 0,
                    dim: 2,
                    models: &models,
                },
            )
        };
        assert_eq!(at(0), at(1000));
    }

    #[test]
    fn validation() {
        let net = Network::complete(4).with_byzantine(&[3]).unwrap();
        assert!(AttackSpec::Gaussian { std: 100.0 }.validate(&net).is_ok());
        assert_eq!(AttackSpec::Gaussian { std: 0.0 }.validate(&net), Err(AttackError::BadStd(0.0)));
        assert_eq!(
            AttackSpec::SampleDuplicate { target: 3 }.validate(&net),
            Err(AttackError::TargetNotRegular(3))
        );
        assert!(AttackSpec::SampleDuplicate { target: 9 }.validate(&net).is_err());
        assert_eq!(AttackSpec::None.validate(&net), Err(AttackError::ByzantineWithoutAttack(1)));
        assert!(AttackSpec::None.validate(&Network::complete(4)).is_ok());
        assert!(AttackSpec::SignFlip { c: f64::NAN }.validate(&net).is_err());
    }
}
