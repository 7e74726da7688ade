//! Experiment configuration.
//!
//! Files are flat lists of dotted keys (`topology.n = 100`), which is valid
//! TOML, so parsing goes through the `toml` crate into typed sections with
//! unknown keys rejected.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::EngineError;
use crate::algorithms::{Algorithm, StepSchedule};
use crate::attacks::AttackSpec;
use crate::rng::{Purpose, RngStream};

fn default_log_every() -> u64 {
    10
}

/// Everything needed to reproduce one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed; every component seed not set explicitly derives from it.
    #[serde(default)]
    pub seed: u64,
    pub rounds: u64,
    #[serde(default = "default_log_every")]
    pub log_every: u64,
    pub topology: TopologyConfig,
    #[serde(default)]
    pub byzantine: ByzantineConfig,
    #[serde(default)]
    pub attack: AttackConfig,
    pub problem: ProblemConfig,
    pub algorithm: AlgorithmConfig,
    #[serde(default)]
    pub reference: ReferenceConfig,
    #[serde(default)]
    pub metrics: MetricsConfig,
    #[serde(default)]
    pub theory: TheoryConfig,
    /// Run outputs recorded in headers. Ignored on input.
    #[serde(default, skip_serializing)]
    pub run: Option<toml::Table>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopologyKind {
    ErdosRenyi,
    Complete,
    Ring,
    Path,
    Star,
    /// Read from an edge-list file.
    Edges,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologyConfig {
    pub kind: TopologyKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edges: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

fn default_retries() -> usize {
    1000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ByzantineConfig {
    #[serde(default)]
    pub count: usize,
    /// Explicit Byzantine ids; overrides `count` and the random assignment.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ids: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default = "default_retries")]
    pub max_retries: usize,
}

impl Default for ByzantineConfig {
    fn default() -> Self {
        Self {
            count: 0,
            ids: None,
            seed: None,
            max_retries: default_retries(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    #[default]
    None,
    Gaussian,
    SignFlip,
    SampleDuplicate,
    Lowerbound,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    #[serde(default)]
    pub kind: AttackKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub std: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<usize>,
}

impl AttackConfig {
    /// The attack with defaults filled in (`std = 100`, `c = −4`, target =
    /// lowest regular id).
    pub fn spec(&self, first_regular: usize) -> AttackSpec {
        match self.kind {
            AttackKind::None => AttackSpec::None,
            AttackKind::Gaussian => AttackSpec::Gaussian {
                std: self.std.unwrap_or(100.0),
            },
            AttackKind::SignFlip => AttackSpec::SignFlip {
                c: self.c.unwrap_or(-4.0),
            },
            AttackKind::SampleDuplicate => AttackSpec::SampleDuplicate {
                target: self.target.unwrap_or(first_regular),
            },
            AttackKind::Lowerbound => AttackSpec::LowerBound,
        }
    }

    /// Writes the realized parameters back so headers are explicit.
    pub fn record(&mut self, spec: &AttackSpec) {
        match *spec {
            AttackSpec::Gaussian { std } => self.std = Some(std),
            AttackSpec::SignFlip { c } => self.c = Some(c),
            AttackSpec::SampleDuplicate { target } => self.target = Some(target),
            AttackSpec::None | AttackSpec::LowerBound => {}
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProblemKindConfig {
    LeastSquares,
    Softmax,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionKind {
    #[default]
    Iid,
    Noniid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    pub kind: ProblemKindConfig,
    /// `J` for synthetic least squares.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples_per_agent: Option<usize>,
    /// Explicit scalar least-squares samples, one list per agent; replaces
    /// the synthetic data.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_images: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_labels: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_images: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_labels: Option<PathBuf>,
    /// Keep only this many training samples (seeded shuffle, then first `k`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subsample: Option<usize>,
    #[serde(default)]
    pub partition: PartitionKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classes: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepKind {
    #[default]
    Constant,
    Inverse,
    InverseSqrt,
}

fn default_batch() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlgorithmConfig {
    pub name: Algorithm,
    #[serde(default)]
    pub step: StepKind,
    pub alpha: f64,
    #[serde(default)]
    pub lambda: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
}

impl AlgorithmConfig {
    pub fn schedule(&self) -> StepSchedule {
        match self.step {
            StepKind::Constant => StepSchedule::Constant { alpha: self.alpha },
            StepKind::Inverse => StepSchedule::Inverse { alpha0: self.alpha },
            StepKind::InverseSqrt => StepSchedule::InverseSqrt { alpha0: self.alpha },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceKind {
    /// Minimizer of the regular agents' averaged cost, replicated.
    #[default]
    Consensus,
    /// Minimizer of the TV-penalized problem (least squares only).
    Tv,
    /// No reference: convergence error and Lyapunov columns stay empty.
    None,
}

fn default_tol() -> f64 {
    1e-10
}

fn default_max_iters() -> usize {
    100_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceConfig {
    #[serde(default)]
    pub kind: ReferenceKind,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
}

impl Default for ReferenceConfig {
    fn default() -> Self {
        Self {
            kind: ReferenceKind::Consensus,
            tol: default_tol(),
            max_iters: default_max_iters(),
        }
    }
}

fn default_window() -> usize {
    100
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsConfig {
    #[serde(default)]
    pub lyapunov: bool,
    #[serde(default = "default_window")]
    pub grad_noise_window: usize,
    /// Wall-clock column; off by default because it breaks byte-identical
    /// traces.
    #[serde(default)]
    pub wall_time: bool,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            lyapunov: false,
            grad_noise_window: default_window(),
            wall_time: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TheoryConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps: Option<f64>,
}

/// Component indices used when deriving seeds from the master seed.
const TOPOLOGY_SEED: usize = 0;
const BYZANTINE_SEED: usize = 1;
const DATA_SEED: usize = 2;

/// Derived seeds keep 63 bits so they fit TOML's signed integers.
fn derived(master: u64, component: usize) -> u64 {
    RngStream::new(master, component, Purpose::SeedDerivation, 0).derive_seed() >> 1
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, EngineError> {
        toml::from_str(text).map_err(|e| EngineError::Config(e.to_string().trim().replace('\n', " ")))
    }

    /// Reads a config file; relative paths inside it are taken relative to
    /// the file's directory.
    pub fn from_file(path: &Path) -> Result<Self, EngineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| EngineError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut config = Self::parse(&text)?;
        if let Some(base) = path.parent() {
            config.rebase_paths(base);
        }
        Ok(config)
    }

    fn rebase_paths(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(path) = p.as_mut() {
                if path.is_relative() {
                    *path = base.join(&*path);
                }
            }
        };
        fix(&mut self.topology.edges);
        fix(&mut self.problem.train_images);
        fix(&mut self.problem.train_labels);
        fix(&mut self.problem.test_images);
        fix(&mut self.problem.test_labels);
    }

    /// Fills every seed that is still unset from the master seed.
    pub fn resolve_seeds(&mut self) {
        let master = self.seed;
        self.topology.seed.get_or_insert_with(|| derived(master, TOPOLOGY_SEED));
        self.byzantine.seed.get_or_insert_with(|| derived(master, BYZANTINE_SEED));
        self.problem.seed.get_or_insert_with(|| derived(master, DATA_SEED));
    }

    /// Replaces the master seed and re-derives component seeds.
    pub fn with_master_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.topology.seed = None;
        self.byzantine.seed = None;
        self.problem.seed = None;
        self.resolve_seeds();
        self
    }

    /// Flat `key = value` lines, one per set field, in a stable order.
    pub fn to_flat_string(&self) -> String {
        let value = toml::Value::try_from(self).expect("config serializes");
        let mut lines = BTreeMap::new();
        flatten("", &value, &mut lines);
        let mut out = String::new();
        for (k, v) in lines {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    /// Sets one dotted key from its TOML value text, e.g.
    /// `set("algorithm.batch_size", "10")`.
    pub fn set(&self, key: &str, value: &str) -> Result<Self, EngineError> {
        // Duplicate keys are an error in TOML, so drop the old line first.
        let filtered: String = self
            .to_flat_string()
            .lines()
            .filter(|line| !line.starts_with(&format!("{key} = ")))
            .map(|l| format!("{l}\n"))
            .chain(std::iter::once(format!("{key} = {value}\n")))
            .collect();
        Self::parse(&filtered)
    }
}

fn flatten(prefix: &str, value: &toml::Value, out: &mut BTreeMap<String, String>) {
    match value {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        other => {
            out.insert(prefix.to_string(), other.to_string());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const FIG1: &str = r#"
seed = 7
rounds = 100
topology.kind = "complete"
topology.n = 4
byzantine.count = 1
attack.kind = "gaussian"
attack.std = 100.0
problem.kind = "least_squares"
problem.samples_per_agent = 10000
algorithm.name = "drsa"
algorithm.alpha = 0.0008
algorithm.lambda = 0.005
"#;

    #[test]
    fn parses_dotted_keys() {
        let c = ExperimentConfig::parse(FIG1).unwrap();
        assert_eq!(c.topology.n, Some(4));
        assert_eq!(c.algorithm.name, Algorithm::Drsa);
        assert_eq!(c.algorithm.batch_size, 1);
        assert_eq!(c.log_every, 10);
        assert_eq!(c.attack.spec(0), AttackSpec::Gaussian { std: 100.0 });
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = ExperimentConfig::parse(&format!("{FIG1}algorithm.lamda = 1.0\n")).unwrap_err();
        assert!(err.to_string().contains("lamda"), "{err}");
        let err = ExperimentConfig::parse(&FIG1.replace("\"drsa\"", "\"sgd\"")).unwrap_err();
        assert!(err.to_string().contains("sgd"), "{err}");
    }

    #[test]
    fn flat_form_round_trips() {
        let mut c = ExperimentConfig::parse(FIG1).unwrap();
        c.resolve_seeds();
        let text = c.to_flat_string();
        assert!(text.contains("topology.n = 4\n"), "{text}");
        assert_eq!(ExperimentConfig::parse(&text).unwrap(), c);
    }

    #[test]
    fn seeds_derive_from_master() {
        let a = ExperimentConfig::parse(FIG1).unwrap().with_master_seed(1);
        let b = ExperimentConfig::parse(FIG1).unwrap().with_master_seed(1);
        let c = ExperimentConfig::parse(FIG1).unwrap().with_master_seed(2);
        assert_eq!(a, b);
        assert_ne!(a.topology.seed, c.topology.seed);
        assert_ne!(a.topology.seed, a.problem.seed);
    }

    #[test]
    fn set_overrides_one_key() {
        let c = ExperimentConfig::parse(FIG1).unwrap();
        let d = c.set("algorithm.batch_size", "10").unwrap();
        assert_eq!(d.algorithm.batch_size, 10);
        assert_eq!(d.algorithm.alpha, c.algorithm.alpha);
        assert!(c.set("algorithm.batch", "10").is_err());
    }

    #[test]
    fn run_section_is_ignored_on_input() {
        let c = ExperimentConfig::parse(&format!("{FIG1}run.lambda0 = 0.3\n")).unwrap();
        assert!(!c.to_flat_string().contains("run."));
    }
}
