//! Subcommands of `bravo-sim`, callable as plain functions.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use thiserror::Error;

use bravo_core::algorithms::{Algorithm, LsvrgState, SagaState, StepSchedule};
use bravo_core::engine::{
    prepare, run_experiment, EngineError, ExperimentConfig, MetricsConfig, ReferenceKind, RunOutput, Setup,
    Simulation,
};
use bravo_core::problems::{DataError, Shard};
use bravo_core::rng::{Purpose, RngStream};
use bravo_core::theory::{build_lowerbound_instance, TheoryError};

/// Tolerance of the lower-bound report.
pub const LOWERBOUND_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("{message}")]
    Divergence { message: String, output: Box<RunOutput> },
    #[error("lower bound mismatch: measured {measured:e}, analytic {analytic:e}")]
    LowerBoundMismatch { measured: f64, analytic: f64 },
    #[error("refusing to overwrite {0} (pass --force)")]
    Exists(PathBuf),
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("selftest failed: {0}")]
    Selftest(String),
}

impl CliError {
    /// Process exit code: 2 config, 3 data, 4 divergence, 5 lower-bound
    /// mismatch, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Exists(_) => 2,
            CliError::Data(_) => 3,
            CliError::Divergence { .. } => 4,
            CliError::LowerBoundMismatch { .. } => 5,
            CliError::Io { .. } | CliError::Selftest(_) => 1,
        }
    }
}

impl From<EngineError> for CliError {
    fn from(e: EngineError) -> Self {
        match e {
            EngineError::Data(d) => CliError::Data(d.to_string()),
            EngineError::Divergence { agent, round, output } => CliError::Divergence {
                message: format!("diverged: agent {agent} after round {round}"),
                output,
            },
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<TheoryError> for CliError {
    fn from(e: TheoryError) -> Self {
        CliError::Config(e.to_string())
    }
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn make_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_config(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig, CliError> {
    let config = ExperimentConfig::from_file(path)?;
    Ok(match seed {
        Some(s) => config.with_master_seed(s),
        None => config,
    })
}

/// Writes `trace.csv` and `header.txt` into `out`.
pub fn write_output(out: &Path, output: &RunOutput) -> Result<(), CliError> {
    write(&out.join("trace.csv"), &output.trace.to_csv())?;
    write(&out.join("header.txt"), &output.header_text())
}

fn check_fresh(out: &Path, force: bool) -> Result<(), CliError> {
    for name in ["trace.csv", "header.txt", "summary.csv"] {
        let p = out.join(name);
        if p.exists() && !force {
            return Err(CliError::Exists(p));
        }
    }
    Ok(())
}

/// Runs one experiment and writes its trace and header. A diverged run still
/// writes its partial trace.
pub fn cmd_run(config: &ExperimentConfig, out: &Path, threads: Option<usize>, force: bool) -> Result<RunOutput, CliError> {
    check_fresh(out, force)?;
    make_dir(out)?;
    match run_experiment(config, threads) {
        Ok(output) => {
            write_output(out, &output)?;
            Ok(output)
        }
        Err(EngineError::Divergence { agent, round, output }) => {
            write_output(out, &output)?;
            Err(EngineError::Divergence { agent, round, output }.into())
        }
        Err(e) => Err(e.into()),
    }
}

/// Parameters a sweep can vary, with their config keys.
pub const SWEEP_PARAMS: [(&str, &str); 5] = [
    ("batch_size", "algorithm.batch_size"),
    ("lambda", "algorithm.lambda"),
    ("alpha", "algorithm.alpha"),
    ("byzantine_count", "byzantine.count"),
    ("algorithm", "algorithm.name"),
];

/// One line of `summary.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub value: String,
    pub conv_err: Option<f64>,
    pub accuracy: Option<f64>,
    pub diverged: bool,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:e}")).unwrap_or_default()
}

/// One run per value of `param`, all sharing the base config's resolved
/// seeds. Writes `<param>=<value>/` subdirectories and `summary.csv` with
/// final-window (last 10%) means.
pub fn cmd_sweep(
    config: &ExperimentConfig,
    param: &str,
    values: &[String],
    out: &Path,
    threads: Option<usize>,
    force: bool,
) -> Result<Vec<SweepRow>, CliError> {
    let key = SWEEP_PARAMS
        .iter()
        .find(|(name, _)| *name == param)
        .map(|(_, key)| *key)
        .ok_or_else(|| {
            let names: Vec<&str> = SWEEP_PARAMS.iter().map(|(n, _)| *n).collect();
            CliError::Config(format!("unknown sweep parameter `{param}` (expected one of {})", names.join(", ")))
        })?;
    if values.is_empty() {
        return Err(CliError::Config("sweep needs at least one value".into()));
    }
    check_fresh(out, force)?;
    let mut base = config.clone();
    base.resolve_seeds();
    if param == "byzantine_count" {
        base.byzantine.ids = None;
    }
    let mut rows = Vec::new();
    for value in values {
        let literal = if param == "algorithm" { format!("\"{value}\"") } else { value.clone() };
        let cfg = base.set(key, &literal)?;
        let dir = out.join(format!("{param}={value}"));
        let (output, diverged) = match cmd_run(&cfg, &dir, threads, force) {
            Ok(o) => (o, false),
            Err(CliError::Divergence { output, .. }) => (*output, true),
            Err(e) => return Err(e),
        };
        rows.push(SweepRow {
            value: value.clone(),
            conv_err: output.trace.final_mean(0.1, |r| r.conv_err),
            accuracy: output.trace.final_mean(0.1, |r| r.accuracy),
            diverged,
        });
    }
    let mut text = format!("{param},final_conv_err,final_accuracy,diverged\n");
    for r in &rows {
        text.push_str(&format!("{},{},{},{}\n", r.value, opt(r.conv_err), opt(r.accuracy), r.diverged));
    }
    write(&out.join("summary.csv"), &text)?;
    Ok(rows)
}

/// Inputs of the lower-bound run.
#[derive(Debug, Clone, PartialEq)]
pub struct LowerBoundArgs {
    pub regular: usize,
    pub byz_per_agent: usize,
    pub lambda: f64,
    pub dim: usize,
    pub algorithm: Algorithm,
    pub rounds: u64,
    pub samples: usize,
    pub alpha: f64,
    pub seed: u64,
}

impl Default for LowerBoundArgs {
    fn default() -> Self {
        Self {
            regular: 3,
            byz_per_agent: 2,
            lambda: 0.1,
            dim: 5,
            algorithm: Algorithm::BravoSaga,
            rounds: 1000,
            samples: 10,
            alpha: 0.01,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LowerBoundReport {
    pub measured: f64,
    pub analytic: f64,
    pub diff: f64,
    /// Whether every regular iterate was exactly zero after every round.
    pub all_zero: bool,
}

impl LowerBoundReport {
    pub fn passed(&self) -> bool {
        self.diff <= LOWERBOUND_TOL
    }
}

impl fmt::Display for LowerBoundReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "measured = {:e}", self.measured)?;
        writeln!(f, "analytic = {:e}", self.analytic)?;
        writeln!(f, "diff = {:e}", self.diff)?;
        write!(f, "iterates_zero = {}", self.all_zero)
    }
}

/// Runs the adversarial lower-bound instance and compares the final error
/// with `Σ_w λ²|B_w|²p`.
pub fn cmd_lowerbound(args: &LowerBoundArgs) -> Result<LowerBoundReport, CliError> {
    let inst = build_lowerbound_instance(args.regular, args.byz_per_agent, args.lambda, args.dim, args.samples)?;
    let analytic = inst.analytic_error();
    let setup = Setup {
        network: inst.network.clone(),
        problem: inst.problem.clone(),
        attack: inst.attack,
        algorithm: args.algorithm,
        schedule: StepSchedule::Constant { alpha: args.alpha },
        lambda: args.lambda,
        batch_size: 1,
        seed: args.seed,
        x_star: Some(inst.x_star.clone()),
        test_set: None,
        probe: None,
        metrics: MetricsConfig::default(),
        theory: None,
    };
    let mut sim = Simulation::new(setup)?;
    let regular = inst.network.regular_agents();
    let mut all_zero = true;
    for _ in 0..args.rounds {
        if let Err(d) = sim.step() {
            return Err(CliError::Config(format!("lower-bound run diverged at agent {}", d.agent)));
        }
        all_zero &= regular.iter().all(|&w| sim.model(w).iter().all(|&v| v == 0.0));
    }
    let measured = sim.measure().conv_err.expect("reference is set");
    let report = LowerBoundReport {
        measured,
        analytic,
        diff: (measured - analytic).abs(),
        all_zero,
    };
    if report.passed() {
        Ok(report)
    } else {
        Err(CliError::LowerBoundMismatch { measured, analytic })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Lambda0Report {
    pub lambda0: f64,
    pub sigma_min: Option<f64>,
    pub max_grad_inf: f64,
    pub lambda: f64,
}

impl Lambda0Report {
    pub fn meets_threshold(&self) -> bool {
        self.lambda >= self.lambda0
    }
}

impl fmt::Display for Lambda0Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "lambda0 = {:.12}", self.lambda0)?;
        match self.sigma_min {
            Some(s) => writeln!(f, "sigma_min = {s:.12}")?,
            None => writeln!(f, "sigma_min = n/a")?,
        }
        writeln!(f, "max_grad_inf = {:.12}", self.max_grad_inf)?;
        if self.meets_threshold() {
            write!(f, "threshold met: lambda = {} >= lambda0", self.lambda)
        } else {
            write!(f, "warning: lambda = {} is below lambda0", self.lambda)
        }
    }
}

/// `λ₀`, `σ̃_min(A)` and the gradient heterogeneity of a config's instance.
pub fn cmd_lambda0(config: &ExperimentConfig) -> Result<Lambda0Report, CliError> {
    let mut config = config.clone();
    config.reference.kind = ReferenceKind::Consensus;
    let prepared = prepare(&config)?;
    let info = &prepared.info;
    Ok(Lambda0Report {
        lambda0: info.get_f64("lambda0").expect("consensus reference computed"),
        sigma_min: info.get_f64("sigma_min"),
        max_grad_inf: info.get_f64("max_grad_inf").unwrap_or(0.0),
        lambda: prepared.config.algorithm.lambda,
    })
}

/// Largest deviation between the enumerated mean of the corrected gradient
/// and the full local gradient, for SAGA (random fixed table) and LSVRG
/// (random fixed reference), on a random `J × p` least-squares shard.
pub fn unbiasedness_gaps(samples: usize, dim: usize, seed: u64) -> (f64, f64) {
    let mut rng = RngStream::global(seed, Purpose::Probe).rng();
    let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-2.0..2.0)).collect() };
    let shard = Shard::least_squares(0, dim, draw(samples * dim)).expect("valid shard");
    let x = draw(dim);
    // A table whose rows were taken at scattered points.
    let mut saga = SagaState::new(&shard, &draw(dim), false);
    for j in 0..samples {
        saga.corrected_grad(&shard, &[j], &draw(dim));
    }
    let lsvrg = LsvrgState::new(&shard, &draw(dim));
    let full = shard.full_grad(&x);

    let mut saga_mean = vec![0.0; dim];
    let mut lsvrg_mean = vec![0.0; dim];
    for i in 0..samples {
        let g = saga.clone().corrected_grad(&shard, &[i], &x);
        let h = lsvrg.clone().corrected_grad(&shard, &[i], &x, false);
        for c in 0..dim {
            saga_mean[c] += g[c] / samples as f64;
            lsvrg_mean[c] += h[c] / samples as f64;
        }
    }
    let gap = |m: &[f64]| m.iter().zip(full.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    (gap(&saga_mean), gap(&lsvrg_mean))
}

/// The unbiasedness oracle and the lower-bound exactness check.
pub fn selftest() -> Result<Vec<String>, CliError> {
    let mut lines = Vec::new();
    let (saga, lsvrg) = unbiasedness_gaps(8, 3, 1);
    let ok = saga <= 1e-10 && lsvrg <= 1e-10;
    lines.push(format!("unbiasedness: saga gap {saga:e}, lsvrg gap {lsvrg:e}"));
    if !ok {
        return Err(CliError::Selftest(lines.join("; ")));
    }
    for algorithm in [Algorithm::Drsa, Algorithm::BravoSaga, Algorithm::BravoLsvrg] {
        let report = cmd_lowerbound(&LowerBoundArgs {
            algorithm,
            ..LowerBoundArgs::default()
        })?;
        lines.push(format!(
            "lowerbound {algorithm}: measured {:e}, analytic {:e}, iterates zero {}",
            report.measured, report.analytic, report.all_zero
        ));
        if !report.all_zero {
            return Err(CliError::Selftest(lines.join("; ")));
        }
    }
    Ok(lines)
}
