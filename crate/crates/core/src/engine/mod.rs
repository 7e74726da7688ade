//! Synchronous round loop: broadcast, receive, sample, update, measure.
//!
//! Every round first freezes a snapshot of all broadcast messages; agent
//! updates then read only that snapshot, so they can run in any order or in
//! parallel. Randomness comes from streams keyed by `(seed, agent, purpose,
//! round)`, which makes traces independent of the thread count.

pub mod config;
pub mod metrics;
pub mod trace;

use std::time::Instant;

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::algorithms::{
    apply_step, batch_grad, draw_batch, dpsgd_step, lsvrg_coin, step_size, tv_subgradient_into, Algorithm,
    AlgorithmError, LsvrgState, SagaState, StepSchedule,
};
use crate::attacks::{byzantine_message, AttackError, AttackSpec, RoundSnapshot};
use crate::model::{AgentId, ModelVector, StackedState};
use crate::problems::{
    load_idx_dataset, partition_iid, partition_noniid, synth_least_squares, DataError, Dataset, Problem,
    ProblemError, ProblemKind,
};
use crate::rng::{Purpose, RngStream};
use crate::theory::{
    delta_bound, lambda0, lyapunov, solve_reference, solve_tv_optimum, theory_step_bound, TheoryError,
    TheoryParams, VrView,
};
use crate::topology::{
    assign_byzantine, generate_erdos_renyi, incidence_matrix, metropolis_weights, min_nonzero_singular, Network,
    TopologyError,
};

pub use config::{
    AlgorithmConfig, AttackKind, ExperimentConfig, MetricsConfig, PartitionKind, ProblemKindConfig, ReferenceKind,
    TopologyKind,
};
pub use metrics::{accuracy_probe, model_variance, WindowVariance};
pub use trace::{MetricsRow, Trace, TRACE_HEADER};

/// Iterates with a coordinate beyond this magnitude count as diverged.
pub const DIVERGENCE_LIMIT: f64 = 1e30;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Algorithm(#[from] AlgorithmError),
    #[error(transparent)]
    Theory(#[from] TheoryError),
    #[error("diverged: agent {agent} has a non-finite or exploding iterate after round {round}")]
    Divergence {
        agent: AgentId,
        round: u64,
        output: Box<RunOutput>,
    },
}

/// A regular agent's iterate left the finite range.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Diverged {
    pub agent: AgentId,
    pub round: u64,
}

/// Everything a [`Simulation`] needs, independent of how it was configured.
#[derive(Debug, Clone)]
pub struct Setup {
    pub network: Network,
    pub problem: Problem,
    pub attack: AttackSpec,
    pub algorithm: Algorithm,
    pub schedule: StepSchedule,
    pub lambda: f64,
    pub batch_size: usize,
    /// Seed of the per-round sampling, coin and attack streams.
    pub seed: u64,
    pub x_star: Option<StackedState>,
    pub test_set: Option<Dataset>,
    pub probe: Option<AgentId>,
    pub metrics: MetricsConfig,
    pub theory: Option<TheoryParams>,
}

#[derive(Debug, Clone)]
enum VrSlot {
    Plain,
    Saga(SagaState),
    Lsvrg(LsvrgState),
}

#[derive(Debug, Clone)]
struct AgentState {
    model: ModelVector,
    vr: VrSlot,
    noise: Option<WindowVariance>,
}

/// Read-only inputs of one round's updates.
struct RoundCtx<'a> {
    setup: &'a Setup,
    weights: Option<&'a DMatrix<f64>>,
    messages: &'a [ModelVector],
    round: u64,
    alpha: f64,
    shadows: bool,
}

impl AgentState {
    fn update(&mut self, w: AgentId, ctx: &RoundCtx<'_>) {
        let s = ctx.setup;
        let shard = s.problem.shard(w);
        let byzantine = s.network.is_byzantine(w);
        if byzantine && !ctx.shadows {
            return;
        }
        let purpose = if byzantine { Purpose::ShadowSample } else { Purpose::SampleIndex };
        let indices = draw_batch(RngStream::new(s.seed, w, purpose, ctx.round), shard.len(), s.batch_size);
        let x = self.model.as_slice();
        let g = match &mut self.vr {
            VrSlot::Plain => batch_grad(shard, &indices, x),
            VrSlot::Saga(state) => state.corrected_grad(shard, &indices, x),
            VrSlot::Lsvrg(state) => {
                let refresh = lsvrg_coin(RngStream::new(s.seed, w, Purpose::LsvrgCoin, ctx.round), shard.len());
                state.corrected_grad(shard, &indices, x, refresh)
            }
        };
        if let Some(noise) = self.noise.as_mut() {
            noise.push(g.as_slice());
        }
        if s.algorithm == Algorithm::Dpsgd && !byzantine {
            let weights = ctx.weights.expect("mixing matrix for dpsgd");
            self.model = dpsgd_step(ctx.messages, weights, w, &g, ctx.alpha);
        } else {
            let mut tv = vec![0.0; g.dim()];
            tv_subgradient_into(
                x,
                s.network.neighbors(w).iter().map(|&v| ctx.messages[v].as_slice()),
                s.lambda,
                &mut tv,
            );
            apply_step(self.model.as_mut_slice(), g.as_slice(), &tv, ctx.alpha);
        }
    }
}

/// Live simulation state.
#[derive(Debug, Clone)]
pub struct Simulation {
    setup: Setup,
    weights: Option<DMatrix<f64>>,
    regular: Vec<AgentId>,
    agents: Vec<AgentState>,
    round: u64,
}

impl Simulation {
    /// Starts every agent at `x⁰ = 0`.
    pub fn new(setup: Setup) -> Result<Self, EngineError> {
        setup.schedule.validate()?;
        setup.attack.validate(&setup.network)?;
        let n = setup.network.n_agents();
        if setup.problem.n_agents() != n {
            return Err(EngineError::Config(format!(
                "problem has {} shards but the network has {n} agents",
                setup.problem.n_agents()
            )));
        }
        if setup.batch_size == 0 {
            return Err(EngineError::Config("algorithm.batch_size must be at least 1".into()));
        }
        if !(setup.lambda >= 0.0 && setup.lambda.is_finite()) {
            return Err(EngineError::Config(format!("algorithm.lambda = {} must be >= 0", setup.lambda)));
        }
        let regular = setup.network.regular_agents();
        if let Some(&w) = regular.iter().find(|&&w| setup.problem.shard(w).is_empty()) {
            return Err(EngineError::Config(format!("regular agent {w} holds no samples")));
        }
        let shadows = setup.attack.needs_shadow_models();
        if shadows {
            if let Some(b) = setup.network.byzantine_agents().into_iter().find(|&b| setup.problem.shard(b).is_empty()) {
                return Err(EngineError::Config(format!("Byzantine agent {b} needs samples for its honest model")));
            }
        }
        let weights = (setup.algorithm == Algorithm::Dpsgd).then(|| metropolis_weights(&setup.network));
        let dim = setup.problem.dim();
        let x0 = ModelVector::zeros(dim);
        let agents = (0..n)
            .map(|w| {
                let shard = setup.problem.shard(w);
                let regular_agent = !setup.network.is_byzantine(w);
                let vr = match setup.algorithm {
                    Algorithm::BravoSaga if regular_agent => {
                        VrSlot::Saga(SagaState::new(shard, x0.as_slice(), setup.metrics.lyapunov))
                    }
                    Algorithm::BravoLsvrg if regular_agent => VrSlot::Lsvrg(LsvrgState::new(shard, x0.as_slice())),
                    _ => VrSlot::Plain,
                };
                AgentState {
                    model: x0.clone(),
                    vr,
                    noise: regular_agent.then(|| WindowVariance::new(dim, setup.metrics.grad_noise_window)),
                }
            })
            .collect();
        Ok(Self {
            setup,
            weights,
            regular,
            agents,
            round: 0,
        })
    }

    pub fn setup(&self) -> &Setup {
        &self.setup
    }

    /// Number of completed rounds.
    pub fn round(&self) -> u64 {
        self.round
    }

    pub fn model(&self, agent: AgentId) -> &ModelVector {
        &self.agents[agent].model
    }

    /// Current models of the regular agents.
    pub fn regular_models(&self) -> StackedState {
        self.regular.iter().map(|&w| (w, self.agents[w].model.clone())).collect()
    }

    pub fn saga_state(&self, agent: AgentId) -> Option<&SagaState> {
        match &self.agents[agent].vr {
            VrSlot::Saga(s) => Some(s),
            _ => None,
        }
    }

    pub fn lsvrg_state(&self, agent: AgentId) -> Option<&LsvrgState> {
        match &self.agents[agent].vr {
            VrSlot::Lsvrg(s) => Some(s),
            _ => None,
        }
    }

    /// Messages broadcast in the current round, indexed by agent.
    pub fn messages(&self) -> Vec<ModelVector> {
        let models: Vec<ModelVector> = self.agents.iter().map(|a| a.model.clone()).collect();
        let snapshot = RoundSnapshot {
            round: self.round,
            seed: self.setup.seed,
            dim: self.setup.problem.dim(),
            models: &models,
        };
        let attacks: Vec<(AgentId, ModelVector)> = self
            .setup
            .network
            .byzantine_agents()
            .into_iter()
            .map(|b| (b, byzantine_message(&self.setup.attack, b, &snapshot)))
            .collect();
        let mut messages = models.clone();
        for (b, m) in attacks {
            messages[b] = m;
        }
        messages
    }

    /// One synchronous round with agent updates on the current rayon pool.
    pub fn step(&mut self) -> Result<(), Diverged> {
        self.advance(None)
    }

    /// One round with agent updates applied sequentially in `order`. The
    /// result is identical to [`step`](Self::step) for any permutation.
    pub fn step_in_order(&mut self, order: &[AgentId]) -> Result<(), Diverged> {
        self.advance(Some(order))
    }

    fn advance(&mut self, order: Option<&[AgentId]>) -> Result<(), Diverged> {
        let messages = self.messages();
        let k = self.round;
        let ctx = RoundCtx {
            setup: &self.setup,
            weights: self.weights.as_ref(),
            messages: &messages,
            round: k,
            alpha: step_size(&self.setup.schedule, k),
            shadows: self.setup.attack.needs_shadow_models(),
        };
        match order {
            None => self
                .agents
                .par_iter_mut()
                .enumerate()
                .for_each(|(w, a)| a.update(w, &ctx)),
            Some(order) => {
                for &w in order {
                    self.agents[w].update(w, &ctx);
                }
            }
        }
        self.round += 1;
        for &w in &self.regular {
            let m = &self.agents[w].model;
            if m.iter().any(|v| !v.is_finite() || v.abs() > DIVERGENCE_LIMIT) {
                return Err(Diverged { agent: w, round: k });
            }
        }
        Ok(())
    }

    /// Metrics of the current state.
    pub fn measure(&self) -> MetricsRow {
        let s = &self.setup;
        let models: Vec<&ModelVector> = self.regular.iter().map(|&w| &self.agents[w].model).collect();
        let conv_err = s.x_star.as_ref().map(|xs| {
            self.regular
                .iter()
                .map(|&w| self.agents[w].model.dist_sq(xs.get(w).expect("reference covers regular agents")))
                .sum()
        });
        let accuracy = match (&s.test_set, s.probe) {
            (Some(test), Some(p)) => Some(accuracy_probe(&self.agents[p].model, test)),
            _ => None,
        };
        let grad_noise = self
            .regular
            .iter()
            .map(|&w| self.agents[w].noise.as_ref().and_then(WindowVariance::last))
            .sum::<Option<f64>>();
        MetricsRow {
            k: self.round,
            conv_err,
            model_var: model_variance(&models),
            accuracy,
            grad_noise,
            lyapunov: self.lyapunov(),
            wall_ms: None,
        }
    }

    /// `V^k` when tracking is on and a reference and constants are known.
    pub fn lyapunov(&self) -> Option<f64> {
        let s = &self.setup;
        if !s.metrics.lyapunov {
            return None;
        }
        let (x_star, params) = (s.x_star.as_ref()?, s.theory.as_ref()?);
        let views: Vec<(AgentId, VrView<'_>)> = self
            .regular
            .iter()
            .map(|&w| match &self.agents[w].vr {
                VrSlot::Saga(st) => Some((w, VrView::Saga(st))),
                VrSlot::Lsvrg(st) => Some((w, VrView::Lsvrg(st))),
                VrSlot::Plain => None,
            })
            .collect::<Option<_>>()?;
        let j = self.regular.iter().map(|&w| s.problem.shard(w).len()).max()?;
        lyapunov(
            &self.regular_models(),
            x_star,
            &views,
            step_size(&s.schedule, self.round),
            params.l_max(),
            j,
        )
        .ok()
    }
}

/// Informational run values, written to headers under `run.`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunInfo {
    pub entries: Vec<(String, toml::Value)>,
}

impl RunInfo {
    fn push(&mut self, key: &str, value: impl Into<toml::Value>) {
        self.entries.push((key.to_string(), value.into()));
    }

    pub fn get(&self, key: &str) -> Option<&toml::Value> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v)
    }

    pub fn get_f64(&self, key: &str) -> Option<f64> {
        self.get(key).and_then(|v| v.as_float())
    }
}

/// A fully built experiment: resolved config, simulation inputs and the
/// derived theory values.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub config: ExperimentConfig,
    pub setup: Setup,
    pub info: RunInfo,
}

/// Loads a dataset, keeping at most `classes` classes.
fn load(images: &Option<std::path::PathBuf>, labels: &Option<std::path::PathBuf>, what: &str) -> Result<Dataset, EngineError> {
    match (images, labels) {
        (Some(i), Some(l)) => Ok(load_idx_dataset(i, l)?),
        _ => Err(EngineError::Config(format!(
            "problem.{what}_images and problem.{what}_labels are required for softmax"
        ))),
    }
}

fn build_network(config: &ExperimentConfig) -> Result<Network, EngineError> {
    let t = &config.topology;
    let need_n = || {
        t.n
            .ok_or_else(|| EngineError::Config("topology.n is required for this topology kind".into()))
    };
    let net = match t.kind {
        TopologyKind::ErdosRenyi => {
            let q = t
                .q
                .ok_or_else(|| EngineError::Config("topology.q is required for erdos_renyi".into()))?;
            generate_erdos_renyi(need_n()?, q, RngStream::global(t.seed.expect("resolved"), Purpose::Topology))?
        }
        TopologyKind::Complete => Network::complete(need_n()?),
        TopologyKind::Ring => Network::ring(need_n()?),
        TopologyKind::Path => Network::path(need_n()?),
        TopologyKind::Star => Network::star(need_n()?),
        TopologyKind::Edges => {
            let path = t
                .edges
                .as_ref()
                .ok_or_else(|| EngineError::Config("topology.edges is required for kind = edges".into()))?;
            let text = std::fs::read_to_string(path)
                .map_err(|e| EngineError::Config(format!("cannot read edge list {}: {e}", path.display())))?;
            Network::from_edge_list(&text)?.0
        }
    };
    if let Some(n) = t.n {
        if n != net.n_agents() {
            return Err(EngineError::Config(format!(
                "topology.n = {n} but the network has {} agents",
                net.n_agents()
            )));
        }
    }
    let b = &config.byzantine;
    let net = if let Some(ids) = &b.ids {
        net.with_byzantine(ids)?
    } else if b.count > 0 {
        assign_byzantine(
            &net,
            b.count,
            RngStream::global(b.seed.expect("resolved"), Purpose::ByzantineAssignment),
            b.max_retries,
        )?
    } else {
        net
    };
    if !net.is_regular_subgraph_connected() {
        return Err(TopologyError::Disconnected.into());
    }
    Ok(net)
}

fn build_problem(config: &ExperimentConfig, n: usize) -> Result<(Problem, Option<Dataset>), EngineError> {
    let p = &config.problem;
    let seed = p.seed.expect("resolved");
    match p.kind {
        ProblemKindConfig::LeastSquares if p.samples.is_some() => {
            let samples = p.samples.as_ref().expect("checked");
            if samples.len() != n {
                return Err(EngineError::Config(format!(
                    "problem.samples lists {} agents but the network has {n}",
                    samples.len()
                )));
            }
            Ok((Problem::least_squares_scalar(samples)?, None))
        }
        ProblemKindConfig::LeastSquares => {
            let j = p
                .samples_per_agent
                .ok_or_else(|| EngineError::Config("problem.samples_per_agent is required for least_squares".into()))?;
            Ok((synth_least_squares(n, j, seed)?, None))
        }
        ProblemKindConfig::Softmax => {
            let mut train = load(&p.train_images, &p.train_labels, "train")?;
            let classes = p.classes.unwrap_or(train.classes());
            train = train.with_classes(classes)?;
            if let Some(k) = p.subsample {
                train = train.subsample(k, RngStream::global(seed, Purpose::Subsample));
            }
            let stream = RngStream::global(seed, Purpose::Partition);
            let shards = match p.partition {
                PartitionKind::Iid => partition_iid(&train, n, stream)?,
                PartitionKind::Noniid => partition_noniid(&train, n, classes, stream)?,
            };
            let test = match (&p.test_images, &p.test_labels) {
                (None, None) => None,
                _ => Some(load(&p.test_images, &p.test_labels, "test")?.with_classes(classes)?),
            };
            Ok((Problem::new(shards)?, test))
        }
    }
}

/// Builds everything a run needs and fills every default and seed into the
/// returned config.
pub fn prepare(config: &ExperimentConfig) -> Result<Prepared, EngineError> {
    let mut config = config.clone();
    config.run = None;
    config.resolve_seeds();
    if config.log_every == 0 {
        return Err(EngineError::Config("log_every must be at least 1".into()));
    }
    let network = build_network(&config)?;
    let regular = network.regular_agents();
    config.byzantine.ids = Some(network.byzantine_agents());
    config.byzantine.count = network.byzantine_count();
    config.topology.n = Some(network.n_agents());

    let attack = config.attack.spec(regular[0]);
    attack.validate(&network)?;
    config.attack.record(&attack);

    let (problem, test_set) = build_problem(&config, network.n_agents())?;
    let alg = &config.algorithm;
    let schedule = alg.schedule();
    schedule.validate()?;

    let mut info = RunInfo::default();
    info.push("regular_agents", regular.len() as i64);
    info.push("edges", network.edge_count() as i64);

    // Consensus reference, needed for both λ₀ and (by default) the error.
    let r = &config.reference;
    let want_consensus = r.kind == ReferenceKind::Consensus || problem.kind() == ProblemKind::LeastSquares;
    let x_tilde = if want_consensus {
        Some(solve_reference(&problem, &regular, r.tol, r.max_iters)?)
    } else {
        None
    };
    let x_star = match r.kind {
        ReferenceKind::Consensus => x_tilde.as_ref().map(|x| StackedState::replicate(&regular, x)),
        ReferenceKind::Tv => Some(solve_tv_optimum(&problem, &network, alg.lambda, r.tol, r.max_iters)?),
        ReferenceKind::None => None,
    };
    if let Some(x) = &x_tilde {
        let a = incidence_matrix(&network)?;
        let l0 = lambda0(&problem, &regular, x, &a)?;
        info.push("lambda0", l0);
        if let Ok(sigma) = min_nonzero_singular(&a) {
            info.push("sigma_min", sigma);
        }
        let het = regular
            .iter()
            .map(|&w| problem.full_grad(w, x.as_slice()).norm_inf())
            .fold(0.0, f64::max);
        info.push("max_grad_inf", het);
        info.push("lambda_meets_threshold", alg.lambda >= l0);
    }

    if problem.kind() == ProblemKind::LeastSquares {
        config.theory.mu.get_or_insert(1.0);
        config.theory.l.get_or_insert(1.0);
    }
    let theory = match (config.theory.mu, config.theory.l) {
        (Some(mu), Some(l)) => {
            let params = TheoryParams::uniform(regular.len(), mu, l, config.theory.eps)?;
            config.theory.eps = Some(params.eps());
            let j = regular.iter().map(|&w| problem.shard(w).len()).min().unwrap_or(1);
            info.push("eta", params.eta());
            if let Ok(bound) = theory_step_bound(&params, j) {
                info.push("theory_step_bound", bound);
            }
            info.push(
                "delta",
                delta_bound(&params, schedule.base(), alg.lambda, &network, problem.dim()),
            );
            Some(params)
        }
        _ => None,
    };

    let probe = test_set.as_ref().map(|_| {
        let mut rng = RngStream::global(config.seed, Purpose::Probe).rng();
        regular[rng.random_range(0..regular.len())]
    });
    if let Some(p) = probe {
        info.push("probe_agent", p as i64);
    }

    let setup = Setup {
        network,
        problem,
        attack,
        algorithm: alg.name,
        schedule,
        lambda: alg.lambda,
        batch_size: alg.batch_size,
        seed: config.seed,
        x_star,
        test_set,
        probe,
        metrics: config.metrics.clone(),
        theory,
    };
    Ok(Prepared { config, setup, info })
}

/// The product of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub config: ExperimentConfig,
    pub info: RunInfo,
    pub trace: Trace,
}

impl RunOutput {
    /// Resolved config followed by `run.*` values; parseable as a config.
    pub fn header_text(&self) -> String {
        let mut out = self.config.to_flat_string();
        for (k, v) in &self.info.entries {
            out.push_str(&format!("run.{k} = {v}\n"));
        }
        out
    }
}

/// Runs `prepared` for its configured number of rounds.
pub fn run_prepared(prepared: Prepared) -> Result<RunOutput, EngineError> {
    let Prepared { config, setup, info } = prepared;
    let mut sim = Simulation::new(setup)?;
    let start = Instant::now();
    let wall = |row: MetricsRow| MetricsRow {
        wall_ms: config.metrics.wall_time.then(|| start.elapsed().as_secs_f64() * 1e3),
        ..row
    };
    let mut trace = Trace::default();
    trace.rows.push(wall(sim.measure()));
    for k in 1..=config.rounds {
        if let Err(d) = sim.step() {
            let last = trace.rows.last().expect("round-0 row").clone();
            trace.rows.push(wall(MetricsRow::saturated(k, &last)));
            return Err(EngineError::Divergence {
                agent: d.agent,
                round: d.round,
                output: Box::new(RunOutput { config, info, trace }),
            });
        }
        if k % config.log_every == 0 || k == config.rounds {
            trace.rows.push(wall(sim.measure()));
        }
    }
    Ok(RunOutput { config, info, trace })
}

/// Builds and runs `config`. `threads` fixes the worker count; `None` uses
/// the global pool.
pub fn run_experiment(config: &ExperimentConfig, threads: Option<usize>) -> Result<RunOutput, EngineError> {
    let prepared = prepare(config)?;
    match threads {
        None => run_prepared(prepared),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| EngineError::Config(format!("cannot start {n} worker threads: {e}")))?
            .install(|| run_prepared(prepared)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ls_config(alg: &str, attack: &str) -> ExperimentConfig {
        ExperimentConfig::parse(&format!(
            r#"
seed = 3
rounds = 50
log_every = 10
topology.kind = "complete"
topology.n = 4
byzantine.count = 1
attack.kind = "{attack}"
problem.kind = "least_squares"
problem.samples_per_agent = 20
algorithm.name = "{alg}"
algorithm.alpha = 0.01
algorithm.lambda = 0.005
"#
        ))
        .unwrap()
    }

    #[test]
    fn zero_rounds_gives_only_the_initial_row() {
        let mut c = ls_config("drsa", "gaussian");
        c.rounds = 0;
        let out = run_experiment(&c, Some(1)).unwrap();
        assert_eq!(out.trace.rows.len(), 1);
        assert_eq!(out.trace.rows[0].k, 0);
    }

    #[test]
    fn rows_follow_the_logging_interval() {
        let mut c = ls_config("bravo-saga", "gaussian");
        c.rounds = 45;
        let out = run_experiment(&c, Some(1)).unwrap();
        let ks: Vec<u64> = out.trace.rows.iter().map(|r| r.k).collect();
        assert_eq!(ks, vec![0, 10, 20, 30, 40, 45]);
        assert!(out.trace.rows.iter().all(|r| r.accuracy.is_none()));
    }

    #[test]
    fn header_round_trips_into_the_same_run() {
        let out = run_experiment(&ls_config("bravo-lsvrg", "gaussian"), Some(2)).unwrap();
        let text = out.header_text();
        assert!(text.contains("run.lambda0 = "), "{text}");
        let again = run_experiment(&ExperimentConfig::parse(&text).unwrap(), Some(1)).unwrap();
        assert_eq!(again.trace.to_csv(), out.trace.to_csv());
        assert_eq!(again.config, out.config);
    }

    #[test]
    fn order_of_agent_updates_does_not_matter() {
        for alg in ["drsa", "bravo-saga", "bravo-lsvrg", "dpsgd"] {
            let prepared = prepare(&ls_config(alg, "sign_flip")).unwrap();
            let mut a = Simulation::new(prepared.setup.clone()).unwrap();
            let mut b = Simulation::new(prepared.setup).unwrap();
            for k in 0..20 {
                a.step_in_order(&[0, 1, 2, 3]).unwrap();
                if k % 2 == 0 {
                    b.step_in_order(&[3, 1, 0, 2]).unwrap();
                } else {
                    b.step().unwrap();
                }
            }
            for w in 0..4 {
                assert_eq!(a.model(w), b.model(w), "{alg} agent {w}");
            }
        }
    }

    #[test]
    fn one_sample_no_penalty_is_gradient_descent() {
        let c = ExperimentConfig::parse(
            r#"
rounds = 1
topology.kind = "complete"
topology.n = 3
problem.kind = "least_squares"
problem.samples_per_agent = 1
algorithm.name = "drsa"
algorithm.alpha = 0.25
"#,
        )
        .unwrap();
        let prepared = prepare(&c).unwrap();
        let data: Vec<f64> = (0..3).map(|w| prepared.setup.problem.shard(w).target(0).unwrap()[0]).collect();
        let mut sim = Simulation::new(prepared.setup).unwrap();
        sim.step().unwrap();
        for (w, d) in data.iter().enumerate() {
            // x¹ = 0 − 0.25 (0 − d)
            assert_eq!(sim.model(w)[0], 0.25 * d);
        }
    }

    #[test]
    fn divergence_returns_the_partial_trace() {
        let c = ls_config("drsa", "gaussian").set("algorithm.alpha", "3.0").unwrap();
        match run_experiment(&c.set("rounds", "5000").unwrap(), Some(1)) {
            Err(EngineError::Divergence { output, round, .. }) => {
                let last = output.trace.rows.last().unwrap();
                assert_eq!(last.k, round + 1);
                assert_eq!(last.model_var, f64::MAX);
                assert!(output.trace.rows.iter().all(|r| r.model_var.is_finite()));
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn none_attack_with_byzantine_agents_is_rejected() {
        let c = ls_config("drsa", "none");
        assert!(matches!(prepare(&c), Err(EngineError::Attack(_))));
    }
}
