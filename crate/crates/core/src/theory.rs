//! Computable theory artifacts: reference solutions, the penalty threshold
//! `λ₀`, the step-size bound and learning-error bound `Δ`, the Lyapunov value
//! `V^k`, and the exact lower-bound instance.

use thiserror::Error;

use crate::algorithms::{LsvrgState, SagaState};
use crate::attacks::AttackSpec;
use crate::model::{shifted_mean, AgentId, ModelVector, StackedState};
use crate::problems::{Problem, ProblemError, ProblemKind, Shard};
use crate::topology::{min_nonzero_singular, IncidenceMatrix, Network, TopologyError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TheoryError {
    #[error("invalid theory parameters: {0}")]
    InvalidParams(String),
    #[error("reference solver stopped after {iterations} iterations with gradient norm {grad_norm:e}")]
    NonConvergence {
        iterations: usize,
        grad_norm: f64,
        best: ModelVector,
    },
    #[error("unsupported: {0}")]
    Unsupported(&'static str),
    #[error("infeasible lower-bound construction: {0}")]
    Infeasible(String),
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    Problem(#[from] ProblemError),
}

/// Per-agent strong convexity and smoothness constants plus the tuning
/// scalar `ε`.
#[derive(Debug, Clone, PartialEq)]
pub struct TheoryParams {
    mu: Vec<f64>,
    lipschitz: Vec<f64>,
    eps: f64,
}

impl TheoryParams {
    /// `eps = None` selects `0.1 · min_w 2μ_wL_w/(μ_w+L_w)`.
    pub fn new(mu: Vec<f64>, lipschitz: Vec<f64>, eps: Option<f64>) -> Result<Self, TheoryError> {
        if mu.is_empty() || mu.len() != lipschitz.len() {
            return Err(TheoryError::InvalidParams(
                "need one (μ, L) pair per regular agent".into(),
            ));
        }
        if mu
            .iter()
            .chain(&lipschitz)
            .any(|v| !(*v > 0.0 && v.is_finite()))
        {
            return Err(TheoryError::InvalidParams("μ and L must be positive".into()));
        }
        let cap = mu
            .iter()
            .zip(&lipschitz)
            .map(|(m, l)| 2.0 * m * l / (m + l))
            .fold(f64::INFINITY, f64::min);
        let eps = eps.unwrap_or(0.1 * cap);
        if !(eps > 0.0 && eps < cap) {
            return Err(TheoryError::InvalidParams(format!(
                "ε = {eps} outside (0, {cap})"
            )));
        }
        Ok(Self { mu, lipschitz, eps })
    }

    /// Same `(μ, L)` for all `r` regular agents.
    pub fn uniform(r: usize, mu: f64, lipschitz: f64, eps: Option<f64>) -> Result<Self, TheoryError> {
        Self::new(vec![mu; r], vec![lipschitz; r], eps)
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    /// `η = min_w μ_wL_w/(μ_w+L_w) − ε/2`.
    pub fn eta(&self) -> f64 {
        self.mu
            .iter()
            .zip(&self.lipschitz)
            .map(|(m, l)| m * l / (m + l))
            .fold(f64::INFINITY, f64::min)
            - self.eps / 2.0
    }

    /// `L = max_w L_w`.
    pub fn l_max(&self) -> f64 {
        self.lipschitz.iter().copied().fold(0.0, f64::max)
    }
}

/// Minimizer of the regular agents' averaged cost.
///
/// Least squares uses the closed form (mean of all regular samples); softmax
/// runs full-gradient descent with Armijo backtracking until the gradient
/// norm drops to `tol`.
pub fn solve_reference(
    problem: &Problem,
    agents: &[AgentId],
    tol: f64,
    max_iters: usize,
) -> Result<ModelVector, TheoryError> {
    if agents.is_empty() {
        return Err(TheoryError::InvalidParams("no regular agents".into()));
    }
    match problem.kind() {
        ProblemKind::LeastSquares => {
            let rows: Vec<&[f64]> = agents
                .iter()
                .flat_map(|&w| {
                    let s = problem.shard(w);
                    (0..s.len()).map(move |j| s.target(j).expect("least-squares row"))
                })
                .collect();
            shifted_mean(problem.dim(), rows)
                .map(ModelVector::from)
                .ok_or_else(|| TheoryError::InvalidParams("regular agents hold no samples".into()))
        }
        ProblemKind::Softmax { .. } => gradient_descent(problem, agents, tol, max_iters),
    }
}

fn gradient_descent(
    problem: &Problem,
    agents: &[AgentId],
    tol: f64,
    max_iters: usize,
) -> Result<ModelVector, TheoryError> {
    let mut x = ModelVector::zeros(problem.dim());
    let mut f = problem.average_loss(agents, x.as_slice());
    let mut step = 1.0;
    for _ in 0..max_iters {
        let g = problem.average_grad(agents, x.as_slice());
        let gg = g.norm_sq();
        if gg.sqrt() <= tol {
            return Ok(x);
        }
        step *= 2.0;
        loop {
            let mut trial = x.clone();
            trial.axpy(-step, &g);
            let ft = problem.average_loss(agents, trial.as_slice());
            if ft <= f - 0.5 * step * gg || step < 1e-20 {
                x = trial;
                f = ft;
                break;
            }
            step *= 0.5;
        }
    }
    let grad_norm = problem.average_grad(agents, x.as_slice()).norm_sq().sqrt();
    if grad_norm <= tol {
        Ok(x)
    } else {
        Err(TheoryError::NonConvergence {
            iterations: max_iters,
            grad_norm,
            best: x,
        })
    }
}

/// Exact minimizer of the TV-penalized least-squares problem
/// `Σ_w F_w(x_w) + λ Σ_{(u,v)∈E_R} ‖x_u − x_v‖₁`.
///
/// Solved through the box-constrained dual `min_{|s|≤1} ½‖d̄ − λAs‖²` with
/// FISTA, stopping once the duality gap is below `gap_tol` (which bounds
/// `‖x − x*‖²` by `2·gap_tol`).
pub fn solve_tv_optimum(
    problem: &Problem,
    net: &Network,
    lambda: f64,
    gap_tol: f64,
    max_iters: usize,
) -> Result<StackedState, TheoryError> {
    if problem.kind() != ProblemKind::LeastSquares {
        return Err(TheoryError::Unsupported("TV optimum is only available for least squares"));
    }
    let agents = net.regular_agents();
    let p = problem.dim();
    let mut row_of = vec![usize::MAX; net.n_agents()];
    for (r, &a) in agents.iter().enumerate() {
        row_of[a] = r;
    }
    // Local minimizers d̄_w.
    let centers: Vec<Vec<f64>> = agents
        .iter()
        .map(|&w| {
            let s = problem.shard(w);
            shifted_mean(p, (0..s.len()).map(|j| s.target(j).expect("least-squares row")))
                .unwrap_or_else(|| vec![0.0; p])
        })
        .collect();
    let edges: Vec<(usize, usize)> = net
        .regular_edges()
        .into_iter()
        .map(|(u, v)| (row_of[u], row_of[v]))
        .collect();
    let finish = |x: Vec<Vec<f64>>| -> StackedState {
        agents
            .iter()
            .zip(x)
            .map(|(&a, v)| (a, ModelVector::from(v)))
            .collect()
    };
    if edges.is_empty() || lambda == 0.0 {
        return Ok(finish(centers));
    }

    let primal_of = |s: &[f64]| -> Vec<Vec<f64>> {
        let mut x = centers.clone();
        for (e, &(u, v)) in edges.iter().enumerate() {
            for c in 0..p {
                let t = lambda * s[e * p + c];
                x[u][c] -= t;
                x[v][c] += t;
            }
        }
        x
    };
    // P(x) − D(s) at x = x(s):
    // P(x) = Σ ½‖x_w − d̄_w‖² + λ Σ_e ‖x_u − x_v‖₁,
    // D(s) = Σ ½‖d̄_w‖² − ½‖x_w‖².
    let gap = |x: &[Vec<f64>]| -> f64 {
        let mut primal = 0.0;
        let mut dual = 0.0;
        for (xw, dw) in x.iter().zip(&centers) {
            for c in 0..p {
                primal += 0.5 * (xw[c] - dw[c]) * (xw[c] - dw[c]);
                dual += 0.5 * (dw[c] * dw[c] - xw[c] * xw[c]);
            }
        }
        for &(u, v) in &edges {
            primal += lambda * x[u].iter().zip(&x[v]).map(|(a, b)| (a - b).abs()).sum::<f64>();
        }
        primal - dual
    };

    let max_degree = (0..agents.len())
        .map(|r| edges.iter().filter(|&&(u, v)| u == r || v == r).count())
        .max()
        .unwrap_or(1) as f64;
    // ‖A‖² ≤ 2·max degree.
    let step = 1.0 / (lambda * lambda * 2.0 * max_degree);
    let n = edges.len() * p;
    let mut s = vec![0.0; n];
    let mut s_prev = s.clone();
    let mut t = 1.0_f64;
    for _ in 0..max_iters {
        let t_next = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
        let beta = (t - 1.0) / t_next;
        let yk: Vec<f64> = s.iter().zip(&s_prev).map(|(a, b)| a + beta * (a - b)).collect();
        let x = primal_of(&yk);
        // ∇_s ½‖d̄ − λAs‖² = −λ Aᵀ x(s)
        s_prev = std::mem::take(&mut s);
        s = vec![0.0; n];
        for (e, &(u, v)) in edges.iter().enumerate() {
            for c in 0..p {
                let grad = -lambda * (x[u][c] - x[v][c]);
                s[e * p + c] = (yk[e * p + c] - step * grad).clamp(-1.0, 1.0);
            }
        }
        t = t_next;
        let xs = primal_of(&s);
        if gap(&xs) <= gap_tol {
            return Ok(finish(xs));
        }
    }
    let xs = primal_of(&s);
    let g = gap(&xs);
    Err(TheoryError::NonConvergence {
        iterations: max_iters,
        grad_norm: g,
        best: ModelVector::from(xs.concat()),
    })
}

/// `λ₀ = √R / σ̃_min(A) · max_w ‖F'_w(x̃*)‖∞`.
pub fn lambda0(problem: &Problem, agents: &[AgentId], x_ref: &ModelVector, a: &IncidenceMatrix) -> Result<f64, TheoryError> {
    let heterogeneity = agents
        .iter()
        .map(|&w| problem.full_grad(w, x_ref.as_slice()).norm_inf())
        .fold(0.0, f64::max);
    if heterogeneity == 0.0 || a.matrix().ncols() == 0 {
        return Ok(0.0);
    }
    let sigma = min_nonzero_singular(a)?;
    Ok((agents.len() as f64).sqrt() / sigma * heterogeneity)
}

/// Largest step size covered by the linear-rate guarantee: `η / (12 L² J)`.
pub fn theory_step_bound(params: &TheoryParams, samples_per_agent: usize) -> Result<f64, TheoryError> {
    let eta = params.eta();
    if eta <= 0.0 {
        return Err(TheoryError::InvalidParams(format!("η = {eta} is not positive")));
    }
    let l = params.l_max();
    Ok(eta / (12.0 * l * l * samples_per_agent.max(1) as f64))
}

/// Learning-error bound
/// `Δ = (α/η) Σ_w (32λ²|R_w|²p + 4λ²|B_w|²p) + (1/(εη)) Σ_w λ²|B_w|²p`.
pub fn delta_bound(params: &TheoryParams, alpha: f64, lambda: f64, net: &Network, dim: usize) -> f64 {
    let eta = params.eta();
    let p = dim as f64;
    let l2 = lambda * lambda;
    let mut step_part = 0.0;
    let mut byz_part = 0.0;
    for w in net.regular_agents() {
        let r = net.regular_neighbors(w).len() as f64;
        let b = net.byzantine_neighbors(w).len() as f64;
        step_part += 32.0 * l2 * r * r * p + 4.0 * l2 * b * b * p;
        byz_part += l2 * b * b * p;
    }
    alpha / eta * step_part + byz_part / (params.eps() * eta)
}

/// Constant-step DRSA error term: `Δ + (2α/η) Σ_w δ_w²`.
pub fn drsa_error_bound(
    params: &TheoryParams,
    alpha: f64,
    lambda: f64,
    net: &Network,
    dim: usize,
    variances: &[f64],
) -> f64 {
    delta_bound(params, alpha, lambda, net, dim) + 2.0 * alpha / params.eta() * variances.iter().sum::<f64>()
}

/// Empirical `δ_w²` of each listed agent at `x`.
pub fn estimate_variances(problem: &Problem, agents: &[AgentId], x: &ModelVector) -> Vec<f64> {
    agents
        .iter()
        .map(|&w| problem.shard(w).gradient_variance(x.as_slice()))
        .collect()
}

/// Variance-reduction state of one regular agent, as seen by the Lyapunov
/// function.
#[derive(Debug, Clone, Copy)]
pub enum VrView<'a> {
    Saga(&'a SagaState),
    Lsvrg(&'a LsvrgState),
}

/// `S^k`: `Σ_w ‖y_w − x_w*‖²` for LSVRG, `Σ_w (1/J) Σ_j ‖φ_{w,j} − x_w*‖²` for SAGA.
pub fn reference_spread(states: &[(AgentId, VrView<'_>)], x_star: &StackedState) -> Result<f64, TheoryError> {
    let mut total = 0.0;
    for &(w, view) in states {
        let target = x_star
            .get(w)
            .ok_or(TheoryError::InvalidParams(format!("x* has no entry for agent {w}")))?;
        total += match view {
            VrView::Lsvrg(s) => s.reference().dist_sq(target),
            VrView::Saga(s) => s
                .anchor_spread(target.as_slice())
                .ok_or(TheoryError::Unsupported("SAGA anchors are not tracked; enable Lyapunov tracking"))?,
        };
    }
    Ok(total)
}

/// `V^k = ‖x − x*‖² + 8 J α² L² S^k`.
pub fn lyapunov(
    x: &StackedState,
    x_star: &StackedState,
    states: &[(AgentId, VrView<'_>)],
    alpha: f64,
    lipschitz: f64,
    samples_per_agent: usize,
) -> Result<f64, TheoryError> {
    let dist = crate::model::sq_dist(x, x_star).map_err(|e| TheoryError::InvalidParams(e.to_string()))?;
    let spread = reference_spread(states, x_star)?;
    Ok(dist + 8.0 * samples_per_agent as f64 * alpha * alpha * lipschitz * lipschitz * spread)
}

/// The adversarial instance on which every span-condition method stays at
/// its starting point.
#[derive(Debug, Clone)]
pub struct LowerBoundInstance {
    pub problem: Problem,
    pub network: Network,
    pub attack: AttackSpec,
    pub x_star: StackedState,
    pub lambda: f64,
}

impl LowerBoundInstance {
    /// `Σ_w λ²|B_w|²p`.
    pub fn analytic_error(&self) -> f64 {
        let p = self.problem.dim() as f64;
        self.network
            .regular_agents()
            .iter()
            .map(|&w| {
                let b = self.lambda * self.network.byzantine_neighbors(w).len() as f64;
                b * b * p
            })
            .sum()
    }
}

/// Regular agents `0..r` on a ring (a single edge for `r = 2`), each with
/// `byz_per_agent` private Byzantine neighbors. Every sample cost of agent
/// `w` is `½‖x‖² − λ|B_w| xᵀ1`, i.e. least squares with target `λ|B_w|·1`.
pub fn build_lowerbound_instance(
    r: usize,
    byz_per_agent: usize,
    lambda: f64,
    dim: usize,
    samples_per_agent: usize,
) -> Result<LowerBoundInstance, TheoryError> {
    if r == 0 {
        return Err(TheoryError::Infeasible("at least one regular agent is required".into()));
    }
    if dim == 0 || samples_per_agent == 0 {
        return Err(TheoryError::Infeasible("dimension and sample count must be positive".into()));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(TheoryError::Infeasible(format!("λ = {lambda} must be finite and nonnegative")));
    }
    let n = r + r * byz_per_agent;
    let mut edges: Vec<(AgentId, AgentId)> = Network::ring(r).edges();
    let mut byzantine = Vec::with_capacity(r * byz_per_agent);
    for w in 0..r {
        for t in 0..byz_per_agent {
            let b = r + w * byz_per_agent + t;
            edges.push((w, b));
            byzantine.push(b);
        }
    }
    let network = Network::from_edges(n, &edges)?.with_byzantine(&byzantine)?;
    let target = lambda * byz_per_agent as f64;
    let shards = (0..n)
        .map(|w| {
            let value = if w < r { target } else { 0.0 };
            Shard::least_squares(w, dim, vec![value; dim * samples_per_agent])
        })
        .collect::<Result<Vec<_>, _>>()?;
    let problem = Problem::new(shards)?;
    let x_star = StackedState::replicate(&network.regular_agents(), &ModelVector::filled(dim, target));
    Ok(LowerBoundInstance {
        problem,
        network,
        attack: AttackSpec::LowerBound,
        x_star,
        lambda,
    })
}
