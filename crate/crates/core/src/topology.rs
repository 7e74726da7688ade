//! Agent graphs: random generation, Byzantine assignment, connectivity of the
//! regular subgraph, the oriented incidence matrix and Metropolis mixing.

use std::collections::{BTreeSet, VecDeque};
use std::fmt::Write as _;

use nalgebra::DMatrix;
use rand::seq::index;
use rand::Rng;
use thiserror::Error;

use crate::model::AgentId;
use crate::rng::RngStream;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TopologyError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(
        "could not place {byzantine} Byzantine agents among {agents} while keeping the regular subgraph connected after {retries} draws"
    )]
    Infeasible {
        agents: usize,
        byzantine: usize,
        retries: usize,
    },
    #[error("the regular subgraph is not connected")]
    Disconnected,
    #[error("edge list parse error on line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// Undirected agent graph with a regular/Byzantine partition.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    neighbors: Vec<Vec<AgentId>>,
    byzantine: Vec<bool>,
}

impl Network {
    /// Builds an all-regular network from an edge list. Duplicate edges are
    /// merged; self-loops and out-of-range endpoints are rejected.
    pub fn from_edges(n: usize, edges: &[(AgentId, AgentId)]) -> Result<Self, TopologyError> {
        let mut sets = vec![BTreeSet::new(); n];
        for &(u, v) in edges {
            if u >= n || v >= n {
                return Err(TopologyError::InvalidInput(format!(
                    "edge ({u}, {v}) out of range for {n} agents"
                )));
            }
            if u == v {
                return Err(TopologyError::InvalidInput(format!("self-loop at agent {u}")));
            }
            sets[u].insert(v);
            sets[v].insert(u);
        }
        Ok(Self {
            neighbors: sets.into_iter().map(|s| s.into_iter().collect()).collect(),
            byzantine: vec![false; n],
        })
    }

    pub fn complete(n: usize) -> Self {
        let edges: Vec<_> = (0..n)
            .flat_map(|u| (u + 1..n).map(move |v| (u, v)))
            .collect();
        Self::from_edges(n, &edges).expect("complete graph edges are valid")
    }

    /// Cycle on `n ≥ 3` agents; for `n = 2` a single edge, for `n ≤ 1` no edges.
    pub fn ring(n: usize) -> Self {
        let edges: Vec<_> = match n {
            0 | 1 => Vec::new(),
            2 => vec![(0, 1)],
            _ => (0..n).map(|u| (u, (u + 1) % n)).collect(),
        };
        Self::from_edges(n, &edges).expect("ring edges are valid")
    }

    pub fn path(n: usize) -> Self {
        let edges: Vec<_> = (1..n).map(|v| (v - 1, v)).collect();
        Self::from_edges(n, &edges).expect("path edges are valid")
    }

    /// Star with agent 0 at the center.
    pub fn star(n: usize) -> Self {
        let edges: Vec<_> = (1..n).map(|v| (0, v)).collect();
        Self::from_edges(n, &edges).expect("star edges are valid")
    }

    pub fn n_agents(&self) -> usize {
        self.neighbors.len()
    }

    pub fn neighbors(&self, w: AgentId) -> &[AgentId] {
        &self.neighbors[w]
    }

    pub fn degree(&self, w: AgentId) -> usize {
        self.neighbors[w].len()
    }

    pub fn has_edge(&self, u: AgentId, v: AgentId) -> bool {
        self.neighbors[u].binary_search(&v).is_ok()
    }

    /// All edges `(u, v)` with `u < v`, in lexicographic order.
    pub fn edges(&self) -> Vec<(AgentId, AgentId)> {
        self.neighbors
            .iter()
            .enumerate()
            .flat_map(|(u, ns)| ns.iter().filter(move |&&v| v > u).map(move |&v| (u, v)))
            .collect()
    }

    pub fn edge_count(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum::<usize>() / 2
    }

    pub fn is_byzantine(&self, w: AgentId) -> bool {
        self.byzantine[w]
    }

    pub fn regular_agents(&self) -> Vec<AgentId> {
        (0..self.n_agents()).filter(|&w| !self.byzantine[w]).collect()
    }

    pub fn byzantine_agents(&self) -> Vec<AgentId> {
        (0..self.n_agents()).filter(|&w| self.byzantine[w]).collect()
    }

    pub fn regular_count(&self) -> usize {
        self.byzantine.iter().filter(|b| !**b).count()
    }

    pub fn byzantine_count(&self) -> usize {
        self.byzantine.iter().filter(|b| **b).count()
    }

    /// `R_w`: neighbors of `w` that are regular.
    pub fn regular_neighbors(&self, w: AgentId) -> Vec<AgentId> {
        self.neighbors[w]
            .iter()
            .copied()
            .filter(|&v| !self.byzantine[v])
            .collect()
    }

    /// `B_w`: neighbors of `w` that are Byzantine.
    pub fn byzantine_neighbors(&self, w: AgentId) -> Vec<AgentId> {
        self.neighbors[w]
            .iter()
            .copied()
            .filter(|&v| self.byzantine[v])
            .collect()
    }

    /// Edges of the regular subgraph `E_R`, `(u, v)` with `u < v`.
    pub fn regular_edges(&self) -> Vec<(AgentId, AgentId)> {
        self.edges()
            .into_iter()
            .filter(|&(u, v)| !self.byzantine[u] && !self.byzantine[v])
            .collect()
    }

    /// Returns a copy with exactly `ids` marked Byzantine.
    pub fn with_byzantine(&self, ids: &[AgentId]) -> Result<Self, TopologyError> {
        let mut byzantine = vec![false; self.n_agents()];
        for &b in ids {
            if b >= self.n_agents() {
                return Err(TopologyError::InvalidInput(format!(
                    "Byzantine id {b} out of range for {} agents",
                    self.n_agents()
                )));
            }
            if byzantine[b] {
                return Err(TopologyError::InvalidInput(format!("Byzantine id {b} listed twice")));
            }
            byzantine[b] = true;
        }
        if ids.len() >= self.n_agents() && self.n_agents() > 0 {
            return Err(TopologyError::InvalidInput(
                "at least one agent must stay regular".into(),
            ));
        }
        Ok(Self {
            neighbors: self.neighbors.clone(),
            byzantine,
        })
    }

    /// Whether `(R, E_R)` is connected. A single regular agent counts as
    /// connected; an empty regular set does not.
    pub fn is_regular_subgraph_connected(&self) -> bool {
        let regular = self.regular_agents();
        let Some(&start) = regular.first() else {
            return false;
        };
        let mut seen = vec![false; self.n_agents()];
        seen[start] = true;
        let mut queue = VecDeque::from([start]);
        let mut reached = 1;
        while let Some(u) = queue.pop_front() {
            for &v in &self.neighbors[u] {
                if !self.byzantine[v] && !seen[v] {
                    seen[v] = true;
                    reached += 1;
                    queue.push_back(v);
                }
            }
        }
        reached == regular.len()
    }

    /// Serializes to the edge-list text format: a header `N B seed`, one
    /// `u v` line per edge, and a `#byzantine` comment listing the assignment.
    pub fn to_edge_list(&self, seed: u64) -> String {
        let mut out = format!("{} {} {}\n", self.n_agents(), self.byzantine_count(), seed);
        for (u, v) in self.edges() {
            let _ = writeln!(out, "{u} {v}");
        }
        let ids: Vec<String> = self.byzantine_agents().iter().map(|b| b.to_string()).collect();
        let _ = writeln!(out, "#byzantine {}", ids.join(" "));
        out
    }

    /// Parses [`to_edge_list`](Self::to_edge_list) output. Returns the network
    /// and the recorded seed. Files without a `#byzantine` line load as
    /// all-regular only if their header declares `B = 0`.
    pub fn from_edge_list(text: &str) -> Result<(Self, u64), TopologyError> {
        let parse_err = |line: usize, message: &str| TopologyError::Parse {
            line,
            message: message.to_string(),
        };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
        let (hline, header) = lines
            .by_ref()
            .find(|(_, l)| !l.is_empty() && !l.starts_with('#'))
            .ok_or_else(|| parse_err(1, "missing header"))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        let [n, b, seed] = fields[..] else {
            return Err(parse_err(hline, "header must be `N B seed`"));
        };
        let n: usize = n.parse().map_err(|_| parse_err(hline, "bad N"))?;
        let b: usize = b.parse().map_err(|_| parse_err(hline, "bad B"))?;
        let seed: u64 = seed.parse().map_err(|_| parse_err(hline, "bad seed"))?;

        let mut edges = Vec::new();
        let mut byz: Option<Vec<AgentId>> = None;
        for (no, line) in lines {
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix("#byzantine") {
                let ids = rest
                    .split_whitespace()
                    .map(|t| t.parse::<AgentId>().map_err(|_| parse_err(no, "bad Byzantine id")))
                    .collect::<Result<Vec<_>, _>>()?;
                byz = Some(ids);
                continue;
            }
            if line.starts_with('#') {
                continue;
            }
            let mut it = line.split_whitespace();
            let (Some(u), Some(v), None) = (it.next(), it.next(), it.next()) else {
                return Err(parse_err(no, "expected `u v`"));
            };
            let u = u.parse().map_err(|_| parse_err(no, "bad endpoint"))?;
            let v = v.parse().map_err(|_| parse_err(no, "bad endpoint"))?;
            edges.push((u, v));
        }
        let byz = byz.unwrap_or_default();
        if byz.len() != b {
            return Err(parse_err(
                hline,
                &format!("header declares {b} Byzantine agents but {} are listed", byz.len()),
            ));
        }
        let net = Self::from_edges(n, &edges)?.with_byzantine(&byz)?;
        Ok((net, seed))
    }
}

/// Erdős–Rényi `G(N, q)`: each unordered pair is an edge independently with
/// probability `q`. The result has no Byzantine agents.
pub fn generate_erdos_renyi(n: usize, q: f64, stream: RngStream) -> Result<Network, TopologyError> {
    if !(0.0..=1.0).contains(&q) || q.is_nan() {
        return Err(TopologyError::InvalidInput(format!("edge probability {q} outside [0, 1]")));
    }
    if n == 0 {
        return Err(TopologyError::InvalidInput("at least one agent is required".into()));
    }
    let mut rng = stream.rng();
    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            if rng.random_bool(q) {
                edges.push((u, v));
            }
        }
    }
    Network::from_edges(n, &edges)
}

/// Marks `count` uniformly chosen agents Byzantine, redrawing until the
/// regular subgraph is connected or `max_retries` draws are exhausted.
pub fn assign_byzantine(
    net: &Network,
    count: usize,
    stream: RngStream,
    max_retries: usize,
) -> Result<Network, TopologyError> {
    let n = net.n_agents();
    if count >= n {
        return Err(TopologyError::InvalidInput(format!(
            "cannot make {count} of {n} agents Byzantine"
        )));
    }
    let mut rng = stream.rng();
    for _ in 0..max_retries.max(1) {
        let mut ids = index::sample(&mut rng, n, count).into_vec();
        ids.sort_unstable();
        let candidate = net.with_byzantine(&ids)?;
        if candidate.is_regular_subgraph_connected() {
            return Ok(candidate);
        }
    }
    Err(TopologyError::Infeasible {
        agents: n,
        byzantine: count,
        retries: max_retries,
    })
}

/// Oriented agent-edge incidence matrix of the regular subgraph. Rows follow
/// ascending regular agent id; column `e = (u, v)`, `u < v`, has `+1` at `u`
/// and `−1` at `v`.
#[derive(Debug, Clone, PartialEq)]
pub struct IncidenceMatrix {
    agents: Vec<AgentId>,
    edges: Vec<(AgentId, AgentId)>,
    matrix: DMatrix<f64>,
}

impl IncidenceMatrix {
    pub fn agents(&self) -> &[AgentId] {
        &self.agents
    }

    pub fn edges(&self) -> &[(AgentId, AgentId)] {
        &self.edges
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn from_matrix(matrix: DMatrix<f64>) -> Self {
        Self {
            agents: (0..matrix.nrows()).collect(),
            edges: Vec::new(),
            matrix,
        }
    }
}

pub fn incidence_matrix(net: &Network) -> Result<IncidenceMatrix, TopologyError> {
    if !net.is_regular_subgraph_connected() {
        return Err(TopologyError::Disconnected);
    }
    let agents = net.regular_agents();
    let mut row_of = vec![usize::MAX; net.n_agents()];
    for (row, &a) in agents.iter().enumerate() {
        row_of[a] = row;
    }
    let edges = net.regular_edges();
    let mut matrix = DMatrix::zeros(agents.len(), edges.len());
    for (col, &(u, v)) in edges.iter().enumerate() {
        matrix[(row_of[u], col)] = 1.0;
        matrix[(row_of[v], col)] = -1.0;
    }
    Ok(IncidenceMatrix {
        agents,
        edges,
        matrix,
    })
}

/// Smallest nonzero singular value of `A`, via the eigenvalues of `A Aᵀ`.
pub fn min_nonzero_singular(a: &IncidenceMatrix) -> Result<f64, TopologyError> {
    let m = a.matrix();
    if m.iter().all(|v| *v == 0.0) {
        return Err(TopologyError::InvalidInput("incidence matrix is all zero".into()));
    }
    let gram = m * m.transpose();
    let eig = gram.symmetric_eigenvalues();
    let largest = eig.iter().fold(0.0_f64, |acc, v| acc.max(*v));
    let cutoff = largest * 1e-10;
    let smallest = eig
        .iter()
        .copied()
        .filter(|&v| v > cutoff)
        .fold(f64::INFINITY, f64::min);
    Ok(smallest.sqrt())
}

/// Metropolis mixing matrix over the full graph.
pub fn metropolis_weights(net: &Network) -> DMatrix<f64> {
    let n = net.n_agents();
    let mut w = DMatrix::zeros(n, n);
    for u in 0..n {
        let mut off = 0.0;
        for &v in net.neighbors(u) {
            let weight = 1.0 / (1.0 + net.degree(u).max(net.degree(v)) as f64);
            w[(u, v)] = weight;
            off += weight;
        }
        w[(u, u)] = 1.0 - off;
    }
    w
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Purpose;
    use approx::assert_abs_diff_eq;

    fn stream(seed: u64) -> RngStream {
        RngStream::global(seed, Purpose::Topology)
    }

    #[test]
    fn erdos_renyi_extremes() {
        let k4 = generate_erdos_renyi(4, 1.0, stream(1)).unwrap();
        assert_eq!(k4.edge_count(), 6);
        let empty = generate_erdos_renyi(5, 0.0, stream(1)).unwrap();
        assert_eq!(empty.edge_count(), 0);
        assert!(generate_erdos_renyi(5, 1.5, stream(1)).is_err());
        assert!(generate_erdos_renyi(5, -0.1, stream(1)).is_err());
    }

    #[test]
    fn erdos_renyi_edge_count_concentrates() {
        // Binomial(4950, 0.5): mean 2475, sd ≈ 35.2, so ±5 sd ≈ [2299, 2651].
        for seed in 0..5 {
            let g = generate_erdos_renyi(100, 0.5, stream(seed)).unwrap();
            let e = g.edge_count();
            assert!((2200..=2750).contains(&e), "seed {seed}: {e} edges");
        }
    }

    #[test]
    fn zero_byzantine_leaves_network_unchanged() {
        let g = Network::complete(5);
        let h = assign_byzantine(&g, 0, stream(3), 10).unwrap();
        assert_eq!(g, h);
        assert!(h.is_regular_subgraph_connected());
    }

    #[test]
    fn k4_with_one_byzantine_succeeds_immediately() {
        let h = assign_byzantine(&Network::complete(4), 1, stream(9), 1).unwrap();
        assert_eq!(h.byzantine_count(), 1);
        assert_eq!(h.regular_edges().len(), 3);
    }

    #[test]
    fn path_never_loses_its_middle() {
        // Exhaustive oracle over the three single-agent choices.
        let p = Network::path(3);
        let accepted: Vec<AgentId> = (0..3)
            .filter(|&b| p.with_byzantine(&[b]).unwrap().is_regular_subgraph_connected())
            .collect();
        assert_eq!(accepted, vec![0, 2]);
        for seed in 0..50 {
            let h = assign_byzantine(&p, 1, stream(seed), 10_000).unwrap();
            assert!(!h.is_byzantine(1));
        }
    }

    #[test]
    fn infeasible_assignment_reports_constraint() {
        // Two disjoint edges: removing any one agent leaves an isolated one.
        let g = Network::from_edges(4, &[(0, 1), (2, 3)]).unwrap();
        let err = assign_byzantine(&g, 1, stream(0), 25).unwrap_err();
        assert!(matches!(err, TopologyError::Infeasible { retries: 25, .. }));
    }

    #[test]
    fn connectivity_examples() {
        let k5 = Network::complete(5);
        for b in 0..3 {
            let ids: Vec<_> = (0..b).collect();
            assert!(k5.with_byzantine(&ids).unwrap().is_regular_subgraph_connected());
        }
        // Two regular agents linked only through a Byzantine one.
        let p = Network::path(3).with_byzantine(&[1]).unwrap();
        assert!(!p.is_regular_subgraph_connected());
        let star = Network::star(4).with_byzantine(&[0]).unwrap();
        assert!(star.regular_edges().is_empty());
        assert!(!star.is_regular_subgraph_connected());
        let single = Network::complete(2).with_byzantine(&[0]).unwrap();
        assert!(single.is_regular_subgraph_connected());
    }

    #[test]
    fn incidence_orientation() {
        let a = incidence_matrix(&Network::complete(2)).unwrap();
        assert_eq!(a.matrix().column(0).as_slice(), &[1.0, -1.0]);
        let tri = incidence_matrix(&Network::complete(3)).unwrap();
        assert_eq!(tri.matrix().shape(), (3, 3));
        for col in tri.matrix().column_iter() {
            assert_eq!(col.iter().filter(|v| **v == 1.0).count(), 1);
            assert_eq!(col.iter().filter(|v| **v == -1.0).count(), 1);
            assert_eq!(col.sum(), 0.0);
        }
        let p = Network::path(3).with_byzantine(&[1]).unwrap();
        assert_eq!(incidence_matrix(&p), Err(TopologyError::Disconnected));
    }

    #[test]
    fn incidence_skips_byzantine_rows_and_edges() {
        let g = Network::complete(4).with_byzantine(&[2]).unwrap();
        let a = incidence_matrix(&g).unwrap();
        assert_eq!(a.agents(), &[0, 1, 3]);
        assert_eq!(a.edges(), &[(0, 1), (0, 3), (1, 3)]);
        assert_eq!(a.matrix()[(2, 1)], -1.0);
    }

    #[test]
    fn min_singular_examples() {
        let single = incidence_matrix(&Network::complete(2)).unwrap();
        assert_abs_diff_eq!(min_nonzero_singular(&single).unwrap(), 2f64.sqrt(), epsilon = 1e-12);
        let tri = incidence_matrix(&Network::complete(3)).unwrap();
        assert_abs_diff_eq!(min_nonzero_singular(&tri).unwrap(), 3f64.sqrt(), epsilon = 1e-12);
        let path = incidence_matrix(&Network::path(4)).unwrap();
        assert_abs_diff_eq!(
            min_nonzero_singular(&path).unwrap(),
            (2.0 - 2f64.sqrt()).sqrt(),
            epsilon = 1e-12
        );
        let lone = incidence_matrix(&Network::complete(1)).unwrap();
        assert!(min_nonzero_singular(&lone).is_err());
    }

    #[test]
    fn metropolis_examples() {
        let two = metropolis_weights(&Network::complete(2));
        assert_eq!(two, DMatrix::from_element(2, 2, 0.5));

        let k4 = metropolis_weights(&Network::complete(4));
        assert!(k4.iter().all(|v| (*v - 0.25).abs() < 1e-15));

        let star = metropolis_weights(&Network::star(3));
        assert_abs_diff_eq!(star[(0, 1)], 1.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(star[(0, 0)], 1.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(star[(1, 1)], 2.0 / 3.0, epsilon = 1e-15);
        for i in 0..3 {
            assert_abs_diff_eq!(star.row(i).sum(), 1.0, epsilon = 1e-12);
            assert_abs_diff_eq!(star.column(i).sum(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn metropolis_includes_byzantine_agents() {
        let g = Network::complete(4).with_byzantine(&[0]).unwrap();
        assert_eq!(metropolis_weights(&g), metropolis_weights(&Network::complete(4)));
    }

    #[test]
    fn edge_list_round_trip() {
        let g = generate_erdos_renyi(12, 0.4, stream(5)).unwrap();
        let g = assign_byzantine(&g, 2, stream(6), 10_000).unwrap();
        let text = g.to_edge_list(77);
        let (back, seed) = Network::from_edge_list(&text).unwrap();
        assert_eq!(seed, 77);
        assert_eq!(back, g);
    }

    #[test]
    fn edge_list_errors_name_the_line() {
        let err = Network::from_edge_list("3 0 1\n0 1\n1 x\n").unwrap_err();
        assert!(matches!(err, TopologyError::Parse { line: 3, .. }), "{err:?}");
        let err = Network::from_edge_list("3 1 1\n0 1\n").unwrap_err();
        assert!(matches!(err, TopologyError::Parse { line: 1, .. }), "{err:?}");
    }
}
