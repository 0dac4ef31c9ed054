//! Population topologies: Watts-Strogatz small-world, Erdős–Rényi random and
//! Barabási–Albert scale-free graphs.
//!
//! Every generator returns a connected, undirected simple graph on nodes
//! `0..n` with ascending neighbor lists. Generators that can produce
//! disconnected output resample from the same seeded stream until they get a
//! connected graph, giving up after [`MAX_CONNECT_ATTEMPTS`].

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAX_CONNECT_ATTEMPTS: usize = 1000;

#[derive(Debug, Error, PartialEq)]
pub enum NetError {
    #[error("invalid network parameter: {0}")]
    InvalidParameter(String),
    #[error("no connected graph after {attempts} attempts")]
    NotConnected { attempts: usize },
    #[error("invalid graph: {0}")]
    InvalidGraph(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// Undirected simple graph stored as sorted adjacency lists.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graph {
    adjacency: Vec<Vec<usize>>,
    edge_count: usize,
}

impl Graph {
    /// Builds a graph from an edge list, rejecting self-loops, duplicate
    /// edges, out-of-range endpoints and disconnected results.
    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Result<Self, NetError> {
        let mut adjacency = vec![Vec::new(); n];
        for &(u, v) in edges {
            if u >= n || v >= n {
                return Err(NetError::InvalidGraph(format!("edge ({u}, {v}) out of range for n={n}")));
            }
            if u == v {
                return Err(NetError::InvalidGraph(format!("self-loop at node {u}")));
            }
            adjacency[u].push(v);
            adjacency[v].push(u);
        }
        let graph = Self::from_adjacency(adjacency);
        if graph.edge_count != edges.len() {
            return Err(NetError::InvalidGraph("duplicate edges".into()));
        }
        if !graph.is_connected() {
            return Err(NetError::InvalidGraph("graph is not connected".into()));
        }
        Ok(graph)
    }

    /// Complete graph on `n` nodes.
    pub fn complete(n: usize) -> Self {
        let adjacency = (0..n).map(|x| (0..n).filter(|&y| y != x).collect()).collect();
        Self::from_adjacency(adjacency)
    }

    /// Cycle on `n >= 3` nodes.
    pub fn cycle(n: usize) -> Self {
        let adjacency = (0..n).map(|x| vec![(x + n - 1) % n, (x + 1) % n]).collect();
        Self::from_adjacency(adjacency)
    }

    fn from_adjacency(mut adjacency: Vec<Vec<usize>>) -> Self {
        for list in &mut adjacency {
            list.sort_unstable();
            list.dedup();
        }
        let edge_count = adjacency.iter().map(Vec::len).sum::<usize>() / 2;
        Self { adjacency, edge_count }
    }

    pub fn n(&self) -> usize {
        self.adjacency.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edge_count
    }

    pub fn neighbors(&self, x: usize) -> &[usize] {
        &self.adjacency[x]
    }

    pub fn degree(&self, x: usize) -> usize {
        self.adjacency[x].len()
    }

    pub fn degrees(&self) -> Vec<usize> {
        self.adjacency.iter().map(Vec::len).collect()
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        self.adjacency[u].binary_search(&v).is_ok()
    }

    /// Edges as `(u, v)` with `u < v`, in ascending order.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.adjacency
            .iter()
            .enumerate()
            .flat_map(|(u, list)| list.iter().filter(move |&&v| v > u).map(move |&v| (u, v)))
    }

    pub fn mean_degree(&self) -> f64 {
        2.0 * self.edge_count as f64 / self.n() as f64
    }

    pub fn is_connected(&self) -> bool {
        let n = self.n();
        if n == 0 {
            return true;
        }
        let mut seen = vec![false; n];
        let mut queue = VecDeque::from([0usize]);
        seen[0] = true;
        let mut visited = 1;
        while let Some(x) = queue.pop_front() {
            for &y in &self.adjacency[x] {
                if !seen[y] {
                    seen[y] = true;
                    visited += 1;
                    queue.push_back(y);
                }
            }
        }
        visited == n
    }

    /// Checks symmetry, simplicity, sortedness, edge count and connectivity.
    pub fn validate(&self) -> Result<(), NetError> {
        let mut degree_sum = 0;
        for (x, list) in self.adjacency.iter().enumerate() {
            if list.windows(2).any(|w| w[0] >= w[1]) {
                return Err(NetError::InvalidGraph(format!("neighbors of {x} not strictly ascending")));
            }
            for &y in list {
                if y == x {
                    return Err(NetError::InvalidGraph(format!("self-loop at node {x}")));
                }
                if y >= self.n() || !self.has_edge(y, x) {
                    return Err(NetError::InvalidGraph(format!("edge ({x}, {y}) not symmetric")));
                }
            }
            degree_sum += list.len();
        }
        if degree_sum != 2 * self.edge_count {
            return Err(NetError::InvalidGraph("edge count does not match degree sum".into()));
        }
        if !self.is_connected() {
            return Err(NetError::InvalidGraph("graph is not connected".into()));
        }
        Ok(())
    }

    /// Edge-list text: a `n=<n>` header followed by one `u v` pair per line.
    pub fn to_edge_list(&self) -> String {
        let mut out = format!("n={}\n", self.n());
        for (u, v) in self.edges() {
            out.push_str(&format!("{u} {v}\n"));
        }
        out
    }

    pub fn parse_edge_list(text: &str) -> Result<Self, NetError> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or(NetError::Parse { line: 1, message: "missing header".into() })?;
        let n = header
            .trim()
            .strip_prefix("n=")
            .and_then(|s| s.parse::<usize>().ok())
            .ok_or(NetError::Parse { line: 1, message: format!("expected `n=<count>`, got `{header}`") })?;
        let mut edges = Vec::new();
        for (idx, line) in lines {
            let parse_err = || NetError::Parse { line: idx + 1, message: format!("expected `u v`, got `{line}`") };
            let mut parts = line.split_whitespace();
            let u = parts.next().and_then(|s| s.parse().ok()).ok_or_else(parse_err)?;
            let v = parts.next().and_then(|s| s.parse().ok()).ok_or_else(parse_err)?;
            if parts.next().is_some() {
                return Err(parse_err());
            }
            edges.push((u, v));
        }
        Self::from_edges(n, &edges)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NetworkKind {
    SmallWorld,
    Random,
    ScaleFree,
}

impl NetworkKind {
    pub const ALL: [NetworkKind; 3] = [NetworkKind::SmallWorld, NetworkKind::Random, NetworkKind::ScaleFree];

    pub fn as_str(self) -> &'static str {
        match self {
            NetworkKind::SmallWorld => "small-world",
            NetworkKind::Random => "random",
            NetworkKind::ScaleFree => "scale-free",
        }
    }

    /// Degree parameter giving mean degree close to 4 for each family.
    pub fn default_degree_param(self) -> usize {
        match self {
            NetworkKind::SmallWorld | NetworkKind::Random => 4,
            NetworkKind::ScaleFree => 2,
        }
    }
}

impl fmt::Display for NetworkKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NetworkKind {
    type Err = NetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "small-world" | "sw" | "watts-strogatz" => Ok(NetworkKind::SmallWorld),
            "random" | "er" | "erdos-renyi" => Ok(NetworkKind::Random),
            "scale-free" | "sf" | "barabasi-albert" => Ok(NetworkKind::ScaleFree),
            other => Err(NetError::InvalidParameter(format!("unknown network kind `{other}`"))),
        }
    }
}

/// Everything needed to regenerate one graph deterministically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub kind: NetworkKind,
    pub n: usize,
    /// Ring degree `k`, target mean degree, or attachment count `m`.
    pub degree_param: usize,
    /// Rewiring probability, only read for small-world graphs.
    pub rewire_beta: f64,
    pub seed: u64,
}

impl NetworkSpec {
    pub fn new(kind: NetworkKind, n: usize, seed: u64) -> Self {
        Self { kind, n, degree_param: kind.default_degree_param(), rewire_beta: 0.1, seed }
    }

    pub fn validate(&self) -> Result<(), NetError> {
        if self.n < 3 {
            return Err(NetError::InvalidParameter(format!("n must be at least 3, got {}", self.n)));
        }
        if self.degree_param < 1 {
            return Err(NetError::InvalidParameter("degree parameter must be at least 1".into()));
        }
        let mean_degree = match self.kind {
            NetworkKind::SmallWorld | NetworkKind::Random => self.degree_param,
            NetworkKind::ScaleFree => 2 * self.degree_param,
        };
        if mean_degree >= self.n && !(self.kind == NetworkKind::Random && self.degree_param == self.n - 1) {
            return Err(NetError::InvalidParameter(format!(
                "degree parameter {} too large for n={}",
                self.degree_param, self.n
            )));
        }
        if !(0.0..=1.0).contains(&self.rewire_beta) {
            return Err(NetError::InvalidParameter(format!("rewire_beta {} outside [0, 1]", self.rewire_beta)));
        }
        Ok(())
    }

    pub fn generate(&self) -> Result<Graph, NetError> {
        self.validate()?;
        match self.kind {
            NetworkKind::SmallWorld => gen_small_world(self.n, self.degree_param, self.rewire_beta, self.seed),
            NetworkKind::Random => gen_random(self.n, self.degree_param as f64, self.seed),
            NetworkKind::ScaleFree => gen_scale_free(self.n, self.degree_param, self.seed),
        }
    }
}

/// Erdős–Rényi G(n, p) with `p = mean_degree / (n - 1)`, conditioned on
/// connectivity by resampling.
pub fn gen_random(n: usize, mean_degree: f64, seed: u64) -> Result<Graph, NetError> {
    if n < 2 {
        return Err(NetError::InvalidParameter(format!("n must be at least 2, got {n}")));
    }
    if !(mean_degree >= 1.0 && mean_degree <= (n - 1) as f64) {
        return Err(NetError::InvalidParameter(format!("mean degree {mean_degree} outside [1, {}]", n - 1)));
    }
    let p = mean_degree / (n - 1) as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..MAX_CONNECT_ATTEMPTS {
        let graph = sample_gnp(n, p, &mut rng);
        if graph.is_connected() {
            return Ok(graph);
        }
    }
    Err(NetError::NotConnected { attempts: MAX_CONNECT_ATTEMPTS })
}

/// One unconditioned G(n, p) draw; may be disconnected.
fn sample_gnp<R: Rng>(n: usize, p: f64, rng: &mut R) -> Graph {
    let mut adjacency = vec![Vec::new(); n];
    for u in 0..n {
        for v in (u + 1)..n {
            if p >= 1.0 || rng.gen::<f64>() < p {
                adjacency[u].push(v);
                adjacency[v].push(u);
            }
        }
    }
    Graph::from_adjacency(adjacency)
}

/// Watts–Strogatz: ring lattice of even degree `k`, each lattice edge
/// rewired at its far end with probability `beta`.
pub fn gen_small_world(n: usize, k: usize, beta: f64, seed: u64) -> Result<Graph, NetError> {
    if k == 0 || k % 2 != 0 || k >= n {
        return Err(NetError::InvalidParameter(format!("ring degree k={k} must be even, positive and below n={n}")));
    }
    if !(0.0..=1.0).contains(&beta) {
        return Err(NetError::InvalidParameter(format!("beta {beta} outside [0, 1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..MAX_CONNECT_ATTEMPTS {
        let mut adjacency: Vec<Vec<usize>> = (0..n)
            .map(|x| {
                (1..=k / 2).flat_map(|j| [(x + j) % n, (x + n - j) % n]).collect()
            })
            .collect();
        for j in 1..=k / 2 {
            for u in 0..n {
                let v = (u + j) % n;
                // the lattice edge may already have been rewired away
                if !adjacency[u].contains(&v) || rng.gen::<f64>() >= beta {
                    continue;
                }
                if adjacency[u].len() >= n - 1 {
                    continue;
                }
                let target = loop {
                    let candidate = rng.gen_range(0..n);
                    if candidate != u && !adjacency[u].contains(&candidate) {
                        break candidate;
                    }
                };
                adjacency[u].retain(|&y| y != v);
                adjacency[v].retain(|&y| y != u);
                adjacency[u].push(target);
                adjacency[target].push(u);
            }
        }
        let graph = Graph::from_adjacency(adjacency);
        if graph.is_connected() {
            return Ok(graph);
        }
    }
    Err(NetError::NotConnected { attempts: MAX_CONNECT_ATTEMPTS })
}

/// Barabási–Albert preferential attachment starting from a clique of
/// `m + 1` nodes; every later node links to `m` distinct existing nodes.
pub fn gen_scale_free(n: usize, m: usize, seed: u64) -> Result<Graph, NetError> {
    if m < 1 || m >= n {
        return Err(NetError::InvalidParameter(format!("attachment count m={m} must satisfy 1 <= m < n={n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adjacency = vec![Vec::new(); n];
    // each node appears once per incident edge end
    let mut endpoints = Vec::with_capacity(2 * (m * (m + 1) / 2 + (n - m - 1) * m));
    for u in 0..=m {
        for v in (u + 1)..=m {
            adjacency[u].push(v);
            adjacency[v].push(u);
            endpoints.extend([u, v]);
        }
    }
    let mut targets = Vec::with_capacity(m);
    for new in (m + 1)..n {
        targets.clear();
        while targets.len() < m {
            let candidate = *endpoints.choose(&mut rng).expect("non-empty endpoint pool");
            if !targets.contains(&candidate) {
                targets.push(candidate);
            }
        }
        for &t in &targets {
            adjacency[new].push(t);
            adjacency[t].push(new);
            endpoints.extend([new, t]);
        }
    }
    Ok(Graph::from_adjacency(adjacency))
}
