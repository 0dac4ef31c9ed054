//! Prisoner's Dilemma on a graph under death-birth updating.
//!
//! Each step removes a uniformly random node; its neighbors compete for the
//! empty site with probability proportional to fitness `1 + w (payoff - 1)`.
//! Runs continue until the population is all-cooperate (recovery) or
//! all-defect (collapse).
//!
//! The free functions ([`node_payoff`], [`replacement_prob_c`], [`step`])
//! recompute everything from the strategy vector. [`Simulation`] keeps
//! per-node cooperator-neighbor counts and edge-class counts up to date so
//! that one event costs `O(degree)`; both paths draw random numbers in the
//! same order and produce identical trajectories.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{extract_frame, FeatureFrame, Label};
use crate::netgen::{Graph, NetError, NetworkSpec};

pub const DEFAULT_MAX_STEPS: u64 = 1_000_000;

#[derive(Debug, Error, PartialEq)]
pub enum DynError {
    #[error("invalid game: {0}")]
    InvalidGame(String),
    #[error("invalid simulation parameter: {0}")]
    InvalidParameter(String),
    #[error("state is frozen; no update is possible")]
    Frozen,
    #[error("run {run_index} did not absorb within {max_steps} steps")]
    Unabsorbed { run_index: u64, max_steps: u64 },
    #[error("no trajectories to aggregate")]
    Empty,
    #[error(transparent)]
    Network(#[from] NetError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Strategy {
    C,
    D,
}

/// Prisoner's Dilemma payoffs, row player's view.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GameMatrix {
    pub r: f64,
    pub s: f64,
    pub t: f64,
    pub p: f64,
}

impl Default for GameMatrix {
    fn default() -> Self {
        Self { r: 1.0, s: -1.0, t: 2.0, p: 0.0 }
    }
}

impl GameMatrix {
    pub fn new(r: f64, s: f64, t: f64, p: f64) -> Result<Self, DynError> {
        let game = Self { r, s, t, p };
        game.validate()?;
        Ok(game)
    }

    /// Requires `T > R > P > S`.
    pub fn validate(&self) -> Result<(), DynError> {
        if self.t > self.r && self.r > self.p && self.p > self.s {
            Ok(())
        } else {
            Err(DynError::InvalidGame(format!(
                "need T > R > P > S, got R={} S={} T={} P={}",
                self.r, self.s, self.t, self.p
            )))
        }
    }
}

pub fn pair_payoff(sx: Strategy, sy: Strategy, game: &GameMatrix) -> f64 {
    match (sx, sy) {
        (Strategy::C, Strategy::C) => game.r,
        (Strategy::C, Strategy::D) => game.s,
        (Strategy::D, Strategy::C) => game.t,
        (Strategy::D, Strategy::D) => game.p,
    }
}

/// Payoff of a node with `coop_neighbors` cooperating neighbors out of `degree`.
#[inline]
fn payoff_from_counts(s: Strategy, coop_neighbors: u32, degree: u32, game: &GameMatrix) -> f64 {
    let c = coop_neighbors as f64;
    let d = (degree - coop_neighbors) as f64;
    match s {
        Strategy::C => c * game.r + d * game.s,
        Strategy::D => c * game.t + d * game.p,
    }
}

/// Fitness clamped at zero so replacement weights stay valid probabilities.
#[inline]
pub fn fitness(payoff: f64, w: f64) -> f64 {
    (1.0 + w * (payoff - 1.0)).max(0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimParams {
    pub game: GameMatrix,
    /// Selection strength.
    pub w: f64,
    /// Initial defector fraction.
    pub eta: f64,
    pub network: NetworkSpec,
    pub max_steps: u64,
    /// Master seed; run `i` draws from stream `i` of this seed.
    pub seed: u64,
}

impl SimParams {
    pub fn validate(&self) -> Result<(), DynError> {
        self.game.validate()?;
        if !(self.w >= 0.0 && self.w.is_finite()) {
            return Err(DynError::InvalidParameter(format!("selection strength w={} must be >= 0", self.w)));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(DynError::InvalidParameter(format!("eta={} outside [0, 1]", self.eta)));
        }
        if self.max_steps < 1 {
            return Err(DynError::InvalidParameter("max_steps must be at least 1".into()));
        }
        self.network.validate()?;
        Ok(())
    }

    pub fn defector_count(&self) -> usize {
        (self.eta * self.network.n as f64 + 1e-9).floor() as usize
    }

    /// Independent, reproducible generator for run `run_index`.
    pub fn run_rng(&self, run_index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(run_index);
        rng
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PopulationState {
    pub strategies: Vec<Strategy>,
    pub step: u64,
}

impl PopulationState {
    pub fn new(strategies: Vec<Strategy>) -> Self {
        Self { strategies, step: 0 }
    }

    pub fn cooperators(&self) -> usize {
        self.strategies.iter().filter(|&&s| s == Strategy::C).count()
    }

    /// `Some(outcome)` once every node shares one strategy.
    pub fn frozen(&self) -> Option<Label> {
        match self.cooperators() {
            c if c == self.strategies.len() => Some(Label::Recovery),
            0 => Some(Label::Collapse),
            _ => None,
        }
    }
}

pub fn node_payoff(g: &Graph, state: &PopulationState, x: usize, game: &GameMatrix) -> f64 {
    let sx = state.strategies[x];
    g.neighbors(x).iter().map(|&y| pair_payoff(sx, state.strategies[y], game)).sum()
}

/// Probability that the vacated site `x` is refilled by a cooperator.
///
/// Falls back to the cooperator fraction among neighbors when every
/// neighbor's fitness is clamped to zero.
pub fn replacement_prob_c(g: &Graph, state: &PopulationState, x: usize, params: &SimParams) -> f64 {
    let mut coop = 0.0;
    let mut total = 0.0;
    let mut coop_count = 0usize;
    for &y in g.neighbors(x) {
        let f = fitness(node_payoff(g, state, y, &params.game), params.w);
        total += f;
        if state.strategies[y] == Strategy::C {
            coop += f;
            coop_count += 1;
        }
    }
    if total > 0.0 {
        coop / total
    } else {
        coop_count as f64 / g.degree(x) as f64
    }
}

/// One death-birth event computed from scratch.
pub fn step<R: Rng + ?Sized>(
    g: &Graph,
    state: &PopulationState,
    params: &SimParams,
    rng: &mut R,
) -> Result<PopulationState, DynError> {
    if state.frozen().is_some() {
        return Err(DynError::Frozen);
    }
    let x = rng.gen_range(0..g.n());
    let p_c = replacement_prob_c(g, state, x, params);
    let new = if rng.gen::<f64>() < p_c { Strategy::C } else { Strategy::D };
    let mut next = state.clone();
    next.strategies[x] = new;
    next.step += 1;
    Ok(next)
}

/// Places `count` defectors on distinct uniformly chosen nodes.
pub fn initial_state<R: Rng + ?Sized>(n: usize, count: usize, rng: &mut R) -> PopulationState {
    let mut strategies = vec![Strategy::C; n];
    for x in rand::seq::index::sample(rng, n, count.min(n)) {
        strategies[x] = Strategy::D;
    }
    PopulationState::new(strategies)
}

/// How many frames a run keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Recording {
    /// Every frame through absorption.
    Full,
    /// Only the first `len` frames; the frozen frame is kept separately.
    Prefix(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub run_id: u64,
    /// Frames from step 0. Under [`Recording::Full`] the last one is frozen.
    pub frames: Vec<FeatureFrame>,
    pub final_frame: FeatureFrame,
    pub outcome: Label,
    pub absorption_step: u64,
}

impl Trajectory {
    /// Frame at step `t`, continuing with the frozen frame after absorption.
    pub fn frame_at(&self, t: u64) -> Option<FeatureFrame> {
        if t >= self.absorption_step {
            Some(self.final_frame)
        } else {
            self.frames.get(t as usize).copied()
        }
    }
}

/// Incremental death-birth simulator on a fixed graph.
pub struct Simulation<'g> {
    graph: &'g Graph,
    params: &'g SimParams,
    strategies: Vec<Strategy>,
    coop_neighbors: Vec<u32>,
    frame: FeatureFrame,
    step: u64,
}

impl<'g> Simulation<'g> {
    pub fn new(graph: &'g Graph, params: &'g SimParams, state: &PopulationState) -> Self {
        let coop_neighbors = (0..graph.n())
            .map(|x| graph.neighbors(x).iter().filter(|&&y| state.strategies[y] == Strategy::C).count() as u32)
            .collect();
        Self {
            graph,
            params,
            strategies: state.strategies.clone(),
            coop_neighbors,
            frame: extract_frame(graph, &state.strategies),
            step: state.step,
        }
    }

    pub fn frame(&self) -> FeatureFrame {
        self.frame
    }

    pub fn state(&self) -> PopulationState {
        PopulationState { strategies: self.strategies.clone(), step: self.step }
    }

    pub fn frozen(&self) -> Option<Label> {
        if self.frame.d_count == 0 {
            Some(Label::Recovery)
        } else if self.frame.c_count == 0 {
            Some(Label::Collapse)
        } else {
            None
        }
    }

    fn fitness_of(&self, y: usize) -> f64 {
        let payoff = payoff_from_counts(
            self.strategies[y],
            self.coop_neighbors[y],
            self.graph.degree(y) as u32,
            &self.params.game,
        );
        fitness(payoff, self.params.w)
    }

    pub fn step<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<(), DynError> {
        if self.frozen().is_some() {
            return Err(DynError::Frozen);
        }
        let x = rng.gen_range(0..self.graph.n());
        let mut coop = 0.0;
        let mut total = 0.0;
        for &y in self.graph.neighbors(x) {
            let f = self.fitness_of(y);
            total += f;
            if self.strategies[y] == Strategy::C {
                coop += f;
            }
        }
        let p_c = if total > 0.0 {
            coop / total
        } else {
            self.coop_neighbors[x] as f64 / self.graph.degree(x) as f64
        };
        let new = if rng.gen::<f64>() < p_c { Strategy::C } else { Strategy::D };
        self.step += 1;
        if new != self.strategies[x] {
            self.set_strategy(x, new);
        }
        Ok(())
    }

    fn set_strategy(&mut self, x: usize, new: Strategy) {
        let coop_nb = self.coop_neighbors[x];
        let defect_nb = self.graph.degree(x) as u32 - coop_nb;
        let f = &mut self.frame;
        match new {
            Strategy::C => {
                // D -> C: DD edges become CD, CD edges become CC
                f.c_count += 1;
                f.d_count -= 1;
                f.dd_edges -= defect_nb;
                f.cd_edges = f.cd_edges + defect_nb - coop_nb;
                f.cc_edges += coop_nb;
                for &y in self.graph.neighbors(x) {
                    self.coop_neighbors[y] += 1;
                }
            }
            Strategy::D => {
                f.c_count -= 1;
                f.d_count += 1;
                f.cc_edges -= coop_nb;
                f.cd_edges = f.cd_edges + coop_nb - defect_nb;
                f.dd_edges += defect_nb;
                for &y in self.graph.neighbors(x) {
                    self.coop_neighbors[y] -= 1;
                }
            }
        }
        self.strategies[x] = new;
    }
}

/// Simulates run `run_index` on `graph` until absorption.
pub fn run_on(graph: &Graph, params: &SimParams, run_index: u64, recording: Recording) -> Result<Trajectory, DynError> {
    let mut rng = params.run_rng(run_index);
    let state = initial_state(graph.n(), params.defector_count(), &mut rng);
    let mut sim = Simulation::new(graph, params, &state);
    let keep = match recording {
        Recording::Full => usize::MAX,
        Recording::Prefix(len) => len,
    };
    let mut frames = Vec::new();
    loop {
        if frames.len() < keep {
            frames.push(sim.frame());
        }
        if let Some(outcome) = sim.frozen() {
            return Ok(Trajectory {
                run_id: run_index,
                frames,
                final_frame: sim.frame(),
                outcome,
                absorption_step: sim.step,
            });
        }
        if sim.step >= params.max_steps {
            return Err(DynError::Unabsorbed { run_index, max_steps: params.max_steps });
        }
        sim.step(&mut rng)?;
    }
}

/// Generates the graph from `params.network` and simulates run 0.
pub fn run(params: &SimParams) -> Result<Trajectory, DynError> {
    params.validate()?;
    let graph = params.network.generate()?;
    run_on(&graph, params, 0, Recording::Full)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeStats {
    pub runs: usize,
    pub collapses: usize,
    pub p_collapse: f64,
    /// `None` when no run recovered.
    pub mean_recovery_time: Option<f64>,
    /// `None` when no run collapsed.
    pub mean_collapse_time: Option<f64>,
}

/// Folds `(outcome, absorption_step)` pairs in order.
pub fn aggregate_outcomes<I>(outcomes: I) -> Result<OutcomeStats, DynError>
where
    I: IntoIterator<Item = (Label, u64)>,
{
    let (mut runs, mut collapses) = (0usize, 0usize);
    let (mut rec_sum, mut col_sum) = (0u128, 0u128);
    for (label, time) in outcomes {
        runs += 1;
        match label {
            Label::Recovery => rec_sum += time as u128,
            Label::Collapse => {
                collapses += 1;
                col_sum += time as u128;
            }
        }
    }
    if runs == 0 {
        return Err(DynError::Empty);
    }
    let recoveries = runs - collapses;
    Ok(OutcomeStats {
        runs,
        collapses,
        p_collapse: collapses as f64 / runs as f64,
        mean_recovery_time: (recoveries > 0).then(|| rec_sum as f64 / recoveries as f64),
        mean_collapse_time: (collapses > 0).then(|| col_sum as f64 / collapses as f64),
    })
}

pub fn aggregate_trajectories(trajectories: &[Trajectory]) -> Result<OutcomeStats, DynError> {
    aggregate_outcomes(trajectories.iter().map(|t| (t.outcome, t.absorption_step)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netgen::NetworkKind;
    use Strategy::{C, D};

    fn params_for(n: usize, w: f64) -> SimParams {
        SimParams {
            game: GameMatrix::default(),
            w,
            eta: 0.1,
            network: NetworkSpec::new(NetworkKind::Random, n, 1),
            max_steps: DEFAULT_MAX_STEPS,
            seed: 99,
        }
    }

    fn star_with_center(center: Strategy, leaves: &[Strategy]) -> (Graph, PopulationState) {
        let edges: Vec<_> = (1..=leaves.len()).map(|y| (0, y)).collect();
        let g = Graph::from_edges(leaves.len() + 1, &edges).unwrap();
        let mut strategies = vec![center];
        strategies.extend_from_slice(leaves);
        (g, PopulationState::new(strategies))
    }

    #[test]
    fn pair_payoffs_follow_the_matrix() {
        let game = GameMatrix::default();
        assert_eq!(pair_payoff(C, C, &game), 1.0);
        assert_eq!(pair_payoff(C, D, &game), -1.0);
        assert_eq!(pair_payoff(D, C, &game), 2.0);
        assert_eq!(pair_payoff(D, D, &game), 0.0);
    }

    #[test]
    fn game_ordering_is_enforced() {
        assert!(GameMatrix::new(1.0, -1.0, 2.0, 0.0).is_ok());
        assert!(GameMatrix::new(1.0, -1.0, 0.5, 0.0).is_err());
        assert!(GameMatrix::new(1.0, 0.5, 2.0, 0.0).is_err());
    }

    #[test]
    fn node_payoff_sums_over_neighbors() {
        let game = GameMatrix::default();
        let (g, s) = star_with_center(C, &[C, C, C]);
        assert_eq!(node_payoff(&g, &s, 0, &game), 3.0);
        let (g, s) = star_with_center(D, &[C, C]);
        assert_eq!(node_payoff(&g, &s, 0, &game), 4.0);
        let (g, s) = star_with_center(C, &[C, D]);
        assert_eq!(node_payoff(&g, &s, 0, &game), 0.0);
    }

    #[test]
    fn fitness_values() {
        assert_eq!(fitness(1.0, 0.37), 1.0);
        assert!((fitness(4.0, 0.1) - 1.3).abs() < 1e-12);
        // unclamped value would be 1 + 0.1 * (-31) = -2.1
        assert!((1.0 + 0.1 * (-30.0 - 1.0) - (-2.1_f64)).abs() < 1e-12);
        assert_eq!(fitness(-30.0, 0.1), 0.0);
    }

    #[test]
    fn replacement_probability_cases() {
        let params = params_for(3, 0.1);
        let (g, s) = star_with_center(D, &[C, C, C]);
        assert_eq!(replacement_prob_c(&g, &s, 0, &params), 1.0);
        // a leaf's only neighbor is the defecting center
        assert_eq!(replacement_prob_c(&g, &s, 1, &params), 0.0);

        // K3 with node 0 = D, node 1 dying, node 2 = C
        let k3 = Graph::complete(3);
        let state = PopulationState::new(vec![D, C, C]);
        let p = replacement_prob_c(&k3, &state, 1, &params);
        // f(node0) = 1 + 0.1 (2T - 1) = 1.3, f(node2) = 1 + 0.1 (R + S - 1) = 0.9
        assert!((p - 0.9 / 2.2).abs() < 1e-12, "{p}");

        let mut neutral = params_for(4, 0.0);
        neutral.w = 0.0;
        let (g, s) = star_with_center(D, &[C, C, D]);
        assert!((replacement_prob_c(&g, &s, 0, &neutral) - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn replacement_falls_back_to_uniform_when_all_fitness_vanishes() {
        // Two cooperator hubs each facing many defectors: payoff far below 0.
        let mut edges = vec![(0, 1), (0, 2)];
        for leaf in 3..13 {
            edges.push((1, leaf));
            edges.push((2, leaf));
        }
        let g = Graph::from_edges(13, &edges).unwrap();
        let mut strategies = vec![D; 13];
        strategies[..3].fill(C);
        let state = PopulationState::new(strategies);
        let params = SimParams { w: 1.0, ..params_for(13, 1.0) };
        assert_eq!(fitness(node_payoff(&g, &state, 1, &params.game), 1.0), 0.0);
        assert_eq!(replacement_prob_c(&g, &state, 0, &params), 1.0);
    }

    #[test]
    fn step_rejects_frozen_state() {
        let g = Graph::complete(3);
        let params = params_for(3, 0.1);
        let mut rng = params.run_rng(0);
        let frozen = PopulationState::new(vec![C, C, C]);
        assert_eq!(step(&g, &frozen, &params, &mut rng), Err(DynError::Frozen));
    }

    #[test]
    fn lone_defector_surrounded_by_cooperators_is_replaced_when_chosen() {
        let (g, s) = star_with_center(D, &[C, C, C]);
        let params = params_for(4, 0.1);
        for seed in 0..200 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let next = step(&g, &s, &params, &mut rng).unwrap();
            let changed: Vec<_> = (0..4).filter(|&i| next.strategies[i] != s.strategies[i]).collect();
            assert!(changed.len() <= 1);
            if changed == [0] {
                assert_eq!(next.frozen(), Some(Label::Recovery));
            }
            assert_eq!(next.step, 1);
        }
    }

    #[test]
    fn step_is_deterministic() {
        let params = params_for(30, 0.1);
        let g = params.network.generate().unwrap();
        let mut rng = params.run_rng(3);
        let s0 = initial_state(30, 8, &mut rng);
        let a = step(&g, &s0, &params, &mut params.run_rng(5)).unwrap();
        let b = step(&g, &s0, &params, &mut params.run_rng(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn incremental_simulation_matches_reference_step() {
        for (w, kind) in [(0.1, NetworkKind::ScaleFree), (0.0, NetworkKind::SmallWorld), (1.0, NetworkKind::Random)] {
            let mut params = params_for(40, w);
            params.network = NetworkSpec::new(kind, 40, 3);
            params.eta = 0.4;
            let g = params.network.generate().unwrap();
            let mut rng = params.run_rng(0);
            let mut reference = initial_state(40, 16, &mut rng);
            let mut sim = Simulation::new(&g, &params, &reference);
            let mut rng_a = params.run_rng(7);
            let mut rng_b = params.run_rng(7);
            while reference.frozen().is_none() && reference.step < 20_000 {
                reference = step(&g, &reference, &params, &mut rng_a).unwrap();
                sim.step(&mut rng_b).unwrap();
                assert_eq!(sim.state(), reference);
                assert_eq!(sim.frame(), extract_frame(&g, &reference.strategies));
            }
        }
    }

    #[test]
    fn trivial_eta_absorbs_immediately() {
        let mut params = params_for(20, 0.1);
        params.eta = 0.0;
        let t = run(&params).unwrap();
        assert_eq!((t.outcome, t.absorption_step, t.frames.len()), (Label::Recovery, 0, 1));
        params.eta = 1.0;
        let t = run(&params).unwrap();
        assert_eq!((t.outcome, t.absorption_step), (Label::Collapse, 0));
    }

    #[test]
    fn defector_count_floors() {
        let mut params = params_for(25, 0.1);
        params.eta = 0.1;
        assert_eq!(params.defector_count(), 2);
        params.network.n = 100;
        assert_eq!(params.defector_count(), 10);
    }

    #[test]
    fn unabsorbed_run_is_an_error() {
        let mut params = params_for(50, 0.0);
        params.eta = 0.5;
        params.max_steps = 3;
        let g = params.network.generate().unwrap();
        assert_eq!(
            run_on(&g, &params, 4, Recording::Full),
            Err(DynError::Unabsorbed { run_index: 4, max_steps: 3 })
        );
    }

    #[test]
    fn prefix_recording_keeps_frozen_frame() {
        let params = params_for(30, 0.1);
        let g = params.network.generate().unwrap();
        let full = run_on(&g, &params, 2, Recording::Full).unwrap();
        let short = run_on(&g, &params, 2, Recording::Prefix(5)).unwrap();
        assert_eq!(full.frames.len() as u64, full.absorption_step + 1);
        assert_eq!(*full.frames.last().unwrap(), full.final_frame);
        assert_eq!(short.frames[..], full.frames[..5.min(full.frames.len())]);
        assert_eq!(short.final_frame, full.final_frame);
        assert_eq!(short.absorption_step, full.absorption_step);
    }

    #[test]
    fn aggregate_examples() {
        let stats = aggregate_outcomes([(Label::Recovery, 10), (Label::Collapse, 20)]).unwrap();
        assert_eq!(stats.p_collapse, 0.5);
        assert_eq!(stats.mean_recovery_time, Some(10.0));
        assert_eq!(stats.mean_collapse_time, Some(20.0));
        let stats = aggregate_outcomes([(Label::Recovery, 3), (Label::Recovery, 5)]).unwrap();
        assert_eq!(stats.p_collapse, 0.0);
        assert_eq!(stats.mean_collapse_time, None);
        assert_eq!(aggregate_outcomes(std::iter::empty()), Err(DynError::Empty));
    }
}
