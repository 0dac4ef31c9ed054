//! Exact fixation probabilities for small graphs.
//!
//! Enumerates all `2^n` strategy assignments, builds the death-birth
//! transition matrix over them and solves the absorbing-chain equations
//! `h = P h` with `h(all-D) = 1`, `h(all-C) = 0`. Payoffs and fitness are
//! evaluated directly from the game matrix here, independently of the
//! simulator in [`crate::evodyn`].

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::evodyn::GameMatrix;
use crate::netgen::Graph;

pub const MAX_NODES: usize = 12;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FixationError {
    #[error("graph has {0} nodes; exact solve supports at most {MAX_NODES}")]
    TooLarge(usize),
    #[error("absorbing-chain system is singular")]
    Singular,
}

/// Bit `x` of a state is set when node `x` defects.
fn defects(state: usize, x: usize) -> bool {
    state >> x & 1 == 1
}

fn payoff(g: &Graph, game: &GameMatrix, state: usize, y: usize) -> f64 {
    let mut total = 0.0;
    for &z in g.neighbors(y) {
        total += match (defects(state, y), defects(state, z)) {
            (false, false) => game.r,
            (false, true) => game.s,
            (true, false) => game.t,
            (true, true) => game.p,
        };
    }
    total
}

/// Probability of ending all-defect from every state, indexed by bitmask.
pub fn absorption_probabilities(g: &Graph, game: &GameMatrix, w: f64) -> Result<Vec<f64>, FixationError> {
    let n = g.n();
    if n > MAX_NODES {
        return Err(FixationError::TooLarge(n));
    }
    let states = 1usize << n;
    let all_d = states - 1;
    let mut a = DMatrix::<f64>::identity(states, states);
    let mut b = DVector::<f64>::zeros(states);
    b[all_d] = 1.0;
    for s in 1..all_d {
        let fit: Vec<f64> = (0..n).map(|y| (1.0 + w * (payoff(g, game, s, y) - 1.0)).max(0.0)).collect();
        for x in 0..n {
            let nbrs = g.neighbors(x);
            let total: f64 = nbrs.iter().map(|&y| fit[y]).sum();
            let p_defect = if total > 0.0 {
                nbrs.iter().filter(|&&y| defects(s, y)).map(|&y| fit[y]).sum::<f64>() / total
            } else {
                nbrs.iter().filter(|&&y| defects(s, y)).count() as f64 / nbrs.len() as f64
            };
            let to_d = s | (1 << x);
            let to_c = s & !(1 << x);
            a[(s, to_d)] -= p_defect / n as f64;
            a[(s, to_c)] -= (1.0 - p_defect) / n as f64;
        }
    }
    let h = a.lu().solve(&b).ok_or(FixationError::Singular)?;
    Ok(h.iter().copied().collect())
}

/// Probability that a single defector, placed uniformly at random among
/// cooperators, takes over the graph.
pub fn single_defector_fixation(g: &Graph, game: &GameMatrix, w: f64) -> Result<f64, FixationError> {
    let h = absorption_probabilities(g, game, w)?;
    Ok((0..g.n()).map(|x| h[1 << x]).sum::<f64>() / g.n() as f64)
}
