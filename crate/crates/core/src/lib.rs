//! Evolutionary graph dynamics and the data pipeline around them.
//!
//! * [`netgen`] builds connected small-world, random and scale-free graphs.
//! * [`evodyn`] plays the Prisoner's Dilemma on a graph and runs death-birth
//!   updates until the population freezes into all-cooperate or all-defect.
//! * [`dataset`] turns trajectories into windowed 5-channel sequences.
//! * [`metrics`] scores recovery/collapse predictions.
//! * [`fixation`] solves small populations exactly as an absorbing chain.

pub mod dataset;
pub mod evodyn;
pub mod fixation;
pub mod metrics;
pub mod netgen;

pub use dataset::{FeatureFrame, FeatureSequence, Label};
pub use evodyn::{GameMatrix, SimParams, Strategy, Trajectory};
pub use netgen::{Graph, NetworkKind, NetworkSpec};
