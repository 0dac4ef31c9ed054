use std::path::{Path, PathBuf};

use evowarn::evodyn::DEFAULT_MAX_STEPS;
use evowarn::NetworkKind;
use evowarn_nn::neural::{ModelKind, ModelSpec};
use evowarn_nn::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::HarnessError;

/// Minimum simulations per cell; smaller cells are too noisy to score.
pub const MIN_RUNS_PER_CELL: usize = 100;

/// A sweep over selection strength, window size, game parameters, network
/// family and model, repeated for every replicate seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub n: usize,
    pub eta: f64,
    pub r: f64,
    pub p: f64,
    pub w: Vec<f64>,
    pub ws: Vec<usize>,
    #[serde(rename = "S")]
    pub s: Vec<f64>,
    #[serde(rename = "T")]
    pub t: Vec<f64>,
    pub networks: Vec<NetworkKind>,
    pub models: Vec<ModelKind>,
    pub runs_per_cell: usize,
    pub replicates: Vec<u64>,
    pub test_fraction: f64,
    /// Drop runs that froze before the window closed.
    pub exclude_early_absorbed: bool,
    pub max_steps: u64,
    pub train: TrainConfig,
    /// Width of LSTM states and the Transformer model dimension.
    pub hidden_size: Option<usize>,
    pub write_datasets: bool,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "experiment".into(),
            n: 100,
            eta: 0.1,
            r: 1.0,
            p: 0.0,
            w: vec![0.001, 0.005, 0.01, 0.05, 0.1],
            ws: vec![30, 50, 100, 500, 1000],
            s: vec![-1.0],
            t: vec![2.0],
            networks: vec![NetworkKind::Random],
            models: ModelKind::ALL.to_vec(),
            runs_per_cell: 2000,
            replicates: vec![1, 2, 3],
            test_fraction: 0.2,
            exclude_early_absorbed: false,
            max_steps: DEFAULT_MAX_STEPS,
            train: TrainConfig::default(),
            hidden_size: None,
            write_datasets: true,
            output_dir: PathBuf::from("results"),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        let config: Self = serde_json::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, HarnessError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn max_ws(&self) -> usize {
        self.ws.iter().copied().max().unwrap_or(0)
    }

    pub fn model_spec(&self, kind: ModelKind, ws: usize, seed: u64) -> ModelSpec {
        let mut spec = ModelSpec::new(kind, ws, seed);
        if let Some(h) = self.hidden_size {
            spec.hidden_size = h;
            spec.d_model = h;
        }
        spec
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        let lists = [
            ("w", self.w.is_empty()),
            ("ws", self.ws.is_empty()),
            ("S", self.s.is_empty()),
            ("T", self.t.is_empty()),
            ("networks", self.networks.is_empty()),
            ("models", self.models.is_empty()),
            ("replicates", self.replicates.is_empty()),
        ];
        if let Some((name, _)) = lists.iter().find(|(_, empty)| *empty) {
            return bad(format!("{name} must not be empty"));
        }
        if self.runs_per_cell < MIN_RUNS_PER_CELL {
            return bad(format!("runs_per_cell must be at least {MIN_RUNS_PER_CELL}, got {}", self.runs_per_cell));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return bad(format!("test_fraction {} outside (0, 1)", self.test_fraction));
        }
        if self.ws.contains(&0) {
            return bad("ws values must be positive".into());
        }
        if self.hidden_size == Some(0) {
            return bad("hidden_size must be positive".into());
        }
        for (i, seed) in self.replicates.iter().enumerate() {
            if self.replicates[..i].contains(seed) {
                return bad(format!("replicate seed {seed} is listed twice"));
            }
        }
        for &kind in &self.models {
            for &ws in &self.ws {
                self.model_spec(kind, ws, 0).validate().map_err(|e| HarnessError::Config(e.to_string()))?;
            }
        }
        self.train.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        for &s in &self.s {
            for &t in &self.t {
                evowarn::GameMatrix::new(self.r, s, t, self.p).map_err(|e| HarnessError::Config(e.to_string()))?;
            }
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return bad(format!("eta {} outside [0, 1]", self.eta));
        }
        if self.w.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return bad("w values must be finite and non-negative".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_copy_the_published_grids() {
        let c = ExperimentConfig::default();
        assert_eq!(c.w, [0.001, 0.005, 0.01, 0.05, 0.1]);
        assert_eq!(c.ws, [30, 50, 100, 500, 1000]);
        assert_eq!((c.n, c.eta, c.r, c.p), (100, 0.1, 1.0, 0.0));
        c.validate().unwrap();
    }

    #[test]
    fn json_round_trip_and_partial_configs() {
        let c = ExperimentConfig::from_json(r#"{"w": [0.1], "ws": [30], "S": [-1], "T": [1.5, 2], "models": ["SeqLstm"]}"#)
            .unwrap();
        assert_eq!(c.t, [1.5, 2.0]);
        assert_eq!(c.runs_per_cell, 2000);
        let back = ExperimentConfig::from_json(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn rejects_invalid_configs() {
        for text in [
            r#"{"w": []}"#,
            r#"{"runs_per_cell": 10}"#,
            r#"{"ws": [3], "models": ["TextCnn"]}"#,
            r#"{"T": [0.5]}"#,
            r#"{"replicates": [1, 1]}"#,
            r#"{"bogus": 1}"#,
        ] {
            assert!(ExperimentConfig::from_json(text).is_err(), "{text}");
        }
    }
}
