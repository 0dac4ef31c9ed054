//! Grid execution: simulate each cell, window it for every `ws`, split,
//! train every model and score it on the held-out side.

use std::fs;
use std::path::{Path, PathBuf};

use evowarn::dataset::{split, DatasetError, DatasetFile, Label};
use evowarn::evodyn::{aggregate_outcomes, run_on, OutcomeStats, Recording, Trajectory};
use evowarn::metrics::{dual_report, MetricReport};
use evowarn::{GameMatrix, Graph, NetworkKind, NetworkSpec, SimParams};
use evowarn_nn::neural::ModelKind;
use evowarn_nn::trainer::{predict_samples, train, Samples, TrainConfig, TrainError, TrainHistory};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::HarnessError;

pub const WORKERS_ENV: &str = "EVOWARN_WORKERS";

/// One metric row: a trained model scored with one positive class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub model: ModelKind,
    pub w: f64,
    pub ws: usize,
    #[serde(rename = "S")]
    pub s: f64,
    #[serde(rename = "T")]
    pub t: f64,
    pub network: NetworkKind,
    pub replicate: u64,
    pub positive_class: Label,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub accuracy: Option<f64>,
    pub n_test: usize,
    pub n_undefined: usize,
}

/// Absorption statistics of one simulated cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeRow {
    pub w: f64,
    #[serde(rename = "S")]
    pub s: f64,
    #[serde(rename = "T")]
    pub t: f64,
    pub network: NetworkKind,
    pub replicate: u64,
    pub stats: OutcomeStats,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportTable {
    pub metrics: Vec<MetricRow>,
    pub outcomes: Vec<OutcomeRow>,
}

/// How much work a run did versus loaded from the cache.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunSummary {
    pub cells_simulated: usize,
    pub cells_cached: usize,
    pub jobs_trained: usize,
    pub jobs_cached: usize,
}

/// Simulation coordinates within the grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SimCell {
    pub w: f64,
    pub s: f64,
    pub t: f64,
    pub network: NetworkKind,
    pub replicate: u64,
}

/// First eight bytes of the SHA-256 of `key`.
pub fn derive_seed(key: &str) -> u64 {
    let digest = Sha256::digest(key.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

fn content_hash<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_string(value).expect("keys serialize");
    Sha256::digest(json.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

impl ExperimentConfig {
    /// Simulation cells in table order: w, then S, T, network, replicate.
    pub fn sim_cells(&self) -> Vec<SimCell> {
        let mut cells = Vec::new();
        for &w in &self.w {
            for &s in &self.s {
                for &t in &self.t {
                    for &network in &self.networks {
                        for &replicate in &self.replicates {
                            cells.push(SimCell { w, s, t, network, replicate });
                        }
                    }
                }
            }
        }
        cells
    }

    /// Simulation parameters for a cell. The graph depends only on the
    /// family, size and replicate, so every w/S/T cell of a replicate shares it.
    pub fn sim_params(&self, cell: &SimCell) -> SimParams {
        let mut network = NetworkSpec::new(cell.network, self.n, 0);
        network.seed = derive_seed(&format!("network/{}/{}/{}/{}", cell.network, self.n, network.degree_param, cell.replicate));
        let mut params = SimParams {
            game: GameMatrix { r: self.r, s: cell.s, t: cell.t, p: self.p },
            w: cell.w,
            eta: self.eta,
            network,
            max_steps: self.max_steps,
            seed: 0,
        };
        params.seed = derive_seed(&format!("sim/{}", serde_json::to_string(&params).expect("params serialize")));
        params
    }
}

/// Simulates `runs` independent runs on `graph`, keeping the first `keep`
/// frames of each. Results are in run order whatever the thread count.
pub fn simulate(graph: &Graph, params: &SimParams, runs: usize, keep: usize) -> Result<Vec<Trajectory>, HarnessError> {
    params.validate()?;
    let results: Vec<_> =
        (0..runs as u64).into_par_iter().map(|i| run_on(graph, params, i, Recording::Prefix(keep))).collect();
    let failed = results.iter().filter(|r| r.is_err()).count();
    if failed > 0 {
        let first = results.into_iter().find_map(Result::err).expect("at least one failure");
        return Err(HarnessError::Simulation { failed, runs, first });
    }
    Ok(results.into_iter().map(Result::unwrap).collect())
}

/// Simulates one cell and windows it into a dataset.
pub fn run_cell(
    params: &SimParams,
    runs: usize,
    ws: usize,
    exclude_early_absorbed: bool,
) -> Result<(DatasetFile, OutcomeStats), HarnessError> {
    let graph = params.network.generate()?;
    let trajectories = simulate(&graph, params, runs, ws)?;
    let stats = evowarn::evodyn::aggregate_trajectories(&trajectories)?;
    let dataset = DatasetFile::from_trajectories(params.clone(), &graph, &trajectories, ws, exclude_early_absorbed)?;
    Ok((dataset, stats))
}

#[derive(Serialize)]
struct SimKey<'a> {
    params: &'a SimParams,
    runs: usize,
}

#[derive(Serialize)]
struct JobKey<'a> {
    sim: &'a str,
    ws: usize,
    exclude_early_absorbed: bool,
    test_fraction: f64,
    spec: &'a evowarn_nn::ModelSpec,
    train: &'a TrainConfig,
    split_seed: u64,
}

/// Cached per-run outcomes of one simulated cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimRecord {
    pub params: SimParams,
    pub outcomes: Vec<(Label, u64)>,
    pub stats: OutcomeStats,
}

impl SimRecord {
    /// Statistics recomputed from the stored per-run outcomes.
    pub fn recompute(&self) -> Result<OutcomeStats, HarnessError> {
        Ok(aggregate_outcomes(self.outcomes.iter().copied())?)
    }
}

/// Cached result of training and scoring one model on one windowed cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub reports: Vec<MetricReport>,
    pub n_train: usize,
    pub history: Option<TrainHistory>,
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Option<T> {
    let text = fs::read_to_string(path).ok()?;
    serde_json::from_str(&text).ok()
}

/// Writes through a temporary file so interrupted runs never leave a
/// truncated cache entry behind.
pub(crate) fn write_atomic(path: &Path, contents: &[u8]) -> Result<(), HarnessError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, contents).map_err(|e| HarnessError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| HarnessError::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), HarnessError> {
    write_atomic(path, serde_json::to_string(value)?.as_bytes())
}

/// Thread pool sized from [`WORKERS_ENV`], defaulting to all cores.
pub fn worker_pool() -> Result<rayon::ThreadPool, HarnessError> {
    let workers = match std::env::var(WORKERS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| HarnessError::Config(format!("{WORKERS_ENV}={v:?} is not a positive integer")))?,
        Err(_) => 0,
    };
    rayon::ThreadPoolBuilder::new().num_threads(workers).build().map_err(|e| HarnessError::Config(e.to_string()))
}

struct Job {
    ws: usize,
    kind: ModelKind,
    path: PathBuf,
    spec: evowarn_nn::ModelSpec,
    train: TrainConfig,
    split_seed: u64,
}

fn score(config: &ExperimentConfig, dataset: &DatasetFile, job: &Job) -> Result<JobRecord, HarnessError> {
    let undefined = |n_test| JobRecord {
        reports: Label::ALL.iter().map(|&l| MetricReport::undefined(l, n_test)).collect(),
        n_train: 0,
        history: None,
    };
    let (train_set, test_set) = match split(dataset, config.test_fraction, job.split_seed, true) {
        Ok(parts) => parts,
        Err(DatasetError::EmptyClass(_)) => return Ok(undefined(0)),
        Err(e) => return Err(e.into()),
    };
    let outcome = match train(job.spec.clone(), &train_set, &job.train) {
        Ok(o) => o,
        Err(TrainError::SingleClass(_)) => return Ok(undefined(test_set.0.len())),
        Err(e) => return Err(e.into()),
    };
    let test = Samples::from_dataset(&test_set.0);
    let predictions = predict_samples(&outcome.model, &test)?;
    let (recovery, collapse) = dual_report(&predictions, &test.labels)?;
    Ok(JobRecord { reports: vec![recovery, collapse], n_train: train_set.0.len(), history: Some(outcome.history) })
}

fn metric_rows(cell: &SimCell, ws: usize, kind: ModelKind, record: &JobRecord) -> Vec<MetricRow> {
    record
        .reports
        .iter()
        .map(|r| MetricRow {
            model: kind,
            w: cell.w,
            ws,
            s: cell.s,
            t: cell.t,
            network: cell.network,
            replicate: cell.replicate,
            positive_class: r.positive_class,
            precision: r.precision,
            recall: r.recall,
            f1: r.f1,
            accuracy: r.accuracy,
            n_test: r.n_test,
            n_undefined: r.n_undefined(),
        })
        .collect()
}

/// Runs the whole grid, reusing any cell whose content hash is already on
/// disk, and writes the report table into the output directory.
pub fn run_experiment(config: &ExperimentConfig) -> Result<(ReportTable, RunSummary), HarnessError> {
    config.validate()?;
    let out = &config.output_dir;
    for sub in ["sims", "jobs", "datasets"] {
        let dir = out.join(sub);
        fs::create_dir_all(&dir).map_err(|e| HarnessError::io(&dir, e))?;
    }
    let pool = worker_pool()?;
    let mut table = ReportTable::default();
    let mut summary = RunSummary::default();
    for cell in config.sim_cells() {
        let params = config.sim_params(&cell);
        let sim_hash = content_hash(&SimKey { params: &params, runs: config.runs_per_cell });
        let sim_path = out.join("sims").join(format!("{sim_hash}.json"));
        let jobs: Vec<Job> = config
            .ws
            .iter()
            .flat_map(|&ws| config.models.iter().map(move |&kind| (ws, kind)))
            .map(|(ws, kind)| {
                let tag = format!("{sim_hash}/{ws}/{kind}");
                let spec = config.model_spec(kind, ws, derive_seed(&format!("init/{tag}")));
                let train = TrainConfig { seed: derive_seed(&format!("train/{tag}")), ..config.train.clone() };
                let split_seed = derive_seed(&format!("split/{sim_hash}/{ws}"));
                let key = JobKey {
                    sim: &sim_hash,
                    ws,
                    exclude_early_absorbed: config.exclude_early_absorbed,
                    test_fraction: config.test_fraction,
                    spec: &spec,
                    train: &train,
                    split_seed,
                };
                let path = out.join("jobs").join(format!("{}.json", content_hash(&key)));
                Job { ws, kind, path, spec, train, split_seed }
            })
            .collect();

        let cached_sim: Option<SimRecord> = read_json(&sim_path);
        let cached_jobs: Vec<Option<JobRecord>> = jobs.iter().map(|j| read_json(&j.path)).collect();
        let records: Vec<JobRecord> = if let (Some(sim), true) = (&cached_sim, cached_jobs.iter().all(Option::is_some)) {
            summary.cells_cached += 1;
            summary.jobs_cached += jobs.len();
            table.outcomes.push(OutcomeRow { w: cell.w, s: cell.s, t: cell.t, network: cell.network, replicate: cell.replicate, stats: sim.stats.clone() });
            cached_jobs.into_iter().map(|j| j.expect("checked above")).collect()
        } else {
            let graph = params.network.generate()?;
            let trajectories = pool.install(|| simulate(&graph, &params, config.runs_per_cell, config.max_ws()))?;
            let outcomes: Vec<(Label, u64)> = trajectories.iter().map(|t| (t.outcome, t.absorption_step)).collect();
            let stats = aggregate_outcomes(outcomes.iter().copied())?;
            write_json(&sim_path, &SimRecord { params: params.clone(), outcomes, stats: stats.clone() })?;
            summary.cells_simulated += 1;
            table.outcomes.push(OutcomeRow { w: cell.w, s: cell.s, t: cell.t, network: cell.network, replicate: cell.replicate, stats });

            let mut records = Vec::with_capacity(jobs.len());
            for &ws in &config.ws {
                let dataset = DatasetFile::from_trajectories(params.clone(), &graph, &trajectories, ws, config.exclude_early_absorbed)?;
                if config.write_datasets {
                    let path = out.join("datasets").join(format!("{sim_hash}-ws{ws}.jsonl"));
                    let mut buf = Vec::new();
                    dataset.write_to(&mut buf)?;
                    write_atomic(&path, &buf)?;
                }
                let batch: Vec<(&Job, Option<JobRecord>)> = jobs
                    .iter()
                    .zip(&cached_jobs)
                    .filter(|(j, _)| j.ws == ws)
                    .map(|(j, c)| (j, c.clone()))
                    .collect();
                let results: Vec<Result<(JobRecord, bool), HarnessError>> = pool.install(|| {
                    batch
                        .par_iter()
                        .map(|(job, cached)| match cached {
                            Some(r) => Ok((r.clone(), false)),
                            None => {
                                let r = score(config, &dataset, job)?;
                                write_json(&job.path, &r)?;
                                Ok((r, true))
                            }
                        })
                        .collect()
                });
                for r in results {
                    let (record, trained) = r?;
                    if trained {
                        summary.jobs_trained += 1;
                    } else {
                        summary.jobs_cached += 1;
                    }
                    records.push(record);
                }
            }
            records
        };
        for (job, record) in jobs.iter().zip(&records) {
            table.metrics.extend(metric_rows(&cell, job.ws, job.kind, record));
        }
    }
    crate::report::write_table(out, &table)?;
    Ok((table, summary))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeds_are_stable_and_distinct() {
        assert_eq!(derive_seed("a"), derive_seed("a"));
        assert_ne!(derive_seed("a"), derive_seed("b"));
    }

    #[test]
    fn grid_order_and_shared_graphs() {
        let config = ExperimentConfig { w: vec![0.001, 0.1], replicates: vec![4, 5], ..ExperimentConfig::default() };
        let cells = config.sim_cells();
        assert_eq!(cells.len(), 4);
        assert_eq!((cells[0].w, cells[0].replicate), (0.001, 4));
        assert_eq!((cells[1].w, cells[1].replicate), (0.001, 5));
        let (a, b) = (config.sim_params(&cells[0]), config.sim_params(&cells[2]));
        assert_eq!(a.network, b.network);
        assert_ne!(a.seed, b.seed);
        assert_ne!(config.sim_params(&cells[0]).network, config.sim_params(&cells[1]).network);
    }
}
