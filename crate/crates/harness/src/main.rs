use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use evowarn::dataset::{split, DatasetFile};
use evowarn::evodyn::{aggregate_trajectories, DEFAULT_MAX_STEPS};
use evowarn::metrics::dual_report;
use evowarn::{GameMatrix, NetworkKind, NetworkSpec, SimParams};
use evowarn_harness::experiment::{simulate, MetricRow};
use evowarn_harness::report::{metrics_csv, read_table, write_report};
use evowarn_harness::{run_experiment, ExperimentConfig, Figure, HarnessError};
use evowarn_nn::neural::{Model, ModelKind, ModelSpec};
use evowarn_nn::trainer::{predict_samples, train, Samples, TrainConfig};

#[derive(Parser)]
#[command(name = "evowarn", version, about = "Early-warning prediction for cooperation on networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a connected network and print or save its edge list.
    GenNet {
        #[command(flatten)]
        net: NetArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Simulate runs to absorption and report outcome statistics.
    Simulate {
        #[command(flatten)]
        sim: SimArgs,
        #[arg(long, default_value_t = 100)]
        runs: usize,
        /// Per-run CSV of outcomes and absorption steps.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Simulate runs and write their first `ws` frames as a JSONL dataset.
    MakeDataset {
        #[command(flatten)]
        sim: SimArgs,
        #[arg(long, default_value_t = 2000)]
        runs: usize,
        #[arg(long)]
        ws: usize,
        #[arg(long)]
        exclude_early_absorbed: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on the training side of a dataset split.
    Train {
        #[command(flatten)]
        split: SplitArgs,
        #[arg(long, default_value = "seq-lstm")]
        model: ModelKind,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        patience: Option<usize>,
        #[arg(long)]
        validation_fraction: Option<f64>,
        #[arg(long)]
        rebalance: bool,
        #[arg(long)]
        snapshot: PathBuf,
        /// Per-epoch CSV; printed to stdout when omitted.
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Score a saved model on the held-out side of the same split.
    Evaluate {
        #[command(flatten)]
        split: SplitArgs,
        #[arg(long)]
        snapshot: PathBuf,
    },
    /// Run a JSON-configured sweep; completed cells are reused.
    Experiment {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Emit per-figure tables from a finished experiment directory.
    Report {
        #[arg(long)]
        dir: PathBuf,
        /// fig6, fig6f, fig7, fig8, fig9, fig10 or all.
        #[arg(long, default_value = "all")]
        figure: String,
    },
}

#[derive(Args)]
struct NetArgs {
    #[arg(long, default_value = "random")]
    network: NetworkKind,
    #[arg(long, default_value_t = 100)]
    n: usize,
    /// Ring degree, mean degree or attachment count; family default when omitted.
    #[arg(long)]
    degree: Option<usize>,
    #[arg(long, default_value_t = 0.1)]
    beta: f64,
    #[arg(long, default_value_t = 0)]
    net_seed: u64,
}

impl NetArgs {
    fn spec(&self) -> NetworkSpec {
        let mut spec = NetworkSpec::new(self.network, self.n, self.net_seed);
        if let Some(d) = self.degree {
            spec.degree_param = d;
        }
        spec.rewire_beta = self.beta;
        spec
    }
}

#[derive(Args)]
struct SimArgs {
    #[command(flatten)]
    net: NetArgs,
    #[arg(long, default_value_t = 0.001)]
    w: f64,
    #[arg(long, default_value_t = 0.1)]
    eta: f64,
    #[arg(long, default_value_t = 1.0)]
    r: f64,
    #[arg(long = "S", default_value_t = -1.0, allow_negative_numbers = true)]
    s: f64,
    #[arg(long = "T", default_value_t = 2.0)]
    t: f64,
    #[arg(long, default_value_t = 0.0)]
    p: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_MAX_STEPS)]
    max_steps: u64,
}

impl SimArgs {
    fn params(&self) -> Result<SimParams, HarnessError> {
        let params = SimParams {
            game: GameMatrix::new(self.r, self.s, self.t, self.p)?,
            w: self.w,
            eta: self.eta,
            network: self.net.spec(),
            max_steps: self.max_steps,
            seed: self.seed,
        };
        params.validate()?;
        Ok(params)
    }
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value_t = 0.2)]
    test_fraction: f64,
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
}

impl SplitArgs {
    fn load(&self) -> Result<(DatasetFile, evowarn::dataset::TrainSet, evowarn::dataset::TestSet), HarnessError> {
        let dataset = DatasetFile::read_jsonl(&self.dataset)?;
        let (train, test) = split(&dataset, self.test_fraction, self.split_seed, true)?;
        Ok((dataset, train, test))
    }
}

fn write_or_print(path: Option<&Path>, text: &str) -> Result<(), HarnessError> {
    match path {
        Some(p) => fs::write(p, text).map_err(|e| HarnessError::io(p, e)),
        None => {
            std::io::stdout().write_all(text.as_bytes()).map_err(|e| HarnessError::io(Path::new("<stdout>"), e))
        }
    }
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::GenNet { net, out } => {
            let graph = net.spec().generate()?;
            write_or_print(out.as_deref(), &graph.to_edge_list())?;
        }
        Command::Simulate { sim, runs, out } => {
            let params = sim.params()?;
            let graph = params.network.generate()?;
            let trajectories = evowarn_harness::experiment::worker_pool()?
                .install(|| simulate(&graph, &params, runs, 1))?;
            if let Some(path) = out {
                let mut csv = String::from("run_id,outcome,absorption_step\n");
                for t in &trajectories {
                    csv.push_str(&format!("{},{},{}\n", t.run_id, t.outcome.as_str(), t.absorption_step));
                }
                write_or_print(Some(&path), &csv)?;
            }
            println!("{}", serde_json::to_string_pretty(&aggregate_trajectories(&trajectories)?)?);
        }
        Command::MakeDataset { sim, runs, ws, exclude_early_absorbed, out } => {
            let params = sim.params()?;
            let (dataset, stats) = evowarn_harness::experiment::worker_pool()?
                .install(|| evowarn_harness::run_cell(&params, runs, ws, exclude_early_absorbed))?;
            dataset.write_jsonl(&out)?;
            eprintln!("wrote {} records to {}", dataset.len(), out.display());
            println!("{}", serde_json::to_string_pretty(&stats)?);
        }
        Command::Train {
            split,
            model,
            seed,
            lr,
            batch,
            epochs,
            patience,
            validation_fraction,
            rebalance,
            snapshot,
            history,
        } => {
            let (dataset, train_set, _) = split.load()?;
            let defaults = TrainConfig::default();
            let config = TrainConfig {
                learning_rate: lr.unwrap_or(defaults.learning_rate),
                batch_size: batch.unwrap_or(defaults.batch_size),
                max_epochs: epochs.unwrap_or(defaults.max_epochs),
                early_stop_patience: patience.unwrap_or(defaults.early_stop_patience),
                validation_fraction: validation_fraction.unwrap_or(defaults.validation_fraction),
                seed,
                rebalance,
            };
            let outcome = train(ModelSpec::new(model, dataset.header.ws, seed), &train_set, &config)?;
            outcome.model.save(&snapshot)?;
            write_or_print(history.as_deref(), &outcome.history.to_csv())?;
        }
        Command::Evaluate { split, snapshot } => {
            let (dataset, _, test_set) = split.load()?;
            let model = Model::load(&snapshot)?;
            let test = Samples::from_dataset(&test_set.0);
            let predictions = predict_samples(&model, &test)?;
            let (recovery, collapse) = dual_report(&predictions, &test.labels)?;
            let p = &dataset.header.params;
            let rows: Vec<MetricRow> = [recovery, collapse]
                .iter()
                .map(|r| MetricRow {
                    model: model.spec().kind,
                    w: p.w,
                    ws: dataset.header.ws,
                    s: p.game.s,
                    t: p.game.t,
                    network: p.network.kind,
                    replicate: split.split_seed,
                    positive_class: r.positive_class,
                    precision: r.precision,
                    recall: r.recall,
                    f1: r.f1,
                    accuracy: r.accuracy,
                    n_test: r.n_test,
                    n_undefined: r.n_undefined(),
                })
                .collect();
            print!("{}", metrics_csv(&rows));
        }
        Command::Experiment { config, output_dir } => {
            let mut config = ExperimentConfig::load(&config)?;
            if let Some(dir) = output_dir {
                config.output_dir = dir;
            }
            let (table, summary) = run_experiment(&config)?;
            eprintln!(
                "{} metric rows; simulated {} cells ({} cached), trained {} models ({} cached); tables in {}",
                table.metrics.len(),
                summary.cells_simulated,
                summary.cells_cached,
                summary.jobs_trained,
                summary.jobs_cached,
                config.output_dir.display()
            );
        }
        Command::Report { dir, figure } => {
            let table = read_table(&dir)?;
            let figures: Vec<Figure> =
                if figure.eq_ignore_ascii_case("all") { Figure::ALL.to_vec() } else { vec![figure.parse()?] };
            let explicit = figures.len() == 1;
            for f in figures {
                match write_report(&dir, &table, f) {
                    Ok(path) => println!("{}", path.display()),
                    Err(e @ HarnessError::MissingAxes { .. }) if !explicit => eprintln!("skipped: {e}"),
                    Err(e) => return Err(e),
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
