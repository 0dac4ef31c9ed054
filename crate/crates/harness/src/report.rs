//! CSV output: raw metric and outcome rows, replicate aggregates, and the
//! per-figure long-format tables.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

use evowarn::dataset::Label;

use crate::experiment::{write_atomic, MetricRow, OutcomeRow, ReportTable};
use crate::HarnessError;

pub const UNDEFINED: &str = "undefined";

pub const METRIC_HEADER: &str =
    "model,w,ws,S,T,network,positive_class,precision,recall,f1,accuracy,n_test,n_undefined,replicate";
pub const OUTCOME_HEADER: &str = "w,S,T,network,replicate,runs,collapses,p_collapse,mean_recovery_time,mean_collapse_time";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Figure {
    /// Accuracy per model, w and ws.
    Fig6,
    /// Model-averaged accuracy per w and ws.
    Fig6f,
    /// Accuracy against the game parameters.
    Fig7,
    /// Absorption statistics and accuracy per network family.
    Fig8,
    /// Precision, recall and F1 per model and positive class.
    Fig9,
    /// Model-averaged precision, recall and F1 per positive class.
    Fig10,
}

impl Figure {
    pub const ALL: [Figure; 6] = [Figure::Fig6, Figure::Fig6f, Figure::Fig7, Figure::Fig8, Figure::Fig9, Figure::Fig10];

    pub fn as_str(self) -> &'static str {
        match self {
            Figure::Fig6 => "fig6",
            Figure::Fig6f => "fig6f",
            Figure::Fig7 => "fig7",
            Figure::Fig8 => "fig8",
            Figure::Fig9 => "fig9",
            Figure::Fig10 => "fig10",
        }
    }
}

impl fmt::Display for Figure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Figure {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Figure::ALL
            .into_iter()
            .find(|f| f.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| HarnessError::Config(format!("unknown figure {s:?}")))
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| UNDEFINED.to_string(), |x| x.to_string())
}

/// Mean and sample standard deviation over the defined values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stat {
    pub mean: Option<f64>,
    pub sd: Option<f64>,
    pub defined: usize,
    pub undefined: usize,
}

impl Stat {
    pub fn of(values: impl IntoIterator<Item = Option<f64>>) -> Self {
        let mut defined = Vec::new();
        let mut undefined = 0;
        for v in values {
            match v {
                Some(x) => defined.push(x),
                None => undefined += 1,
            }
        }
        let n = defined.len();
        let mean = (n > 0).then(|| defined.iter().sum::<f64>() / n as f64);
        let sd = mean.map(|m| {
            if n < 2 {
                0.0
            } else {
                (defined.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
            }
        });
        Self { mean, sd, defined: n, undefined }
    }
}

/// Grouping key with a total order over the float axes.
#[derive(Debug, Clone, PartialEq, PartialOrd)]
struct Key(Vec<KeyPart>);

#[derive(Debug, Clone, PartialEq, PartialOrd)]
enum KeyPart {
    Num(f64),
    Int(usize),
    Text(&'static str),
}

impl Eq for Key {}

impl Ord for Key {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.partial_cmp(other).expect("grid values are finite")
    }
}

impl fmt::Display for KeyPart {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KeyPart::Num(v) => write!(f, "{v}"),
            KeyPart::Int(v) => write!(f, "{v}"),
            KeyPart::Text(v) => f.write_str(v),
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Axis {
    Model,
    W,
    Ws,
    S,
    T,
    Network,
    PositiveClass,
}

impl Axis {
    fn name(self) -> &'static str {
        match self {
            Axis::Model => "model",
            Axis::W => "w",
            Axis::Ws => "ws",
            Axis::S => "S",
            Axis::T => "T",
            Axis::Network => "network",
            Axis::PositiveClass => "positive_class",
        }
    }

    fn of(self, row: &MetricRow) -> KeyPart {
        match self {
            Axis::Model => KeyPart::Text(row.model.as_str()),
            Axis::W => KeyPart::Num(row.w),
            Axis::Ws => KeyPart::Int(row.ws),
            Axis::S => KeyPart::Num(row.s),
            Axis::T => KeyPart::Num(row.t),
            Axis::Network => KeyPart::Text(row.network.as_str()),
            Axis::PositiveClass => KeyPart::Text(row.positive_class.as_str()),
        }
    }
}

fn group<'a>(rows: impl IntoIterator<Item = &'a MetricRow>, axes: &[Axis]) -> BTreeMap<Key, Vec<&'a MetricRow>> {
    let mut groups: BTreeMap<Key, Vec<&MetricRow>> = BTreeMap::new();
    for row in rows {
        groups.entry(Key(axes.iter().map(|a| a.of(row)).collect())).or_default().push(row);
    }
    groups
}

fn header(axes: &[Axis], rest: &str) -> String {
    let names: Vec<&str> = axes.iter().map(|a| a.name()).collect();
    format!("{},{rest}\n", names.join(","))
}

fn key_cells(key: &Key) -> String {
    key.0.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn stat_cells(s: &Stat) -> String {
    format!("{},{}", opt(s.mean), opt(s.sd))
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut out = format!("{METRIC_HEADER}\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.model,
            r.w,
            r.ws,
            r.s,
            r.t,
            r.network,
            r.positive_class.as_str(),
            opt(r.precision),
            opt(r.recall),
            opt(r.f1),
            opt(r.accuracy),
            r.n_test,
            r.n_undefined,
            r.replicate
        )
        .expect("writing to a String");
    }
    out
}

pub fn outcomes_csv(rows: &[OutcomeRow]) -> String {
    let mut out = format!("{OUTCOME_HEADER}\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.w,
            r.s,
            r.t,
            r.network,
            r.replicate,
            r.stats.runs,
            r.stats.collapses,
            r.stats.p_collapse,
            opt(r.stats.mean_recovery_time),
            opt(r.stats.mean_collapse_time)
        )
        .expect("writing to a String");
    }
    out
}

const CELL_AXES: [Axis; 7] = [Axis::Model, Axis::W, Axis::Ws, Axis::S, Axis::T, Axis::Network, Axis::PositiveClass];

/// Replicate means and deviations for every (cell, model, positive class).
pub fn aggregates_csv(rows: &[MetricRow]) -> String {
    let mut out = header(
        &CELL_AXES,
        "precision_mean,precision_sd,recall_mean,recall_sd,f1_mean,f1_sd,accuracy_mean,accuracy_sd,replicates,n_undefined",
    );
    for (key, g) in group(rows, &CELL_AXES) {
        let stats = [
            Stat::of(g.iter().map(|r| r.precision)),
            Stat::of(g.iter().map(|r| r.recall)),
            Stat::of(g.iter().map(|r| r.f1)),
            Stat::of(g.iter().map(|r| r.accuracy)),
        ];
        let cells: Vec<String> = stats.iter().map(stat_cells).collect();
        let undefined: usize = g.iter().map(|r| r.n_undefined).sum();
        writeln!(out, "{},{},{},{}", key_cells(&key), cells.join(","), g.len(), undefined).expect("writing to a String");
    }
    out
}

/// Writes `metrics.csv`, `outcomes.csv`, `aggregates.csv` and `table.json`.
pub fn write_table(dir: &Path, table: &ReportTable) -> Result<(), HarnessError> {
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    write_atomic(&dir.join("metrics.csv"), metrics_csv(&table.metrics).as_bytes())?;
    write_atomic(&dir.join("outcomes.csv"), outcomes_csv(&table.outcomes).as_bytes())?;
    write_atomic(&dir.join("aggregates.csv"), aggregates_csv(&table.metrics).as_bytes())?;
    write_atomic(&dir.join("table.json"), serde_json::to_string(table)?.as_bytes())
}

pub fn read_table(dir: &Path) -> Result<ReportTable, HarnessError> {
    let path = dir.join("table.json");
    let text = std::fs::read_to_string(&path).map_err(|e| HarnessError::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn distinct(table: &ReportTable, axis: Axis) -> usize {
    let mut seen: Vec<KeyPart> = Vec::new();
    for row in &table.metrics {
        let v = axis.of(row);
        if !seen.contains(&v) {
            seen.push(v);
        }
    }
    seen.len()
}

fn require(table: &ReportTable, figure: Figure, any_of: &[Axis]) -> Result<(), HarnessError> {
    if any_of.iter().any(|&a| distinct(table, a) >= 2) {
        return Ok(());
    }
    Err(HarnessError::MissingAxes { figure: figure.to_string(), axes: any_of.iter().map(|a| a.name().to_string()).collect() })
}

fn accuracy_rows(table: &ReportTable) -> impl Iterator<Item = &MetricRow> {
    // accuracy does not depend on the positive class; one labeling suffices
    table.metrics.iter().filter(|r| r.positive_class == Label::Recovery)
}

const FIG6_AXES: [Axis; 6] = [Axis::W, Axis::Ws, Axis::S, Axis::T, Axis::Network, Axis::Model];

fn fig6(table: &ReportTable) -> String {
    let mut out = header(&FIG6_AXES, "accuracy_mean,accuracy_sd,replicates,n_undefined");
    for (key, g) in group(accuracy_rows(table), &FIG6_AXES) {
        let s = Stat::of(g.iter().map(|r| r.accuracy));
        writeln!(out, "{},{},{},{}", key_cells(&key), stat_cells(&s), g.len(), s.undefined).expect("writing to a String");
    }
    out
}

/// Mean over models of each model's replicate-mean accuracy.
fn fig6f(table: &ReportTable) -> String {
    let axes = [Axis::W, Axis::Ws, Axis::S, Axis::T, Axis::Network];
    let mut out = header(&axes, "accuracy_mean,models");
    for (key, g) in group(accuracy_rows(table), &axes) {
        let per_model: Vec<Option<f64>> =
            group(g.iter().copied(), &[Axis::Model]).values().map(|m| Stat::of(m.iter().map(|r| r.accuracy)).mean).collect();
        let s = Stat::of(per_model.iter().copied());
        writeln!(out, "{},{},{}", key_cells(&key), opt(s.mean), s.defined).expect("writing to a String");
    }
    out
}

fn fig7(table: &ReportTable) -> Result<String, HarnessError> {
    require(table, Figure::Fig7, &[Axis::S, Axis::T])?;
    let axes = [Axis::W, Axis::Ws, Axis::Network, Axis::S, Axis::T, Axis::Model];
    let mut out = header(&axes, "accuracy_mean,accuracy_sd,replicates");
    for (key, g) in group(accuracy_rows(table), &axes) {
        let s = Stat::of(g.iter().map(|r| r.accuracy));
        writeln!(out, "{},{},{}", key_cells(&key), stat_cells(&s), g.len()).expect("writing to a String");
    }
    Ok(out)
}

fn fig8(table: &ReportTable) -> Result<String, HarnessError> {
    require(table, Figure::Fig8, &[Axis::Network])?;
    let axes = [Axis::Network, Axis::W, Axis::S, Axis::T, Axis::Ws, Axis::Model];
    let mut out = header(
        &axes,
        "p_collapse_mean,p_collapse_sd,recovery_time_mean,recovery_time_sd,collapse_time_mean,collapse_time_sd,accuracy_mean,accuracy_sd,replicates",
    );
    for (key, g) in group(accuracy_rows(table), &axes) {
        let first = g[0];
        let outcomes: Vec<&OutcomeRow> = table
            .outcomes
            .iter()
            .filter(|o| o.network == first.network && o.w == first.w && o.s == first.s && o.t == first.t)
            .collect();
        let stats = [
            Stat::of(outcomes.iter().map(|o| Some(o.stats.p_collapse))),
            Stat::of(outcomes.iter().map(|o| o.stats.mean_recovery_time)),
            Stat::of(outcomes.iter().map(|o| o.stats.mean_collapse_time)),
            Stat::of(g.iter().map(|r| r.accuracy)),
        ];
        let cells: Vec<String> = stats.iter().map(stat_cells).collect();
        writeln!(out, "{},{},{}", key_cells(&key), cells.join(","), g.len()).expect("writing to a String");
    }
    Ok(out)
}

const PRF: &str = "precision_mean,precision_sd,recall_mean,recall_sd,f1_mean,f1_sd,n_undefined";

fn prf_cells(rows: &[&MetricRow]) -> String {
    let stats = [
        Stat::of(rows.iter().map(|r| r.precision)),
        Stat::of(rows.iter().map(|r| r.recall)),
        Stat::of(rows.iter().map(|r| r.f1)),
    ];
    let undefined: usize = stats.iter().map(|s| s.undefined).sum();
    let cells: Vec<String> = stats.iter().map(stat_cells).collect();
    format!("{},{undefined}", cells.join(","))
}

fn fig9(table: &ReportTable) -> String {
    let axes = [Axis::PositiveClass, Axis::W, Axis::Ws, Axis::S, Axis::T, Axis::Network, Axis::Model];
    let mut out = header(&axes, PRF);
    for (key, g) in group(&table.metrics, &axes) {
        writeln!(out, "{},{}", key_cells(&key), prf_cells(&g)).expect("writing to a String");
    }
    out
}

fn fig10(table: &ReportTable) -> String {
    let axes = [Axis::PositiveClass, Axis::W, Axis::Ws, Axis::S, Axis::T, Axis::Network];
    let mut out = header(&axes, PRF);
    for (key, g) in group(&table.metrics, &axes) {
        writeln!(out, "{},{}", key_cells(&key), prf_cells(&g)).expect("writing to a String");
    }
    out
}

/// CSV text for one figure's table.
pub fn report(table: &ReportTable, figure: Figure) -> Result<String, HarnessError> {
    if table.metrics.is_empty() {
        return Err(HarnessError::Config("report table has no metric rows".into()));
    }
    Ok(match figure {
        Figure::Fig6 => fig6(table),
        Figure::Fig6f => fig6f(table),
        Figure::Fig7 => fig7(table)?,
        Figure::Fig8 => fig8(table)?,
        Figure::Fig9 => fig9(table),
        Figure::Fig10 => fig10(table),
    })
}

/// Writes `<figure>.csv` into `dir` and returns its path.
pub fn write_report(dir: &Path, table: &ReportTable, figure: Figure) -> Result<std::path::PathBuf, HarnessError> {
    let text = report(table, figure)?;
    let path = dir.join(format!("{figure}.csv"));
    write_atomic(&path, text.as_bytes())?;
    Ok(path)
}
