//! Windowed 5-channel sequences built from trajectories, and their JSONL
//! persistence.
//!
//! A dataset file is one header line followed by one record per line:
//!
//! ```text
//! {"schema_version":1,"ws":3,"n":4,"edge_count":5,"params":{...},"label_counts":{...}}
//! {"run_id":0,"label":"AllC","frames":[[3,1,3,2,0],[4,0,5,0,0],[4,0,5,0,0]]}
//! ```

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evodyn::{SimParams, Strategy, Trajectory};
use crate::netgen::Graph;

pub const SCHEMA_VERSION: u32 = 1;
pub const CHANNELS: usize = 5;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("trajectory {run_id} has no frame at step {step}")]
    MissingFrame { run_id: u64, step: u64 },
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("schema version {found} is not supported (expected {SCHEMA_VERSION})")]
    SchemaVersion { found: u32 },
    #[error("label class {0} has no records")]
    EmptyClass(Label),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Outcome class. Encoded as 0 = recovery (all-cooperate), 1 = collapse
/// (all-defect) everywhere in the project.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    #[serde(rename = "AllC")]
    Recovery,
    #[serde(rename = "AllD")]
    Collapse,
}

impl Label {
    pub const ALL: [Label; 2] = [Label::Recovery, Label::Collapse];

    pub fn index(self) -> usize {
        match self {
            Label::Recovery => 0,
            Label::Collapse => 1,
        }
    }

    pub fn from_index(index: usize) -> Option<Self> {
        match index {
            0 => Some(Label::Recovery),
            1 => Some(Label::Collapse),
            _ => None,
        }
    }

    pub fn other(self) -> Self {
        match self {
            Label::Recovery => Label::Collapse,
            Label::Collapse => Label::Recovery,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Recovery => "recovery",
            Label::Collapse => "collapse",
        }
    }
}

impl std::fmt::Display for Label {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Node counts by strategy and edge counts by endpoint strategies at one step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct FeatureFrame {
    pub c_count: u32,
    pub d_count: u32,
    pub cc_edges: u32,
    pub cd_edges: u32,
    pub dd_edges: u32,
}

impl FeatureFrame {
    pub fn to_array(self) -> [u32; CHANNELS] {
        [self.c_count, self.d_count, self.cc_edges, self.cd_edges, self.dd_edges]
    }

    pub fn from_array(a: [u32; CHANNELS]) -> Self {
        Self { c_count: a[0], d_count: a[1], cc_edges: a[2], cd_edges: a[3], dd_edges: a[4] }
    }

    pub fn n(&self) -> u32 {
        self.c_count + self.d_count
    }

    pub fn edge_count(&self) -> u32 {
        self.cc_edges + self.cd_edges + self.dd_edges
    }

    /// All-cooperate or all-defect.
    pub fn is_frozen(&self) -> bool {
        self.c_count == 0 || self.d_count == 0
    }
}

impl Serialize for FeatureFrame {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.to_array().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for FeatureFrame {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        <[u32; CHANNELS]>::deserialize(deserializer).map(Self::from_array)
    }
}

pub fn extract_frame(g: &Graph, strategies: &[Strategy]) -> FeatureFrame {
    let mut frame = FeatureFrame::default();
    for &s in strategies {
        match s {
            Strategy::C => frame.c_count += 1,
            Strategy::D => frame.d_count += 1,
        }
    }
    for (u, v) in g.edges() {
        match (strategies[u], strategies[v]) {
            (Strategy::C, Strategy::C) => frame.cc_edges += 1,
            (Strategy::D, Strategy::D) => frame.dd_edges += 1,
            _ => frame.cd_edges += 1,
        }
    }
    frame
}

/// First `ws` frames of a trajectory; after absorption the frozen frame repeats.
pub fn window(traj: &Trajectory, ws: usize) -> Result<Vec<FeatureFrame>, DatasetError> {
    if ws == 0 {
        return Err(DatasetError::InvalidArgument("window size must be at least 1".into()));
    }
    (0..ws as u64)
        .map(|t| traj.frame_at(t).ok_or(DatasetError::MissingFrame { run_id: traj.run_id, step: t }))
        .collect()
}

/// Row-major `ws x 5` matrix: node channels over `n`, edge channels over
/// `edge_count`.
pub fn normalize(frames: &[FeatureFrame], n: usize, edge_count: usize) -> Result<Vec<f64>, DatasetError> {
    if n == 0 || edge_count == 0 {
        return Err(DatasetError::InvalidArgument(format!(
            "normalization constants must be positive (n={n}, edge_count={edge_count})"
        )));
    }
    let (n, e) = (n as f64, edge_count as f64);
    Ok(frames
        .iter()
        .flat_map(|f| {
            [
                f.c_count as f64 / n,
                f.d_count as f64 / n,
                f.cc_edges as f64 / e,
                f.cd_edges as f64 / e,
                f.dd_edges as f64 / e,
            ]
        })
        .collect())
}

/// Inverse of [`normalize`], rounding to the nearest count.
pub fn denormalize(values: &[f64], n: usize, edge_count: usize) -> Vec<FeatureFrame> {
    let (n, e) = (n as f64, edge_count as f64);
    values
        .chunks_exact(CHANNELS)
        .map(|row| {
            FeatureFrame::from_array([
                (row[0] * n).round() as u32,
                (row[1] * n).round() as u32,
                (row[2] * e).round() as u32,
                (row[3] * e).round() as u32,
                (row[4] * e).round() as u32,
            ])
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSequence {
    pub run_id: u64,
    pub label: Label,
    pub frames: Vec<FeatureFrame>,
}

impl FeatureSequence {
    pub fn from_trajectory(traj: &Trajectory, ws: usize) -> Result<Self, DatasetError> {
        Ok(Self { run_id: traj.run_id, label: traj.outcome, frames: window(traj, ws)? })
    }

    /// True when the run froze inside the window.
    pub fn absorbed_within_window(&self) -> bool {
        self.frames.last().is_some_and(FeatureFrame::is_frozen)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelCounts {
    #[serde(rename = "AllC")]
    pub recovery: usize,
    #[serde(rename = "AllD")]
    pub collapse: usize,
}

impl LabelCounts {
    pub fn of<'a>(records: impl IntoIterator<Item = &'a FeatureSequence>) -> Self {
        let mut counts = Self::default();
        for r in records {
            *counts.get_mut(r.label) += 1;
        }
        counts
    }

    pub fn get(&self, label: Label) -> usize {
        match label {
            Label::Recovery => self.recovery,
            Label::Collapse => self.collapse,
        }
    }

    fn get_mut(&mut self, label: Label) -> &mut usize {
        match label {
            Label::Recovery => &mut self.recovery,
            Label::Collapse => &mut self.collapse,
        }
    }

    pub fn total(&self) -> usize {
        self.recovery + self.collapse
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub schema_version: u32,
    pub ws: usize,
    pub n: usize,
    pub edge_count: usize,
    pub params: SimParams,
    pub label_counts: LabelCounts,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetFile {
    pub header: DatasetHeader,
    pub records: Vec<FeatureSequence>,
}

impl DatasetFile {
    pub fn new(params: SimParams, graph: &Graph, ws: usize, records: Vec<FeatureSequence>) -> Result<Self, DatasetError> {
        if let Some(bad) = records.iter().find(|r| r.frames.len() != ws) {
            return Err(DatasetError::InvalidArgument(format!(
                "record {} has {} frames, expected {ws}",
                bad.run_id,
                bad.frames.len()
            )));
        }
        let header = DatasetHeader {
            schema_version: SCHEMA_VERSION,
            ws,
            n: graph.n(),
            edge_count: graph.edge_count(),
            params,
            label_counts: LabelCounts::of(&records),
        };
        Ok(Self { header, records })
    }

    /// Windows every trajectory to `ws`, optionally dropping runs that froze
    /// inside the window.
    pub fn from_trajectories(
        params: SimParams,
        graph: &Graph,
        trajectories: &[Trajectory],
        ws: usize,
        exclude_early_absorbed: bool,
    ) -> Result<Self, DatasetError> {
        let records = trajectories
            .iter()
            .filter(|t| !exclude_early_absorbed || t.absorption_step >= ws as u64)
            .map(|t| FeatureSequence::from_trajectory(t, ws))
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(params, graph, ws, records)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn label_counts(&self) -> LabelCounts {
        LabelCounts::of(&self.records)
    }

    /// Shortens every record to its first `ws` frames.
    pub fn rewindow(&self, ws: usize, exclude_early_absorbed: bool) -> Result<Self, DatasetError> {
        if ws == 0 || ws > self.header.ws {
            return Err(DatasetError::InvalidArgument(format!(
                "window {ws} must be in 1..={}",
                self.header.ws
            )));
        }
        let records: Vec<_> = self
            .records
            .iter()
            .map(|r| FeatureSequence { run_id: r.run_id, label: r.label, frames: r.frames[..ws].to_vec() })
            .filter(|r| !exclude_early_absorbed || !r.absorbed_within_window())
            .collect();
        let mut header = self.header.clone();
        header.ws = ws;
        header.label_counts = LabelCounts::of(&records);
        Ok(Self { header, records })
    }

    /// Normalized `ws x 5` matrix for record `i`.
    pub fn features(&self, i: usize) -> Vec<f64> {
        normalize(&self.records[i].frames, self.header.n, self.header.edge_count)
            .expect("header constants validated on construction")
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<(), DatasetError> {
        let mut out = BufWriter::new(File::create(path)?);
        self.write_to(&mut out)?;
        out.flush()?;
        Ok(())
    }

    pub fn write_to<W: Write>(&self, out: &mut W) -> Result<(), DatasetError> {
        let mut header = self.header.clone();
        header.label_counts = self.label_counts();
        serde_json::to_writer(&mut *out, &header).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
        for record in &self.records {
            serde_json::to_writer(&mut *out, record).map_err(std::io::Error::from)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Self, DatasetError> {
        Self::read_from(BufReader::new(File::open(path)?))
    }

    pub fn read_from<R: BufRead>(reader: R) -> Result<Self, DatasetError> {
        let mut lines = reader.lines().enumerate();
        let header_line = match lines.next() {
            Some((_, line)) => line?,
            None => return Err(DatasetError::Malformed { line: 1, message: "missing header".into() }),
        };
        let version = serde_json::from_str::<serde_json::Value>(&header_line)
            .ok()
            .and_then(|v| v.get("schema_version").and_then(|s| s.as_u64()));
        match version {
            Some(v) if v == SCHEMA_VERSION as u64 => {}
            Some(v) => return Err(DatasetError::SchemaVersion { found: v as u32 }),
            None => return Err(DatasetError::Malformed { line: 1, message: "header lacks schema_version".into() }),
        }
        let header: DatasetHeader = serde_json::from_str(&header_line)
            .map_err(|e| DatasetError::Malformed { line: 1, message: e.to_string() })?;
        if header.ws == 0 || header.n == 0 || header.edge_count == 0 {
            return Err(DatasetError::Malformed { line: 1, message: "ws, n and edge_count must be positive".into() });
        }
        let mut records = Vec::new();
        for (idx, line) in lines {
            let line_no = idx + 1;
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let record: FeatureSequence = serde_json::from_str(&line)
                .map_err(|e| DatasetError::Malformed { line: line_no, message: e.to_string() })?;
            if record.frames.len() != header.ws {
                return Err(DatasetError::Malformed {
                    line: line_no,
                    message: format!("record has {} frames but header ws is {}", record.frames.len(), header.ws),
                });
            }
            records.push(record);
        }
        let counts = LabelCounts::of(&records);
        if counts != header.label_counts {
            return Err(DatasetError::Malformed {
                line: 1,
                message: format!("header label counts {:?} disagree with records {:?}", header.label_counts, counts),
            });
        }
        Ok(Self { header, records })
    }
}

/// Training side of a split. Kept distinct from [`TestSet`] so training code
/// cannot be handed test records.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSet(pub DatasetFile);

/// Held-out side of a split.
#[derive(Debug, Clone, PartialEq)]
pub struct TestSet(pub DatasetFile);

fn subset(dataset: &DatasetFile, mut indices: Vec<usize>) -> DatasetFile {
    indices.sort_unstable();
    let records: Vec<_> = indices.into_iter().map(|i| dataset.records[i].clone()).collect();
    let mut header = dataset.header.clone();
    header.label_counts = LabelCounts::of(&records);
    DatasetFile { header, records }
}

/// Partitions record indices into `(rest, held_out)`. Stratified splits hold
/// out `round(class_size * fraction)` records of each class.
pub fn split_indices(
    labels: &[Label],
    fraction: f64,
    seed: u64,
    stratified: bool,
) -> Result<(Vec<usize>, Vec<usize>), DatasetError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(DatasetError::InvalidArgument(format!("split fraction {fraction} outside (0, 1)")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let groups: Vec<Vec<usize>> = if stratified {
        Label::ALL
            .iter()
            .map(|&label| {
                let idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == label).collect();
                if idx.is_empty() {
                    Err(DatasetError::EmptyClass(label))
                } else {
                    Ok(idx)
                }
            })
            .collect::<Result<_, _>>()?
    } else {
        vec![(0..labels.len()).collect()]
    };
    let (mut rest, mut held) = (Vec::new(), Vec::new());
    for mut group in groups {
        group.shuffle(&mut rng);
        let take = (group.len() as f64 * fraction).round() as usize;
        held.extend_from_slice(&group[..take]);
        rest.extend_from_slice(&group[take..]);
    }
    rest.sort_unstable();
    held.sort_unstable();
    Ok((rest, held))
}

pub fn split(
    dataset: &DatasetFile,
    test_fraction: f64,
    seed: u64,
    stratified: bool,
) -> Result<(TrainSet, TestSet), DatasetError> {
    let labels: Vec<Label> = dataset.records.iter().map(|r| r.label).collect();
    let (train, test) = split_indices(&labels, test_fraction, seed, stratified)?;
    Ok((TrainSet(subset(dataset, train)), TestSet(subset(dataset, test))))
}
