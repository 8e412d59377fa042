//! Dataset files, checkpoints and the synthetic-writer generator.
//!
//! Datasets are JSON lines, one trace per line:
//!
//! ```text
//! {"writer_id": "w007", "session": 1, "kind": "genuine", "hz": 120.0,
//!  "points": [[x, y, p, t], ...], "split": "train"}
//! ```
//!
//! `split` is optional. Preprocessed feature files use the same envelope
//! with `"features": [[...], ...]` (one row per timestep) in place of
//! `points`.

mod checkpoint;
mod synth;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use synth::{generate_synthetic, writer_params, SyntheticConfig, SyntheticWriterParams, WaveComponent};

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::scalar::Scalar;
use crate::signal::{preprocess, FeatureSequence, PreprocessConfig, RawTrace, SampleKind, TracePoint};
use crate::training::{TrainSet, WriterData};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<T> {
    pub samples: Vec<RawTrace<T>>,
    /// Writers without an entry belong to neither split.
    pub split: BTreeMap<String, Split>,
}

impl<T> Default for Dataset<T> {
    fn default() -> Self {
        Self {
            samples: Vec::new(),
            split: BTreeMap::new(),
        }
    }
}

impl<T: Scalar> Dataset<T> {
    /// Writer ids in first-appearance order.
    pub fn writer_ids(&self) -> Vec<String> {
        first_seen(self.samples.iter().map(|s| s.writer_id.as_str()))
    }

    pub fn writers_in(&self, split: Split) -> Vec<String> {
        self.writer_ids()
            .into_iter()
            .filter(|w| self.split.get(w) == Some(&split))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        for (i, s) in self.samples.iter().enumerate() {
            s.validate()
                .map_err(|e| Error::InvalidInput(format!("sample {i} of writer {}: {e}", s.writer_id)))?;
        }
        Ok(())
    }
}

fn first_seen<'a>(ids: impl Iterator<Item = &'a str>) -> Vec<String> {
    let mut seen = std::collections::HashSet::new();
    ids.filter(|id| seen.insert(*id)).map(str::to_owned).collect()
}

#[derive(Serialize, Deserialize)]
struct RawRecord {
    writer_id: String,
    session: u32,
    kind: SampleKind,
    hz: f64,
    points: Vec<[f64; 4]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    split: Option<Split>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureRecord {
    pub writer_id: String,
    pub session: u32,
    pub kind: SampleKind,
    pub hz: f64,
    pub features: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

/// One preprocessed sample with its labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledFeatures<T> {
    pub writer_id: String,
    pub session: u32,
    pub kind: SampleKind,
    pub split: Option<Split>,
    pub features: FeatureSequence<T>,
}

struct SplitTracker {
    split: BTreeMap<String, Split>,
    overlap: Vec<String>,
}

impl SplitTracker {
    fn new() -> Self {
        Self {
            split: BTreeMap::new(),
            overlap: Vec::new(),
        }
    }

    fn note(&mut self, writer: &str, split: Option<Split>) {
        let Some(s) = split else { return };
        match self.split.get(writer) {
            Some(&prev) if prev != s => {
                if !self.overlap.iter().any(|w| w == writer) {
                    self.overlap.push(writer.to_owned());
                }
            }
            Some(_) => {}
            None => {
                self.split.insert(writer.to_owned(), s);
            }
        }
    }

    fn finish(mut self) -> Result<BTreeMap<String, Split>> {
        if self.overlap.is_empty() {
            Ok(self.split)
        } else {
            self.overlap.sort();
            Err(Error::SplitOverlap(self.overlap))
        }
    }
}

fn parse_lines<R: BufRead, V>(reader: R, mut f: impl FnMut(usize, &str) -> Result<V>) -> Result<Vec<V>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(f(i + 1, &line)?);
    }
    Ok(out)
}

fn parse_err(line: usize, msg: impl ToString) -> Error {
    Error::Parse {
        line,
        msg: msg.to_string(),
    }
}

pub fn read_dataset<T: Scalar, R: BufRead>(reader: R) -> Result<Dataset<T>> {
    let mut tracker = SplitTracker::new();
    let samples = parse_lines(reader, |line, text| {
        let rec: RawRecord = serde_json::from_str(text).map_err(|e| parse_err(line, e))?;
        let trace = RawTrace {
            points: rec
                .points
                .iter()
                .map(|&[x, y, p, t]| TracePoint::new(T::lit(x), T::lit(y), T::lit(p), T::lit(t)))
                .collect(),
            writer_id: rec.writer_id,
            kind: rec.kind,
            session: rec.session,
            source_hz: T::lit(rec.hz),
        };
        if !(rec.hz > 0.0) {
            return Err(parse_err(line, format!("sampling rate must be positive, got {}", rec.hz)));
        }
        trace.validate().map_err(|e| parse_err(line, e))?;
        tracker.note(&trace.writer_id, rec.split);
        Ok(trace)
    })?;
    Ok(Dataset {
        samples,
        split: tracker.finish()?,
    })
}

pub fn write_dataset<T: Scalar, W: Write>(dataset: &Dataset<T>, mut out: W) -> Result<()> {
    for s in &dataset.samples {
        let rec = RawRecord {
            writer_id: s.writer_id.clone(),
            session: s.session,
            kind: s.kind,
            hz: s.source_hz.to_f64_lossy(),
            points: s
                .points
                .iter()
                .map(|p| [p.x, p.y, p.p, p.t].map(|v| v.to_f64_lossy()))
                .collect(),
            split: dataset.split.get(&s.writer_id).copied(),
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn load_dataset<T: Scalar>(path: impl AsRef<Path>) -> Result<Dataset<T>> {
    read_dataset(BufReader::new(File::open(path)?))
}

pub fn save_dataset<T: Scalar>(dataset: &Dataset<T>, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_dataset(dataset, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn read_features<T: Scalar, R: BufRead>(reader: R) -> Result<Vec<LabeledFeatures<T>>> {
    let mut tracker = SplitTracker::new();
    let out = parse_lines(reader, |line, text| {
        let rec: FeatureRecord = serde_json::from_str(text).map_err(|e| parse_err(line, e))?;
        let rows: Vec<Vec<T>> = rec.features.iter().map(|r| r.iter().map(|&v| T::lit(v)).collect()).collect();
        if rows.is_empty() {
            return Err(parse_err(line, "empty feature sequence"));
        }
        let values = Matrix::from_rows(&rows).map_err(|e| parse_err(line, e))?;
        if !values.is_finite() {
            return Err(parse_err(line, "non-finite feature value"));
        }
        tracker.note(&rec.writer_id, rec.split);
        Ok(LabeledFeatures {
            writer_id: rec.writer_id,
            session: rec.session,
            kind: rec.kind,
            split: rec.split,
            features: FeatureSequence { values },
        })
    })?;
    tracker.finish()?;
    Ok(out)
}

pub fn write_features<T: Scalar, W: Write>(samples: &[LabeledFeatures<T>], hz: f64, mut out: W) -> Result<()> {
    for s in samples {
        let v = &s.features.values;
        let rec = FeatureRecord {
            writer_id: s.writer_id.clone(),
            session: s.session,
            kind: s.kind,
            hz,
            features: (0..v.rows()).map(|r| v.row(r).iter().map(|x| x.to_f64_lossy()).collect()).collect(),
            split: s.split,
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Whether a JSON-lines file holds preprocessed features rather than raw
/// traces, judged by its first non-empty line.
pub fn is_feature_file(path: impl AsRef<Path>) -> Result<bool> {
    let reader = BufReader::new(File::open(path)?);
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let v: serde_json::Value = serde_json::from_str(&line).map_err(|e| parse_err(1, e))?;
        return Ok(v.get("features").is_some());
    }
    Ok(false)
}

/// Loads either file flavor, preprocessing raw traces with `cfg`.
pub fn load_labeled_features<T: Scalar>(path: impl AsRef<Path>, cfg: &PreprocessConfig) -> Result<Vec<LabeledFeatures<T>>> {
    let path = path.as_ref();
    if is_feature_file(path)? {
        read_features(BufReader::new(File::open(path)?))
    } else {
        preprocess_dataset(&load_dataset(path)?, cfg)
    }
}

/// Runs the preprocessing chain on every trace, in parallel, keeping order.
pub fn preprocess_dataset<T: Scalar>(dataset: &Dataset<T>, cfg: &PreprocessConfig) -> Result<Vec<LabeledFeatures<T>>> {
    dataset
        .samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let (features, _) = preprocess(s, cfg)
                .map_err(|e| Error::InvalidInput(format!("sample {i} of writer {}: {e}", s.writer_id)))?;
            Ok(LabeledFeatures {
                writer_id: s.writer_id.clone(),
                session: s.session,
                kind: s.kind,
                split: dataset.split.get(&s.writer_id).copied(),
                features,
            })
        })
        .collect()
}

/// Groups samples by writer in first-appearance order, keeping file order
/// within each writer. `split = None` keeps every writer.
pub fn group_writers<T: Scalar>(samples: &[LabeledFeatures<T>], split: Option<Split>) -> Vec<WriterData<T>> {
    let picked = samples.iter().filter(|s| split.is_none() || s.split == split);
    TrainSet::from_samples(picked.map(|s| (s.writer_id.clone(), s.kind, s.features.clone()))).writers
}

#[cfg(test)]
mod tests;
