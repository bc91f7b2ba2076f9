//! Batch-file ingestion: reads raw delimited batch files with per-channel
//! timestamps, aligns every channel to the primary quality variable's
//! clock, repairs short gaps by linear interpolation, and emits cleaned
//! batch logs.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ident::Snapshot;

/// Channel naming and cleaning thresholds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BatchSchema {
    pub state_channels: Vec<String>,
    pub input_channels: Vec<String>,
    /// Channel whose timestamps define the aligned clock.
    pub align_channel: String,
    /// Batches shorter than this (after alignment) are rejected.
    pub min_rows: usize,
    /// Longest missing run repaired by linear interpolation.
    pub max_gap: usize,
}

impl Default for BatchSchema {
    fn default() -> Self {
        Self {
            state_channels: vec![
                "Furnace Temperature".into(),
                "Outlet Moisture".into(),
                "Outlet Temperature".into(),
            ],
            input_channels: vec![
                "Throughput".into(),
                "Hood Pressure".into(),
                "Water Flow".into(),
                "Steam-Water Mix Valve".into(),
                "Steam Valve".into(),
                "Inlet Moisture".into(),
                "Cumulative Water".into(),
            ],
            align_channel: "Outlet Moisture".into(),
            min_rows: 300,
            max_gap: 3,
        }
    }
}

impl BatchSchema {
    pub fn all_channels(&self) -> impl Iterator<Item = &String> {
        self.state_channels.iter().chain(self.input_channels.iter())
    }

    pub fn n_states(&self) -> usize {
        self.state_channels.len()
    }

    pub fn n_inputs(&self) -> usize {
        self.input_channels.len()
    }
}

/// One cleaned production batch. Rows flagged invalid carry NaN payloads
/// and are excluded from modeling.
#[derive(Debug, Clone)]
pub struct BatchLog {
    pub batch_id: u32,
    /// Relative time in minutes from batch start.
    pub t: Vec<f64>,
    /// rows x n_states.
    pub states: DMatrix<f64>,
    /// rows x n_inputs.
    pub inputs: DMatrix<f64>,
    pub valid: Vec<bool>,
}

impl BatchLog {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn state_row(&self, k: usize) -> DVector<f64> {
        self.states.row(k).transpose()
    }

    pub fn input_row(&self, k: usize) -> DVector<f64> {
        self.inputs.row(k).transpose()
    }

    /// Transition tuples over consecutive valid rows.
    pub fn snapshots(&self) -> Vec<Snapshot> {
        let mut out = Vec::new();
        for k in 0..self.len().saturating_sub(1) {
            if self.valid[k] && self.valid[k + 1] {
                out.push(Snapshot::new(
                    self.state_row(k),
                    self.input_row(k),
                    self.state_row(k + 1),
                ));
            }
        }
        out
    }

    /// Writes the cleaned batch in the same delimited layout the raw files
    /// use, plus a validity column.
    pub fn save(&self, path: &Path, schema: &BatchSchema) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        let mut header = vec!["t".to_string()];
        header.extend(schema.all_channels().cloned());
        header.push("valid".into());
        writeln!(w, "{}", header.join(","))?;
        for k in 0..self.len() {
            let mut row = vec![format!("{:?}", self.t[k])];
            for j in 0..self.states.ncols() {
                row.push(format!("{:?}", self.states[(k, j)]));
            }
            for j in 0..self.inputs.ncols() {
                row.push(format!("{:?}", self.inputs[(k, j)]));
            }
            row.push(if self.valid[k] { "1" } else { "0" }.into());
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }

    pub fn load(path: &Path, schema: &BatchSchema, batch_id: u32) -> Result<Self> {
        let r = BufReader::new(File::open(path)?);
        let n_s = schema.n_states();
        let n_c = schema.n_inputs();
        let mut t = Vec::new();
        let mut states = Vec::new();
        let mut inputs = Vec::new();
        let mut valid = Vec::new();
        let path_str = path.display().to_string();
        for (lineno, line) in r.lines().enumerate() {
            let line = line?;
            if lineno == 0 || line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 1 + n_s + n_c + 1 {
                return Err(Error::Parse {
                    path: path_str,
                    line: lineno + 1,
                    message: format!("expected {} fields", 2 + n_s + n_c),
                });
            }
            let parse = |s: &str| -> Result<f64> {
                if s.trim().is_empty() {
                    Ok(f64::NAN)
                } else {
                    s.trim().parse::<f64>().map_err(|e| Error::Parse {
                        path: path.display().to_string(),
                        line: lineno + 1,
                        message: e.to_string(),
                    })
                }
            };
            t.push(parse(fields[0])?);
            for f in &fields[1..1 + n_s] {
                states.push(parse(f)?);
            }
            for f in &fields[1 + n_s..1 + n_s + n_c] {
                inputs.push(parse(f)?);
            }
            valid.push(fields[1 + n_s + n_c].trim() == "1");
        }
        let rows = t.len();
        Ok(Self {
            batch_id,
            t,
            states: DMatrix::from_row_slice(rows, n_s, &states),
            inputs: DMatrix::from_row_slice(rows, n_c, &inputs),
            valid,
        })
    }
}

/// Raw, unaligned batch: per-channel timestamp/value series.
#[derive(Debug, Clone, Default)]
pub struct RawBatch {
    pub channels: HashMap<String, (Vec<f64>, Vec<Option<f64>>)>,
}

/// A missing-data run that was too long to repair.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DroppedSegment {
    pub channel: String,
    pub start_row: usize,
    pub end_row: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Rejection {
    pub path: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RejectionReport {
    pub rejected: Vec<Rejection>,
    pub accepted: Vec<String>,
    pub dropped_segments: Vec<DroppedSegment>,
}

/// Reads a raw batch file. Layout: header row, then per-channel timestamp
/// and value column pairs named `<channel>_t,<channel>`; empty cells mark
/// missing samples.
pub fn load_raw(path: &Path, schema: &BatchSchema) -> Result<RawBatch> {
    let r = BufReader::new(File::open(path)?);
    let mut lines = r.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::BatchRejected("empty file".into()))??;
    let cols: Vec<String> = header.split(',').map(|s| s.trim().to_string()).collect();

    let mut col_index: HashMap<&str, usize> = HashMap::new();
    for (i, c) in cols.iter().enumerate() {
        col_index.insert(c.as_str(), i);
    }
    for ch in schema.all_channels() {
        let tcol = format!("{ch}_t");
        if !col_index.contains_key(ch.as_str()) || !col_index.contains_key(tcol.as_str()) {
            return Err(Error::BatchRejected(format!("missing channel '{ch}'")));
        }
    }

    let mut raw = RawBatch::default();
    for ch in schema.all_channels() {
        raw.channels
            .insert(ch.clone(), (Vec::new(), Vec::new()));
    }
    let path_str = path.display().to_string();
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        for ch in schema.all_channels() {
            let ti = col_index[format!("{ch}_t").as_str()];
            let vi = col_index[ch.as_str()];
            let tf = fields.get(ti).map(|s| s.trim()).unwrap_or("");
            let vf = fields.get(vi).map(|s| s.trim()).unwrap_or("");
            if tf.is_empty() {
                continue; // no sample for this channel on this row
            }
            let tv: f64 = tf.parse().map_err(|e: std::num::ParseFloatError| Error::Parse {
                path: path_str.clone(),
                line: lineno + 2,
                message: e.to_string(),
            })?;
            let vv = if vf.is_empty() {
                None
            } else {
                let v: f64 = vf.parse().map_err(|e: std::num::ParseFloatError| Error::Parse {
                    path: path_str.clone(),
                    line: lineno + 2,
                    message: e.to_string(),
                })?;
                if v.is_finite() {
                    Some(v)
                } else {
                    None
                }
            };
            let entry = raw.channels.get_mut(ch).unwrap();
            entry.0.push(tv);
            entry.1.push(vv);
        }
    }
    Ok(raw)
}

/// Index of the sample nearest in time; equidistant ties resolve to the
/// earlier sample.
fn nearest_index(times: &[f64], target: f64) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, &t) in times.iter().enumerate() {
        let d = (t - target).abs();
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

/// Repairs interior missing runs of at most `max_gap` points by linear
/// interpolation between the bounding valid samples. Longer runs and
/// leading/trailing runs stay invalid and are reported. Valid samples are
/// never modified.
pub fn fill_gaps(
    series: &[Option<f64>],
    max_gap: usize,
    channel: &str,
) -> Result<(Vec<f64>, Vec<bool>, Vec<DroppedSegment>)> {
    let n = series.len();
    if series.iter().all(|v| v.is_none()) {
        return Err(Error::BatchRejected(format!(
            "channel '{channel}' has no valid samples"
        )));
    }
    let mut values = vec![f64::NAN; n];
    let mut valid = vec![false; n];
    let mut dropped = Vec::new();
    let mut i = 0;
    while i < n {
        match series[i] {
            Some(v) => {
                values[i] = v;
                valid[i] = true;
                i += 1;
            }
            None => {
                let start = i;
                while i < n && series[i].is_none() {
                    i += 1;
                }
                let end = i; // exclusive
                let run = end - start;
                let interior = start > 0 && end < n;
                if interior && run <= max_gap {
                    let a = series[start - 1].unwrap();
                    let b = series[end].unwrap();
                    for (step, idx) in (start..end).enumerate() {
                        let frac = (step + 1) as f64 / (run + 1) as f64;
                        values[idx] = a + frac * (b - a);
                        valid[idx] = true;
                    }
                } else {
                    dropped.push(DroppedSegment {
                        channel: channel.to_string(),
                        start_row: start,
                        end_row: end - 1,
                    });
                }
            }
        }
    }
    Ok((values, valid, dropped))
}

/// Aligns every channel to the alignment channel's timestamps by nearest
/// neighbor, converts to relative minutes, and repairs gaps. Output length
/// equals the alignment channel's sample count.
pub fn align(raw: &RawBatch, schema: &BatchSchema, batch_id: u32) -> Result<(BatchLog, Vec<DroppedSegment>)> {
    let (ref_t, _) = raw
        .channels
        .get(&schema.align_channel)
        .ok_or_else(|| Error::BatchRejected(format!("missing channel '{}'", schema.align_channel)))?;
    if ref_t.is_empty() {
        return Err(Error::BatchRejected(format!(
            "channel '{}' has zero samples",
            schema.align_channel
        )));
    }
    let t0 = ref_t[0];
    let rows = ref_t.len();
    let t: Vec<f64> = ref_t.iter().map(|&s| (s - t0) / 60.0).collect();

    let n_s = schema.n_states();
    let n_c = schema.n_inputs();
    let mut states = DMatrix::from_element(rows, n_s, f64::NAN);
    let mut inputs = DMatrix::from_element(rows, n_c, f64::NAN);
    let mut valid = vec![true; rows];
    let mut all_dropped = Vec::new();

    for (col, name) in schema.all_channels().enumerate() {
        let (ch_t, ch_v) = raw
            .channels
            .get(name)
            .ok_or_else(|| Error::BatchRejected(format!("missing channel '{name}'")))?;
        if ch_t.is_empty() {
            return Err(Error::BatchRejected(format!(
                "channel '{name}' has zero samples"
            )));
        }
        let aligned: Vec<Option<f64>> = ref_t
            .iter()
            .map(|&target| ch_v[nearest_index(ch_t, target)])
            .collect();
        let (vals, ch_valid, dropped) = fill_gaps(&aligned, schema.max_gap, name)?;
        for k in 0..rows {
            if col < n_s {
                states[(k, col)] = vals[k];
            } else {
                inputs[(k, col - n_s)] = vals[k];
            }
            valid[k] &= ch_valid[k];
        }
        all_dropped.extend(dropped);
    }

    Ok((
        BatchLog {
            batch_id,
            t,
            states,
            inputs,
            valid,
        },
        all_dropped,
    ))
}

/// Loads, aligns, and cleans a set of raw batch files. Too-short batches
/// and schema violations are rejected with reasons; survivors get
/// sequential IDs in input order starting at 1.
pub fn load_batches(
    paths: &[PathBuf],
    schema: &BatchSchema,
) -> (Vec<BatchLog>, RejectionReport) {
    let mut report = RejectionReport::default();
    let mut batches = Vec::new();
    let mut next_id = 1u32;
    // Reports carry file names, not absolute paths, so a rerun from a
    // different location produces identical output.
    let name = |p: &Path| {
        p.file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| p.display().to_string())
    };
    for path in paths {
        let outcome = load_raw(path, schema).and_then(|raw| align(&raw, schema, next_id));
        match outcome {
            Ok((batch, dropped)) => {
                if batch.len() < schema.min_rows {
                    report.rejected.push(Rejection {
                        path: name(path),
                        reason: format!(
                            "too short: {} rows < minimum {}",
                            batch.len(),
                            schema.min_rows
                        ),
                    });
                } else {
                    report.accepted.push(name(path));
                    report.dropped_segments.extend(dropped);
                    batches.push(batch);
                    next_id += 1;
                }
            }
            Err(e) => report.rejected.push(Rejection {
                path: name(path),
                reason: e.to_string(),
            }),
        }
    }
    (batches, report)
}

/// Per-channel z-score statistics frozen on a training split.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Normalization {
    pub state_mean: Vec<f64>,
    pub state_std: Vec<f64>,
    pub input_mean: Vec<f64>,
    pub input_std: Vec<f64>,
}

impl Normalization {
    pub fn fit(batches: &[BatchLog]) -> Result<Self> {
        let (n_s, n_c) = match batches.first() {
            Some(b) => (b.states.ncols(), b.inputs.ncols()),
            None => return Err(Error::EmptyInput("normalization needs batches")),
        };
        let stats = |col_of: &dyn Fn(&BatchLog, usize, usize) -> f64, ncols: usize| {
            let mut means = vec![0.0; ncols];
            let mut stds = vec![1.0; ncols];
            for j in 0..ncols {
                let mut vals = Vec::new();
                for b in batches {
                    for k in 0..b.len() {
                        if b.valid[k] {
                            vals.push(col_of(b, k, j));
                        }
                    }
                }
                let n = vals.len().max(1) as f64;
                let mean = vals.iter().sum::<f64>() / n;
                let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>()
                    / (n - 1.0).max(1.0);
                means[j] = mean;
                stds[j] = var.sqrt().max(1e-12);
            }
            (means, stds)
        };
        let (state_mean, state_std) = stats(&|b, k, j| b.states[(k, j)], n_s);
        let (input_mean, input_std) = stats(&|b, k, j| b.inputs[(k, j)], n_c);
        Ok(Self {
            state_mean,
            state_std,
            input_mean,
            input_std,
        })
    }

    pub fn normalize_state(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(x.len(), |i, _| (x[i] - self.state_mean[i]) / self.state_std[i])
    }

    pub fn denormalize_state(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(x.len(), |i, _| x[i] * self.state_std[i] + self.state_mean[i])
    }

    pub fn normalize_input(&self, u: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(u.len(), |i, _| (u[i] - self.input_mean[i]) / self.input_std[i])
    }
}

/// Physical input box from the historical data: per-channel quantile range
/// with a relative margin. Returns `(u_min, u_max, range)` where `range`
/// is the raw quantile span used for the advisor corridor floor.
pub fn input_bounds(
    batches: &[BatchLog],
    quantile: f64,
    margin: f64,
) -> Result<(DVector<f64>, DVector<f64>, DVector<f64>)> {
    let n_c = match batches.first() {
        Some(b) => b.inputs.ncols(),
        None => return Err(Error::EmptyInput("input bounds need batches")),
    };
    let mut u_min = DVector::zeros(n_c);
    let mut u_max = DVector::zeros(n_c);
    let mut range = DVector::zeros(n_c);
    for j in 0..n_c {
        let mut vals: Vec<f64> = Vec::new();
        for b in batches {
            for k in 0..b.len() {
                if b.valid[k] {
                    vals.push(b.inputs[(k, j)]);
                }
            }
        }
        if vals.is_empty() {
            return Err(Error::EmptyInput("input bounds need valid rows"));
        }
        vals.sort_by(|a, b| a.total_cmp(b));
        let lo_idx = (((1.0 - quantile) * (vals.len() - 1) as f64).round()) as usize;
        let hi_idx = ((quantile * (vals.len() - 1) as f64).round()) as usize;
        let lo = vals[lo_idx];
        let hi = vals[hi_idx];
        let span = (hi - lo).max(1e-9);
        u_min[j] = lo - margin * span;
        u_max[j] = hi + margin * span;
        range[j] = span;
    }
    Ok((u_min, u_max, range))
}
