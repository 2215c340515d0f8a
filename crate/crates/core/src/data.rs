//! Traffic series loading, z-score normalization, windowing and the
//! historical-average baseline.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use thiserror::Error;

pub const SECONDS_PER_DAY: i64 = 86_400;
pub const BINARY_MAGIC: &[u8; 5] = b"STSF1";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("bad header: {0}")]
    Header(String),
    #[error("row {row}: expected {expected} values, found {found}")]
    Ragged {
        row: usize,
        expected: usize,
        found: usize,
    },
    #[error("row {row}, column {col}: cannot parse {cell:?} as a number")]
    Parse {
        row: usize,
        col: usize,
        cell: String,
    },
    #[error("row {row}, column {col}: value is not finite")]
    NonFinite { row: usize, col: usize },
    #[error("frequency {0} must be positive and divide a day evenly")]
    Frequency(i64),
    #[error("truncated binary series: {0}")]
    Truncated(String),
    #[error("standard deviation is zero; the dataset is degenerate")]
    ZeroVariance,
    #[error("series of {steps} steps is too short for {needed}")]
    TooShort { steps: usize, needed: usize },
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Single-channel signal matrix, `steps x nodes`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TrafficSeries {
    values: Vec<f64>,
    steps: usize,
    nodes: usize,
    frequency: usize,
    start: i64,
}

impl TrafficSeries {
    pub fn new(values: Vec<f64>, steps: usize, nodes: usize, frequency: usize, start: i64) -> Result<Self> {
        if frequency == 0 || SECONDS_PER_DAY % frequency as i64 != 0 {
            return Err(DataError::Frequency(frequency as i64));
        }
        if nodes == 0 || steps == 0 {
            return Err(DataError::Invalid("series needs at least one node and one step".into()));
        }
        if values.len() != steps * nodes {
            return Err(DataError::Invalid(format!(
                "{} values for {steps} x {nodes}",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(DataError::NonFinite {
                row: i / nodes,
                col: i % nodes,
            });
        }
        Ok(Self {
            values,
            steps,
            nodes,
            frequency,
            start,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn frequency(&self) -> usize {
        self.frequency
    }

    pub fn start(&self) -> i64 {
        self.start
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, step: usize) -> &[f64] {
        &self.values[step * self.nodes..(step + 1) * self.nodes]
    }

    pub fn at(&self, step: usize, node: usize) -> f64 {
        self.values[step * self.nodes + node]
    }

    pub fn step_seconds(&self) -> i64 {
        SECONDS_PER_DAY / self.frequency as i64
    }

    /// Time-of-day slot of series position `step`.
    pub fn tod_index(&self, step: usize) -> usize {
        let t = self.start + step as i64 * self.step_seconds();
        (t.rem_euclid(SECONDS_PER_DAY) / self.step_seconds()) as usize
    }

    /// Day of week of series position `step`, Monday = 0.
    pub fn dow_index(&self, step: usize) -> usize {
        let t = self.start + step as i64 * self.step_seconds();
        // 1970-01-01 was a Thursday
        (t.div_euclid(SECONDS_PER_DAY) + 3).rem_euclid(7) as usize
    }

    fn map_values(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            values: self.values.iter().map(|&v| f(v)).collect(),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeriesFormat {
    Text,
    Binary,
    /// Binary if the file starts with the binary magic, text otherwise.
    Auto,
}

pub fn load_series(path: &Path, format: SeriesFormat) -> Result<TrafficSeries> {
    let io = |source| DataError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(io)?;
    let binary = match format {
        SeriesFormat::Text => false,
        SeriesFormat::Binary => true,
        SeriesFormat::Auto => bytes.starts_with(BINARY_MAGIC),
    };
    if binary {
        parse_binary(&bytes)
    } else {
        parse_text(BufReader::new(bytes.as_slice()))
    }
}

/// Parses `N=<int> FREQ=<int> START=<epoch-seconds>` followed by one
/// comma-separated row per step.
pub fn parse_text(reader: impl BufRead) -> Result<TrafficSeries> {
    let mut lines = reader.lines();
    let header = lines
        .next()
        .ok_or_else(|| DataError::Header("empty file".into()))?
        .map_err(|e| DataError::Header(e.to_string()))?;
    let mut fields: HashMap<&str, i64> = HashMap::new();
    for tok in header.split_whitespace() {
        let (k, v) = tok
            .split_once('=')
            .ok_or_else(|| DataError::Header(format!("malformed field {tok:?}")))?;
        let v: i64 = v
            .parse()
            .map_err(|_| DataError::Header(format!("{k} value {v:?} is not an integer")))?;
        if !matches!(k, "N" | "FREQ" | "START") {
            return Err(DataError::Header(format!("unknown field {k}")));
        }
        fields.insert(k, v);
    }
    let get = |k: &str| {
        fields
            .get(k)
            .copied()
            .ok_or_else(|| DataError::Header(format!("missing {k}")))
    };
    let (n, freq, start) = (get("N")?, get("FREQ")?, get("START")?);
    if freq <= 0 {
        return Err(DataError::Frequency(freq));
    }
    if n <= 0 {
        return Err(DataError::Header(format!("N={n} must be positive")));
    }
    let n = n as usize;
    let mut values = Vec::new();
    let mut steps = 0;
    for (row, line) in lines.enumerate() {
        let line = line.map_err(|e| DataError::Header(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != n {
            return Err(DataError::Ragged {
                row,
                expected: n,
                found: cells.len(),
            });
        }
        for (col, cell) in cells.into_iter().enumerate() {
            let v: f64 = cell.trim().parse().map_err(|_| DataError::Parse {
                row,
                col,
                cell: cell.to_string(),
            })?;
            if !v.is_finite() {
                return Err(DataError::NonFinite { row, col });
            }
            values.push(v);
        }
        steps += 1;
    }
    TrafficSeries::new(values, steps, n, freq as usize, start)
}

pub fn parse_binary(bytes: &[u8]) -> Result<TrafficSeries> {
    if !bytes.starts_with(BINARY_MAGIC) {
        return Err(DataError::Header("missing STSF1 magic".into()));
    }
    let head = 5 + 3 * 8 + 8;
    if bytes.len() < head {
        return Err(DataError::Truncated("header".into()));
    }
    let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
    let (steps, n, freq) = (u64_at(5) as usize, u64_at(13) as usize, u64_at(21));
    let start = i64::from_le_bytes(bytes[29..37].try_into().unwrap());
    if freq == 0 || freq > i64::MAX as u64 {
        return Err(DataError::Frequency(freq as i64));
    }
    let len = steps
        .checked_mul(n)
        .and_then(|c| c.checked_mul(8))
        .ok_or_else(|| DataError::Truncated("size overflow".into()))?;
    if bytes.len() != head + len {
        return Err(DataError::Truncated(format!(
            "expected {} payload bytes, found {}",
            len,
            bytes.len() - head
        )));
    }
    let values = bytes[head..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    TrafficSeries::new(values, steps, n, freq as usize, start)
}

pub fn write_text(series: &TrafficSeries, w: &mut impl Write) -> std::io::Result<()> {
    writeln!(
        w,
        "N={} FREQ={} START={}",
        series.nodes, series.frequency, series.start
    )?;
    let mut line = String::new();
    for s in 0..series.steps {
        line.clear();
        for (i, v) in series.row(s).iter().enumerate() {
            if i > 0 {
                line.push(',');
            }
            line.push_str(&v.to_string());
        }
        writeln!(w, "{line}")?;
    }
    Ok(())
}

pub fn write_binary(series: &TrafficSeries, w: &mut impl Write) -> std::io::Result<()> {
    w.write_all(BINARY_MAGIC)?;
    for x in [series.steps as u64, series.nodes as u64, series.frequency as u64] {
        w.write_all(&x.to_le_bytes())?;
    }
    w.write_all(&series.start.to_le_bytes())?;
    let mut buf = Vec::with_capacity(series.values.len() * 8);
    for v in &series.values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)
}

/// Pooled z-score statistics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
}

impl NormStats {
    pub fn apply(&self, x: f64) -> f64 {
        (x - self.mean) / self.std
    }

    pub fn invert(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }
}

/// Mean and population std over the first `floor(train_fraction * steps)`
/// rows, all nodes pooled.
pub fn fit_normalizer(series: &TrafficSeries, train_fraction: f64) -> Result<NormStats> {
    if !(train_fraction > 0.0 && train_fraction <= 1.0) {
        return Err(DataError::Invalid(format!(
            "train fraction {train_fraction} must be in (0, 1]"
        )));
    }
    let rows = (train_fraction * series.steps as f64).floor() as usize;
    fit_normalizer_rows(series, 0..rows)
}

pub fn fit_normalizer_rows(series: &TrafficSeries, rows: std::ops::Range<usize>) -> Result<NormStats> {
    if rows.is_empty() || rows.end > series.steps {
        return Err(DataError::Invalid(format!(
            "normalizer rows {rows:?} outside series of {} steps",
            series.steps
        )));
    }
    let slice = &series.values[rows.start * series.nodes..rows.end * series.nodes];
    let n = slice.len() as f64;
    let mean = slice.iter().sum::<f64>() / n;
    let var = slice.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if std <= 0.0 || !std.is_finite() {
        return Err(DataError::ZeroVariance);
    }
    Ok(NormStats { mean, std })
}

pub fn apply_zscore(series: &TrafficSeries, stats: &NormStats) -> TrafficSeries {
    series.map_values(|v| stats.apply(v))
}

pub fn invert_zscore(values: &[f64], stats: &NormStats) -> Vec<f64> {
    values.iter().map(|&z| stats.invert(z)).collect()
}

/// One training example, addressed by position in its series.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleWindow {
    /// First input step.
    pub start: usize,
    /// Last input step.
    pub anchor_t: usize,
    pub input_len: usize,
    pub horizon: usize,
    pub tod_index: usize,
    pub dow_index: usize,
}

impl SampleWindow {
    pub fn new(series: &TrafficSeries, start: usize, input_len: usize, horizon: usize) -> Self {
        let anchor_t = start + input_len - 1;
        Self {
            start,
            anchor_t,
            input_len,
            horizon,
            tod_index: series.tod_index(anchor_t),
            dow_index: series.dow_index(anchor_t),
        }
    }

    /// Input steps.
    pub fn input_range(&self) -> std::ops::Range<usize> {
        self.start..self.anchor_t + 1
    }

    /// Target steps.
    pub fn target_range(&self) -> std::ops::Range<usize> {
        self.anchor_t + 1..self.anchor_t + 1 + self.horizon
    }

    /// The `N x T` input matrix, node-major.
    pub fn input(&self, series: &TrafficSeries) -> Vec<f64> {
        node_major(series, self.input_range())
    }

    /// The `N x T'` target matrix, node-major.
    pub fn target(&self, series: &TrafficSeries) -> Vec<f64> {
        node_major(series, self.target_range())
    }
}

fn node_major(series: &TrafficSeries, steps: std::ops::Range<usize>) -> Vec<f64> {
    let len = steps.len();
    let mut out = vec![0.0; series.nodes * len];
    for (j, s) in steps.enumerate() {
        for (n, v) in series.row(s).iter().enumerate() {
            out[n * len + j] = *v;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.6,
            val: 0.2,
            test: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowSplits {
    pub train: Vec<SampleWindow>,
    pub val: Vec<SampleWindow>,
    pub test: Vec<SampleWindow>,
}

impl WindowSplits {
    pub fn total(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    /// Raw rows touched by training windows (inputs and targets).
    pub fn train_rows(&self) -> std::ops::Range<usize> {
        match (self.train.first(), self.train.last()) {
            (Some(a), Some(b)) => a.start..b.target_range().end,
            _ => 0..0,
        }
    }
}

/// Slides a window of `input_len + horizon` steps over the series and
/// splits the windows chronologically by start index.
pub fn make_windows(
    series: &TrafficSeries,
    input_len: usize,
    horizon: usize,
    split: SplitRatios,
) -> Result<WindowSplits> {
    if input_len == 0 || horizon == 0 {
        return Err(DataError::Invalid("input length and horizon must be >= 1".into()));
    }
    let ratios = [split.train, split.val, split.test];
    if ratios.iter().any(|r| !(0.0..=1.0).contains(r))
        || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9
    {
        return Err(DataError::Invalid(format!(
            "split {ratios:?} must be non-negative and sum to 1"
        )));
    }
    let span = input_len + horizon;
    if series.steps < span {
        return Err(DataError::TooShort {
            steps: series.steps,
            needed: span,
        });
    }
    let total = series.steps - span + 1;
    let n_train = (split.train * total as f64).round() as usize;
    let n_val = ((split.val * total as f64).round() as usize).min(total - n_train);
    let all: Vec<SampleWindow> = (0..total)
        .map(|s| SampleWindow::new(series, s, input_len, horizon))
        .collect();
    Ok(WindowSplits {
        train: all[..n_train].to_vec(),
        val: all[n_train..n_train + n_val].to_vec(),
        test: all[n_train + n_val..].to_vec(),
    })
}

/// Per node, per (time-of-day, day-of-week) phase training mean.
#[derive(Debug, Clone)]
pub struct HistoricalAverage {
    nodes: usize,
    frequency: usize,
    // index: (dow * frequency + tod) * nodes + node
    phase_mean: Vec<Option<f64>>,
    node_mean: Vec<f64>,
}

impl HistoricalAverage {
    /// Fits over every raw row covered by the training windows.
    pub fn fit(series: &TrafficSeries, train: &[SampleWindow]) -> Result<Self> {
        let (Some(first), Some(last)) = (train.first(), train.last()) else {
            return Err(DataError::Invalid("historical average needs training windows".into()));
        };
        Ok(Self::fit_rows(series, first.start..last.target_range().end))
    }

    pub fn fit_rows(series: &TrafficSeries, rows: std::ops::Range<usize>) -> Self {
        let (n, f) = (series.nodes, series.frequency);
        let mut sum = vec![0.0; 7 * f * n];
        let mut cnt = vec![0usize; 7 * f];
        let mut node_sum = vec![0.0; n];
        for s in rows.clone() {
            let phase = series.dow_index(s) * f + series.tod_index(s);
            cnt[phase] += 1;
            for (node, v) in series.row(s).iter().enumerate() {
                sum[phase * n + node] += v;
                node_sum[node] += v;
            }
        }
        let phase_mean = sum
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let c = cnt[i / n];
                (c > 0).then(|| s / c as f64)
            })
            .collect();
        let rows_n = rows.len().max(1) as f64;
        Self {
            nodes: n,
            frequency: f,
            phase_mean,
            node_mean: node_sum.iter().map(|s| s / rows_n).collect(),
        }
    }

    pub fn predict_step(&self, series: &TrafficSeries, step: usize, node: usize) -> f64 {
        let phase = series.dow_index(step) * self.frequency + series.tod_index(step);
        self.phase_mean[phase * self.nodes + node].unwrap_or(self.node_mean[node])
    }

    /// `N x T'` forecast for the window's target steps, node-major.
    pub fn predict(&self, series: &TrafficSeries, window: &SampleWindow) -> Vec<f64> {
        let h = window.horizon;
        let mut out = vec![0.0; self.nodes * h];
        for (j, s) in window.target_range().enumerate() {
            for node in 0..self.nodes {
                out[node * h + j] = self.predict_step(series, s, node);
            }
        }
        out
    }
}
