//! Trajectory datasets: file I/O, normalization, contiguous splits and
//! N-step windows.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffcore::Matrix;
use crate::error::{Error, Result};

pub const AERO_INPUTS: usize = 10;
pub const AERO_OUTPUTS: usize = 5;
pub const AERO_DT: f64 = 0.02;

/// Aligned input and output series: row `t` of `u` drives the transition
/// from `y_t` to `y_{t+1}`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryDataset {
    pub u: Matrix,
    pub y: Matrix,
    pub dt: f64,
}

impl TrajectoryDataset {
    pub fn new(u: Matrix, y: Matrix, dt: f64) -> Result<Self> {
        if u.rows() != y.rows() {
            return Err(Error::Dataset(format!("{} input rows vs {} output rows", u.rows(), y.rows())));
        }
        if !(dt > 0.0) {
            return Err(Error::Dataset(format!("sampling interval must be positive, got {dt}")));
        }
        Ok(Self { u, y, dt })
    }

    pub fn len(&self) -> usize {
        self.y.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_u(&self) -> usize {
        self.u.cols()
    }

    pub fn n_y(&self) -> usize {
        self.y.cols()
    }

    /// Rows `[start, end)`.
    pub fn slice(&self, start: usize, end: usize) -> Self {
        let idx: Vec<usize> = (start..end).collect();
        Self { u: self.u.select_rows(&idx), y: self.y.select_rows(&idx), dt: self.dt }
    }
}

/// Per-channel min/max used to map the training split onto `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub u_min: Vec<f64>,
    pub u_max: Vec<f64>,
    pub y_min: Vec<f64>,
    pub y_max: Vec<f64>,
}

fn column_extrema(m: &Matrix) -> (Vec<f64>, Vec<f64>) {
    let mut lo = vec![f64::INFINITY; m.cols()];
    let mut hi = vec![f64::NEG_INFINITY; m.cols()];
    for r in 0..m.rows() {
        for (c, v) in m.row_slice(r).iter().enumerate() {
            lo[c] = lo[c].min(*v);
            hi[c] = hi[c].max(*v);
        }
    }
    (lo, hi)
}

fn rescale(m: &Matrix, lo: &[f64], hi: &[f64], forward: bool) -> Matrix {
    let mut out = m.clone();
    let cols = m.cols();
    for (i, v) in out.as_mut_slice().iter_mut().enumerate() {
        let c = i % cols;
        let span = hi[c] - lo[c];
        let span = if span > 0.0 { span } else { 1.0 };
        *v = if forward { (*v - lo[c]) / span } else { *v * span + lo[c] };
    }
    out
}

impl NormalizationStats {
    pub fn fit(data: &TrajectoryDataset) -> Self {
        let (u_min, u_max) = column_extrema(&data.u);
        let (y_min, y_max) = column_extrema(&data.y);
        Self { u_min, u_max, y_min, y_max }
    }

    pub fn normalize(&self, data: &TrajectoryDataset) -> TrajectoryDataset {
        TrajectoryDataset {
            u: rescale(&data.u, &self.u_min, &self.u_max, true),
            y: rescale(&data.y, &self.y_min, &self.y_max, true),
            dt: data.dt,
        }
    }

    pub fn denormalize_y(&self, y: &Matrix) -> Matrix {
        rescale(y, &self.y_min, &self.y_max, false)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

/// `N`-step training windows: for window `i` starting at sample `s`,
/// `histories[k]` row `i` is `y[s + k]`, `inputs[j]` row `i` is
/// `u[s + N_p − 1 + j]` and `targets[j]` row `i` is `y[s + N_p + j]`.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowBatch {
    pub histories: Vec<Matrix>,
    pub inputs: Vec<Matrix>,
    pub targets: Vec<Matrix>,
    /// Start sample of each window, relative to the source split.
    pub starts: Vec<usize>,
}

impl WindowBatch {
    pub fn len(&self) -> usize {
        self.starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.starts.is_empty()
    }

    pub fn horizon(&self) -> usize {
        self.inputs.len()
    }

    pub fn lookback(&self) -> usize {
        self.histories.len()
    }

    pub fn select(&self, rows: &[usize]) -> Self {
        let pick = |ms: &[Matrix]| ms.iter().map(|m| m.select_rows(rows)).collect();
        Self {
            histories: pick(&self.histories),
            inputs: pick(&self.inputs),
            targets: pick(&self.targets),
            starts: rows.iter().map(|&r| self.starts[r]).collect(),
        }
    }
}

/// Overlapping windows of one contiguous series at stride `stride`.
pub fn windows(data: &TrajectoryDataset, horizon: usize, lookback: usize, stride: usize) -> Result<WindowBatch> {
    if horizon == 0 || lookback == 0 || stride == 0 {
        return Err(Error::Config("horizon, lookback and stride must be positive".into()));
    }
    let span = horizon + lookback;
    if data.len() < span {
        return Err(Error::Dataset(format!("series of {} samples is shorter than one window of {span}", data.len())));
    }
    let starts: Vec<usize> = (0..=data.len() - span).step_by(stride).collect();
    let gather =
        |m: &Matrix, offset: usize| -> Matrix { m.select_rows(&starts.iter().map(|s| s + offset).collect::<Vec<_>>()) };
    Ok(WindowBatch {
        histories: (0..lookback).map(|k| gather(&data.y, k)).collect(),
        inputs: (0..horizon).map(|j| gather(&data.u, lookback - 1 + j)).collect(),
        targets: (0..horizon).map(|j| gather(&data.y, lookback + j)).collect(),
        starts,
    })
}

/// Normalized contiguous splits and their windows.
#[derive(Clone, Debug)]
pub struct SplitData {
    pub stats: NormalizationStats,
    pub train: TrajectoryDataset,
    pub dev: TrajectoryDataset,
    pub test: TrajectoryDataset,
    pub train_windows: WindowBatch,
    pub dev_windows: WindowBatch,
    pub test_windows: WindowBatch,
    /// Absolute `[start, end)` sample range of each split.
    pub ranges: [(usize, usize); 3],
}

/// Splits into first/middle/final thirds, normalizes every split with
/// statistics of the training third only, and windows each split separately.
pub fn split_and_window(data: &TrajectoryDataset, horizon: usize, lookback: usize, stride: usize) -> Result<SplitData> {
    let t = data.len();
    if t < 3 * (horizon + lookback) {
        return Err(Error::Dataset(format!(
            "horizon {horizon} plus lookback {lookback} does not fit in a third of {t} samples"
        )));
    }
    let third = t / 3;
    let ranges = [(0, third), (third, 2 * third), (2 * third, t)];
    let raw: Vec<TrajectoryDataset> = ranges.iter().map(|&(a, b)| data.slice(a, b)).collect();
    let stats = NormalizationStats::fit(&raw[0]);
    let train = stats.normalize(&raw[0]);
    let dev = stats.normalize(&raw[1]);
    let test = stats.normalize(&raw[2]);
    Ok(SplitData {
        train_windows: windows(&train, horizon, lookback, stride)?,
        dev_windows: windows(&dev, horizon, lookback, stride)?,
        test_windows: windows(&test, horizon, lookback, stride)?,
        stats,
        train,
        dev,
        test,
        ranges,
    })
}

/// Writes a delimited text file: `#` metadata lines, then one comma-separated
/// row per sample with the `n_u` inputs followed by the `n_y` outputs.
pub fn write_dataset(path: &Path, data: &TrajectoryDataset) -> Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    writeln!(out, "# n_u={} n_y={} dt={}", data.n_u(), data.n_y(), data.dt)?;
    let header: Vec<String> =
        (0..data.n_u()).map(|i| format!("u{i}")).chain((0..data.n_y()).map(|i| format!("y{i}"))).collect();
    writeln!(out, "# {}", header.join(","))?;
    for r in 0..data.len() {
        let row: Vec<String> = data.u.row_slice(r).iter().chain(data.y.row_slice(r)).map(|v| v.to_string()).collect();
        writeln!(out, "{}", row.join(","))?;
    }
    out.flush()?;
    Ok(())
}

fn parse_meta(line: &str) -> (Option<usize>, Option<usize>, Option<f64>) {
    let mut meta = (None, None, None);
    for tok in line.trim_start_matches('#').split_whitespace() {
        if let Some((k, v)) = tok.split_once('=') {
            match k {
                "n_u" => meta.0 = v.parse().ok(),
                "n_y" => meta.1 = v.parse().ok(),
                "dt" => meta.2 = v.parse().ok(),
                _ => {}
            }
        }
    }
    meta
}

/// Reads a delimited dataset file. Fields may be separated by commas, tabs
/// or spaces; `#` lines are comments. Dimensions and `dt` come from the
/// arguments when given, otherwise from an `# n_u=.. n_y=.. dt=..` line.
pub fn read_dataset(path: &Path, n_u: Option<usize>, n_y: Option<usize>, dt: Option<f64>) -> Result<TrajectoryDataset> {
    let text = fs::read_to_string(path)?;
    let (mut meta_u, mut meta_y, mut meta_dt) = (None, None, None);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut width = None;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if line.starts_with('#') {
            let (a, b, c) = parse_meta(line);
            meta_u = meta_u.or(a);
            meta_y = meta_y.or(b);
            meta_dt = meta_dt.or(c);
            continue;
        }
        let values = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Parse { path: path.to_path_buf(), line: lineno + 1, msg: e.to_string() })?;
        match width {
            None => width = Some(values.len()),
            Some(w) if w != values.len() => {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: lineno + 1,
                    msg: format!("expected {w} columns, found {}", values.len()),
                })
            }
            _ => {}
        }
        rows.push(values);
    }
    let n_u = n_u.or(meta_u).ok_or_else(|| Error::Dataset("number of input columns unknown".into()))?;
    let n_y = n_y.or(meta_y).ok_or_else(|| Error::Dataset("number of output columns unknown".into()))?;
    let dt = dt.or(meta_dt).unwrap_or(1.0);
    let width = width.ok_or_else(|| Error::Dataset(format!("{} contains no samples", path.display())))?;
    if width != n_u + n_y {
        return Err(Error::Dataset(format!(
            "expected {} columns ({n_u} inputs + {n_y} outputs), found {width}",
            n_u + n_y
        )));
    }
    let t = rows.len();
    let mut u = Vec::with_capacity(t * n_u);
    let mut y = Vec::with_capacity(t * n_y);
    for row in &rows {
        u.extend_from_slice(&row[..n_u]);
        y.extend_from_slice(&row[n_u..]);
    }
    TrajectoryDataset::new(Matrix::from_vec(t, n_u, u)?, Matrix::from_vec(t, n_y, y)?, dt)
}

/// Aerodynamic body measurements: 10 input columns then 5 output columns,
/// sampled every 0.02 s.
pub fn load_aero(path: &Path) -> Result<TrajectoryDataset> {
    read_dataset(path, Some(AERO_INPUTS), Some(AERO_OUTPUTS), Some(AERO_DT))
}
