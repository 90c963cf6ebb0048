use std::io::Write;

use super::BlockSsm;
use crate::diffcore::Matrix;
use crate::error::{Error, Result};
use crate::systems::{TrajectoryDataset, WindowBatch};

/// Windows simulated together when scoring `N`-step predictions.
const EVAL_CHUNK: usize = 512;

/// Free-running simulation of one whole split.
#[derive(Clone, Debug)]
pub struct OpenLoop {
    pub mse: f64,
    pub per_output_mse: Vec<f64>,
    /// Predictions for samples `N_p..T` of the split, one row per sample.
    pub predictions: Matrix,
    pub targets: Matrix,
}

/// Estimates the initial state from the first `N_p` outputs of `data`, then
/// simulates the rest of the split from the measured inputs alone.
pub fn open_loop_eval(model: &BlockSsm, data: &TrajectoryDataset) -> Result<OpenLoop> {
    let n_p = model.config().n_p;
    if data.len() <= n_p {
        return Err(Error::Dataset(format!("open-loop evaluation needs more than {n_p} samples")));
    }
    if data.n_u() != model.config().n_u || data.n_y() != model.config().n_y {
        return Err(Error::Shape("dataset channel counts do not match the model".into()));
    }
    let history: Vec<Matrix> = (0..n_p).map(|k| Matrix::row(data.y.row_slice(k))).collect();
    let inputs: Vec<Matrix> = (n_p - 1..data.len() - 1).map(|t| Matrix::row(data.u.row_slice(t))).collect();
    let sim = model.simulate(&history, &inputs)?;

    let n_y = data.n_y();
    let steps = inputs.len();
    let mut predictions = Matrix::zeros(steps, n_y);
    let mut per_output = vec![0.0; n_y];
    for (j, p) in sim.predictions.iter().enumerate() {
        for c in 0..n_y {
            let v = p.get(0, c);
            predictions.set(j, c, v);
            let e = v - data.y.get(n_p + j, c);
            per_output[c] += e * e;
        }
    }
    per_output.iter_mut().for_each(|s| *s /= steps as f64);
    let mse = per_output.iter().sum::<f64>() / n_y as f64;
    let targets = data.y.select_rows(&(n_p..data.len()).collect::<Vec<_>>());
    Ok(OpenLoop { mse, per_output_mse: per_output, predictions, targets })
}

/// Mean squared `N`-step prediction error over every window.
pub fn n_step_mse(model: &BlockSsm, windows: &WindowBatch) -> Result<f64> {
    if windows.is_empty() {
        return Err(Error::Dataset("no windows to evaluate".into()));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    let rows: Vec<usize> = (0..windows.len()).collect();
    for chunk in rows.chunks(EVAL_CHUNK) {
        let part = windows.select(chunk);
        let sim = model.simulate(&part.histories, &part.inputs)?;
        for (p, t) in sim.predictions.iter().zip(&part.targets) {
            sum += p.sub(t)?.as_slice().iter().map(|e| e * e).sum::<f64>();
            count += p.len();
        }
    }
    Ok(sum / count as f64)
}

/// Writes `t, y_true_*, y_pred_*` rows for an open-loop trace.
pub fn write_trace_csv<W: Write>(mut out: W, trace: &OpenLoop, first_sample: usize) -> Result<()> {
    let n_y = trace.targets.cols();
    let mut header = vec!["t".to_string()];
    header.extend((0..n_y).map(|c| format!("y_true_{c}")));
    header.extend((0..n_y).map(|c| format!("y_pred_{c}")));
    writeln!(out, "{}", header.join(","))?;
    for r in 0..trace.targets.rows() {
        let mut line = (first_sample + r).to_string();
        for v in trace.targets.row_slice(r).iter().chain(trace.predictions.row_slice(r)) {
            line.push(',');
            line.push_str(&v.to_string());
        }
        writeln!(out, "{line}")?;
    }
    Ok(())
}
