//! Evaluation metrics and the time-indexed metrics log.
//!
//! All reported angle errors are in degrees: evaluation feeds normalized
//! features through the model and multiplies predictions back by the angle
//! scale before comparing with ground truth.

use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::model::{forward, mse_loss, rmse, MlpConfig, ModelError, ParameterVector};
use crate::streaming::Frame;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("empty evaluation set")]
    EmptyEvalSet,
    #[error("per-vehicle lengths differ: {values} values, {counts} counts")]
    LengthMismatch { values: usize, counts: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("i/o: {0}")]
    Io(String),
}

impl From<std::io::Error> for MetricsError {
    fn from(e: std::io::Error) -> Self {
        MetricsError::Io(e.to_string())
    }
}

/// Runs the model over every frame and de-normalizes the predictions back to
/// degrees.
pub fn predict_degrees(
    params: &ParameterVector,
    config: &MlpConfig,
    frames: &[Frame],
    angle_scale: f64,
) -> Result<Vec<f64>, MetricsError> {
    if frames.is_empty() {
        return Err(MetricsError::EmptyEvalSet);
    }
    let dim = config.input_dim();
    let mut inputs = Vec::with_capacity(frames.len() * dim);
    for frame in frames {
        for x in &frame.features {
            inputs.push(x / angle_scale);
        }
    }
    let preds = forward(params, config, &inputs)?;
    Ok(preds.into_iter().map(|p| p * angle_scale).collect())
}

/// RMSE in degrees of the model against the held-out frames.
pub fn eval_rmse(
    params: &ParameterVector,
    config: &MlpConfig,
    frames: &[Frame],
    angle_scale: f64,
) -> Result<f64, MetricsError> {
    let preds = predict_degrees(params, config, frames, angle_scale)?;
    let targets: Vec<f64> = frames.iter().map(|f| f.angle).collect();
    Ok(rmse(&preds, &targets)?)
}

/// Mean squared error in degrees over the held-out frames.
pub fn eval_mse(
    params: &ParameterVector,
    config: &MlpConfig,
    frames: &[Frame],
    angle_scale: f64,
) -> Result<f64, MetricsError> {
    let preds = predict_degrees(params, config, frames, angle_scale)?;
    let targets: Vec<f64> = frames.iter().map(|f| f.angle).collect();
    Ok(mse_loss(&preds, &targets)?)
}

/// Running sum of squared prediction errors across the evaluation stream;
/// element `i` accumulates every frame up to and including `i`.
pub fn accumulated_sq_error(
    params: &ParameterVector,
    config: &MlpConfig,
    frames: &[Frame],
    angle_scale: f64,
) -> Result<Vec<f64>, MetricsError> {
    let preds = predict_degrees(params, config, frames, angle_scale)?;
    let mut running = Vec::with_capacity(frames.len());
    let mut total = 0.0;
    for (pred, frame) in preds.iter().zip(frames) {
        let d = frame.angle - pred;
        total += d * d;
        running.push(total);
    }
    Ok(running)
}

/// Pooled RMSE across vehicles: the RMSE the concatenated evaluation sets
/// would produce, `sqrt(sum n_i * rmse_i^2 / sum n_i)`.
pub fn overall_rmse(
    per_vehicle_rmse: &[f64],
    per_vehicle_counts: &[usize],
) -> Result<f64, MetricsError> {
    if per_vehicle_rmse.len() != per_vehicle_counts.len() {
        return Err(MetricsError::LengthMismatch {
            values: per_vehicle_rmse.len(),
            counts: per_vehicle_counts.len(),
        });
    }
    if per_vehicle_rmse.is_empty() {
        return Err(MetricsError::EmptyEvalSet);
    }
    let mut weighted = 0.0;
    let mut total = 0usize;
    for (r, &n) in per_vehicle_rmse.iter().zip(per_vehicle_counts) {
        weighted += r * r * n as f64;
        total += n;
    }
    Ok((weighted / total as f64).sqrt())
}

/// Unweighted mean of the per-vehicle RMSEs, reported alongside the pooled
/// definition.
pub fn mean_rmse(per_vehicle_rmse: &[f64]) -> Result<f64, MetricsError> {
    if per_vehicle_rmse.is_empty() {
        return Err(MetricsError::EmptyEvalSet);
    }
    Ok(per_vehicle_rmse.iter().sum::<f64>() / per_vehicle_rmse.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    Client(u64),
    Overall,
}

impl Scope {
    fn sort_key(&self) -> (u8, u64) {
        match self {
            Scope::Client(id) => (0, *id),
            Scope::Overall => (1, 0),
        }
    }

    pub fn label(&self) -> String {
        match self {
            Scope::Client(id) => format!("client_{id}"),
            Scope::Overall => "overall".to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricKind {
    Rmse,
    AccSqErr,
    EpochsDone,
}

impl MetricKind {
    pub fn label(&self) -> &'static str {
        match self {
            MetricKind::Rmse => "rmse",
            MetricKind::AccSqErr => "acc_sq_err",
            MetricKind::EpochsDone => "epochs_done",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub time_s: f64,
    pub scope: Scope,
    pub metric: MetricKind,
    pub value: f64,
}

/// Append-only log of time-indexed metric observations.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsLog {
    rows: Vec<MetricRow>,
}

impl MetricsLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, time_s: f64, scope: Scope, metric: MetricKind, value: f64) {
        self.rows.push(MetricRow {
            time_s,
            scope,
            metric,
            value,
        });
    }

    pub fn rows(&self) -> &[MetricRow] {
        &self.rows
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Rows sorted the way the CSV is emitted: by scope, then metric, then
    /// time (append order breaking exact ties).
    pub fn sorted_rows(&self) -> Vec<&MetricRow> {
        let mut indexed: Vec<(usize, &MetricRow)> = self.rows.iter().enumerate().collect();
        indexed.sort_by(|(ia, a), (ib, b)| {
            a.scope
                .sort_key()
                .cmp(&b.scope.sort_key())
                .then_with(|| a.metric.label().cmp(b.metric.label()))
                .then_with(|| a.time_s.total_cmp(&b.time_s))
                .then_with(|| ia.cmp(ib))
        });
        indexed.into_iter().map(|(_, r)| r).collect()
    }
}

/// Writes the log as `sim_time_s,scope,metric,value` with 17-significant-digit
/// floats, rows ordered by (scope, metric, time).
pub fn write_metrics_csv(log: &MetricsLog, path: impl AsRef<Path>) -> Result<(), MetricsError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path.as_ref())?);
    writeln!(out, "sim_time_s,scope,metric,value")?;
    for row in log.sorted_rows() {
        writeln!(
            out,
            "{:.16e},{},{},{:.16e}",
            row.time_s,
            row.scope.label(),
            row.metric.label(),
            row.value
        )?;
    }
    Ok(())
}
