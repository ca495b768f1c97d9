//! The mini-batch training loop shared by every method.
//!
//! Async FL, synchronous FedAvg, centralized, and local-only training all
//! step through this exact loop, so measured differences between methods are
//! attributable to the aggregation protocol and not to training plumbing.
//!
//! Angles (and the angle-valued features) are divided by `angle_scale`
//! before they reach the model, mirroring the usual input normalization to
//! `[-1, 1]`; metric reporting multiplies predictions back into degrees.

use thiserror::Error;

use crate::model::{adam_step, backward, mse_loss, AdamState, Batch, MlpConfig, ParameterVector};
use crate::streaming::{make_batches, StreamError, TrainingWindow};

#[derive(Debug, Error, PartialEq)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Stream(#[from] StreamError),
    #[error("angle scale must be positive, got {0}")]
    BadScale(f64),
}

/// Hyperparameters of the shared loop. `shuffle_seed` is a per-client base;
/// epoch `i` (counted across the client's whole life) shuffles with
/// `shuffle_seed + i`, so trajectories are reproducible and method-independent.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainHyper {
    pub batch_size: usize,
    pub angle_scale: f64,
    pub shuffle_seed: u64,
}

pub const DEFAULT_BATCH_SIZE: usize = 16;
pub const DEFAULT_ANGLE_SCALE: f64 = 100.0;

impl TrainHyper {
    pub fn new(batch_size: usize, angle_scale: f64, shuffle_seed: u64) -> Result<Self, TrainError> {
        if angle_scale <= 0.0 || !angle_scale.is_finite() {
            return Err(TrainError::BadScale(angle_scale));
        }
        if batch_size == 0 {
            return Err(TrainError::Stream(StreamError::BadBatchSize));
        }
        Ok(Self {
            batch_size,
            angle_scale,
            shuffle_seed,
        })
    }
}

/// Divides inputs and targets by `scale`, mapping degree-valued data into
/// the model's normalized domain.
pub fn scale_batch(batch: &Batch, scale: f64) -> Batch {
    let inputs = batch.inputs().iter().map(|x| x / scale).collect();
    let targets = batch.targets().iter().map(|x| x / scale).collect();
    Batch::new(inputs, targets, batch.input_dim()).expect("scaling preserves shape")
}

/// Runs `epochs` epochs of mini-batch Adam over the training window,
/// advancing `params` and `optimizer` in place.
///
/// `epochs_done` is how many epochs this client has completed before the
/// call; it offsets the per-epoch shuffle seeds. Returns the mean pre-update
/// batch loss of each epoch (in normalized units).
pub fn train_epochs(
    params: &mut ParameterVector,
    optimizer: &mut AdamState,
    config: &MlpConfig,
    window: &TrainingWindow,
    hyper: &TrainHyper,
    epochs: u32,
    epochs_done: u64,
) -> Result<Vec<f64>, TrainError> {
    let mut epoch_losses = Vec::with_capacity(epochs as usize);
    for e in 0..epochs as u64 {
        let seed = hyper.shuffle_seed.wrapping_add(epochs_done + e);
        let batches = make_batches(window, hyper.batch_size, seed)?;
        let mut loss_sum = 0.0;
        for batch in &batches {
            let scaled = scale_batch(batch, hyper.angle_scale);
            let grad = backward(params, config, &scaled)?;
            let preds = crate::model::forward(params, config, scaled.inputs())?;
            loss_sum += mse_loss(&preds, scaled.targets())?;
            adam_step(params, &grad, optimizer)?;
        }
        epoch_losses.push(loss_sum / batches.len() as f64);
    }
    Ok(epoch_losses)
}

/// Number of mini-batches one epoch over the window produces.
pub fn batches_per_epoch(window_len: usize, batch_size: usize) -> usize {
    window_len.div_ceil(batch_size)
}
