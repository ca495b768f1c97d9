//! Feedforward regression network with analytic backpropagation and Adam.
//!
//! The network is a plain fully-connected MLP over `f64` with ReLU or ELU
//! hidden activations and a linear scalar output. The rest of the system
//! only ever sees the weights as a flat [`ParameterVector`], which is what
//! travels between clients and the aggregation server.
//!
//! All functions here are pure over their explicit inputs: same arguments,
//! bit-identical results, on any thread.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Row count above which batched passes switch to the rayon path.
///
/// The parallel path produces bit-identical results to the sequential one
/// (per-row work is independent and reductions run in row order), so this
/// is a pure throughput knob.
#[cfg(feature = "parallel")]
const PAR_MIN_ROWS: usize = 256;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("empty input")]
    EmptyInput,
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
}

/// Hidden-layer activation function.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Elu,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    z
                } else {
                    0.0
                }
            }
            Activation::Elu => {
                if z > 0.0 {
                    z
                } else {
                    z.exp() - 1.0
                }
            }
        }
    }

    /// Derivative, recovered from the activation output itself.
    ///
    /// For ReLU `a > 0` iff `z > 0`; for ELU `a = e^z - 1` on the negative
    /// branch, so `da/dz = a + 1` there.
    #[inline]
    fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Elu => {
                if a > 0.0 {
                    1.0
                } else {
                    a + 1.0
                }
            }
        }
    }
}

/// Network shape plus the seed that makes weight initialization reproducible.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlpConfig {
    /// Layer widths from input dimension to output dimension. The output
    /// width must be 1 (scalar angle regression).
    pub layer_sizes: Vec<usize>,
    pub hidden_activation: Activation,
    pub seed: u64,
}

impl MlpConfig {
    pub fn new(
        layer_sizes: Vec<usize>,
        hidden_activation: Activation,
        seed: u64,
    ) -> Result<Self, ModelError> {
        let config = Self {
            layer_sizes,
            hidden_activation,
            seed,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.layer_sizes.len() < 2 {
            return Err(ModelError::InvalidConfig(
                "layer_sizes needs at least input and output".into(),
            ));
        }
        if self.layer_sizes.iter().any(|&n| n == 0) {
            return Err(ModelError::InvalidConfig(
                "every layer size must be >= 1".into(),
            ));
        }
        if *self.layer_sizes.last().unwrap() != 1 {
            return Err(ModelError::InvalidConfig(
                "output layer size must be 1".into(),
            ));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    /// Total number of trainable weights: per layer `(in + 1) * out`.
    pub fn parameter_count(&self) -> usize {
        self.layer_sizes
            .windows(2)
            .map(|w| (w[0] + 1) * w[1])
            .sum()
    }

    fn layer_count(&self) -> usize {
        self.layer_sizes.len() - 1
    }
}

/// Flat vector of all trainable weights.
///
/// Layout per layer: weights row-major `(out, in)`, then the `out` biases.
/// The length is fixed at creation and entries must stay finite; training
/// steps enforce both.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterVector {
    values: Vec<f64>,
}

impl ParameterVector {
    pub fn from_values(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn zeros(len: usize) -> Self {
        Self {
            values: vec![0.0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn check_finite(&self) -> Result<(), ModelError> {
        if self.values.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(ModelError::NonFinite("parameters"))
        }
    }
}

/// Adam optimizer state: first/second moment estimates plus the step count
/// used for bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    step_count: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub learning_rate: f64,
}

/// Default Adam hyperparameters for this workload.
pub const DEFAULT_BETA1: f64 = 0.6;
pub const DEFAULT_BETA2: f64 = 0.99;
pub const DEFAULT_EPSILON: f64 = 1e-8;
pub const DEFAULT_LEARNING_RATE: f64 = 1e-5;

impl AdamState {
    pub fn new(param_len: usize) -> Self {
        Self::with_hyper(
            param_len,
            DEFAULT_LEARNING_RATE,
            DEFAULT_BETA1,
            DEFAULT_BETA2,
            DEFAULT_EPSILON,
        )
    }

    pub fn with_hyper(
        param_len: usize,
        learning_rate: f64,
        beta1: f64,
        beta2: f64,
        epsilon: f64,
    ) -> Self {
        Self {
            m: vec![0.0; param_len],
            v: vec![0.0; param_len],
            step_count: 0,
            beta1,
            beta2,
            epsilon,
            learning_rate,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }
}

/// One mini-batch: row-major inputs `(n, input_dim)` and one target per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    inputs: Vec<f64>,
    targets: Vec<f64>,
    input_dim: usize,
}

impl Batch {
    pub fn new(inputs: Vec<f64>, targets: Vec<f64>, input_dim: usize) -> Result<Self, ModelError> {
        if targets.is_empty() {
            return Err(ModelError::EmptyInput);
        }
        if input_dim == 0 || inputs.len() != targets.len() * input_dim {
            return Err(ModelError::DimensionMismatch {
                expected: targets.len() * input_dim,
                got: inputs.len(),
            });
        }
        Ok(Self {
            inputs,
            targets,
            input_dim,
        })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn inputs(&self) -> &[f64] {
        &self.inputs
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.input_dim..(i + 1) * self.input_dim]
    }
}

/// Glorot-uniform weight initialization, biases zero, deterministic from
/// `config.seed`.
pub fn init_params(config: &MlpConfig) -> Result<ParameterVector, ModelError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut values = Vec::with_capacity(config.parameter_count());
    for w in config.layer_sizes.windows(2) {
        let (fan_in, fan_out) = (w[0], w[1]);
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        for _ in 0..fan_in * fan_out {
            values.push(rng.random_range(-limit..limit));
        }
        // biases
        values.extend(std::iter::repeat(0.0).take(fan_out));
    }
    Ok(ParameterVector::from_values(values))
}

fn check_param_len(params: &ParameterVector, config: &MlpConfig) -> Result<(), ModelError> {
    let expected = config.parameter_count();
    if params.len() != expected {
        return Err(ModelError::DimensionMismatch {
            expected,
            got: params.len(),
        });
    }
    Ok(())
}

/// Forward pass for one input row. `acts` receives the activation vectors of
/// every layer (input first, prediction last) for use by backprop.
fn forward_row_with_acts(
    params: &[f64],
    config: &MlpConfig,
    row: &[f64],
    acts: &mut Vec<Vec<f64>>,
) -> f64 {
    acts.clear();
    acts.push(row.to_vec());
    let n_layers = config.layer_count();
    let mut offset = 0usize;
    for (l, w) in config.layer_sizes.windows(2).enumerate() {
        let (n_in, n_out) = (w[0], w[1]);
        let weights = &params[offset..offset + n_in * n_out];
        let biases = &params[offset + n_in * n_out..offset + (n_in + 1) * n_out];
        offset += (n_in + 1) * n_out;

        let prev = acts.last().unwrap();
        let mut next = Vec::with_capacity(n_out);
        for o in 0..n_out {
            let mut z = biases[o];
            let row_w = &weights[o * n_in..(o + 1) * n_in];
            for (wi, xi) in row_w.iter().zip(prev.iter()) {
                z += wi * xi;
            }
            if l + 1 < n_layers {
                next.push(config.hidden_activation.apply(z));
            } else {
                next.push(z);
            }
        }
        acts.push(next);
    }
    acts.last().unwrap()[0]
}

fn check_inputs(config: &MlpConfig, inputs: &[f64]) -> Result<usize, ModelError> {
    let dim = config.input_dim();
    if inputs.len() % dim != 0 {
        return Err(ModelError::DimensionMismatch {
            expected: dim,
            got: inputs.len() % dim,
        });
    }
    Ok(inputs.len() / dim)
}

/// Sequential forward pass over row-major `inputs`, one prediction per row.
pub fn forward_seq(
    params: &ParameterVector,
    config: &MlpConfig,
    inputs: &[f64],
) -> Result<Vec<f64>, ModelError> {
    check_param_len(params, config)?;
    let n_rows = check_inputs(config, inputs)?;
    let dim = config.input_dim();
    let mut scratch = Vec::new();
    let mut out = Vec::with_capacity(n_rows);
    for r in 0..n_rows {
        out.push(forward_row_with_acts(
            params.as_slice(),
            config,
            &inputs[r * dim..(r + 1) * dim],
            &mut scratch,
        ));
    }
    Ok(out)
}

/// Rayon forward pass; bit-identical to [`forward_seq`].
#[cfg(feature = "parallel")]
pub fn forward_par(
    params: &ParameterVector,
    config: &MlpConfig,
    inputs: &[f64],
) -> Result<Vec<f64>, ModelError> {
    check_param_len(params, config)?;
    check_inputs(config, inputs)?;
    let dim = config.input_dim();
    Ok(inputs
        .par_chunks(dim)
        .map(|row| {
            let mut scratch = Vec::new();
            forward_row_with_acts(params.as_slice(), config, row, &mut scratch)
        })
        .collect())
}

/// Batched forward pass: one prediction per input row.
pub fn forward(
    params: &ParameterVector,
    config: &MlpConfig,
    inputs: &[f64],
) -> Result<Vec<f64>, ModelError> {
    #[cfg(feature = "parallel")]
    {
        if inputs.len() / config.input_dim().max(1) >= PAR_MIN_ROWS {
            return forward_par(params, config, inputs);
        }
    }
    forward_seq(params, config, inputs)
}

/// Mean squared error `(1/N) * sum (target - pred)^2`.
pub fn mse_loss(predictions: &[f64], targets: &[f64]) -> Result<f64, ModelError> {
    if predictions.is_empty() {
        return Err(ModelError::EmptyInput);
    }
    if predictions.len() != targets.len() {
        return Err(ModelError::DimensionMismatch {
            expected: targets.len(),
            got: predictions.len(),
        });
    }
    let mut sum = 0.0;
    for (p, t) in predictions.iter().zip(targets.iter()) {
        let d = t - p;
        sum += d * d;
    }
    Ok(sum / predictions.len() as f64)
}

/// Root mean squared error, `sqrt(mse_loss)`.
pub fn rmse(predictions: &[f64], targets: &[f64]) -> Result<f64, ModelError> {
    Ok(mse_loss(predictions, targets)?.sqrt())
}

/// Gradient of the per-sample squared error for one row, accumulated into
/// `accum` (which has full parameter length).
fn accumulate_row_gradient(
    params: &[f64],
    config: &MlpConfig,
    row: &[f64],
    target: f64,
    acts: &mut Vec<Vec<f64>>,
    accum: &mut [f64],
) {
    let pred = forward_row_with_acts(params, config, row, acts);

    let n_layers = config.layer_count();
    // delta of the linear output of the current layer, walking backwards
    let mut delta = vec![2.0 * (pred - target)];

    // per-layer parameter offsets
    let mut offsets = Vec::with_capacity(n_layers);
    let mut off = 0usize;
    for w in config.layer_sizes.windows(2) {
        offsets.push(off);
        off += (w[0] + 1) * w[1];
    }

    for l in (0..n_layers).rev() {
        let n_in = config.layer_sizes[l];
        let n_out = config.layer_sizes[l + 1];
        let offset = offsets[l];
        let prev_act = &acts[l];

        for o in 0..n_out {
            let d = delta[o];
            let w_row = &mut accum[offset + o * n_in..offset + (o + 1) * n_in];
            for (g, a) in w_row.iter_mut().zip(prev_act.iter()) {
                *g += d * a;
            }
            accum[offset + n_in * n_out + o] += d;
        }

        if l > 0 {
            let weights = &params[offset..offset + n_in * n_out];
            let mut prev_delta = vec![0.0; n_in];
            for o in 0..n_out {
                let d = delta[o];
                for (pd, w) in prev_delta.iter_mut().zip(&weights[o * n_in..(o + 1) * n_in]) {
                    *pd += w * d;
                }
            }
            for (pd, a) in prev_delta.iter_mut().zip(acts[l].iter()) {
                *pd *= config.hidden_activation.derivative_from_output(*a);
            }
            delta = prev_delta;
        }
    }
}

/// Analytic gradient of `mse_loss(forward(params, batch), batch.targets)`
/// with respect to every parameter, sequential row accumulation.
pub fn backward_seq(
    params: &ParameterVector,
    config: &MlpConfig,
    batch: &Batch,
) -> Result<Vec<f64>, ModelError> {
    check_param_len(params, config)?;
    if batch.input_dim() != config.input_dim() {
        return Err(ModelError::DimensionMismatch {
            expected: config.input_dim(),
            got: batch.input_dim(),
        });
    }
    let mut accum = vec![0.0; params.len()];
    let mut acts = Vec::new();
    for r in 0..batch.len() {
        accumulate_row_gradient(
            params.as_slice(),
            config,
            batch.row(r),
            batch.targets()[r],
            &mut acts,
            &mut accum,
        );
    }
    let inv_n = 1.0 / batch.len() as f64;
    for g in &mut accum {
        *g *= inv_n;
    }
    Ok(accum)
}

/// Rayon gradient: per-row gradients in parallel, reduced in row order so the
/// result is bit-identical to [`backward_seq`].
#[cfg(feature = "parallel")]
pub fn backward_par(
    params: &ParameterVector,
    config: &MlpConfig,
    batch: &Batch,
) -> Result<Vec<f64>, ModelError> {
    check_param_len(params, config)?;
    if batch.input_dim() != config.input_dim() {
        return Err(ModelError::DimensionMismatch {
            expected: config.input_dim(),
            got: batch.input_dim(),
        });
    }
    let row_grads: Vec<Vec<f64>> = (0..batch.len())
        .into_par_iter()
        .map(|r| {
            let mut grad = vec![0.0; params.len()];
            let mut acts = Vec::new();
            accumulate_row_gradient(
                params.as_slice(),
                config,
                batch.row(r),
                batch.targets()[r],
                &mut acts,
                &mut grad,
            );
            grad
        })
        .collect();

    let mut accum = vec![0.0; params.len()];
    for grad in &row_grads {
        for (a, g) in accum.iter_mut().zip(grad.iter()) {
            *a += g;
        }
    }
    let inv_n = 1.0 / batch.len() as f64;
    for g in &mut accum {
        *g *= inv_n;
    }
    Ok(accum)
}

/// Gradient of the batch MSE loss with respect to the parameters.
pub fn backward(
    params: &ParameterVector,
    config: &MlpConfig,
    batch: &Batch,
) -> Result<Vec<f64>, ModelError> {
    #[cfg(feature = "parallel")]
    {
        if batch.len() >= PAR_MIN_ROWS {
            return backward_par(params, config, batch);
        }
    }
    backward_seq(params, config, batch)
}

/// One Adam update with bias correction. Advances `state`, moves `params`.
pub fn adam_step(
    params: &mut ParameterVector,
    gradient: &[f64],
    state: &mut AdamState,
) -> Result<(), ModelError> {
    if gradient.len() != params.len() {
        return Err(ModelError::DimensionMismatch {
            expected: params.len(),
            got: gradient.len(),
        });
    }
    if gradient.iter().any(|g| !g.is_finite()) {
        return Err(ModelError::NonFinite("gradient"));
    }

    state.step_count += 1;
    let t = state.step_count as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);

    let values = params.as_mut_slice();
    for i in 0..gradient.len() {
        let g = gradient[i];
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        values[i] -= state.learning_rate * m_hat / (v_hat.sqrt() + state.epsilon);
    }

    params.check_finite()
}
