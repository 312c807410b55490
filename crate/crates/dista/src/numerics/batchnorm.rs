//! Batch normalization over the channel (last) axis of a rows x channels
//! matrix. Train mode uses population statistics of the current rows;
//! inference uses stored running statistics. One canonical arithmetic
//! sequence is shared by the plain op, the tape op, and the reference
//! implementations, so all three are bit-identical on identical inputs.

use super::tensor::Tensor;
use super::Scalar;
use crate::{DistaError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Infer,
}

/// Affine parameters plus running statistics for one normalization layer.
#[derive(Clone, Debug)]
pub struct BatchNormState<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub momentum: T,
    pub eps: T,
}

impl<T: Scalar> BatchNormState<T> {
    /// Fresh state: gamma 1, beta 0, running stats (0, 1).
    pub fn new(channels: usize, momentum: f64, eps: f64) -> Self {
        BatchNormState {
            gamma: Tensor::filled(&[channels], T::one()),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::filled(&[channels], T::one()),
            momentum: T::from_f64(momentum),
            eps: T::from_f64(eps),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// running <- (1 - momentum) * running + momentum * batch, both stats.
    pub fn update_running(&mut self, batch_mean: &[T], batch_var: &[T]) {
        ema_update(self.running_mean.data_mut(), batch_mean, self.momentum);
        ema_update(self.running_var.data_mut(), batch_var, self.momentum);
    }
}

/// Default batchnorm epsilon used by every normalization stage in the model.
pub const BN_EPS: f64 = 1e-5;
/// Default running-statistics momentum.
pub const BN_MOMENTUM: f64 = 0.1;

/// Exponential-moving-average fold shared by every running-statistics holder:
/// running <- (1 - momentum) * running + momentum * batch.
pub fn ema_update<T: Scalar>(running: &mut [T], batch: &[T], momentum: T) {
    let keep = T::one() - momentum;
    for (r, &b) in running.iter_mut().zip(batch) {
        *r = keep * *r + momentum * b;
    }
}

/// Inference statistics for a batchnorm whose gamma/beta live in a parameter
/// registry rather than here. Mean starts at 0, variance at 1.
#[derive(Clone, Debug)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub momentum: T,
    pub eps: T,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(channels: usize, momentum: f64, eps: f64) -> Self {
        RunningStats {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
            momentum: T::from_f64(momentum),
            eps: T::from_f64(eps),
        }
    }

    pub fn update(&mut self, batch_mean: &[T], batch_var: &[T]) {
        ema_update(&mut self.mean, batch_mean, self.momentum);
        ema_update(&mut self.var, batch_var, self.momentum);
    }
}

fn check_input<T: Scalar>(x: &Tensor<T>, channels: usize) -> Result<()> {
    if x.shape().len() != 2 {
        return Err(DistaError::Shape(format!(
            "batchnorm input must be 2-D, got {:?}",
            x.shape()
        )));
    }
    if x.cols() != channels {
        return Err(DistaError::Shape(format!(
            "batchnorm: input has {} channels, state has {}",
            x.cols(),
            channels
        )));
    }
    Ok(())
}

/// Per-channel mean and population variance (divide by row count), summed in
/// ascending row order. Errors if fewer than two rows.
pub fn channel_stats<T: Scalar>(x: &Tensor<T>) -> Result<(Vec<T>, Vec<T>)> {
    let (n, c) = (x.rows(), x.cols());
    if n < 2 {
        return Err(DistaError::DegenerateBatch(format!(
            "batch statistics need >= 2 rows, got {}",
            n
        )));
    }
    let inv_n = T::one() / T::from_f64(n as f64);
    let mut mean = vec![T::zero(); c];
    for i in 0..n {
        for (m, &v) in mean.iter_mut().zip(x.row(i)) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m *= inv_n;
    }
    let mut var = vec![T::zero(); c];
    for i in 0..n {
        for ((vv, &v), &m) in var.iter_mut().zip(x.row(i)).zip(&mean) {
            let d = v - m;
            *vv += d * d;
        }
    }
    for vv in var.iter_mut() {
        *vv *= inv_n;
    }
    Ok((mean, var))
}

/// inv_std[c] = 1 / sqrt(var[c] + eps) — the canonical rounding sequence.
pub fn inv_std_from_var<T: Scalar>(var: &[T], eps: T) -> Vec<T> {
    var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect()
}

/// y = ((x - mean) * inv_std) * gamma + beta, evaluated in exactly that order.
pub fn normalize<T: Scalar>(
    x: &Tensor<T>,
    mean: &[T],
    inv_std: &[T],
    gamma: &[T],
    beta: &[T],
) -> Tensor<T> {
    let (n, c) = (x.rows(), x.cols());
    let mut out = Tensor::zeros(&[n, c]);
    for i in 0..n {
        let xr = x.row(i);
        let or = out.row_mut(i);
        for j in 0..c {
            or[j] = ((xr[j] - mean[j]) * inv_std[j]) * gamma[j] + beta[j];
        }
    }
    out
}

/// Module-level batchnorm. Train mode normalizes with the batch statistics
/// and folds them into the running statistics; inference is a pure pointwise
/// map using the stored statistics.
pub fn batchnorm<T: Scalar>(
    x: &Tensor<T>,
    state: &mut BatchNormState<T>,
    mode: BnMode,
) -> Result<Tensor<T>> {
    check_input(x, state.channels())?;
    match mode {
        BnMode::Train => {
            let (mean, var) = channel_stats(x)?;
            let inv = inv_std_from_var(&var, state.eps);
            let out = normalize(x, &mean, &inv, state.gamma.data(), state.beta.data());
            state.update_running(&mean, &var);
            Ok(out)
        }
        BnMode::Infer => {
            let inv = inv_std_from_var(state.running_var.data(), state.eps);
            Ok(normalize(
                x,
                state.running_mean.data(),
                &inv,
                state.gamma.data(),
                state.beta.data(),
            ))
        }
    }
}
