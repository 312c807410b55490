//! Discrete-time leaky integrate-and-fire dynamics with hard reset and
//! per-neuron learnable membrane time constants.
//!
//! The recursion per neuron is
//!   V[t] = (1 - 1/tau) * V[t-1] * (1 - s[t-1]) + I[t]
//!   s[t] = H(V[t] - theta),      H(0) = 1
//! so a spike at t-1 annihilates the carried potential. The plain functions
//! here are tape-free (used by oracles and the spatial-only baseline); the
//! differentiable path is [`crate::numerics::Tape::lif_step`], and
//! [`lif_sequence_on_tape`] folds it over time.

use crate::numerics::{Scalar, Tape, Tensor, ValueId};
use crate::{DistaError, Result};
use std::cmp::Ordering;

/// Spike tensors and membrane potentials, one pair of entries per timestep.
pub type LifTrace<T> = (Vec<Tensor<T>>, Vec<Tensor<T>>);

/// Bounds every membrane time constant is projected into after an optimizer
/// step, keeping the decay factor (1 - 1/tau) inside (0, 1).
pub const TAU_MIN: f64 = 1.01;
pub const TAU_MAX: f64 = 100.0;
/// Initial value for every learnable time constant.
pub const TAU_INIT: f64 = 2.0;

/// Per-neuron membrane time constants for one LIF array: one entry per
/// (token, feature) neuron, broadcast over the batch.
#[derive(Clone, Debug)]
pub struct TauParams<T> {
    pub values: Tensor<T>,
    pub learnable: bool,
}

impl<T: Scalar> TauParams<T> {
    /// All-equal time constants over a tokens x features neuron grid.
    pub fn uniform(tokens: usize, features: usize, value: f64) -> Self {
        TauParams {
            values: Tensor::filled(&[tokens, features], T::from_f64(value)),
            learnable: true,
        }
    }

    pub fn tokens(&self) -> usize {
        self.values.rows()
    }

    pub fn features(&self) -> usize {
        self.values.cols()
    }
}

/// Fixed spiking hyperparameters of one LIF array.
#[derive(Clone, Debug)]
pub struct NeuronParams<T> {
    pub theta: T,
    pub tau: TauParams<T>,
    pub surrogate_width: T,
}

impl<T: Scalar> NeuronParams<T> {
    pub fn new(theta: T, tau: TauParams<T>, surrogate_width: T) -> Result<Self> {
        // `partial_cmp` keeps NaN out as well: it compares as incomparable.
        if theta.partial_cmp(&T::zero()) != Some(Ordering::Greater) {
            return Err(DistaError::ParamDomain(format!(
                "firing threshold {} must be positive",
                theta
            )));
        }
        if surrogate_width.partial_cmp(&T::zero()) != Some(Ordering::Greater) {
            return Err(DistaError::ParamDomain(format!(
                "surrogate width {} must be positive",
                surrogate_width
            )));
        }
        Ok(NeuronParams {
            theta,
            tau,
            surrogate_width,
        })
    }

    /// theta = 1, surrogate width = 1, tau uniform at [`TAU_INIT`].
    pub fn default_for(tokens: usize, features: usize) -> Self {
        NeuronParams {
            theta: T::one(),
            tau: TauParams::uniform(tokens, features, TAU_INIT),
            surrogate_width: T::one(),
        }
    }
}

/// Carried recurrent state of one LIF array: membrane potentials and the
/// previous step's spikes. Starts at all zeros.
#[derive(Clone, Debug)]
pub struct MembraneState<T> {
    pub v: Tensor<T>,
    pub s_prev: Tensor<T>,
}

impl<T: Scalar> MembraneState<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        MembraneState {
            v: Tensor::zeros(shape),
            s_prev: Tensor::zeros(shape),
        }
    }
}

/// Step function with the fire-at-threshold convention H(0) = 1.
pub fn heaviside<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v >= T::zero() { T::one() } else { T::zero() })
}

/// Backward-pass stand-in for the step function's distributional derivative:
/// a rectangular window of height 1/a on |v - theta| < a/2 (strict), zero
/// elsewhere. Its integral over v is exactly 1 for any a.
pub fn surrogate_pseudo_derivative<T: Scalar>(v: &Tensor<T>, theta: T, a: T) -> Tensor<T> {
    let half = a / (T::one() + T::one());
    v.map(|x| {
        if (x - theta).abs() < half {
            T::one() / a
        } else {
            T::zero()
        }
    })
}

fn check_tau_domain<T: Scalar>(tau: &Tensor<T>) -> Result<()> {
    for &tv in tau.data() {
        // `partial_cmp` keeps NaN out as well: it compares as incomparable.
        if tv.partial_cmp(&T::one()) != Some(Ordering::Greater) {
            return Err(DistaError::ParamDomain(format!(
                "membrane time constant {} <= 1",
                tv
            )));
        }
    }
    Ok(())
}

/// One LIF step (tape-free). `input_current` is (batch*tokens) x features;
/// tau is broadcast over the batch by token index. Returns the updated state
/// and the new spikes (also stored in the state as `s_prev`).
pub fn lif_step<T: Scalar>(
    state: &MembraneState<T>,
    input_current: &Tensor<T>,
    params: &NeuronParams<T>,
) -> Result<(MembraneState<T>, Tensor<T>)> {
    state.v.check_same_shape(input_current, "lif_step state")?;
    state
        .s_prev
        .check_same_shape(input_current, "lif_step spikes")?;
    if input_current.shape().len() != 2 {
        return Err(DistaError::Shape(format!(
            "lif_step input {:?}",
            input_current.shape()
        )));
    }
    let (rows, feats) = (input_current.rows(), input_current.cols());
    let tokens = params.tau.tokens();
    if params.tau.features() != feats || tokens == 0 || rows % tokens != 0 {
        return Err(DistaError::Shape(format!(
            "lif_step: input {:?} vs tau {:?}",
            input_current.shape(),
            params.tau.values.shape()
        )));
    }
    check_tau_domain(&params.tau.values)?;

    let one = T::one();
    let mut v_new = Tensor::zeros(input_current.shape());
    {
        let vp = state.v.data();
        let sp = state.s_prev.data();
        let iv = input_current.data();
        let tv = params.tau.values.data();
        let vd = v_new.data_mut();
        for r in 0..rows {
            let tbase = (r % tokens) * feats;
            let base = r * feats;
            for f in 0..feats {
                let decay = one - one / tv[tbase + f];
                vd[base + f] = decay * vp[base + f] * (one - sp[base + f]) + iv[base + f];
            }
        }
    }
    let spikes = v_new.map(|v| {
        if v - params.theta >= T::zero() {
            T::one()
        } else {
            T::zero()
        }
    });
    let next = MembraneState {
        v: v_new,
        s_prev: spikes.clone(),
    };
    Ok((next, spikes))
}

/// Fold [`lif_step`] over a time-major input sequence from the zero state.
/// Returns (spikes per step, membrane potentials per step).
pub fn lif_sequence<T: Scalar>(
    inputs: &[Tensor<T>],
    params: &NeuronParams<T>,
) -> Result<LifTrace<T>> {
    if inputs.is_empty() {
        return Err(DistaError::Contract("lif_sequence of no steps".into()));
    }
    let mut state = MembraneState::zeros(inputs[0].shape());
    let mut spikes = Vec::with_capacity(inputs.len());
    let mut potentials = Vec::with_capacity(inputs.len());
    for step in inputs {
        let (next, s) = lif_step(&state, step, params)?;
        potentials.push(next.v.clone());
        spikes.push(s);
        state = next;
    }
    Ok((spikes, potentials))
}

/// Differentiable counterpart of [`lif_sequence`]: folds the tape's LIF op
/// over time from zero-leaf state so BPTT reaches inputs and tau. Returns
/// per-step (membrane, spike) value ids.
pub fn lif_sequence_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    inputs: &[ValueId],
    tau: ValueId,
    theta: T,
    surrogate_width: T,
    tokens: usize,
) -> Result<Vec<(ValueId, ValueId)>> {
    if inputs.is_empty() {
        return Err(DistaError::Contract("lif_sequence of no steps".into()));
    }
    let shape = tape.value(inputs[0]).shape().to_vec();
    let mut v = tape.leaf(Tensor::zeros(&shape));
    let mut s = tape.leaf(Tensor::zeros(&shape));
    let mut out = Vec::with_capacity(inputs.len());
    for &i in inputs {
        let (v_new, s_new) = tape.lif_step(v, s, i, tau, theta, surrogate_width, tokens)?;
        out.push((v_new, s_new));
        v = v_new;
        s = s_new;
    }
    Ok(out)
}

/// Project every time constant into [[`TAU_MIN`], [`TAU_MAX`]] in place.
/// Called after each optimizer step.
pub fn clamp_tau<T: Scalar>(tau: &mut Tensor<T>) {
    let lo = T::from_f64(TAU_MIN);
    let hi = T::from_f64(TAU_MAX);
    for v in tau.data_mut() {
        if *v < lo {
            *v = lo;
        } else if *v > hi {
            *v = hi;
        }
    }
}
