//! Spiking self-attention with a temporal attention window (TAW), attention
//! denoising, and multi-head composition.
//!
//! Per timestep t the layer builds three input currents from the last
//! `taw_size` spike frames,
//!   I_path[t] = sum_{m=0}^{min(taw_size, t+1)-1} s[t-m] * W_path^(m),
//! feeds each through its own LIF array to get binary Q, K, V, forms the
//! per-head integer attention map A = Q K^T, optionally zeroes entries below
//! the denoise threshold, applies A to V, and re-binarizes through a shared
//! Linear + BatchNorm + LIF output stage. Offset m = 0 is the current step;
//! terms that would reach before t = 0 are dropped, so the layer is strictly
//! causal.

use crate::neuron::TAU_INIT;
use crate::numerics::{
    ParamId, ParamKind, ParamSet, RunningStats, Scalar, Tape, Tensor, ValueId, BN_EPS, BN_MOMENTUM,
};
use crate::{DistaError, Result};
use rand::Rng;

/// Hyperparameters of one attention layer.
#[derive(Clone, Copy, Debug)]
pub struct AttentionConfig {
    /// How many trailing timesteps feed each input current (1 = current step
    /// only, i.e. purely spatial attention).
    pub taw_size: usize,
    /// Attention-map entries strictly below this are zeroed when denoising
    /// is enabled.
    pub denoise_threshold: f64,
    pub adn_enabled: bool,
    pub heads: usize,
    pub head_dim: usize,
    /// Multiplier on A*V before the output linear stage.
    pub attn_scale: f64,
}

impl AttentionConfig {
    pub fn d_model(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn validate(&self, timesteps: usize) -> Result<()> {
        if self.taw_size < 1 {
            return Err(DistaError::Config("taw_size must be at least 1".into()));
        }
        if self.taw_size > timesteps {
            return Err(DistaError::Config(format!(
                "taw_size {} exceeds {} timesteps",
                self.taw_size, timesteps
            )));
        }
        if self.heads == 0 || self.head_dim == 0 {
            return Err(DistaError::Config(
                "heads and head_dim must be positive".into(),
            ));
        }
        if self.denoise_threshold < 0.0 {
            return Err(DistaError::Config(format!(
                "denoise threshold {} < 0",
                self.denoise_threshold
            )));
        }
        if !(self.attn_scale.is_finite() && self.attn_scale > 0.0) {
            return Err(DistaError::Config(format!(
                "attn_scale {} must be positive and finite",
                self.attn_scale
            )));
        }
        Ok(())
    }
}

/// Standard deviation for TAW matrix initialization: the taw_size matrices
/// sum into one current, so variance is split across D * taw_size fan-in.
pub fn taw_init_std(d_model: usize, taw_size: usize) -> f64 {
    (2.0 / (d_model * taw_size) as f64).sqrt()
}

/// The temporal-window weight stacks for the three attention paths.
#[derive(Clone, Debug)]
pub struct TawWeights<T> {
    pub q: Vec<Tensor<T>>,
    pub k: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> TawWeights<T> {
    /// Gaussian init, one D x D matrix per time offset per path.
    pub fn init<R: Rng>(d_model: usize, taw_size: usize, rng: &mut R) -> Self {
        let std = taw_init_std(d_model, taw_size);
        let path = |rng: &mut R| -> Vec<Tensor<T>> {
            (0..taw_size)
                .map(|_| Tensor::randn(&[d_model, d_model], std, rng))
                .collect()
        };
        let q = path(rng);
        let k = path(rng);
        let v = path(rng);
        TawWeights { q, k, v }
    }

    pub fn validate(&self, d_model: usize) -> Result<()> {
        let taw = self.q.len();
        if taw == 0 {
            return Err(DistaError::Config("taw weight stack is empty".into()));
        }
        for path in [&self.q, &self.k, &self.v] {
            if path.len() != taw {
                return Err(DistaError::Config(format!(
                    "taw paths disagree on window size: {} vs {}",
                    path.len(),
                    taw
                )));
            }
            for w in path {
                if w.shape() != [d_model, d_model] {
                    return Err(DistaError::Shape(format!(
                        "taw matrix {:?}, want [{d_model}, {d_model}]",
                        w.shape()
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Windowed input current at step t (tape-free): sums s[t-m] * W^(m) over the
/// available offsets. `history` is the full time-major spike list; the window
/// size is `per_offset.len()`.
pub fn taw_input<T: Scalar>(
    history: &[Tensor<T>],
    per_offset: &[Tensor<T>],
    t: usize,
) -> Result<Tensor<T>> {
    if per_offset.is_empty() {
        return Err(DistaError::Config("taw window must hold >= 1 matrix".into()));
    }
    if t >= history.len() {
        return Err(DistaError::Contract(format!(
            "taw_input at step {} of a {}-step history",
            t,
            history.len()
        )));
    }
    let terms = per_offset.len().min(t + 1);
    let mut acc: Option<Tensor<T>> = None;
    for m in 0..terms {
        let term = crate::numerics::matmul(&history[t - m], &per_offset[m])?;
        acc = Some(match acc {
            None => term,
            Some(a) => a.add(&term)?,
        });
    }
    Ok(acc.unwrap())
}

/// Tape counterpart of [`taw_input`]: same term order, recorded for BPTT.
pub fn taw_input_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    history: &[ValueId],
    per_offset: &[ValueId],
    t: usize,
) -> Result<ValueId> {
    if per_offset.is_empty() {
        return Err(DistaError::Config("taw window must hold >= 1 matrix".into()));
    }
    if t >= history.len() {
        return Err(DistaError::Contract(format!(
            "taw_input at step {} of a {}-step history",
            t,
            history.len()
        )));
    }
    let terms = per_offset.len().min(t + 1);
    let mut ids = Vec::with_capacity(terms);
    for m in 0..terms {
        ids.push(tape.matmul(history[t - m], per_offset[m])?);
    }
    if ids.len() == 1 {
        Ok(ids[0])
    } else {
        tape.add_many(&ids)
    }
}

/// Raw attention map for one head slice: A = Q K^T on binary spike matrices,
/// so every entry is an integer dot product in [0, d].
pub fn attention_map<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>) -> Result<Tensor<T>> {
    q.check_same_shape(k, "attention_map")?;
    if !q.is_binary() || !k.is_binary() {
        return Err(DistaError::Contract(
            "attention_map expects binary spike inputs".into(),
        ));
    }
    let (n, d) = (q.rows(), q.cols());
    let mut a = Tensor::zeros(&[n, n]);
    for i in 0..n {
        let qr = q.row(i);
        for j in 0..n {
            let kr = k.row(j);
            let mut acc = T::zero();
            for c in 0..d {
                acc += qr[c] * kr[c];
            }
            a.set2(i, j, acc);
        }
    }
    Ok(a)
}

/// Zero all map entries strictly below `u` (tape-free counterpart of the
/// instrumented tape op). Entry count == comparison count.
pub fn denoise_map<T: Scalar>(a: &Tensor<T>, u: T) -> Result<Tensor<T>> {
    if u < T::zero() {
        return Err(DistaError::Config(format!("denoise threshold {} < 0", u)));
    }
    Ok(a.map(|x| if x < u { T::zero() } else { x }))
}

/// One multi-head spiking self-attention layer. Holds ids into the shared
/// parameter registry plus the output batchnorm's running statistics. With
/// heads = 1 this is exactly the single-head layer.
#[derive(Clone, Debug)]
pub struct AttentionLayer<T> {
    pub cfg: AttentionConfig,
    pub tokens: usize,
    pub theta: T,
    pub surrogate_width: T,
    taw_q: Vec<ParamId>,
    taw_k: Vec<ParamId>,
    taw_v: Vec<ParamId>,
    tau_q: ParamId,
    tau_k: ParamId,
    tau_v: ParamId,
    w_out: ParamId,
    bn_gamma: ParamId,
    bn_beta: ParamId,
    tau_out: ParamId,
    pub bn_out: RunningStats<T>,
}

impl<T: Scalar> AttentionLayer<T> {
    /// Register this layer's parameters under `prefix` and return the layer.
    pub fn init<R: Rng>(
        params: &mut ParamSet<T>,
        prefix: &str,
        cfg: AttentionConfig,
        tokens: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let d = cfg.d_model();
        let std = taw_init_std(d, cfg.taw_size);
        let taw_path = |params: &mut ParamSet<T>, rng: &mut R, path: &str| -> Vec<ParamId> {
            (0..cfg.taw_size)
                .map(|m| {
                    params.add(
                        format!("{prefix}.taw_{path}.{m}"),
                        ParamKind::Weight,
                        Tensor::randn(&[d, d], std, rng),
                    )
                })
                .collect()
        };
        let taw_q = taw_path(params, rng, "q");
        let taw_k = taw_path(params, rng, "k");
        let taw_v = taw_path(params, rng, "v");
        let tau_init = Tensor::filled(&[tokens, d], T::from_f64(TAU_INIT));
        let tau_q = params.add(format!("{prefix}.tau_q"), ParamKind::Tau, tau_init.clone());
        let tau_k = params.add(format!("{prefix}.tau_k"), ParamKind::Tau, tau_init.clone());
        let tau_v = params.add(format!("{prefix}.tau_v"), ParamKind::Tau, tau_init.clone());
        let w_out = params.add(
            format!("{prefix}.w_out"),
            ParamKind::Weight,
            Tensor::randn(&[d, d], (2.0 / d as f64).sqrt(), rng),
        );
        let bn_gamma = params.add(
            format!("{prefix}.bn_out.gamma"),
            ParamKind::BnGamma,
            Tensor::filled(&[d], T::one()),
        );
        let bn_beta = params.add(
            format!("{prefix}.bn_out.beta"),
            ParamKind::BnBeta,
            Tensor::zeros(&[d]),
        );
        let tau_out = params.add(format!("{prefix}.tau_out"), ParamKind::Tau, tau_init);
        Ok(AttentionLayer {
            cfg,
            tokens,
            theta: T::one(),
            surrogate_width: T::one(),
            taw_q,
            taw_k,
            taw_v,
            tau_q,
            tau_k,
            tau_v,
            w_out,
            bn_gamma,
            bn_beta,
            tau_out,
            bn_out: RunningStats::new(d, BN_MOMENTUM, BN_EPS),
        })
    }

    /// Running-state tensors for checkpointing, prefixed like the params.
    pub fn state_names(prefix: &str) -> [String; 2] {
        [
            format!("{prefix}.bn_out.running_mean"),
            format!("{prefix}.bn_out.running_var"),
        ]
    }

    /// Forward over a full time-major sequence of (batch*tokens) x D inputs.
    /// Returns the per-step binary output spikes. In train mode the output
    /// batchnorm uses per-timestep batch statistics (folded into the running
    /// stats in time order); in eval mode it uses the running stats.
    pub fn forward(
        &mut self,
        tape: &mut Tape<T>,
        params: &ParamSet<T>,
        steps: &[ValueId],
        batch: usize,
        train: bool,
    ) -> Result<Vec<ValueId>> {
        let d = self.cfg.d_model();
        let n = self.tokens;
        self.cfg.validate(steps.len())?;
        for &s in steps {
            if tape.value(s).shape() != [batch * n, d] {
                return Err(DistaError::Shape(format!(
                    "attention input {:?}, want [{}, {}]",
                    tape.value(s).shape(),
                    batch * n,
                    d
                )));
            }
        }

        let taw_q: Vec<ValueId> = self.taw_q.iter().map(|&p| params.on_tape(tape, p)).collect();
        let taw_k: Vec<ValueId> = self.taw_k.iter().map(|&p| params.on_tape(tape, p)).collect();
        let taw_v: Vec<ValueId> = self.taw_v.iter().map(|&p| params.on_tape(tape, p)).collect();
        let tau_q = params.on_tape(tape, self.tau_q);
        let tau_k = params.on_tape(tape, self.tau_k);
        let tau_v = params.on_tape(tape, self.tau_v);
        let w_out = params.on_tape(tape, self.w_out);
        let bn_gamma = params.on_tape(tape, self.bn_gamma);
        let bn_beta = params.on_tape(tape, self.bn_beta);
        let tau_out = params.on_tape(tape, self.tau_out);

        let shape = [batch * n, d];
        let zero = Tensor::zeros(&shape);
        let mut vq = tape.leaf(zero.clone());
        let mut sq = tape.leaf(zero.clone());
        let mut vk = tape.leaf(zero.clone());
        let mut sk = tape.leaf(zero.clone());
        let mut vv = tape.leaf(zero.clone());
        let mut sv = tape.leaf(zero.clone());
        let mut vo = tape.leaf(zero.clone());
        let mut so = tape.leaf(zero);

        let theta = self.theta;
        let width = self.surrogate_width;
        let u = T::from_f64(self.cfg.denoise_threshold);
        let scale = T::from_f64(self.cfg.attn_scale);
        let eps = T::from_f64(BN_EPS);

        let mut out = Vec::with_capacity(steps.len());
        for t in 0..steps.len() {
            let iq = taw_input_on_tape(tape, steps, &taw_q, t)?;
            let ik = taw_input_on_tape(tape, steps, &taw_k, t)?;
            let iv = taw_input_on_tape(tape, steps, &taw_v, t)?;
            let (vq2, sq2) = tape.lif_step(vq, sq, iq, tau_q, theta, width, n)?;
            let (vk2, sk2) = tape.lif_step(vk, sk, ik, tau_k, theta, width, n)?;
            let (vv2, sv2) = tape.lif_step(vv, sv, iv, tau_v, theta, width, n)?;
            (vq, sq, vk, sk, vv, sv) = (vq2, sq2, vk2, sk2, vv2, sv2);

            let scores = tape.attn_scores(sq, sk, batch, n, self.cfg.heads, self.cfg.head_dim)?;
            let a = if self.cfg.adn_enabled {
                tape.denoise(scores, u)?
            } else {
                scores
            };
            let applied = tape.attn_apply(a, sv, batch, n, self.cfg.heads, self.cfg.head_dim)?;
            let scaled = tape.scale(applied, scale);
            let lin = tape.matmul(scaled, w_out)?;
            let bn = if train {
                let (y, mean, var) = tape.batchnorm_train(lin, bn_gamma, bn_beta, eps)?;
                self.bn_out.update(&mean, &var);
                y
            } else {
                tape.batchnorm_infer(
                    lin,
                    bn_gamma,
                    bn_beta,
                    &self.bn_out.mean,
                    &self.bn_out.var,
                    eps,
                )?
            };
            let (vo2, so2) = tape.lif_step(vo, so, bn, tau_out, theta, width, n)?;
            (vo, so) = (vo2, so2);
            out.push(so);
        }
        Ok(out)
    }
}
