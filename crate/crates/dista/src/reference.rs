//! Spatial-only baseline implementation, kept deliberately tape-free and
//! simple. It models the degenerate configuration — attention window of 1,
//! every membrane time constant frozen at 2, no attention denoising — and is
//! the bit-identity oracle for the full layer/model in that configuration.
//!
//! It reads weights from the same [`ParamSet`] (by name) as the network under
//! test and shares only the canonical arithmetic kernels (matmul, batchnorm
//! statistics); all layer logic is written out independently here.

use crate::attention::AttentionConfig;
use crate::model::{patchify, ModelConfig, ModelInput, StemInput, SURROGATE_WIDTH, THETA};
use crate::numerics::batchnorm::{channel_stats, inv_std_from_var, normalize};
use crate::numerics::{matmul, ParamSet, Scalar, Tensor};
use crate::{DistaError, Result};

/// Decay factor of the frozen baseline neuron: 1 - 1/2.
fn baseline_decay<T: Scalar>() -> T {
    T::one() - T::one() / (T::one() + T::one())
}

/// In-place LIF step with tau = 2, theta = [`THETA`], hard reset:
/// v <- (1 - 1/2) * v * (1 - s) + input; s <- H(v - theta).
fn lif_step_inplace<T: Scalar>(v: &mut Tensor<T>, s: &mut Tensor<T>, input: &Tensor<T>) {
    let decay = baseline_decay::<T>();
    let one = T::one();
    let theta = T::from_f64(THETA);
    let vd = v.data_mut();
    let sd = s.data_mut();
    let id = input.data();
    for i in 0..vd.len() {
        vd[i] = decay * vd[i] * (one - sd[i]) + id[i];
        sd[i] = if vd[i] - theta >= T::zero() {
            T::one()
        } else {
            T::zero()
        };
    }
}

/// Train-mode batchnorm using this batch's statistics.
fn bn_train<T: Scalar>(x: &Tensor<T>, gamma: &[T], beta: &[T], eps: T) -> Result<Tensor<T>> {
    let (mean, var) = channel_stats(x)?;
    let inv = inv_std_from_var(&var, eps);
    Ok(normalize(x, &mean, &inv, gamma, beta))
}

fn require_spatial_only(cfg: &AttentionConfig) -> Result<()> {
    if cfg.taw_size != 1 || cfg.adn_enabled {
        return Err(DistaError::Contract(
            "the reference implements only window-1, non-denoised attention".into(),
        ));
    }
    Ok(())
}

/// Per-head attention applied to one timestep of binary Q/K/V spikes.
/// A_h = Q_h K_h^T on each head's feature slice; out_h = A_h V_h; heads are
/// concatenated back along features.
fn spatial_attention_apply<T: Scalar>(
    sq: &Tensor<T>,
    sk: &Tensor<T>,
    sv: &Tensor<T>,
    batch: usize,
    tokens: usize,
    heads: usize,
    head_dim: usize,
) -> Tensor<T> {
    let d = heads * head_dim;
    let mut out = Tensor::zeros(&[batch * tokens, d]);
    for b in 0..batch {
        for h in 0..heads {
            let col = h * head_dim;
            for i in 0..tokens {
                for c in 0..head_dim {
                    let mut acc = T::zero();
                    for j in 0..tokens {
                        // a[i][j] = q_i . k_j over this head's slice.
                        let mut a = T::zero();
                        let qr = sq.row(b * tokens + i);
                        let kr = sk.row(b * tokens + j);
                        for cc in 0..head_dim {
                            a += qr[col + cc] * kr[col + cc];
                        }
                        acc += a * sv.row(b * tokens + j)[col + c];
                    }
                    out.row_mut(b * tokens + i)[col + c] = acc;
                }
            }
        }
    }
    out
}

/// Spatial-only attention layer forward (train-mode batchnorm), reading its
/// weights from `params` under `prefix`. Input/output: time-major binary (or
/// small-integer residual) frames of shape (batch*tokens) x D.
pub fn spatial_attention_forward<T: Scalar>(
    params: &ParamSet<T>,
    prefix: &str,
    cfg: &AttentionConfig,
    steps: &[Tensor<T>],
    batch: usize,
    tokens: usize,
) -> Result<Vec<Tensor<T>>> {
    require_spatial_only(cfg)?;
    let d = cfg.d_model();
    let wq = params.get(params.find(&format!("{prefix}.taw_q.0"))?);
    let wk = params.get(params.find(&format!("{prefix}.taw_k.0"))?);
    let wv = params.get(params.find(&format!("{prefix}.taw_v.0"))?);
    let w_out = params.get(params.find(&format!("{prefix}.w_out"))?);
    let gamma = params.get(params.find(&format!("{prefix}.bn_out.gamma"))?);
    let beta = params.get(params.find(&format!("{prefix}.bn_out.beta"))?);

    let shape = [batch * tokens, d];
    let mut vq = Tensor::zeros(&shape);
    let mut sq = Tensor::zeros(&shape);
    let mut vk = Tensor::zeros(&shape);
    let mut sk = Tensor::zeros(&shape);
    let mut vv = Tensor::zeros(&shape);
    let mut sv = Tensor::zeros(&shape);
    let mut vo = Tensor::zeros(&shape);
    let mut so = Tensor::zeros(&shape);

    let scale = T::from_f64(cfg.attn_scale);
    let eps = T::from_f64(crate::numerics::BN_EPS);
    let _ = SURROGATE_WIDTH; // backward-only quantity; the baseline is forward-only

    let mut out = Vec::with_capacity(steps.len());
    for x in steps {
        lif_step_inplace(&mut vq, &mut sq, &matmul(x, wq)?);
        lif_step_inplace(&mut vk, &mut sk, &matmul(x, wk)?);
        lif_step_inplace(&mut vv, &mut sv, &matmul(x, wv)?);
        let applied =
            spatial_attention_apply(&sq, &sk, &sv, batch, tokens, cfg.heads, cfg.head_dim);
        let scaled = applied.scale(scale);
        let lin = matmul(&scaled, w_out)?;
        let bn = bn_train(&lin, gamma.data(), beta.data(), eps)?;
        lif_step_inplace(&mut vo, &mut so, &bn);
        out.push(so.clone());
    }
    Ok(out)
}

/// One Linear + BatchNorm + LIF stage folded over time (window of 1).
fn stage_forward<T: Scalar>(
    params: &ParamSet<T>,
    prefix: &str,
    steps: &[Tensor<T>],
    out_features: usize,
    rows: usize,
) -> Result<Vec<Tensor<T>>> {
    let w = params.get(params.find(&format!("{prefix}.w"))?);
    let gamma = params.get(params.find(&format!("{prefix}.bn.gamma"))?);
    let beta = params.get(params.find(&format!("{prefix}.bn.beta"))?);
    let eps = T::from_f64(crate::numerics::BN_EPS);
    let mut v = Tensor::zeros(&[rows, out_features]);
    let mut s = Tensor::zeros(&[rows, out_features]);
    let mut out = Vec::with_capacity(steps.len());
    for x in steps {
        let lin = matmul(x, w)?;
        let bn = bn_train(&lin, gamma.data(), beta.data(), eps)?;
        lif_step_inplace(&mut v, &mut s, &bn);
        out.push(s.clone());
    }
    Ok(out)
}

/// Full spatial-only model forward (train-mode batchnorm everywhere),
/// returning logits. Reads every weight from `params` by the same names the
/// network under test registered.
pub fn spatial_model_forward<T: Scalar>(
    params: &ParamSet<T>,
    cfg: &ModelConfig,
    input: &ModelInput<T>,
    batch: usize,
) -> Result<Tensor<T>> {
    cfg.validate()?;
    require_spatial_only(&cfg.attention)?;
    let tokens = cfg.tokens()?;
    let d = cfg.d_model();
    let rows = batch * tokens;

    // Stem: constant current from patches, or per-step token frames.
    let frames: Vec<Tensor<T>> = match input {
        ModelInput::Image(images) => {
            let (channels, side, patch) = match cfg.stem {
                StemInput::Image {
                    channels,
                    side,
                    patch,
                } => (channels, side, patch),
                StemInput::Tokens { .. } => {
                    return Err(DistaError::Contract(
                        "model configured for token input got an image batch".into(),
                    ))
                }
            };
            let patches = patchify(images, channels, side, patch)?;
            vec![patches; cfg.timesteps]
        }
        ModelInput::Tokens(frames) => {
            if frames.len() != cfg.timesteps {
                return Err(DistaError::Shape(format!(
                    "{} input frames for {} timesteps",
                    frames.len(),
                    cfg.timesteps
                )));
            }
            frames.clone()
        }
    };
    let mut current = stage_forward(params, "stem", &frames, d, rows)?;

    for i in 0..cfg.blocks {
        let attn = spatial_attention_forward(
            params,
            &format!("block{i}.attn"),
            &cfg.attention,
            &current,
            batch,
            tokens,
        )?;
        let y: Vec<Tensor<T>> = attn
            .iter()
            .zip(&current)
            .map(|(a, x)| a.add(x))
            .collect::<Result<_>>()?;
        let hidden = stage_forward(
            params,
            &format!("block{i}.mlp.expand"),
            &y,
            cfg.mlp_ratio * d,
            rows,
        )?;
        let back = stage_forward(
            params,
            &format!("block{i}.mlp.project"),
            &hidden,
            d,
            rows,
        )?;
        current = back
            .iter()
            .zip(&y)
            .map(|(m, yv)| m.add(yv))
            .collect::<Result<_>>()?;
    }

    // Head: mean over time, mean over tokens, then linear with bias.
    let mut summed = current[0].clone();
    for s in &current[1..] {
        summed = summed.add(s)?;
    }
    let time_avg = summed.scale(T::one() / T::from_f64(cfg.timesteps as f64));
    let inv_n = T::one() / T::from_f64(tokens as f64);
    let mut pooled = Tensor::zeros(&[batch, d]);
    for g in 0..batch {
        for r in 0..tokens {
            let src = time_avg.row(g * tokens + r);
            let dst = pooled.row_mut(g);
            for j in 0..d {
                dst[j] += src[j];
            }
        }
        for v in pooled.row_mut(g) {
            *v *= inv_n;
        }
    }
    let head_w = params.get(params.find("head.w")?);
    let head_b = params.get(params.find("head.b")?);
    let mut logits = matmul(&pooled, head_w)?;
    for r in 0..batch {
        let row = logits.row_mut(r);
        for (o, &b) in row.iter_mut().zip(head_b.data()) {
            *o += b;
        }
    }
    Ok(logits)
}
