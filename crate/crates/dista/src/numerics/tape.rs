//! Reverse-mode gradient tape.
//!
//! Ops evaluate eagerly as they are recorded, so the node list is
//! topologically ordered by construction; the backward pass walks it once in
//! reverse. Values are indexed by [`ValueId`]; learnable leaves additionally
//! carry a [`ParamId`] so optimizers can collect their gradients by registry
//! slot. All accumulation is fixed-order: same tape, same bits.

use super::batchnorm::{channel_stats, inv_std_from_var, normalize};
use super::matmul::{matmul, matmul_grad_a, matmul_grad_b};
use super::tensor::Tensor;
use super::Scalar;
use crate::{DistaError, Result};

/// Index of a value on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ValueId(pub(crate) usize);

/// Registry slot of a learnable parameter (assigned by the model).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Spike nonlinearity selector. `Hard` is the real model: a step function
/// forward, rectangular surrogate backward. `Smooth` swaps in a steep sigmoid
/// for BOTH directions so finite differences are valid — a test double for
/// gradient checking, never for training.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpikeMode {
    Hard,
    Smooth,
}

/// Instrumentation counters, accumulated over the life of one tape.
#[derive(Clone, Copy, Debug, Default)]
pub struct TapeStats {
    /// One count per attention-map entry examined by a denoise op.
    pub denoise_comparisons: u64,
    /// Order-sensitive hash of which entries every denoise op kept. Two
    /// forwards with identical masks have identical fingerprints.
    pub denoise_mask_fingerprint: u64,
}

fn fnv1a_u64(h: &mut u64, x: u64) {
    for b in x.to_le_bytes() {
        *h ^= b as u64;
        *h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
}

// Spike nonlinearity scalar kernels. Conventions: H(0) = 1; the rectangular
// surrogate window is strict (|v - theta| < width/2); the smooth double is
// sigmoid((v - theta)/width) with its exact derivative.
fn spike_forward<T: Scalar>(v: T, theta: T, width: T, mode: SpikeMode) -> T {
    match mode {
        SpikeMode::Hard => {
            if v - theta >= T::zero() {
                T::one()
            } else {
                T::zero()
            }
        }
        SpikeMode::Smooth => {
            let z = (v - theta) / width;
            T::one() / (T::one() + (-z).exp())
        }
    }
}

fn spike_deriv<T: Scalar>(v: T, s: T, theta: T, width: T, mode: SpikeMode) -> T {
    match mode {
        SpikeMode::Hard => {
            if (v - theta).abs() < width / (T::one() + T::one()) {
                T::one() / width
            } else {
                T::zero()
            }
        }
        SpikeMode::Smooth => s * (T::one() - s) / width,
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMul {
        a: ValueId,
        b: ValueId,
        out: ValueId,
    },
    Add {
        a: ValueId,
        b: ValueId,
        out: ValueId,
    },
    Sub {
        a: ValueId,
        b: ValueId,
        out: ValueId,
    },
    Mul {
        a: ValueId,
        b: ValueId,
        out: ValueId,
    },
    AddMany {
        xs: Vec<ValueId>,
        out: ValueId,
    },
    Scale {
        a: ValueId,
        c: T,
        out: ValueId,
    },
    AddBias {
        x: ValueId,
        bias: ValueId,
        out: ValueId,
    },
    SumAll {
        x: ValueId,
        out: ValueId,
    },
    RowGroupMean {
        x: ValueId,
        group: usize,
        out: ValueId,
    },
    LifStep {
        v_prev: ValueId,
        s_prev: ValueId,
        input: ValueId,
        tau: ValueId,
        theta: T,
        width: T,
        mode: SpikeMode,
        tokens: usize,
        v_out: ValueId,
        s_out: ValueId,
    },
    BnTrain {
        x: ValueId,
        gamma: ValueId,
        beta: ValueId,
        mean: Vec<T>,
        inv_std: Vec<T>,
        out: ValueId,
    },
    BnInfer {
        x: ValueId,
        gamma: ValueId,
        beta: ValueId,
        mean: Vec<T>,
        inv_std: Vec<T>,
        out: ValueId,
    },
    AttnScores {
        q: ValueId,
        k: ValueId,
        batch: usize,
        tokens: usize,
        heads: usize,
        head_dim: usize,
        out: ValueId,
    },
    Denoise {
        a: ValueId,
        threshold: T,
        out: ValueId,
    },
    AttnApply {
        a: ValueId,
        v: ValueId,
        batch: usize,
        tokens: usize,
        heads: usize,
        head_dim: usize,
        out: ValueId,
    },
    CeMean {
        logits: ValueId,
        labels: Vec<usize>,
        out: ValueId,
    },
}

/// Gradient of the recorded scalar with respect to every tape value.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient w.r.t. a value, or None when the loss never saw it.
    pub fn wrt(&self, id: ValueId) -> Option<&Tensor<T>> {
        self.grads[id.0].as_ref()
    }
}

pub struct Tape<T: Scalar> {
    values: Vec<Tensor<T>>,
    ops: Vec<Op<T>>,
    needs_grad: Vec<bool>,
    params: Vec<(ParamId, ValueId)>,
    mode: SpikeMode,
    stats: TapeStats,
}

impl<T: Scalar> Tape<T> {
    pub fn new(mode: SpikeMode) -> Self {
        Tape {
            values: Vec::new(),
            ops: Vec::new(),
            needs_grad: Vec::new(),
            params: Vec::new(),
            mode,
            stats: TapeStats::default(),
        }
    }

    pub fn mode(&self) -> SpikeMode {
        self.mode
    }

    pub fn stats(&self) -> TapeStats {
        self.stats
    }

    pub fn value(&self, id: ValueId) -> &Tensor<T> {
        &self.values[id.0]
    }

    /// Learnable leaves registered on this tape, in registration order.
    pub fn params(&self) -> &[(ParamId, ValueId)] {
        &self.params
    }

    fn push(&mut self, t: Tensor<T>, needs_grad: bool) -> ValueId {
        let id = ValueId(self.values.len());
        self.values.push(t);
        self.needs_grad.push(needs_grad);
        id
    }

    fn any_grad(&self, ids: &[ValueId]) -> bool {
        ids.iter().any(|id| self.needs_grad[id.0])
    }

    /// Constant leaf (inputs, initial states): no gradient is propagated into it.
    pub fn leaf(&mut self, t: Tensor<T>) -> ValueId {
        let out = self.push(t, false);
        self.ops.push(Op::Leaf);
        out
    }

    /// Learnable leaf: a copy of a parameter tensor, tagged with its registry id.
    pub fn param(&mut self, pid: ParamId, t: &Tensor<T>) -> ValueId {
        let out = self.push(t.clone(), true);
        self.ops.push(Op::Leaf);
        self.params.push((pid, out));
        out
    }

    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let v = matmul(&self.values[a.0], &self.values[b.0])?;
        let grad = self.any_grad(&[a, b]);
        let out = self.push(v, grad);
        self.ops.push(Op::MatMul { a, b, out });
        Ok(out)
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let v = self.values[a.0].add(&self.values[b.0])?;
        let grad = self.any_grad(&[a, b]);
        let out = self.push(v, grad);
        self.ops.push(Op::Add { a, b, out });
        Ok(out)
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.values[a.0].check_same_shape(&self.values[b.0], "sub")?;
        let v = Tensor::from_vec(
            self.values[a.0].shape(),
            self.values[a.0]
                .data()
                .iter()
                .zip(self.values[b.0].data())
                .map(|(&x, &y)| x - y)
                .collect(),
        )?;
        let grad = self.any_grad(&[a, b]);
        let out = self.push(v, grad);
        self.ops.push(Op::Sub { a, b, out });
        Ok(out)
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.values[a.0].check_same_shape(&self.values[b.0], "mul")?;
        let v = Tensor::from_vec(
            self.values[a.0].shape(),
            self.values[a.0]
                .data()
                .iter()
                .zip(self.values[b.0].data())
                .map(|(&x, &y)| x * y)
                .collect(),
        )?;
        let grad = self.any_grad(&[a, b]);
        let out = self.push(v, grad);
        self.ops.push(Op::Mul { a, b, out });
        Ok(out)
    }

    /// Elementwise sum of several same-shape tensors, added in list order.
    pub fn add_many(&mut self, xs: &[ValueId]) -> Result<ValueId> {
        if xs.is_empty() {
            return Err(DistaError::Contract("add_many of nothing".into()));
        }
        let mut v = self.values[xs[0].0].clone();
        for id in &xs[1..] {
            v = v.add(&self.values[id.0])?;
        }
        let grad = self.any_grad(xs);
        let out = self.push(v, grad);
        self.ops.push(Op::AddMany {
            xs: xs.to_vec(),
            out,
        });
        Ok(out)
    }

    pub fn scale(&mut self, a: ValueId, c: T) -> ValueId {
        let v = self.values[a.0].scale(c);
        let grad = self.needs_grad[a.0];
        let out = self.push(v, grad);
        self.ops.push(Op::Scale { a, c, out });
        out
    }

    /// Broadcast-add a length-C bias to every row of a rows x C matrix.
    pub fn add_bias(&mut self, x: ValueId, bias: ValueId) -> Result<ValueId> {
        let xv = &self.values[x.0];
        let bv = &self.values[bias.0];
        if xv.shape().len() != 2 || bv.len() != xv.cols() {
            return Err(DistaError::Shape(format!(
                "add_bias: x {:?}, bias {:?}",
                xv.shape(),
                bv.shape()
            )));
        }
        let mut v = xv.clone();
        for i in 0..v.rows() {
            let row = v.row_mut(i);
            for (rj, &bj) in row.iter_mut().zip(bv.data()) {
                *rj += bj;
            }
        }
        let grad = self.any_grad(&[x, bias]);
        let out = self.push(v, grad);
        self.ops.push(Op::AddBias { x, bias, out });
        Ok(out)
    }

    pub fn sum_all(&mut self, x: ValueId) -> ValueId {
        let mut acc = T::zero();
        for &v in self.values[x.0].data() {
            acc += v;
        }
        let grad = self.needs_grad[x.0];
        let out = self.push(Tensor::scalar(acc), grad);
        self.ops.push(Op::SumAll { x, out });
        out
    }

    /// Mean over each consecutive `group` rows: (G*R') x C -> R' x C.
    pub fn row_group_mean(&mut self, x: ValueId, group: usize) -> Result<ValueId> {
        let xv = &self.values[x.0];
        if xv.shape().len() != 2 || group == 0 || !xv.rows().is_multiple_of(group) {
            return Err(DistaError::Shape(format!(
                "row_group_mean: {:?} by {}",
                xv.shape(),
                group
            )));
        }
        let (rows, c) = (xv.rows(), xv.cols());
        let out_rows = rows / group;
        let inv = T::one() / T::from_f64(group as f64);
        let mut v = Tensor::zeros(&[out_rows, c]);
        for g in 0..out_rows {
            for r in 0..group {
                let src = xv.row(g * group + r);
                let dst = v.row_mut(g);
                for j in 0..c {
                    dst[j] += src[j];
                }
            }
            for val in v.row_mut(g) {
                *val *= inv;
            }
        }
        let grad = self.needs_grad[x.0];
        let out = self.push(v, grad);
        self.ops.push(Op::RowGroupMean { x, group, out });
        Ok(out)
    }

    /// One leaky-integrate-and-fire step over a (batch*tokens) x features
    /// matrix with hard reset:
    ///   v[t] = (1 - 1/tau) * v[t-1] * (1 - s[t-1]) + i[t],   s[t] = H(v[t] - theta).
    /// `tau` holds one entry per (token, feature) neuron, broadcast over the
    /// batch. Returns (membrane, spikes).
    #[allow(clippy::too_many_arguments)]
    pub fn lif_step(
        &mut self,
        v_prev: ValueId,
        s_prev: ValueId,
        input: ValueId,
        tau: ValueId,
        theta: T,
        width: T,
        tokens: usize,
    ) -> Result<(ValueId, ValueId)> {
        let shape = self.values[input.0].shape().to_vec();
        if shape.len() != 2 {
            return Err(DistaError::Shape(format!("lif_step input {:?}", shape)));
        }
        self.values[v_prev.0].check_same_shape(&self.values[input.0], "lif_step v_prev")?;
        self.values[s_prev.0].check_same_shape(&self.values[input.0], "lif_step s_prev")?;
        let (rows, feats) = (shape[0], shape[1]);
        if tokens == 0 || !rows.is_multiple_of(tokens) {
            return Err(DistaError::Shape(format!(
                "lif_step: {} rows not divisible by {} tokens",
                rows, tokens
            )));
        }
        let tau_t = &self.values[tau.0];
        if tau_t.len() != tokens * feats {
            return Err(DistaError::Shape(format!(
                "lif_step: tau has {} entries, want tokens*features = {}",
                tau_t.len(),
                tokens * feats
            )));
        }
        for &tv in tau_t.data() {
            // `partial_cmp` keeps NaN out as well: it compares as incomparable.
            if tv.partial_cmp(&T::one()) != Some(std::cmp::Ordering::Greater) {
                return Err(DistaError::ParamDomain(format!(
                    "membrane time constant {} <= 1",
                    tv
                )));
            }
        }

        let mode = self.mode;
        let mut v_new = Tensor::zeros(&shape);
        let mut s_new = Tensor::zeros(&shape);
        {
            let vp = self.values[v_prev.0].data();
            let sp = self.values[s_prev.0].data();
            let iv = self.values[input.0].data();
            let tv = self.values[tau.0].data();
            let vd = v_new.data_mut();
            let one = T::one();
            for r in 0..rows {
                let tok = r % tokens;
                let base = r * feats;
                let tbase = tok * feats;
                for f in 0..feats {
                    let decay = one - one / tv[tbase + f];
                    vd[base + f] = decay * vp[base + f] * (one - sp[base + f]) + iv[base + f];
                }
            }
            let sd = s_new.data_mut();
            for (s, &v) in sd.iter_mut().zip(vd.iter()) {
                *s = spike_forward(v, theta, width, mode);
            }
        }

        let grad = self.any_grad(&[v_prev, s_prev, input, tau]);
        let v_out = self.push(v_new, grad);
        let s_out = self.push(s_new, grad);
        self.ops.push(Op::LifStep {
            v_prev,
            s_prev,
            input,
            tau,
            theta,
            width,
            mode,
            tokens,
            v_out,
            s_out,
        });
        Ok((v_out, s_out))
    }

    /// Train-mode batchnorm over rows. Returns the output plus the batch
    /// statistics so the caller can fold them into running state.
    pub fn batchnorm_train(
        &mut self,
        x: ValueId,
        gamma: ValueId,
        beta: ValueId,
        eps: T,
    ) -> Result<(ValueId, Vec<T>, Vec<T>)> {
        let xv = &self.values[x.0];
        if xv.shape().len() != 2 {
            return Err(DistaError::Shape(format!("batchnorm input {:?}", xv.shape())));
        }
        let c = xv.cols();
        if self.values[gamma.0].len() != c || self.values[beta.0].len() != c {
            return Err(DistaError::Shape(format!(
                "batchnorm: {} channels, gamma {}, beta {}",
                c,
                self.values[gamma.0].len(),
                self.values[beta.0].len()
            )));
        }
        let (mean, var) = channel_stats(xv)?;
        let inv_std = inv_std_from_var(&var, eps);
        let v = normalize(
            xv,
            &mean,
            &inv_std,
            self.values[gamma.0].data(),
            self.values[beta.0].data(),
        );
        let grad = self.any_grad(&[x, gamma, beta]);
        let out = self.push(v, grad);
        self.ops.push(Op::BnTrain {
            x,
            gamma,
            beta,
            mean: mean.clone(),
            inv_std,
            out,
        });
        Ok((out, mean, var))
    }

    /// Inference-mode batchnorm with fixed statistics (pure pointwise map).
    pub fn batchnorm_infer(
        &mut self,
        x: ValueId,
        gamma: ValueId,
        beta: ValueId,
        running_mean: &[T],
        running_var: &[T],
        eps: T,
    ) -> Result<ValueId> {
        let xv = &self.values[x.0];
        if xv.shape().len() != 2 || xv.cols() != running_mean.len() {
            return Err(DistaError::Shape(format!(
                "batchnorm infer: input {:?}, stats {}",
                xv.shape(),
                running_mean.len()
            )));
        }
        let inv_std = inv_std_from_var(running_var, eps);
        let v = normalize(
            xv,
            running_mean,
            &inv_std,
            self.values[gamma.0].data(),
            self.values[beta.0].data(),
        );
        let grad = self.any_grad(&[x, gamma, beta]);
        let out = self.push(v, grad);
        self.ops.push(Op::BnInfer {
            x,
            gamma,
            beta,
            mean: running_mean.to_vec(),
            inv_std,
            out,
        });
        Ok(out)
    }

    /// Per-head raw attention map: A[b,h,i,j] = q_i . k_j over head h's slice.
    /// q, k are (batch*tokens) x (heads*head_dim); output is [B, H, N, N].
    pub fn attn_scores(
        &mut self,
        q: ValueId,
        k: ValueId,
        batch: usize,
        tokens: usize,
        heads: usize,
        head_dim: usize,
    ) -> Result<ValueId> {
        self.values[q.0].check_same_shape(&self.values[k.0], "attn_scores")?;
        let d = heads * head_dim;
        let qv = &self.values[q.0];
        if qv.shape() != [batch * tokens, d] {
            return Err(DistaError::Shape(format!(
                "attn_scores: q {:?}, want [{}, {}]",
                qv.shape(),
                batch * tokens,
                d
            )));
        }
        let kv = &self.values[k.0];
        let mut out = Tensor::zeros(&[batch, heads, tokens, tokens]);
        {
            let od = out.data_mut();
            for b in 0..batch {
                for h in 0..heads {
                    let col = h * head_dim;
                    for i in 0..tokens {
                        let qrow = &qv.row(b * tokens + i)[col..col + head_dim];
                        let obase = ((b * heads + h) * tokens + i) * tokens;
                        for j in 0..tokens {
                            let krow = &kv.row(b * tokens + j)[col..col + head_dim];
                            let mut acc = T::zero();
                            for (&qq, &kk) in qrow.iter().zip(krow) {
                                acc += qq * kk;
                            }
                            od[obase + j] = acc;
                        }
                    }
                }
            }
        }
        let grad = self.any_grad(&[q, k]);
        let out_id = self.push(out, grad);
        self.ops.push(Op::AttnScores {
            q,
            k,
            batch,
            tokens,
            heads,
            head_dim,
            out: out_id,
        });
        Ok(out_id)
    }

    /// Zero every attention entry strictly below `threshold`; keep the rest.
    /// Each entry costs exactly one comparison, counted in [`TapeStats`].
    pub fn denoise(&mut self, a: ValueId, threshold: T) -> Result<ValueId> {
        if threshold < T::zero() {
            return Err(DistaError::Config(format!(
                "denoise threshold {} < 0",
                threshold
            )));
        }
        let av = &self.values[a.0];
        let node_tag = self.ops.len() as u64;
        let mut kept_hash = self.stats.denoise_mask_fingerprint;
        let mut out = Tensor::zeros(av.shape());
        {
            let src = av.data();
            let dst = out.data_mut();
            for (idx, (&x, o)) in src.iter().zip(dst.iter_mut()).enumerate() {
                if x < threshold {
                    *o = T::zero();
                } else {
                    *o = x;
                    fnv1a_u64(&mut kept_hash, node_tag ^ (idx as u64).rotate_left(17));
                }
            }
        }
        self.stats.denoise_comparisons += av.len() as u64;
        self.stats.denoise_mask_fingerprint = kept_hash;
        let grad = self.needs_grad[a.0];
        let out_id = self.push(out, grad);
        self.ops.push(Op::Denoise {
            a,
            threshold,
            out: out_id,
        });
        Ok(out_id)
    }

    /// Apply attention: out row (b,i) slice h = sum_j A[b,h,i,j] * v row (b,j)
    /// slice h, summed in ascending j.
    pub fn attn_apply(
        &mut self,
        a: ValueId,
        v: ValueId,
        batch: usize,
        tokens: usize,
        heads: usize,
        head_dim: usize,
    ) -> Result<ValueId> {
        let d = heads * head_dim;
        let av = &self.values[a.0];
        let vv = &self.values[v.0];
        if av.shape() != [batch, heads, tokens, tokens] || vv.shape() != [batch * tokens, d] {
            return Err(DistaError::Shape(format!(
                "attn_apply: a {:?}, v {:?}",
                av.shape(),
                vv.shape()
            )));
        }
        let mut out = Tensor::zeros(&[batch * tokens, d]);
        for b in 0..batch {
            for h in 0..heads {
                let col = h * head_dim;
                for i in 0..tokens {
                    let abase = ((b * heads + h) * tokens + i) * tokens;
                    for j in 0..tokens {
                        let w = av.data()[abase + j];
                        if w == T::zero() {
                            continue;
                        }
                        let src: Vec<T> = vv.row(b * tokens + j)[col..col + head_dim].to_vec();
                        let dst = &mut out.row_mut(b * tokens + i)[col..col + head_dim];
                        if w == T::one() {
                            for (o, &s) in dst.iter_mut().zip(&src) {
                                *o += s;
                            }
                        } else {
                            for (o, &s) in dst.iter_mut().zip(&src) {
                                *o += w * s;
                            }
                        }
                    }
                }
            }
        }
        let grad = self.any_grad(&[a, v]);
        let out_id = self.push(out, grad);
        self.ops.push(Op::AttnApply {
            a,
            v,
            batch,
            tokens,
            heads,
            head_dim,
            out: out_id,
        });
        Ok(out_id)
    }

    /// Mean cross-entropy over a batch of logits rows. Rows are reduced with
    /// a max-shifted log-sum-exp; ties and scaling are deterministic.
    pub fn cross_entropy_mean(&mut self, logits: ValueId, labels: &[usize]) -> Result<ValueId> {
        let lv = &self.values[logits.0];
        if lv.shape().len() != 2 || lv.rows() != labels.len() {
            return Err(DistaError::Shape(format!(
                "cross_entropy: logits {:?}, {} labels",
                lv.shape(),
                labels.len()
            )));
        }
        let classes = lv.cols();
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(DistaError::Data(format!(
                "label {} out of range for {} classes",
                bad, classes
            )));
        }
        let mut total = T::zero();
        for (r, &y) in labels.iter().enumerate() {
            let row = lv.row(r);
            let mut mx = row[0];
            for &v in row {
                if v > mx {
                    mx = v;
                }
            }
            let mut z = T::zero();
            for &v in row {
                z += (v - mx).exp();
            }
            total += z.ln() - (row[y] - mx);
        }
        let loss = total / T::from_f64(labels.len() as f64);
        let grad = self.needs_grad[logits.0];
        let out = self.push(Tensor::scalar(loss), grad);
        self.ops.push(Op::CeMean {
            logits,
            labels: labels.to_vec(),
            out,
        });
        Ok(out)
    }

    /// Reverse pass from a scalar loss. Visits every node exactly once in
    /// reverse record order. `seed` defaults to 1.
    pub fn reverse_accumulate(
        &self,
        loss: ValueId,
        seed: Option<Tensor<T>>,
    ) -> Result<Gradients<T>> {
        if self.values[loss.0].len() != 1 {
            return Err(DistaError::Contract(format!(
                "reverse_accumulate needs a scalar loss, got shape {:?}",
                self.values[loss.0].shape()
            )));
        }
        let seed = seed.unwrap_or_else(|| Tensor::scalar(T::one()));
        if seed.len() != 1 {
            return Err(DistaError::Contract(
                "loss gradient seed must be scalar".into(),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.values.len()];
        grads[loss.0] = Some(seed);
        for op in self.ops.iter().rev() {
            self.backward_op(op, &mut grads);
        }
        Ok(Gradients { grads })
    }

    /// Gradient for each value id in `ids`, zeros where the loss never
    /// touched the value (detached parameters get exact zeros).
    pub fn grads_or_zeros(&self, g: &Gradients<T>, ids: &[ValueId]) -> Vec<Tensor<T>> {
        ids.iter()
            .map(|&id| match g.wrt(id) {
                Some(t) => t.clone(),
                None => Tensor::zeros(self.values[id.0].shape()),
            })
            .collect()
    }

    fn backward_op(&self, op: &Op<T>, grads: &mut [Option<Tensor<T>>]) {
        // Shared pattern: take the output gradient; skip the node if the loss
        // never reached it; accumulate into inputs that want gradients.
        macro_rules! out_grad {
            ($out:expr) => {
                match grads[$out.0].as_ref() {
                    Some(g) => g.clone(),
                    None => return,
                }
            };
        }
        let wants = |id: ValueId| self.needs_grad[id.0];
        fn slot<'a, T: Scalar>(
            grads: &'a mut [Option<Tensor<T>>],
            id: ValueId,
            shape: &[usize],
        ) -> &'a mut Tensor<T> {
            grads[id.0].get_or_insert_with(|| Tensor::zeros(shape))
        }

        match op {
            Op::Leaf => {}
            Op::MatMul { a, b, out } => {
                let g = out_grad!(out);
                if wants(*a) {
                    let da = slot(grads, *a, self.values[a.0].shape());
                    matmul_grad_a(&g, &self.values[b.0], da);
                }
                if wants(*b) {
                    let db = slot(grads, *b, self.values[b.0].shape());
                    matmul_grad_b(&self.values[a.0], &g, db);
                }
            }
            Op::Add { a, b, out } => {
                let g = out_grad!(out);
                for id in [a, b] {
                    if wants(*id) {
                        let d = slot(grads, *id, self.values[id.0].shape());
                        for (o, &gv) in d.data_mut().iter_mut().zip(g.data()) {
                            *o += gv;
                        }
                    }
                }
            }
            Op::Sub { a, b, out } => {
                let g = out_grad!(out);
                if wants(*a) {
                    let d = slot(grads, *a, self.values[a.0].shape());
                    for (o, &gv) in d.data_mut().iter_mut().zip(g.data()) {
                        *o += gv;
                    }
                }
                if wants(*b) {
                    let d = slot(grads, *b, self.values[b.0].shape());
                    for (o, &gv) in d.data_mut().iter_mut().zip(g.data()) {
                        *o -= gv;
                    }
                }
            }
            Op::Mul { a, b, out } => {
                let g = out_grad!(out);
                if wants(*a) {
                    let bv = self.values[b.0].clone();
                    let d = slot(grads, *a, self.values[a.0].shape());
                    for ((o, &gv), &b2) in d.data_mut().iter_mut().zip(g.data()).zip(bv.data()) {
                        *o += gv * b2;
                    }
                }
                if wants(*b) {
                    let av = self.values[a.0].clone();
                    let d = slot(grads, *b, self.values[b.0].shape());
                    for ((o, &gv), &a2) in d.data_mut().iter_mut().zip(g.data()).zip(av.data()) {
                        *o += gv * a2;
                    }
                }
            }
            Op::AddMany { xs, out } => {
                let g = out_grad!(out);
                for id in xs {
                    if wants(*id) {
                        let d = slot(grads, *id, self.values[id.0].shape());
                        for (o, &gv) in d.data_mut().iter_mut().zip(g.data()) {
                            *o += gv;
                        }
                    }
                }
            }
            Op::Scale { a, c, out } => {
                let g = out_grad!(out);
                if wants(*a) {
                    let d = slot(grads, *a, self.values[a.0].shape());
                    for (o, &gv) in d.data_mut().iter_mut().zip(g.data()) {
                        *o += *c * gv;
                    }
                }
            }
            Op::AddBias { x, bias, out } => {
                let g = out_grad!(out);
                if wants(*x) {
                    let d = slot(grads, *x, self.values[x.0].shape());
                    for (o, &gv) in d.data_mut().iter_mut().zip(g.data()) {
                        *o += gv;
                    }
                }
                if wants(*bias) {
                    let c = self.values[x.0].cols();
                    let rows = self.values[x.0].rows();
                    let d = slot(grads, *bias, self.values[bias.0].shape());
                    for r in 0..rows {
                        for (o, &gv) in d.data_mut().iter_mut().zip(g.row(r)) {
                            *o += gv;
                        }
                    }
                    let _ = c;
                }
            }
            Op::SumAll { x, out } => {
                let g = out_grad!(out).data()[0];
                if wants(*x) {
                    let d = slot(grads, *x, self.values[x.0].shape());
                    for o in d.data_mut() {
                        *o += g;
                    }
                }
            }
            Op::RowGroupMean { x, group, out } => {
                let g = out_grad!(out);
                if wants(*x) {
                    let inv = T::one() / T::from_f64(*group as f64);
                    let c = self.values[x.0].cols();
                    let d = slot(grads, *x, self.values[x.0].shape());
                    for r in 0..d.rows() {
                        let src = g.row(r / group);
                        let dst = d.row_mut(r);
                        for j in 0..c {
                            dst[j] += src[j] * inv;
                        }
                    }
                }
            }
            Op::LifStep {
                v_prev,
                s_prev,
                input,
                tau,
                theta,
                width,
                mode,
                tokens,
                v_out,
                s_out,
            } => {
                let gv = grads[v_out.0].clone();
                let gs = grads[s_out.0].clone();
                if gv.is_none() && gs.is_none() {
                    return;
                }
                let shape = self.values[input.0].shape().to_vec();
                let (rows, feats) = (shape[0], shape[1]);
                let one = T::one();
                let vp = self.values[v_prev.0].clone();
                let sp = self.values[s_prev.0].clone();
                let vo = self.values[v_out.0].clone();
                let so = self.values[s_out.0].clone();
                let tv = self.values[tau.0].clone();

                // g_total = dL/dv[t] folded through the spike derivative.
                let mut g_total = Tensor::zeros(&shape);
                {
                    let gt = g_total.data_mut();
                    if let Some(g) = &gv {
                        for (o, &x) in gt.iter_mut().zip(g.data()) {
                            *o += x;
                        }
                    }
                    if let Some(g) = &gs {
                        for ((o, &gd), (&vv, &sv)) in gt
                            .iter_mut()
                            .zip(g.data())
                            .zip(vo.data().iter().zip(so.data()))
                        {
                            *o += gd * spike_deriv(vv, sv, *theta, *width, *mode);
                        }
                    }
                }

                if wants(*input) {
                    let d = slot(grads, *input, &shape);
                    for (o, &g) in d.data_mut().iter_mut().zip(g_total.data()) {
                        *o += g;
                    }
                }
                if wants(*v_prev) {
                    let d = slot(grads, *v_prev, &shape);
                    for r in 0..rows {
                        let tbase = (r % tokens) * feats;
                        let base = r * feats;
                        for f in 0..feats {
                            let decay = one - one / tv.data()[tbase + f];
                            d.data_mut()[base + f] += g_total.data()[base + f]
                                * decay
                                * (one - sp.data()[base + f]);
                        }
                    }
                }
                if wants(*s_prev) {
                    let d = slot(grads, *s_prev, &shape);
                    for r in 0..rows {
                        let tbase = (r % tokens) * feats;
                        let base = r * feats;
                        for f in 0..feats {
                            let decay = one - one / tv.data()[tbase + f];
                            d.data_mut()[base + f] -=
                                g_total.data()[base + f] * decay * vp.data()[base + f];
                        }
                    }
                }
                if wants(*tau) {
                    // d decay / d tau = 1 / tau^2; batch rows accumulate in order.
                    let d = slot(grads, *tau, self.values[tau.0].shape());
                    for r in 0..rows {
                        let tbase = (r % tokens) * feats;
                        let base = r * feats;
                        for f in 0..feats {
                            let tval = tv.data()[tbase + f];
                            d.data_mut()[tbase + f] += g_total.data()[base + f]
                                * vp.data()[base + f]
                                * (one - sp.data()[base + f])
                                / (tval * tval);
                        }
                    }
                }
            }
            Op::BnTrain {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                out,
            } => {
                let g = out_grad!(out);
                let xv = self.values[x.0].clone();
                let (n, c) = (xv.rows(), xv.cols());
                let inv_n = T::one() / T::from_f64(n as f64);
                // Column sums of g and of g * xhat (ascending rows).
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for r in 0..n {
                    let gr = g.row(r);
                    let xr = xv.row(r);
                    for j in 0..c {
                        let xhat = (xr[j] - mean[j]) * inv_std[j];
                        sum_g[j] += gr[j];
                        sum_gx[j] += gr[j] * xhat;
                    }
                }
                if wants(*beta) {
                    let d = slot(grads, *beta, self.values[beta.0].shape());
                    for (o, &sg) in d.data_mut().iter_mut().zip(&sum_g) {
                        *o += sg;
                    }
                }
                if wants(*gamma) {
                    let d = slot(grads, *gamma, self.values[gamma.0].shape());
                    for (o, &sgx) in d.data_mut().iter_mut().zip(&sum_gx) {
                        *o += sgx;
                    }
                }
                if wants(*x) {
                    let gm = self.values[gamma.0].clone();
                    let d = slot(grads, *x, xv.shape());
                    for r in 0..n {
                        let gr = g.row(r);
                        let xr = xv.row(r);
                        let dr = d.row_mut(r);
                        for j in 0..c {
                            let xhat = (xr[j] - mean[j]) * inv_std[j];
                            dr[j] += gm.data()[j]
                                * inv_std[j]
                                * (gr[j] - sum_g[j] * inv_n - xhat * (sum_gx[j] * inv_n));
                        }
                    }
                }
            }
            Op::BnInfer {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                out,
            } => {
                let g = out_grad!(out);
                let xv = self.values[x.0].clone();
                let (n, c) = (xv.rows(), xv.cols());
                if wants(*beta) {
                    let d = slot(grads, *beta, self.values[beta.0].shape());
                    for r in 0..n {
                        for (o, &gv) in d.data_mut().iter_mut().zip(g.row(r)) {
                            *o += gv;
                        }
                    }
                }
                if wants(*gamma) {
                    let d = slot(grads, *gamma, self.values[gamma.0].shape());
                    for r in 0..n {
                        let gr = g.row(r);
                        let xr = xv.row(r);
                        for j in 0..c {
                            d.data_mut()[j] += gr[j] * ((xr[j] - mean[j]) * inv_std[j]);
                        }
                    }
                }
                if wants(*x) {
                    let gm = self.values[gamma.0].clone();
                    let d = slot(grads, *x, xv.shape());
                    for r in 0..n {
                        let gr = g.row(r);
                        let dr = d.row_mut(r);
                        for j in 0..c {
                            dr[j] += gr[j] * gm.data()[j] * inv_std[j];
                        }
                    }
                }
            }
            Op::AttnScores {
                q,
                k,
                batch,
                tokens,
                heads,
                head_dim,
                out,
            } => {
                let g = out_grad!(out);
                let qv = self.values[q.0].clone();
                let kv = self.values[k.0].clone();
                for (target, source, transpose) in
                    [(q, &kv, false), (k, &qv, true)]
                {
                    if !wants(*target) {
                        continue;
                    }
                    let d = slot(grads, *target, qv.shape());
                    for b in 0..*batch {
                        for h in 0..*heads {
                            let col = h * head_dim;
                            for i in 0..*tokens {
                                for j in 0..*tokens {
                                    // dQ[i] += G[i,j] K[j]; dK[j] += G[i,j] Q[i].
                                    let (row_out, row_in, gval) = if !transpose {
                                        let gv =
                                            g.data()[((b * heads + h) * tokens + i) * tokens + j];
                                        (b * tokens + i, b * tokens + j, gv)
                                    } else {
                                        let gv =
                                            g.data()[((b * heads + h) * tokens + j) * tokens + i];
                                        (b * tokens + i, b * tokens + j, gv)
                                    };
                                    if gval == T::zero() {
                                        continue;
                                    }
                                    let src: Vec<T> =
                                        source.row(row_in)[col..col + head_dim].to_vec();
                                    let dst = &mut d.row_mut(row_out)[col..col + head_dim];
                                    for (o, &s) in dst.iter_mut().zip(&src) {
                                        *o += gval * s;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::Denoise { a, threshold, out } => {
                let g = out_grad!(out);
                if wants(*a) {
                    let av = self.values[a.0].clone();
                    let d = slot(grads, *a, av.shape());
                    for ((o, &gv), &x) in d.data_mut().iter_mut().zip(g.data()).zip(av.data()) {
                        if x >= *threshold {
                            *o += gv;
                        }
                    }
                }
            }
            Op::AttnApply {
                a,
                v,
                batch,
                tokens,
                heads,
                head_dim,
                out,
            } => {
                let g = out_grad!(out);
                let av = self.values[a.0].clone();
                let vv = self.values[v.0].clone();
                if wants(*a) {
                    let d = slot(grads, *a, av.shape());
                    for b in 0..*batch {
                        for h in 0..*heads {
                            let col = h * head_dim;
                            for i in 0..*tokens {
                                let gr = &g.row(b * tokens + i)[col..col + head_dim];
                                let abase = ((b * heads + h) * tokens + i) * tokens;
                                for j in 0..*tokens {
                                    let vr = &vv.row(b * tokens + j)[col..col + head_dim];
                                    let mut acc = T::zero();
                                    for (&gg, &vv2) in gr.iter().zip(vr) {
                                        acc += gg * vv2;
                                    }
                                    d.data_mut()[abase + j] += acc;
                                }
                            }
                        }
                    }
                }
                if wants(*v) {
                    let d = slot(grads, *v, vv.shape());
                    for b in 0..*batch {
                        for h in 0..*heads {
                            let col = h * head_dim;
                            for j in 0..*tokens {
                                for i in 0..*tokens {
                                    let w =
                                        av.data()[((b * heads + h) * tokens + i) * tokens + j];
                                    if w == T::zero() {
                                        continue;
                                    }
                                    let src: Vec<T> =
                                        g.row(b * tokens + i)[col..col + head_dim].to_vec();
                                    let dst =
                                        &mut d.row_mut(b * tokens + j)[col..col + head_dim];
                                    for (o, &s) in dst.iter_mut().zip(&src) {
                                        *o += w * s;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::CeMean {
                logits,
                labels,
                out,
            } => {
                let g = out_grad!(out).data()[0];
                if wants(*logits) {
                    let lv = self.values[logits.0].clone();
                    let classes = lv.cols();
                    let scale = g / T::from_f64(labels.len() as f64);
                    let d = slot(grads, *logits, lv.shape());
                    for (r, &y) in labels.iter().enumerate() {
                        let row = lv.row(r);
                        let mut mx = row[0];
                        for &v in row {
                            if v > mx {
                                mx = v;
                            }
                        }
                        let mut z = T::zero();
                        for &v in row {
                            z += (v - mx).exp();
                        }
                        let dr = d.row_mut(r);
                        for j in 0..classes {
                            let p = (row[j] - mx).exp() / z;
                            let onehot = if j == y { T::one() } else { T::zero() };
                            dr[j] += scale * (p - onehot);
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::fdiff::finite_diff_grad;
    use crate::numerics::rel_err;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tensor1(v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(&[v.len()], v.to_vec()).unwrap()
    }

    // L = x*y at (2,3): dL/dx = 3, dL/dy = 2.
    #[test]
    fn product_rule() {
        let mut tape = Tape::new(SpikeMode::Hard);
        let x = tape.param(ParamId(0), &Tensor::scalar(2.0f64));
        let y = tape.param(ParamId(1), &Tensor::scalar(3.0f64));
        let l = tape.mul(x, y).unwrap();
        let g = tape.reverse_accumulate(l, None).unwrap();
        assert_eq!(g.wrt(x).unwrap().data()[0], 3.0);
        assert_eq!(g.wrt(y).unwrap().data()[0], 2.0);
    }

    // L = sum((x - t)^2): dL/dx = 2(x - t).
    #[test]
    fn quadratic_loss_gradient() {
        let mut tape = Tape::new(SpikeMode::Hard);
        let x = tape.param(ParamId(0), &tensor1(&[1.0, -2.0, 0.5]));
        let t = tape.leaf(tensor1(&[0.5, 0.5, 0.5]));
        let d = tape.sub(x, t).unwrap();
        let sq = tape.mul(d, d).unwrap();
        let l = tape.sum_all(sq);
        let g = tape.reverse_accumulate(l, None).unwrap();
        let expect = [1.0, -5.0, 0.0];
        for (a, b) in g.wrt(x).unwrap().data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn non_scalar_loss_is_contract_error() {
        let mut tape = Tape::new(SpikeMode::Hard);
        let x = tape.param(ParamId(0), &tensor1(&[1.0, 2.0]));
        assert!(matches!(
            tape.reverse_accumulate(x, None),
            Err(crate::DistaError::Contract(_))
        ));
    }

    #[test]
    fn custom_seed_scales_gradients() {
        let mut tape = Tape::new(SpikeMode::Hard);
        let x = tape.param(ParamId(0), &Tensor::scalar(4.0f64));
        let l = tape.mul(x, x).unwrap();
        let g1 = tape.reverse_accumulate(l, None).unwrap();
        let g2 = tape
            .reverse_accumulate(l, Some(Tensor::scalar(2.0)))
            .unwrap();
        assert_eq!(g1.wrt(x).unwrap().data()[0] * 2.0, g2.wrt(x).unwrap().data()[0]);
    }

    #[test]
    fn detached_parameter_has_no_gradient() {
        let mut tape = Tape::new(SpikeMode::Hard);
        let x = tape.param(ParamId(0), &Tensor::scalar(1.0f64));
        let unused = tape.param(ParamId(1), &Tensor::scalar(5.0f64));
        let l = tape.mul(x, x).unwrap();
        let g = tape.reverse_accumulate(l, None).unwrap();
        assert!(g.wrt(unused).is_none());
        let zs = tape.grads_or_zeros(&g, &[unused]);
        assert!(zs[0].data().iter().all(|&v| v == 0.0));
    }

    /// Every composite here is smooth, so the tape must agree with central
    /// differences to tight tolerance in f64.
    #[test]
    fn composite_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x0 = Tensor::<f64>::randn(&[4, 3], 0.8, &mut rng);
        let w0 = Tensor::<f64>::randn(&[3, 5], 0.8, &mut rng);
        let gamma0 = Tensor::<f64>::randn(&[5], 0.2, &mut rng).map(|v| v + 1.0);
        let beta0 = Tensor::<f64>::randn(&[5], 0.2, &mut rng);
        let bias0 = Tensor::<f64>::randn(&[5], 0.5, &mut rng);

        let run = |w: &Tensor<f64>,
                   gamma: &Tensor<f64>,
                   beta: &Tensor<f64>,
                   bias: &Tensor<f64>|
         -> (f64, Option<[Tensor<f64>; 4]>) {
            let mut tape = Tape::new(SpikeMode::Smooth);
            let x = tape.leaf(x0.clone());
            let w_id = tape.param(ParamId(0), w);
            let gamma_id = tape.param(ParamId(1), gamma);
            let beta_id = tape.param(ParamId(2), beta);
            let bias_id = tape.param(ParamId(3), bias);
            let h = tape.matmul(x, w_id).unwrap();
            let (bn, _, _) = tape.batchnorm_train(h, gamma_id, beta_id, 1e-5).unwrap();
            let hb = tape.add_bias(bn, bias_id).unwrap();
            let l1 = tape.cross_entropy_mean(hb, &[0, 2, 4, 1]).unwrap();
            let sq = tape.mul(hb, hb).unwrap();
            let m = tape.row_group_mean(sq, 2).unwrap();
            let s = tape.sum_all(m);
            let s_small = tape.scale(s, 0.05);
            let l = tape.add(l1, s_small).unwrap();
            let loss = tape.value(l).data()[0];
            let g = tape.reverse_accumulate(l, None).unwrap();
            let grads = tape.grads_or_zeros(&g, &[w_id, gamma_id, beta_id, bias_id]);
            (loss, Some([grads[0].clone(), grads[1].clone(), grads[2].clone(), grads[3].clone()]))
        };

        let (_, grads) = run(&w0, &gamma0, &beta0, &bias0);
        let analytic = grads.unwrap();

        let params: [&Tensor<f64>; 4] = [&w0, &gamma0, &beta0, &bias0];
        for (pi, p) in params.iter().enumerate() {
            let fd = finite_diff_grad(
                |probe| {
                    let mut ps: [Tensor<f64>; 4] =
                        [w0.clone(), gamma0.clone(), beta0.clone(), bias0.clone()];
                    ps[pi] = probe.clone();
                    Ok(run(&ps[0], &ps[1], &ps[2], &ps[3]).0)
                },
                p,
                1e-5,
            )
            .unwrap();
            for (a, b) in analytic[pi].data().iter().zip(fd.data()) {
                assert!(
                    rel_err(*a, *b, 1e-6) < 1e-4,
                    "param {pi}: {a} vs {b}"
                );
            }
        }
    }

    #[test]
    fn attention_ops_match_finite_differences() {
        let (b, n, h, d) = (2usize, 3usize, 2usize, 2usize);
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let q0 = Tensor::<f64>::randn(&[b * n, h * d], 0.7, &mut rng);
        let k0 = Tensor::<f64>::randn(&[b * n, h * d], 0.7, &mut rng);
        let v0 = Tensor::<f64>::randn(&[b * n, h * d], 0.7, &mut rng);

        let run = |q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>| {
            let mut tape = Tape::new(SpikeMode::Smooth);
            let qi = tape.param(ParamId(0), q);
            let ki = tape.param(ParamId(1), k);
            let vi = tape.param(ParamId(2), v);
            let a = tape.attn_scores(qi, ki, b, n, h, d).unwrap();
            let o = tape.attn_apply(a, vi, b, n, h, d).unwrap();
            let sq = tape.mul(o, o).unwrap();
            let l = tape.sum_all(sq);
            let loss = tape.value(l).data()[0];
            let g = tape.reverse_accumulate(l, None).unwrap();
            let gs = tape.grads_or_zeros(&g, &[qi, ki, vi]);
            (loss, gs)
        };

        let (_, analytic) = run(&q0, &k0, &v0);
        let params: [&Tensor<f64>; 3] = [&q0, &k0, &v0];
        for (pi, p) in params.iter().enumerate() {
            let fd = finite_diff_grad(
                |probe| {
                    let mut ps = [q0.clone(), k0.clone(), v0.clone()];
                    ps[pi] = probe.clone();
                    Ok(run(&ps[0], &ps[1], &ps[2]).0)
                },
                p,
                1e-5,
            )
            .unwrap();
            for (a, bb) in analytic[pi].data().iter().zip(fd.data()) {
                assert!(rel_err(*a, *bb, 1e-6) < 1e-4, "qkv {pi}: {a} vs {bb}");
            }
        }
    }

    #[test]
    fn denoise_forward_backward_and_count() {
        let mut tape = Tape::<f64>::new(SpikeMode::Hard);
        let a = tape.param(
            ParamId(0),
            &Tensor::from_vec(&[1, 1, 2, 2], vec![0.0, 2.0, 3.0, 5.0]).unwrap(),
        );
        let y = tape.denoise(a, 3.0).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 3.0, 5.0]);
        assert_eq!(tape.stats().denoise_comparisons, 4);
        let l = tape.sum_all(y);
        let g = tape.reverse_accumulate(l, None).unwrap();
        // Gradient passes only through kept entries.
        assert_eq!(g.wrt(a).unwrap().data(), &[0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_leaves_values_untouched_and_is_repeatable() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut tape = Tape::new(SpikeMode::Hard);
        let x = tape.param(ParamId(0), &Tensor::<f64>::randn(&[3, 3], 1.0, &mut rng));
        let y = tape.matmul(x, x).unwrap();
        let l = tape.sum_all(y);
        let g1 = tape.reverse_accumulate(l, None).unwrap();
        let g2 = tape.reverse_accumulate(l, None).unwrap();
        assert_eq!(g1.wrt(x).unwrap(), g2.wrt(x).unwrap());
    }
}
