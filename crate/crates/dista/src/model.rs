//! Full network assembly: patch-embedding stem, L encoder blocks (spiking
//! self-attention + spiking MLP, each with an additive residual), and a
//! mean-pooled linear classifier head.
//!
//! Residual junctions add binary spike tensors into small-integer feature
//! maps; the next Linear + BatchNorm + LIF stage re-binarizes them. All
//! learnables live in one [`ParamSet`]; batchnorm running statistics live in
//! the layer structs and are checkpointed separately.

use crate::attention::{AttentionConfig, AttentionLayer};
use crate::neuron::TAU_INIT;
use crate::numerics::{
    ParamId, ParamKind, ParamSet, RunningStats, Scalar, SpikeMode, Tape, Tensor, ValueId, BN_EPS,
    BN_MOMENTUM,
};
use crate::{DistaError, Result};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Firing threshold used by every LIF array in the network.
pub const THETA: f64 = 1.0;
/// Surrogate/pseudo-derivative width used by every LIF array.
pub const SURROGATE_WIDTH: f64 = 1.0;

/// Where tokens come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StemInput {
    /// Square images patchified into (side/patch)^2 tokens of
    /// channels*patch^2 features, presented as constant current every step.
    Image {
        channels: usize,
        side: usize,
        patch: usize,
    },
    /// Pre-tokenized feature sequences, one frame per timestep.
    Tokens { tokens: usize, features: usize },
}

impl StemInput {
    pub fn tokens(&self) -> Result<usize> {
        match *self {
            StemInput::Image { side, patch, .. } => {
                if patch == 0 || !side.is_multiple_of(patch) {
                    return Err(DistaError::Config(format!(
                        "image side {side} not divisible by patch {patch}"
                    )));
                }
                Ok((side / patch) * (side / patch))
            }
            StemInput::Tokens { tokens, .. } => Ok(tokens),
        }
    }

    pub fn features(&self) -> usize {
        match *self {
            StemInput::Image { channels, patch, .. } => channels * patch * patch,
            StemInput::Tokens { features, .. } => features,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ModelConfig {
    pub blocks: usize,
    pub timesteps: usize,
    pub num_classes: usize,
    pub mlp_ratio: usize,
    /// Denoising runs in the first `adn_blocks` encoder blocks (and only if
    /// `attention.adn_enabled` is set); later blocks attend undenoised.
    pub adn_blocks: usize,
    pub attention: AttentionConfig,
    pub stem: StemInput,
}

impl ModelConfig {
    pub fn d_model(&self) -> usize {
        self.attention.d_model()
    }

    pub fn tokens(&self) -> Result<usize> {
        self.stem.tokens()
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 {
            return Err(DistaError::Config("need at least one encoder block".into()));
        }
        if self.timesteps == 0 {
            return Err(DistaError::Config("need at least one timestep".into()));
        }
        if self.num_classes < 2 {
            return Err(DistaError::Config("need at least two classes".into()));
        }
        if self.mlp_ratio == 0 {
            return Err(DistaError::Config("mlp_ratio must be >= 1".into()));
        }
        if self.adn_blocks > self.blocks {
            return Err(DistaError::Config(format!(
                "adn_blocks {} exceeds {} blocks",
                self.adn_blocks, self.blocks
            )));
        }
        if self.stem.features() == 0 {
            return Err(DistaError::Config("stem features must be >= 1".into()));
        }
        let tokens = self.stem.tokens()?;
        if tokens == 0 {
            return Err(DistaError::Config("token count must be >= 1".into()));
        }
        self.attention.validate(self.timesteps)?;
        Ok(())
    }
}

/// Flatten [B, C*side*side] images into patch tokens: token (py, px) in
/// raster order, features laid out channel-major as c*patch^2 + dy*patch + dx.
pub fn patchify<T: Scalar>(
    images: &Tensor<T>,
    channels: usize,
    side: usize,
    patch: usize,
) -> Result<Tensor<T>> {
    if patch == 0 || !side.is_multiple_of(patch) {
        return Err(DistaError::Config(format!(
            "image side {side} not divisible by patch {patch}"
        )));
    }
    if images.shape().len() != 2 || images.cols() != channels * side * side {
        return Err(DistaError::Shape(format!(
            "patchify input {:?}, want [*, {}]",
            images.shape(),
            channels * side * side
        )));
    }
    let b = images.rows();
    let grid = side / patch;
    let n = grid * grid;
    let feats = channels * patch * patch;
    let mut out = Tensor::zeros(&[b * n, feats]);
    for bi in 0..b {
        let img = images.row(bi);
        for py in 0..grid {
            for px in 0..grid {
                let row = out.row_mut(bi * n + py * grid + px);
                for c in 0..channels {
                    for dy in 0..patch {
                        for dx in 0..patch {
                            row[c * patch * patch + dy * patch + dx] =
                                img[c * side * side + (py * patch + dy) * side + (px * patch + dx)];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// One Linear + BatchNorm + LIF stage (the re-binarizing unit used by the
/// stem and both MLP halves).
#[derive(Clone, Debug)]
struct SpikingStage<T> {
    w: ParamId,
    gamma: ParamId,
    beta: ParamId,
    tau: ParamId,
    bn: RunningStats<T>,
    out_features: usize,
}

impl<T: Scalar> SpikingStage<T> {
    fn init<R: Rng>(
        params: &mut ParamSet<T>,
        prefix: &str,
        in_features: usize,
        out_features: usize,
        tokens: usize,
        rng: &mut R,
    ) -> Self {
        let w = params.add(
            format!("{prefix}.w"),
            ParamKind::Weight,
            Tensor::randn(&[in_features, out_features], (2.0 / in_features as f64).sqrt(), rng),
        );
        let gamma = params.add(
            format!("{prefix}.bn.gamma"),
            ParamKind::BnGamma,
            Tensor::filled(&[out_features], T::one()),
        );
        let beta = params.add(
            format!("{prefix}.bn.beta"),
            ParamKind::BnBeta,
            Tensor::zeros(&[out_features]),
        );
        let tau = params.add(
            format!("{prefix}.tau"),
            ParamKind::Tau,
            Tensor::filled(&[tokens, out_features], T::from_f64(TAU_INIT)),
        );
        SpikingStage {
            w,
            gamma,
            beta,
            tau,
            bn: RunningStats::new(out_features, BN_MOMENTUM, BN_EPS),
        out_features,
        }
    }

    fn state_names(prefix: &str) -> [String; 2] {
        [
            format!("{prefix}.bn.running_mean"),
            format!("{prefix}.bn.running_var"),
        ]
    }
}

/// Ids of one stage's parameters once pushed onto a tape, plus carried LIF
/// state, so the stage can be stepped through time.
struct StageCursor {
    w: ValueId,
    gamma: ValueId,
    beta: ValueId,
    tau: ValueId,
    v: ValueId,
    s: ValueId,
}

impl<T: Scalar> SpikingStage<T> {
    fn cursor(
        &self,
        tape: &mut Tape<T>,
        params: &ParamSet<T>,
        rows: usize,
    ) -> StageCursor {
        let shape = [rows, self.out_features];
        StageCursor {
            w: params.on_tape(tape, self.w),
            gamma: params.on_tape(tape, self.gamma),
            beta: params.on_tape(tape, self.beta),
            tau: params.on_tape(tape, self.tau),
            v: tape.leaf(Tensor::zeros(&shape)),
            s: tape.leaf(Tensor::zeros(&shape)),
        }
    }

    /// One timestep: x -> linear -> batchnorm -> LIF spike.
    fn step(
        &mut self,
        tape: &mut Tape<T>,
        cur: &mut StageCursor,
        x: ValueId,
        tokens: usize,
        train: bool,
    ) -> Result<ValueId> {
        let eps = T::from_f64(BN_EPS);
        let lin = tape.matmul(x, cur.w)?;
        let bn = if train {
            let (y, mean, var) = tape.batchnorm_train(lin, cur.gamma, cur.beta, eps)?;
            self.bn.update(&mean, &var);
            y
        } else {
            tape.batchnorm_infer(lin, cur.gamma, cur.beta, &self.bn.mean, &self.bn.var, eps)?
        };
        let (v, s) = tape.lif_step(
            cur.v,
            cur.s,
            bn,
            cur.tau,
            T::from_f64(THETA),
            T::from_f64(SURROGATE_WIDTH),
            tokens,
        )?;
        cur.v = v;
        cur.s = s;
        Ok(s)
    }
}

/// Spiking MLP: expand to mlp_ratio*D, re-binarize, project back to D,
/// re-binarize. Pointwise in time (window of 1); LIF state carries across t.
#[derive(Clone, Debug)]
pub struct MlpLayer<T> {
    expand: SpikingStage<T>,
    project: SpikingStage<T>,
    tokens: usize,
}

impl<T: Scalar> MlpLayer<T> {
    fn init<R: Rng>(
        params: &mut ParamSet<T>,
        prefix: &str,
        d_model: usize,
        mlp_ratio: usize,
        tokens: usize,
        rng: &mut R,
    ) -> Self {
        let hidden = mlp_ratio * d_model;
        let expand = SpikingStage::init(params, &format!("{prefix}.expand"), d_model, hidden, tokens, rng);
        let project =
            SpikingStage::init(params, &format!("{prefix}.project"), hidden, d_model, tokens, rng);
        MlpLayer {
            expand,
            project,
            tokens,
        }
    }

    fn forward(
        &mut self,
        tape: &mut Tape<T>,
        params: &ParamSet<T>,
        steps: &[ValueId],
        batch: usize,
        train: bool,
    ) -> Result<Vec<ValueId>> {
        let rows = batch * self.tokens;
        let mut c1 = self.expand.cursor(tape, params, rows);
        let mut c2 = self.project.cursor(tape, params, rows);
        let mut out = Vec::with_capacity(steps.len());
        for &x in steps {
            let h = self.expand.step(tape, &mut c1, x, self.tokens, train)?;
            let y = self.project.step(tape, &mut c2, h, self.tokens, train)?;
            out.push(y);
        }
        Ok(out)
    }
}

/// Attention + MLP with additive residuals:
///   y[t] = attn(x)[t] + x[t];  z[t] = mlp(y)[t] + y[t].
#[derive(Clone, Debug)]
pub struct EncoderBlock<T> {
    pub attn: AttentionLayer<T>,
    pub mlp: MlpLayer<T>,
}

impl<T: Scalar> EncoderBlock<T> {
    fn forward(
        &mut self,
        tape: &mut Tape<T>,
        params: &ParamSet<T>,
        steps: &[ValueId],
        batch: usize,
        train: bool,
    ) -> Result<Vec<ValueId>> {
        let attn_out = self.attn.forward(tape, params, steps, batch, train)?;
        let mut y = Vec::with_capacity(steps.len());
        for (a, &x) in attn_out.iter().zip(steps) {
            y.push(tape.add(*a, x)?);
        }
        let mlp_out = self.mlp.forward(tape, params, &y, batch, train)?;
        let mut z = Vec::with_capacity(steps.len());
        for (m, &yv) in mlp_out.iter().zip(&y) {
            z.push(tape.add(*m, yv)?);
        }
        Ok(z)
    }
}

/// Everything the forward pass produced, for tests that inspect timestep
/// outputs (causality, residual traces) as well as the logits.
pub struct ForwardTrace {
    pub logits: ValueId,
    /// Binary stem spikes per timestep.
    pub stem: Vec<ValueId>,
    /// Integer feature maps leaving each block, per timestep.
    pub blocks: Vec<Vec<ValueId>>,
}

/// One batch of model input.
#[derive(Clone, Debug)]
pub enum ModelInput<T> {
    /// [B, channels*side*side] flattened images (direct constant-current encoding).
    Image(Tensor<T>),
    /// Time-major token frames, each [B*N, features].
    Tokens(Vec<Tensor<T>>),
}

#[derive(Clone, Debug)]
pub struct DistaModel<T> {
    pub cfg: ModelConfig,
    pub params: ParamSet<T>,
    stem: SpikingStage<T>,
    blocks: Vec<EncoderBlock<T>>,
    head_w: ParamId,
    head_b: ParamId,
    tokens: usize,
}

impl<T: Scalar> DistaModel<T> {
    /// Build and initialize all parameters from one seed (registration order
    /// is fixed: stem, blocks in order, head).
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let tokens = cfg.tokens()?;
        let d = cfg.d_model();
        let stem = SpikingStage::init(
            &mut params,
            "stem",
            cfg.stem.features(),
            d,
            tokens,
            &mut rng,
        );
        let mut blocks = Vec::with_capacity(cfg.blocks);
        for i in 0..cfg.blocks {
            let mut attn_cfg = cfg.attention;
            attn_cfg.adn_enabled = attn_cfg.adn_enabled && i < cfg.adn_blocks;
            let attn = AttentionLayer::init(
                &mut params,
                &format!("block{i}.attn"),
                attn_cfg,
                tokens,
                &mut rng,
            )?;
            let mlp = MlpLayer::init(
                &mut params,
                &format!("block{i}.mlp"),
                d,
                cfg.mlp_ratio,
                tokens,
                &mut rng,
            );
            blocks.push(EncoderBlock { attn, mlp });
        }
        let head_w = params.add(
            "head.w",
            ParamKind::Weight,
            Tensor::randn(&[d, cfg.num_classes], (2.0 / d as f64).sqrt(), &mut rng),
        );
        let head_b = params.add("head.b", ParamKind::Bias, Tensor::zeros(&[cfg.num_classes]));
        Ok(DistaModel {
            cfg,
            params,
            stem,
            blocks,
            head_w,
            head_b,
            tokens,
        })
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    /// Overwrite every membrane time constant with one shared value. Used to
    /// start (or pin, together with the optimizer's freeze switch) all neurons
    /// at a chosen memory horizon; `tau` must lie in the admissible range.
    pub fn set_tau(&mut self, tau: f64) -> Result<()> {
        if !(crate::neuron::TAU_MIN..=crate::neuron::TAU_MAX).contains(&tau) {
            return Err(DistaError::Config(format!(
                "tau {} outside [{}, {}]",
                tau,
                crate::neuron::TAU_MIN,
                crate::neuron::TAU_MAX
            )));
        }
        let v = T::from_f64(tau);
        for entry in self.params.entries_mut() {
            if entry.kind == ParamKind::Tau {
                for x in entry.value.data_mut() {
                    *x = v;
                }
            }
        }
        Ok(())
    }

    /// Closed-form parameter count for this configuration; guards against
    /// silent architecture drift. Derivation (D = embed dim, N = tokens,
    /// F = stem features, W = taw window, R = mlp ratio, C = classes, L = blocks):
    ///   stem: F*D + 2D + N*D
    ///   each attention: 3*W*D^2 (window stacks) + D^2 (output linear)
    ///                   + 4*N*D (three path taus + output tau) + 2D (bn)
    ///   each mlp: D*RD + RD*D + 2*RD + 2D (bns) + N*RD + N*D (taus)
    ///   head: D*C + C
    pub fn expected_param_count(cfg: &ModelConfig) -> Result<usize> {
        let d = cfg.d_model();
        let n = cfg.tokens()?;
        let f = cfg.stem.features();
        let w = cfg.attention.taw_size;
        let r = cfg.mlp_ratio;
        let c = cfg.num_classes;
        let stem = f * d + 2 * d + n * d;
        let attn = 3 * w * d * d + d * d + 4 * n * d + 2 * d;
        let mlp = 2 * r * d * d + 2 * (r * d) + 2 * d + n * r * d + n * d;
        let head = d * c + c;
        Ok(stem + cfg.blocks * (attn + mlp) + head)
    }

    /// Run the network, recording on `tape`. Returns logits plus per-step
    /// traces. Train mode uses per-timestep batch statistics in every
    /// batchnorm and folds them into running stats in time order.
    pub fn forward(
        &mut self,
        tape: &mut Tape<T>,
        input: &ModelInput<T>,
        batch: usize,
        train: bool,
    ) -> Result<ForwardTrace> {
        let t_steps = self.cfg.timesteps;
        let n = self.tokens;
        let rows = batch * n;

        // Stem: constant-current image tokens or per-step token frames.
        let mut cursor = self.stem.cursor(tape, &self.params, rows);
        let mut stem_steps = Vec::with_capacity(t_steps);
        match input {
            ModelInput::Image(images) => {
                let (channels, side, patch) = match self.cfg.stem {
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
                if images.rows() != batch {
                    return Err(DistaError::Shape(format!(
                        "image batch {} rows, expected {batch}",
                        images.rows()
                    )));
                }
                let patches = patchify(images, channels, side, patch)?;
                let x = tape.leaf(patches);
                for _ in 0..t_steps {
                    let s = self.stem.step(tape, &mut cursor, x, n, train)?;
                    stem_steps.push(s);
                }
            }
            ModelInput::Tokens(frames) => {
                match self.cfg.stem {
                    StemInput::Tokens { .. } => {}
                    StemInput::Image { .. } => {
                        return Err(DistaError::Contract(
                            "model configured for image input got token frames".into(),
                        ))
                    }
                }
                if frames.len() != t_steps {
                    return Err(DistaError::Shape(format!(
                        "{} input frames for {} timesteps",
                        frames.len(),
                        t_steps
                    )));
                }
                for frame in frames {
                    if frame.shape() != [rows, self.cfg.stem.features()] {
                        return Err(DistaError::Shape(format!(
                            "token frame {:?}, want [{}, {}]",
                            frame.shape(),
                            rows,
                            self.cfg.stem.features()
                        )));
                    }
                    let x = tape.leaf(frame.clone());
                    let s = self.stem.step(tape, &mut cursor, x, n, train)?;
                    stem_steps.push(s);
                }
            }
        }

        // Encoder blocks with residual feature maps.
        let mut block_traces = Vec::with_capacity(self.blocks.len());
        let mut current = stem_steps.clone();
        for block in &mut self.blocks {
            current = block.forward(tape, &self.params, &current, batch, train)?;
            block_traces.push(current.clone());
        }

        // Head: mean over time, mean over tokens, linear with bias.
        let summed = tape.add_many(&current)?;
        let time_avg = tape.scale(summed, T::one() / T::from_f64(t_steps as f64));
        let pooled = tape.row_group_mean(time_avg, n)?;
        let head_w = self.params.on_tape(tape, self.head_w);
        let head_b = self.params.on_tape(tape, self.head_b);
        let projected = tape.matmul(pooled, head_w)?;
        let logits = tape.add_bias(projected, head_b)?;

        Ok(ForwardTrace {
            logits,
            stem: stem_steps,
            blocks: block_traces,
        })
    }

    /// Convenience: forward and return plain logits (fresh private tape).
    pub fn logits(
        &mut self,
        input: &ModelInput<T>,
        batch: usize,
        train: bool,
        mode: SpikeMode,
    ) -> Result<Tensor<T>> {
        let mut tape = Tape::new(mode);
        let trace = self.forward(&mut tape, input, batch, train)?;
        Ok(tape.value(trace.logits).clone())
    }

    /// All batchnorm running statistics as (name, values) pairs, in a fixed
    /// order, for checkpointing.
    pub fn state_tensors(&self) -> Vec<(String, Vec<T>)> {
        let mut out = Vec::new();
        let push = |out: &mut Vec<(String, Vec<T>)>, names: [String; 2], bn: &RunningStats<T>| {
            out.push((names[0].clone(), bn.mean.clone()));
            out.push((names[1].clone(), bn.var.clone()));
        };
        push(&mut out, SpikingStage::<T>::state_names("stem"), &self.stem.bn);
        for (i, b) in self.blocks.iter().enumerate() {
            push(
                &mut out,
                AttentionLayer::<T>::state_names(&format!("block{i}.attn")),
                &b.attn.bn_out,
            );
            push(
                &mut out,
                SpikingStage::<T>::state_names(&format!("block{i}.mlp.expand")),
                &b.mlp.expand.bn,
            );
            push(
                &mut out,
                SpikingStage::<T>::state_names(&format!("block{i}.mlp.project")),
                &b.mlp.project.bn,
            );
        }
        out
    }

    /// Restore one running-statistics tensor by its checkpoint name.
    pub fn load_state(&mut self, name: &str, values: &[T]) -> Result<()> {
        let slot: &mut Vec<T> = {
            let (prefix, field) = name
                .rsplit_once('.')
                .ok_or_else(|| DistaError::Compat(format!("bad state name {name}")))?;
            let bn = if prefix == "stem.bn" {
                &mut self.stem.bn
            } else {
                let rest = prefix
                    .strip_prefix("block")
                    .ok_or_else(|| DistaError::Compat(format!("unknown state {name}")))?;
                let (idx, tail) = rest
                    .split_once('.')
                    .ok_or_else(|| DistaError::Compat(format!("unknown state {name}")))?;
                let i: usize = idx
                    .parse()
                    .map_err(|_| DistaError::Compat(format!("unknown state {name}")))?;
                let block = self
                    .blocks
                    .get_mut(i)
                    .ok_or_else(|| DistaError::Compat(format!("no block {i} for state {name}")))?;
                match tail {
                    "attn.bn_out" => &mut block.attn.bn_out,
                    "mlp.expand.bn" => &mut block.mlp.expand.bn,
                    "mlp.project.bn" => &mut block.mlp.project.bn,
                    _ => return Err(DistaError::Compat(format!("unknown state {name}"))),
                }
            };
            match field {
                "running_mean" => &mut bn.mean,
                "running_var" => &mut bn.var,
                _ => return Err(DistaError::Compat(format!("unknown state {name}"))),
            }
        };
        if slot.len() != values.len() {
            return Err(DistaError::Compat(format!(
                "state {name} has {} entries, checkpoint holds {}",
                slot.len(),
                values.len()
            )));
        }
        slot.copy_from_slice(values);
        Ok(())
    }

    /// Zero every weight matrix inside the encoder blocks (testing hook for
    /// the pure-residual identity).
    #[cfg(test)]
    fn zero_block_weights(&mut self) {
        for e in self.params.entries_mut() {
            if e.kind == ParamKind::Weight && e.name.starts_with("block") {
                e.value = Tensor::zeros(e.value.shape());
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn small_cfg(taw: usize, adn: bool) -> ModelConfig {
        ModelConfig {
            blocks: 2,
            timesteps: 4,
            num_classes: 3,
            mlp_ratio: 4,
            adn_blocks: 2,
            attention: AttentionConfig {
                taw_size: taw,
                denoise_threshold: 3.0,
                adn_enabled: adn,
                heads: 2,
                head_dim: 3,
                attn_scale: 0.125,
            },
            stem: StemInput::Tokens {
                tokens: 4,
                features: 5,
            },
        }
    }

    fn frames(cfg: &ModelConfig, batch: usize, seed: u64) -> Vec<Tensor<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = batch * cfg.tokens().unwrap();
        (0..cfg.timesteps)
            .map(|_| {
                Tensor::randn(&[rows, cfg.stem.features()], 1.0, &mut rng)
                    .map(|v| if v > 0.6 { 1.0 } else { 0.0 })
            })
            .collect()
    }

    #[test]
    fn set_tau_rewrites_every_time_constant_and_checks_the_range() {
        let mut model = DistaModel::<f64>::init(small_cfg(2, false), 11).unwrap();
        model.set_tau(1.01).unwrap();
        let mut seen = 0usize;
        for entry in model.params.entries() {
            if entry.kind == ParamKind::Tau {
                seen += 1;
                assert!(entry.value.data().iter().all(|&v| v == 1.01), "{}", entry.name);
            }
        }
        // Stem + per block (attention q/k/v/out + two mlp stages) + no head taus.
        assert_eq!(seen, 1 + 2 * 6);
        assert!(model.set_tau(1.0).is_err());
        assert!(model.set_tau(f64::NAN).is_err());
    }

    #[test]
    fn adn_blocks_limits_denoising_to_leading_blocks() {
        // The comparator counter exposes exactly how many attention maps were
        // denoised: each active block contributes T * B * H * N^2 comparisons.
        let mut cfg = small_cfg(2, true);
        let steps = frames(&cfg, 2, 40);
        let count = |cfg: ModelConfig| {
            let mut model = DistaModel::<f64>::init(cfg, 7).unwrap();
            let mut tape = Tape::new(SpikeMode::Hard);
            model
                .forward(&mut tape, &ModelInput::Tokens(steps.clone()), 2, false)
                .unwrap();
            tape.stats().denoise_comparisons
        };
        let per_block = (cfg.timesteps * 2 * cfg.attention.heads * 4 * 4) as u64;
        cfg.adn_blocks = 2;
        assert_eq!(count(cfg), 2 * per_block);
        cfg.adn_blocks = 1;
        assert_eq!(count(cfg), per_block);
        cfg.adn_blocks = 0;
        assert_eq!(count(cfg), 0);
        cfg.adn_blocks = 3;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn patchify_hand_layout() {
        // One 4x4 single-channel image, patch 2: token order row-major over
        // the 2x2 patch grid, features row-major inside each patch.
        let img: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let images = Tensor::from_vec(&[1, 16], img).unwrap();
        let p = patchify(&images, 1, 4, 2).unwrap();
        assert_eq!(p.shape(), &[4, 4]);
        assert_eq!(p.row(0), &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(p.row(1), &[2.0, 3.0, 6.0, 7.0]);
        assert_eq!(p.row(2), &[8.0, 9.0, 12.0, 13.0]);
        assert_eq!(p.row(3), &[10.0, 11.0, 14.0, 15.0]);
    }

    #[test]
    fn patchify_rejects_indivisible() {
        let images = Tensor::<f64>::zeros(&[1, 25]);
        assert!(patchify(&images, 1, 5, 2).is_err());
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        // The reference transformer shape: 4 blocks, 384 wide, 12 heads,
        // 64 tokens of 4x4x3 patches, 4-step window.
        let cfg = ModelConfig {
            blocks: 4,
            timesteps: 4,
            num_classes: 10,
            mlp_ratio: 4,
            adn_blocks: 4,
            attention: AttentionConfig {
                taw_size: 4,
                denoise_threshold: 3.0,
                adn_enabled: true,
                heads: 12,
                head_dim: 32,
                attn_scale: 0.125,
            },
            stem: StemInput::Image {
                channels: 3,
                side: 32,
                patch: 4,
            },
        };
        let model = DistaModel::<f32>::init(cfg, 1).unwrap();
        let expected = DistaModel::<f32>::expected_param_count(&cfg).unwrap();
        let actual = model.params.scalar_count();
        let drift = (actual as f64 - expected as f64).abs() / expected as f64;
        assert!(
            drift < 0.10,
            "parameter count {actual} vs closed form {expected}"
        );
        assert_eq!(actual, expected, "closed form should be exact");
    }

    #[test]
    fn zero_block_weights_make_blocks_identity() {
        let cfg = small_cfg(2, true);
        let mut model = DistaModel::<f64>::init(cfg, 7).unwrap();
        model.zero_block_weights();
        let input = ModelInput::Tokens(frames(&cfg, 2, 11));
        let mut tape = Tape::new(SpikeMode::Hard);
        let trace = model.forward(&mut tape, &input, 2, true).unwrap();
        for (block_steps, _) in trace.blocks.iter().zip(0..) {
            for (b, s) in block_steps.iter().zip(&trace.stem) {
                assert_eq!(tape.value(*b), tape.value(*s));
            }
        }
    }

    #[test]
    fn head_of_zero_features_is_bias_and_linear() {
        let cfg = small_cfg(1, false);
        let mut model = DistaModel::<f64>::init(cfg, 3).unwrap();
        // Force a known bias so "logits == bias" is nontrivial.
        let hb = model.params.find("head.b").unwrap();
        *model.params.get_mut(hb) =
            Tensor::from_vec(&[3], vec![0.5, -1.5, 2.0]).unwrap();

        let zero_frames: Vec<Tensor<f64>> = vec![
            Tensor::zeros(&[2 * 4, 5]);
            cfg.timesteps
        ];
        let logits = model
            .logits(&ModelInput::Tokens(zero_frames), 2, true, SpikeMode::Hard)
            .unwrap();
        for r in 0..2 {
            assert_eq!(logits.row(r), &[0.5, -1.5, 2.0]);
        }
    }

    #[test]
    fn head_is_linear_in_features() {
        // Doubling pooled features doubles (logits - bias): check the head in
        // isolation on a fresh tape.
        let mut tape = Tape::<f64>::new(SpikeMode::Hard);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let feats = Tensor::randn(&[2, 4], 1.0, &mut rng);
        let w = Tensor::randn(&[4, 3], 1.0, &mut rng);
        let b = Tensor::randn(&[3], 1.0, &mut rng);
        let run = |tape: &mut Tape<f64>, f: &Tensor<f64>| {
            let fi = tape.leaf(f.clone());
            let wi = tape.leaf(w.clone());
            let bi = tape.leaf(b.clone());
            let p = tape.matmul(fi, wi).unwrap();
            let l = tape.add_bias(p, bi).unwrap();
            tape.value(l).clone()
        };
        let l1 = run(&mut tape, &feats);
        let l2 = run(&mut tape, &feats.scale(2.0));
        for r in 0..2 {
            for c in 0..3 {
                let lhs = l2.get2(r, c) - b.data()[c];
                let rhs = 2.0 * (l1.get2(r, c) - b.data()[c]);
                assert!((lhs - rhs).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn forward_is_deterministic_and_seed_sensitive() {
        let cfg = small_cfg(2, true);
        let input = ModelInput::Tokens(frames(&cfg, 2, 13));
        let mut m1 = DistaModel::<f64>::init(cfg, 42).unwrap();
        let mut m2 = DistaModel::<f64>::init(cfg, 42).unwrap();
        let mut m3 = DistaModel::<f64>::init(cfg, 43).unwrap();
        let l1 = m1.logits(&input, 2, true, SpikeMode::Hard).unwrap();
        let l2 = m2.logits(&input, 2, true, SpikeMode::Hard).unwrap();
        let l3 = m3.logits(&input, 2, true, SpikeMode::Hard).unwrap();
        assert_eq!(l1, l2);
        assert_ne!(l1, l3);
    }

    #[test]
    fn stem_spikes_binary_and_blocks_integer_valued() {
        let cfg = small_cfg(2, true);
        let mut model = DistaModel::<f64>::init(cfg, 9).unwrap();
        let input = ModelInput::Tokens(frames(&cfg, 2, 17));
        let mut tape = Tape::new(SpikeMode::Hard);
        let trace = model.forward(&mut tape, &input, 2, true).unwrap();
        for s in &trace.stem {
            assert!(tape.value(*s).is_binary());
        }
        for (bi, block_steps) in trace.blocks.iter().enumerate() {
            // After k residual junctions entries can reach 1 + 2k but stay
            // small nonnegative integers.
            let bound = (1 + 2 * (bi + 1)) as f64;
            for s in block_steps {
                for &v in tape.value(*s).data() {
                    assert!(v >= 0.0 && v <= bound, "block {bi}: {v}");
                    assert_eq!(v.fract(), 0.0);
                }
            }
        }
    }

    #[test]
    fn later_inputs_cannot_touch_earlier_outputs() {
        let cfg = small_cfg(3, true);
        let model = DistaModel::<f64>::init(cfg, 77).unwrap();
        let base = frames(&cfg, 2, 19);
        for flip_t in 1..cfg.timesteps {
            let mut perturbed = base.clone();
            let cell = (3 * flip_t + 1) % perturbed[flip_t].len();
            let old = perturbed[flip_t].data()[cell];
            perturbed[flip_t].data_mut()[cell] = 1.0 - old;

            let mut tape_a = Tape::new(SpikeMode::Hard);
            let trace_a = model
                .clone()
                .forward(&mut tape_a, &ModelInput::Tokens(base.clone()), 2, true)
                .unwrap();
            let mut tape_b = Tape::new(SpikeMode::Hard);
            let trace_b = model
                .clone()
                .forward(&mut tape_b, &ModelInput::Tokens(perturbed), 2, true)
                .unwrap();
            for t in 0..flip_t {
                assert_eq!(
                    tape_a.value(trace_a.stem[t]),
                    tape_b.value(trace_b.stem[t]),
                    "stem step {t}"
                );
                for (ba, bb) in trace_a.blocks.iter().zip(&trace_b.blocks) {
                    assert_eq!(tape_a.value(ba[t]), tape_b.value(bb[t]), "block step {t}");
                }
            }
        }
    }

    #[test]
    fn zero_image_produces_zero_spikes() {
        let cfg = ModelConfig {
            blocks: 1,
            timesteps: 3,
            num_classes: 2,
            mlp_ratio: 2,
            adn_blocks: 1,
            attention: AttentionConfig {
                taw_size: 1,
                denoise_threshold: 3.0,
                adn_enabled: false,
                heads: 2,
                head_dim: 2,
                attn_scale: 0.125,
            },
            stem: StemInput::Image {
                channels: 1,
                side: 4,
                patch: 2,
            },
        };
        let mut model = DistaModel::<f64>::init(cfg, 2).unwrap();
        let images = Tensor::zeros(&[2, 16]);
        let mut tape = Tape::new(SpikeMode::Hard);
        let trace = model
            .forward(&mut tape, &ModelInput::Image(images), 2, true)
            .unwrap();
        for s in &trace.stem {
            assert!(tape.value(*s).data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn state_round_trip_by_name() {
        let cfg = small_cfg(2, false);
        let mut model = DistaModel::<f64>::init(cfg, 4).unwrap();
        // Train one forward to move the running stats off their init values.
        let input = ModelInput::Tokens(frames(&cfg, 2, 23));
        model.logits(&input, 2, true, SpikeMode::Hard).unwrap();
        let saved = model.state_tensors();
        assert_eq!(saved.len(), 2 + 6 * cfg.blocks);
        let mut restored = DistaModel::<f64>::init(cfg, 4).unwrap();
        for (name, values) in &saved {
            restored.load_state(name, values).unwrap();
        }
        assert_eq!(restored.state_tensors(), saved);
        assert!(restored.load_state("bogus.bn.running_mean", &[]).is_err());
    }

    #[test]
    fn wrong_input_kind_is_contract_error() {
        let cfg = small_cfg(1, false);
        let mut model = DistaModel::<f64>::init(cfg, 4).unwrap();
        let images = Tensor::zeros(&[2, 16]);
        assert!(matches!(
            model.logits(&ModelInput::Image(images), 2, true, SpikeMode::Hard),
            Err(DistaError::Contract(_))
        ));
    }
}
