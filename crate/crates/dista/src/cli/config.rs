//! Flat `key = value` run configuration: parsing, validation, and a
//! canonical serialization used for checkpoint embedding and resume checks.

use std::fmt;
use std::path::Path;

use crate::attention::AttentionConfig;
use crate::model::{ModelConfig, StemInput};
use crate::neuron::{TAU_INIT, TAU_MAX, TAU_MIN};
use crate::training::TrainHyper;
use crate::{DistaError, Result};

/// Which dataset a run trains on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetChoice {
    Synthetic,
    Cifar10,
}

impl fmt::Display for DatasetChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetChoice::Synthetic => "synthetic",
            DatasetChoice::Cifar10 => "cifar10",
        })
    }
}

/// One run's complete configuration: dataset selection, model geometry,
/// and optimization hyperparameters, all settable from a flat text file.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub dataset: DatasetChoice,
    /// Directory holding the binary image batches (cifar10 only). Empty
    /// means "use the DISTA_CIFAR10_DIR environment variable".
    pub data_dir: String,
    /// Where metrics, checkpoints, and the lock file go.
    pub out_dir: String,
    /// Class count. For cifar10 this keeps only labels below it (2..=10).
    pub num_classes: usize,
    pub synthetic_train: usize,
    pub synthetic_test: usize,
    pub noise_rate: f64,
    pub blocks: usize,
    pub timesteps: usize,
    pub d_model: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub patch_size: usize,
    pub taw_size: usize,
    pub denoise_threshold: f64,
    pub adn_enabled: bool,
    /// How many leading blocks denoise; `None` means all of them.
    pub adn_blocks: Option<usize>,
    pub attn_scale: f64,
    /// Initial membrane time constant shared by every neuron.
    pub tau_init: f64,
    /// Keep time constants fixed at `tau_init` (the optimizer skips them).
    /// Turns membrane memory into a controlled experimental variable.
    pub freeze_tau: bool,
    pub lr: f64,
    pub lr_floor_ratio: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub adam_eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f64,
    /// Save a checkpoint every this many epochs; 0 means final epoch only.
    pub checkpoint_every: usize,
    pub eval_batch: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: DatasetChoice::Synthetic,
            data_dir: String::new(),
            out_dir: "out".into(),
            num_classes: 4,
            synthetic_train: 4000,
            synthetic_test: 1000,
            noise_rate: 0.05,
            blocks: 1,
            timesteps: 8,
            d_model: 16,
            heads: 2,
            mlp_ratio: 2,
            patch_size: 4,
            taw_size: 4,
            denoise_threshold: 3.0,
            adn_enabled: true,
            adn_blocks: None,
            attn_scale: 0.125,
            tau_init: TAU_INIT,
            freeze_tau: false,
            lr: 0.003,
            lr_floor_ratio: 0.125,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.01,
            adam_eps: 1e-8,
            epochs: 50,
            batch_size: 64,
            seed: 42,
            grad_clip: 0.0,
            checkpoint_every: 0,
            eval_batch: 256,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str, ty: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| DistaError::Config(format!("key {key}: cannot parse {value:?} as {ty}")))
}

impl RunConfig {
    /// Parse flat `key = value` text. `#` starts a comment, blank lines are
    /// skipped, unknown and repeated keys are errors, missing keys take the
    /// documented defaults.
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        let mut seen: Vec<String> = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                DistaError::Config(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            if key.is_empty() {
                return Err(DistaError::Config(format!("line {}: empty key", lineno + 1)));
            }
            if seen.iter().any(|s| s == key) {
                return Err(DistaError::Config(format!("key {key} set twice")));
            }
            seen.push(key.to_string());
            cfg.set(key, value)?;
        }
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "dataset" => {
                self.dataset = match value {
                    "synthetic" => DatasetChoice::Synthetic,
                    "cifar10" => DatasetChoice::Cifar10,
                    other => {
                        return Err(DistaError::Config(format!(
                            "key dataset: {other:?} is not one of synthetic, cifar10"
                        )))
                    }
                }
            }
            "data_dir" => self.data_dir = value.to_string(),
            "out_dir" => self.out_dir = value.to_string(),
            "num_classes" => self.num_classes = parse_num(key, value, "integer")?,
            "synthetic_train" => self.synthetic_train = parse_num(key, value, "integer")?,
            "synthetic_test" => self.synthetic_test = parse_num(key, value, "integer")?,
            "noise_rate" => self.noise_rate = parse_num(key, value, "number")?,
            "blocks" => self.blocks = parse_num(key, value, "integer")?,
            "timesteps" => self.timesteps = parse_num(key, value, "integer")?,
            "d_model" => self.d_model = parse_num(key, value, "integer")?,
            "heads" => self.heads = parse_num(key, value, "integer")?,
            "mlp_ratio" => self.mlp_ratio = parse_num(key, value, "integer")?,
            "patch_size" => self.patch_size = parse_num(key, value, "integer")?,
            "taw_size" => self.taw_size = parse_num(key, value, "integer")?,
            "denoise_threshold" => self.denoise_threshold = parse_num(key, value, "number")?,
            "adn_enabled" => self.adn_enabled = parse_num(key, value, "true/false")?,
            "adn_blocks" => self.adn_blocks = Some(parse_num(key, value, "integer")?),
            "attn_scale" => self.attn_scale = parse_num(key, value, "number")?,
            "tau_init" => self.tau_init = parse_num(key, value, "number")?,
            "freeze_tau" => self.freeze_tau = parse_num(key, value, "true/false")?,
            "lr" => self.lr = parse_num(key, value, "number")?,
            "lr_floor_ratio" => self.lr_floor_ratio = parse_num(key, value, "number")?,
            "beta1" => self.beta1 = parse_num(key, value, "number")?,
            "beta2" => self.beta2 = parse_num(key, value, "number")?,
            "weight_decay" => self.weight_decay = parse_num(key, value, "number")?,
            "adam_eps" => self.adam_eps = parse_num(key, value, "number")?,
            "epochs" => self.epochs = parse_num(key, value, "integer")?,
            "batch_size" => self.batch_size = parse_num(key, value, "integer")?,
            "seed" => self.seed = parse_num(key, value, "integer")?,
            "grad_clip" => self.grad_clip = parse_num(key, value, "number")?,
            "checkpoint_every" => self.checkpoint_every = parse_num(key, value, "integer")?,
            "eval_batch" => self.eval_batch = parse_num(key, value, "integer")?,
            other => {
                return Err(DistaError::Config(format!("unknown config key {other:?}")));
            }
        }
        Ok(())
    }

    /// Denoising block count with the "all blocks" default resolved.
    pub fn effective_adn_blocks(&self) -> usize {
        self.adn_blocks.unwrap_or(self.blocks)
    }

    /// The experiment-identity serialization: every key that changes what a
    /// run computes, in a fixed order, one `key = value` line each. Paths
    /// (data_dir, out_dir) are excluded — moving a run's files around must
    /// not invalidate its checkpoints. Embedded in checkpoints and compared
    /// byte-for-byte on resume.
    pub fn canonical_identity(&self) -> String {
        let mut s = String::new();
        use std::fmt::Write;
        let _ = write!(
            s,
            "dataset = {}\nnum_classes = {}\nsynthetic_train = {}\nsynthetic_test = {}\n\
             noise_rate = {}\nblocks = {}\ntimesteps = {}\nd_model = {}\nheads = {}\n\
             mlp_ratio = {}\npatch_size = {}\ntaw_size = {}\ndenoise_threshold = {}\n\
             adn_enabled = {}\nadn_blocks = {}\nattn_scale = {}\ntau_init = {}\n\
             freeze_tau = {}\nlr = {}\nlr_floor_ratio = {}\n\
             beta1 = {}\nbeta2 = {}\nweight_decay = {}\nadam_eps = {}\nepochs = {}\n\
             batch_size = {}\nseed = {}\ngrad_clip = {}\ncheckpoint_every = {}\neval_batch = {}\n",
            self.dataset,
            self.num_classes,
            self.synthetic_train,
            self.synthetic_test,
            self.noise_rate,
            self.blocks,
            self.timesteps,
            self.d_model,
            self.heads,
            self.mlp_ratio,
            self.patch_size,
            self.taw_size,
            self.denoise_threshold,
            self.adn_enabled,
            self.effective_adn_blocks(),
            self.attn_scale,
            self.tau_init,
            self.freeze_tau,
            self.lr,
            self.lr_floor_ratio,
            self.beta1,
            self.beta2,
            self.weight_decay,
            self.adam_eps,
            self.epochs,
            self.batch_size,
            self.seed,
            self.grad_clip,
            self.checkpoint_every,
            self.eval_batch,
        );
        s
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(DistaError::Config("num_classes must be >= 2".into()));
        }
        match self.dataset {
            DatasetChoice::Synthetic => {
                for (key, count) in [
                    ("synthetic_train", self.synthetic_train),
                    ("synthetic_test", self.synthetic_test),
                ] {
                    if count == 0 || count % self.num_classes != 0 {
                        return Err(DistaError::Config(format!(
                            "{key} = {count} must be a positive multiple of num_classes = {}",
                            self.num_classes
                        )));
                    }
                }
                if !(0.0..1.0).contains(&self.noise_rate) {
                    return Err(DistaError::Config(format!(
                        "noise_rate = {} outside [0, 1)",
                        self.noise_rate
                    )));
                }
            }
            DatasetChoice::Cifar10 => {
                if self.num_classes > 10 {
                    return Err(DistaError::Config(format!(
                        "num_classes = {} but cifar10 has 10 labels",
                        self.num_classes
                    )));
                }
                if self.patch_size == 0 || 32 % self.patch_size != 0 {
                    return Err(DistaError::Config(format!(
                        "patch_size = {} must divide the 32-pixel image side",
                        self.patch_size
                    )));
                }
            }
        }
        if self.blocks == 0 {
            return Err(DistaError::Config("blocks must be >= 1".into()));
        }
        if self.timesteps == 0 {
            return Err(DistaError::Config("timesteps must be >= 1".into()));
        }
        if self.heads == 0 || self.d_model == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(DistaError::Config(format!(
                "d_model = {} must be a positive multiple of heads = {}",
                self.d_model, self.heads
            )));
        }
        if self.mlp_ratio == 0 {
            return Err(DistaError::Config("mlp_ratio must be >= 1".into()));
        }
        if self.taw_size == 0 || self.taw_size > self.timesteps {
            return Err(DistaError::Config(format!(
                "taw_size = {} must be in 1..=timesteps = {}",
                self.taw_size, self.timesteps
            )));
        }
        if !(self.denoise_threshold.is_finite() && self.denoise_threshold >= 0.0) {
            return Err(DistaError::Config(format!(
                "denoise_threshold = {} must be finite and >= 0",
                self.denoise_threshold
            )));
        }
        if self.effective_adn_blocks() > self.blocks {
            return Err(DistaError::Config(format!(
                "adn_blocks = {} exceeds blocks = {}",
                self.effective_adn_blocks(),
                self.blocks
            )));
        }
        if !(self.attn_scale.is_finite() && self.attn_scale > 0.0) {
            return Err(DistaError::Config(format!(
                "attn_scale = {} must be finite and positive",
                self.attn_scale
            )));
        }
        if !self.tau_init.is_finite() || !(TAU_MIN..=TAU_MAX).contains(&self.tau_init) {
            return Err(DistaError::Config(format!(
                "tau_init = {} outside [{TAU_MIN}, {TAU_MAX}]",
                self.tau_init
            )));
        }
        if !(self.grad_clip.is_finite() && self.grad_clip >= 0.0) {
            return Err(DistaError::Config(format!(
                "grad_clip = {} must be finite and >= 0 (0 disables)",
                self.grad_clip
            )));
        }
        if self.eval_batch == 0 {
            return Err(DistaError::Config("eval_batch must be >= 1".into()));
        }
        self.train_hyper().validate()?;
        Ok(())
    }

    pub fn train_hyper(&self) -> TrainHyper {
        TrainHyper {
            lr: self.lr,
            lr_floor_ratio: self.lr_floor_ratio,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed,
            grad_clip: (self.grad_clip > 0.0).then_some(self.grad_clip),
            freeze_tau: self.freeze_tau,
        }
    }

    pub fn attention_config(&self) -> AttentionConfig {
        AttentionConfig {
            taw_size: self.taw_size,
            denoise_threshold: self.denoise_threshold,
            adn_enabled: self.adn_enabled,
            heads: self.heads,
            head_dim: self.d_model / self.heads,
            attn_scale: self.attn_scale,
        }
    }

    /// Assemble the model description around a concrete input stem.
    pub fn model_config(&self, stem: StemInput) -> ModelConfig {
        ModelConfig {
            blocks: self.blocks,
            timesteps: self.timesteps,
            num_classes: self.num_classes,
            mlp_ratio: self.mlp_ratio,
            adn_blocks: self.effective_adn_blocks(),
            attention: self.attention_config(),
            stem,
        }
    }
}

/// Read, parse, and validate a config file.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| DistaError::io(format!("reading config {}", path.display()), e))?;
    let cfg = RunConfig::parse(&text)?;
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_validating_synthetic_defaults() {
        let cfg = RunConfig::parse("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.dataset, DatasetChoice::Synthetic);
        assert_eq!(cfg.denoise_threshold, 3.0);
        assert_eq!(cfg.lr, 0.003);
        cfg.validate().unwrap();
    }

    #[test]
    fn comments_whitespace_and_values_parse() {
        let text = "\n# a comment\n  taw_size = 2   # trailing comment\nlr=0.01\n\
                    dataset = cifar10\nadn_enabled = false\n";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.taw_size, 2);
        assert_eq!(cfg.lr, 0.01);
        assert_eq!(cfg.dataset, DatasetChoice::Cifar10);
        assert!(!cfg.adn_enabled);
    }

    #[test]
    fn denoise_threshold_key_parses_to_the_documented_default_value() {
        let cfg = RunConfig::parse("denoise_threshold = 3").unwrap();
        assert_eq!(cfg.denoise_threshold, 3.0);
    }

    #[test]
    fn unknown_duplicate_and_malformed_keys_are_named_errors() {
        let err = RunConfig::parse("frobnicate = 1").unwrap_err();
        assert!(format!("{err}").contains("frobnicate"), "{err}");
        let err = RunConfig::parse("lr = 0.1\nlr = 0.2").unwrap_err();
        assert!(format!("{err}").contains("lr"), "{err}");
        let err = RunConfig::parse("just some words").unwrap_err();
        assert!(format!("{err}").contains("key = value"), "{err}");
        let err = RunConfig::parse("blocks = banana").unwrap_err();
        assert!(format!("{err}").contains("blocks"), "{err}");
    }

    #[test]
    fn window_longer_than_the_run_is_a_cross_field_error() {
        let cfg = RunConfig::parse("taw_size = 9\ntimesteps = 4").unwrap();
        let err = cfg.validate().unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("taw_size") && msg.contains("timesteps"), "{msg}");
    }

    #[test]
    fn head_count_must_divide_the_model_width() {
        let cfg = RunConfig::parse("d_model = 17\nheads = 2").unwrap();
        assert!(cfg.validate().is_err());
        let cfg = RunConfig::parse("d_model = 16\nheads = 4").unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.attention_config().head_dim, 4);
    }

    #[test]
    fn canonical_identity_round_trips_and_excludes_paths() {
        let cfg = RunConfig {
            out_dir: "/tmp/somewhere".into(),
            data_dir: "/data".into(),
            adn_blocks: None,
            ..RunConfig::default()
        };
        let canon = cfg.canonical_identity();
        assert!(!canon.contains("somewhere") && !canon.contains("/data"));
        // Re-parsing the canonical text reproduces the same identity.
        let reparsed = RunConfig::parse(&canon).unwrap();
        assert_eq!(reparsed.canonical_identity(), canon);
        // The "all blocks" default resolves to a concrete count.
        assert!(canon.contains("adn_blocks = 1"));
        // Identity is sensitive to what it does include.
        let mut other = cfg.clone();
        other.seed = 43;
        assert_ne!(other.canonical_identity(), canon);
    }

    #[test]
    fn synthetic_counts_must_balance_classes() {
        let cfg = RunConfig::parse("synthetic_train = 4001").unwrap();
        assert!(cfg.validate().is_err());
        let cfg = RunConfig::parse("dataset = cifar10\nnum_classes = 11").unwrap();
        assert!(cfg.validate().is_err());
        let cfg = RunConfig::parse("dataset = cifar10\npatch_size = 5").unwrap();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn tau_controls_parse_validate_and_enter_the_identity() {
        let cfg = RunConfig::parse("tau_init = 1.01\nfreeze_tau = true").unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.tau_init, 1.01);
        assert!(cfg.freeze_tau);
        assert!(cfg.train_hyper().freeze_tau);
        let canon = cfg.canonical_identity();
        assert!(canon.contains("tau_init = 1.01") && canon.contains("freeze_tau = true"));
        // Out-of-range horizons are rejected up front.
        let cfg = RunConfig::parse("tau_init = 1.0").unwrap();
        assert!(cfg.validate().is_err());
        let cfg = RunConfig::parse("tau_init = 500").unwrap();
        assert!(cfg.validate().is_err());
        let err = RunConfig::parse("freeze_tau = yes").unwrap_err();
        assert!(format!("{err}").contains("freeze_tau"), "{err}");
    }

    #[test]
    fn grad_clip_zero_disables_clipping() {
        let cfg = RunConfig::parse("grad_clip = 0").unwrap();
        assert_eq!(cfg.train_hyper().grad_clip, None);
        let cfg = RunConfig::parse("grad_clip = 1.5").unwrap();
        assert_eq!(cfg.train_hyper().grad_clip, Some(1.5));
    }
}
