//! The four command entry points: train, eval, gradcheck, ablate.
//!
//! Commands are plain library functions returning `Result` so tests can
//! drive them in-process; the binary maps error classes onto exit codes.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::cli::checkpoint::{apply_checkpoint, load_checkpoint, save_checkpoint};
use crate::cli::config::{DatasetChoice, RunConfig};
use crate::cli::metrics::{MetricsRow, METRICS_HEADER};
use crate::data::cifar::{load_cifar10, resolve_dir};
use crate::data::synthetic::{gen_temporal_synthetic, SyntheticSpec};
use crate::data::Dataset;
use crate::model::{DistaModel, StemInput};
use crate::training::{
    evaluate, gradcheck_model, tau_closed_form_check, train_epoch, GradcheckSettings, OptimState,
};
use crate::{DistaError, Result};

/// Exclusive hold on an output directory, via a `.lock` file created with
/// `create_new`. Released (file removed) on drop, including on error paths.
#[derive(Debug)]
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<DirLock> {
        fs::create_dir_all(dir)
            .map_err(|e| DistaError::io(format!("creating output dir {}", dir.display()), e))?;
        let path = dir.join(".lock");
        fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(|e| {
                DistaError::io(
                    format!(
                        "locking output dir {} (is another run writing here? remove a stale .lock by hand)",
                        dir.display()
                    ),
                    e,
                )
            })?;
        Ok(DirLock { path })
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Materialize the configured train and test splits.
pub fn build_datasets(cfg: &RunConfig) -> Result<(Dataset<f32>, Dataset<f32>)> {
    match cfg.dataset {
        DatasetChoice::Synthetic => {
            let spec = SyntheticSpec::default_task(
                cfg.num_classes,
                cfg.timesteps,
                cfg.noise_rate,
                cfg.seed,
            );
            gen_temporal_synthetic(&spec, cfg.synthetic_train, cfg.synthetic_test)
        }
        DatasetChoice::Cifar10 => {
            let dir = resolve_dir(&cfg.data_dir)?;
            load_cifar10(&dir, cfg.num_classes)
        }
    }
}

fn build_model(cfg: &RunConfig, data: &Dataset<f32>) -> Result<DistaModel<f32>> {
    let stem = data.stem_input(cfg.patch_size)?;
    let model_cfg = cfg.model_config(stem);
    model_cfg.validate()?;
    let mut model = DistaModel::init(model_cfg, cfg.seed)?;
    model.set_tau(cfg.tau_init)?;
    Ok(model)
}

/// Train per the config; write one metrics row per epoch and checkpoint at
/// the configured cadence (plus the final epoch). `resume` restores a
/// checkpoint whose embedded config must match this one byte-for-byte;
/// `stop_after` caps how many epochs THIS invocation runs (a clean stop,
/// for exercising resume). Returns the last epoch's metrics row, if any
/// epoch ran.
pub fn cmd_train(
    cfg: &RunConfig,
    resume: Option<&Path>,
    stop_after: Option<usize>,
) -> Result<Option<MetricsRow>> {
    cfg.validate()?;
    let out_dir = PathBuf::from(&cfg.out_dir);
    let _lock = DirLock::acquire(&out_dir)?;
    let (train, test) = build_datasets(cfg)?;
    let mut model = build_model(cfg, &train)?;
    let mut optim = OptimState::new(&model.params);
    let identity = cfg.canonical_identity();
    let metrics_path = out_dir.join("metrics.csv");
    let ckpt_path = out_dir.join("checkpoint.bin");

    let mut start_epoch = 0usize;
    if let Some(path) = resume {
        let ckpt = load_checkpoint::<f32>(path)?;
        if ckpt.config_identity != identity {
            return Err(DistaError::Compat(format!(
                "checkpoint {} was trained under a different config; resume refused",
                path.display()
            )));
        }
        apply_checkpoint(&ckpt, &mut model, &mut optim)?;
        start_epoch = ckpt.epochs_done as usize;
    }

    let mut metrics = if resume.is_some() && metrics_path.exists() {
        fs::OpenOptions::new()
            .append(true)
            .open(&metrics_path)
            .map_err(|e| DistaError::io(format!("opening {}", metrics_path.display()), e))?
    } else {
        let mut f = fs::File::create(&metrics_path)
            .map_err(|e| DistaError::io(format!("creating {}", metrics_path.display()), e))?;
        writeln!(f, "{METRICS_HEADER}")
            .map_err(|e| DistaError::io("writing metrics header", e))?;
        f
    };

    let hyper = cfg.train_hyper();
    let end_epoch = match stop_after {
        Some(k) => cfg.epochs.min(start_epoch + k),
        None => cfg.epochs,
    };
    let mut last = None;
    for epoch in start_epoch..end_epoch {
        let t0 = Instant::now();
        let stats = train_epoch(&mut model, &mut optim, &hyper, &train, epoch)?;
        let (test_loss, test_acc) = evaluate(&mut model, &test, cfg.eval_batch)?;
        let row = MetricsRow {
            epoch: epoch + 1,
            train_loss: stats.train_loss,
            train_acc: stats.train_acc,
            test_loss,
            test_acc,
            lr: stats.lr,
            tau_mean: stats.tau_mean,
            tau_min: stats.tau_min,
            tau_max: stats.tau_max,
            wall_seconds: t0.elapsed().as_secs_f64(),
        };
        writeln!(metrics, "{}", row.csv_row())
            .map_err(|e| DistaError::io("appending metrics row", e))?;
        metrics
            .flush()
            .map_err(|e| DistaError::io("flushing metrics", e))?;
        println!("{}", row.console_line(cfg.epochs));
        let done = epoch + 1;
        let cadence_hit = cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0;
        if cadence_hit || done == end_epoch {
            save_checkpoint(&ckpt_path, &identity, &model, &optim, done as u32, cfg.seed)?;
        }
        last = Some(row);
    }
    Ok(last)
}

/// Evaluate a checkpoint on the configured test split and print one
/// machine-parsable line: `test_acc=<float> test_loss=<float>`.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path) -> Result<(f64, f64)> {
    cfg.validate()?;
    let (_train, test) = build_datasets(cfg)?;
    let mut model = build_model(cfg, &test)?;
    let mut optim = OptimState::new(&model.params);
    let ckpt = load_checkpoint::<f32>(checkpoint)?;
    apply_checkpoint(&ckpt, &mut model, &mut optim)?;
    let (test_loss, test_acc) = evaluate(&mut model, &test, cfg.eval_batch)?;
    println!("test_acc={test_acc} test_loss={test_loss}");
    Ok((test_loss, test_acc))
}

/// The token-stem probe geometry gradcheck uses for the configured dataset:
/// the same frame shape the model would see in training, minus the image
/// pipeline (the check feeds dense random frames directly).
fn gradcheck_stem(cfg: &RunConfig) -> StemInput {
    match cfg.dataset {
        DatasetChoice::Synthetic => {
            let spec = SyntheticSpec::default_task(
                cfg.num_classes,
                cfg.timesteps,
                cfg.noise_rate,
                cfg.seed,
            );
            StemInput::Tokens {
                tokens: spec.frame_side,
                features: spec.frame_side,
            }
        }
        DatasetChoice::Cifar10 => {
            let grid = 32 / cfg.patch_size;
            StemInput::Tokens {
                tokens: grid * grid,
                features: 3 * cfg.patch_size * cfg.patch_size,
            }
        }
    }
}

/// Compare the full model's backward pass against central finite
/// differences in f64 smooth mode, plus the closed-form two-step membrane
/// time-constant gradient. Prints per-parameter-group maxima; errors
/// (gradcheck class, exit 5) listing offenders if any group exceeds 1e-4
/// or the closed form misses 1e-6. `corrupt` deliberately damages one
/// analytic gradient first, as a negative-control fixture.
pub fn cmd_gradcheck(cfg: &RunConfig, corrupt: bool) -> Result<()> {
    cfg.validate()?;
    let model_cfg = cfg.model_config(gradcheck_stem(cfg));
    model_cfg.validate()?;
    let settings = GradcheckSettings {
        tau_init: cfg.tau_init,
        ..GradcheckSettings::default()
    };
    let report = gradcheck_model(&model_cfg, &settings, corrupt)?;
    for (group, rel, n) in &report.groups {
        println!("group {group}: max_rel_err={rel:.3e} over {n} coordinates");
    }
    if report.skipped > 0 {
        println!(
            "skipped {} coordinates whose perturbation crossed a denoise boundary",
            report.skipped
        );
    }
    if !report.groups.iter().any(|(g, _, _)| g == "tau") {
        return Err(DistaError::Gradcheck(
            "no membrane time-constant group was checked".into(),
        ));
    }
    let tau_rel = tau_closed_form_check::<f64>()?;
    println!("tau closed-form two-step gradient: rel_err={tau_rel:.3e}");
    let tau_ok = tau_rel < 1e-6;
    if report.passed() && tau_ok {
        println!(
            "gradcheck passed: max_rel_err={:.3e} over {} coordinates",
            report.max_rel_err, report.checked
        );
        return Ok(());
    }
    let mut offenders: Vec<String> = report
        .offenders
        .iter()
        .map(|(name, j, rel)| format!("{name}[{j}] rel_err={rel:.3e}"))
        .collect();
    if !tau_ok {
        offenders.push(format!("tau closed-form rel_err={tau_rel:.3e}"));
    }
    Err(DistaError::Gradcheck(format!(
        "tolerance {} exceeded by: {}",
        report.tolerance,
        offenders.join(", ")
    )))
}

/// The sweepable hyperparameter axes.
pub const ABLATE_AXES: [&str; 4] = ["timesteps", "taw_size", "denoise_threshold", "adn_blocks"];

fn apply_axis(cfg: &mut RunConfig, axis: &str, value: &str) -> Result<String> {
    let as_count = |v: &str| -> Result<usize> {
        v.parse().map_err(|_| {
            DistaError::Config(format!("axis {axis}: value {v:?} is not a non-negative integer"))
        })
    };
    match axis {
        "timesteps" => {
            let t = as_count(value)?;
            cfg.timesteps = t;
            // Keep the window legal as the run shortens; sweeping T studies
            // the schedule length, not the window.
            cfg.taw_size = cfg.taw_size.min(t);
            Ok(t.to_string())
        }
        "taw_size" => {
            let w = as_count(value)?;
            cfg.taw_size = w;
            Ok(w.to_string())
        }
        "denoise_threshold" => {
            let u: f64 = value.parse().map_err(|_| {
                DistaError::Config(format!("axis {axis}: value {value:?} is not a number"))
            })?;
            cfg.denoise_threshold = u;
            cfg.adn_enabled = true;
            Ok(format!("{u}"))
        }
        "adn_blocks" => {
            let b = as_count(value)?;
            cfg.adn_blocks = Some(b);
            cfg.adn_enabled = b > 0;
            Ok(b.to_string())
        }
        other => Err(DistaError::Config(format!(
            "unknown ablation axis {other:?}; pick one of {}",
            ABLATE_AXES.join(", ")
        ))),
    }
}

/// Train one run per value of the chosen axis (identical seed throughout),
/// each in its own subdirectory, and summarize final test metrics in
/// `ablation.csv` at the output root.
pub fn cmd_ablate(cfg: &RunConfig, axis: &str, values_csv: &str) -> Result<()> {
    cfg.validate()?;
    let values: Vec<&str> = values_csv
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .collect();
    if values.is_empty() {
        return Err(DistaError::Config(
            "ablate needs at least one value (e.g. --values 1,2,4)".into(),
        ));
    }
    let out_root = PathBuf::from(&cfg.out_dir);
    let _lock = DirLock::acquire(&out_root)?;
    let mut rows: Vec<(String, MetricsRow)> = Vec::new();
    for value in &values {
        let mut sub = cfg.clone();
        let label = apply_axis(&mut sub, axis, value)?;
        sub.out_dir = out_root
            .join(format!("{axis}_{label}"))
            .to_string_lossy()
            .into_owned();
        sub.validate()?;
        println!("--- {axis} = {label} ---");
        let last = cmd_train(&sub, None, None)?.ok_or_else(|| {
            DistaError::Contract("ablation run completed zero epochs".into())
        })?;
        rows.push((label, last));
    }
    let mut csv = String::from("axis,value,epochs,test_acc,test_loss\n");
    for (label, row) in &rows {
        use std::fmt::Write as _;
        let _ = writeln!(
            csv,
            "{axis},{label},{},{},{}",
            row.epoch, row.test_acc, row.test_loss
        );
    }
    let path = out_root.join("ablation.csv");
    fs::write(&path, csv).map_err(|e| DistaError::io(format!("writing {}", path.display()), e))?;
    Ok(())
}
