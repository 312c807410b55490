//! CIFAR-10 binary-format ingestion.
//!
//! The on-disk layout is the classic public one: records of exactly 3073
//! bytes — one label byte then 3072 pixel bytes (three 32x32 channel
//! planes, R then G then B). A directory holds `data_batch_1.bin` ..
//! `data_batch_5.bin` plus `test_batch.bin`. The loader scales pixels to
//! [0,1], optionally keeps only the first `class_limit` labels, and stores
//! per-channel standardization statistics computed from the training split.
//!
//! A deterministic grating generator can emit stand-in files in the same
//! format for machines that do not carry the real dataset; it exercises the
//! identical parse path.

use super::{ChannelNorm, DataKind, Dataset};
use crate::numerics::Scalar;
use crate::{DistaError, Result};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fs;
use std::path::{Path, PathBuf};

pub const SIDE: usize = 32;
pub const CHANNELS: usize = 3;
pub const IMAGE_BYTES: usize = CHANNELS * SIDE * SIDE;
pub const RECORD_BYTES: usize = 1 + IMAGE_BYTES;
pub const LABELS: usize = 10;

/// Environment variable that can point at a real dataset directory.
pub const DATA_DIR_ENV: &str = "DISTA_CIFAR10_DIR";

pub const TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const TEST_FILE: &str = "test_batch.bin";

/// One raw record: label byte plus channel-planar pixels.
pub type RawRecord = (u8, Vec<u8>);

/// Parse a batch file's bytes into records. The byte count must be an exact
/// multiple of the record size and every label must be a legal class.
pub fn parse_records(bytes: &[u8]) -> Result<Vec<RawRecord>> {
    if !bytes.len().is_multiple_of(RECORD_BYTES) {
        return Err(DistaError::Format(format!(
            "{} bytes is not a whole number of {RECORD_BYTES}-byte records",
            bytes.len()
        )));
    }
    let mut records = Vec::with_capacity(bytes.len() / RECORD_BYTES);
    for (i, chunk) in bytes.chunks_exact(RECORD_BYTES).enumerate() {
        let label = chunk[0];
        if label as usize >= LABELS {
            return Err(DistaError::Data(format!(
                "record {i}: label byte {label} exceeds {}",
                LABELS - 1
            )));
        }
        records.push((label, chunk[1..].to_vec()));
    }
    Ok(records)
}

/// Serialize records back to the binary batch layout; the exact inverse of
/// [`parse_records`].
pub fn serialize_records(records: &[RawRecord]) -> Result<Vec<u8>> {
    let mut bytes = Vec::with_capacity(records.len() * RECORD_BYTES);
    for (i, (label, pixels)) in records.iter().enumerate() {
        if pixels.len() != IMAGE_BYTES {
            return Err(DistaError::Format(format!(
                "record {i}: {} pixel bytes, expected {IMAGE_BYTES}",
                pixels.len()
            )));
        }
        bytes.push(*label);
        bytes.extend_from_slice(pixels);
    }
    Ok(bytes)
}

pub fn load_batch_file(path: &Path) -> Result<Vec<RawRecord>> {
    let bytes =
        fs::read(path).map_err(|e| DistaError::io(format!("reading {}", path.display()), e))?;
    parse_records(&bytes)
}

pub fn write_batch_file(path: &Path, records: &[RawRecord]) -> Result<()> {
    let bytes = serialize_records(records)?;
    fs::write(path, bytes).map_err(|e| DistaError::io(format!("writing {}", path.display()), e))
}

/// Resolve the dataset directory: an explicit non-empty config path wins,
/// otherwise the `DISTA_CIFAR10_DIR` environment variable.
pub fn resolve_dir(config_dir: &str) -> Result<PathBuf> {
    if !config_dir.is_empty() {
        return Ok(PathBuf::from(config_dir));
    }
    match std::env::var(DATA_DIR_ENV) {
        Ok(dir) if !dir.is_empty() => Ok(PathBuf::from(dir)),
        _ => Err(DistaError::Config(format!(
            "no dataset directory: set data_dir in the config or {DATA_DIR_ENV}"
        ))),
    }
}

fn records_to_dataset<T: Scalar>(
    records: Vec<RawRecord>,
    class_limit: usize,
) -> Result<Dataset<T>> {
    let scale = T::from_f64(1.0 / 255.0);
    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    for (label, pixels) in records {
        if (label as usize) < class_limit {
            inputs.push(pixels.iter().map(|&b| T::from_f64(b as f64) * scale).collect());
            labels.push(label as usize);
        }
    }
    Ok(Dataset {
        kind: DataKind::Image {
            channels: CHANNELS,
            side: SIDE,
        },
        inputs,
        labels,
        num_classes: class_limit,
        norm: None,
    })
}

/// Per-channel mean and standard deviation over a whole split (population
/// statistics, one pass in fixed order).
pub fn channel_statistics<T: Scalar>(ds: &Dataset<T>) -> Result<ChannelNorm<T>> {
    let (channels, side) = match ds.kind {
        DataKind::Image { channels, side } => (channels, side),
        DataKind::Sequence { .. } => {
            return Err(DistaError::Contract(
                "channel statistics apply to image datasets".into(),
            ))
        }
    };
    if ds.is_empty() {
        return Err(DistaError::Data("empty split has no statistics".into()));
    }
    let plane = side * side;
    let count = (ds.len() * plane) as f64;
    let mut mean = vec![0.0f64; channels];
    let mut sq = vec![0.0f64; channels];
    for input in &ds.inputs {
        for c in 0..channels {
            for &v in &input[c * plane..(c + 1) * plane] {
                let v = v.to_f64();
                mean[c] += v;
                sq[c] += v * v;
            }
        }
    }
    let mut std = vec![T::zero(); channels];
    let mut mean_t = vec![T::zero(); channels];
    for c in 0..channels {
        mean[c] /= count;
        let var = (sq[c] / count - mean[c] * mean[c]).max(0.0);
        // Guard constant channels so standardization never divides by zero.
        std[c] = T::from_f64(var.sqrt().max(1e-8));
        mean_t[c] = T::from_f64(mean[c]);
    }
    Ok(ChannelNorm {
        mean: mean_t,
        std,
    })
}

/// Load train and test splits from a directory of binary batch files,
/// keeping labels `0..class_limit`. Standardization statistics come from
/// the (filtered) training split and are attached to both datasets.
pub fn load_cifar10<T: Scalar>(
    dir: &Path,
    class_limit: usize,
) -> Result<(Dataset<T>, Dataset<T>)> {
    if !(2..=LABELS).contains(&class_limit) {
        return Err(DistaError::Config(format!(
            "class_limit {class_limit} outside 2..={LABELS}"
        )));
    }
    let mut train_records = Vec::new();
    for name in TRAIN_FILES {
        train_records.extend(load_batch_file(&dir.join(name))?);
    }
    let test_records = load_batch_file(&dir.join(TEST_FILE))?;
    let mut train = records_to_dataset::<T>(train_records, class_limit)?;
    let mut test = records_to_dataset::<T>(test_records, class_limit)?;
    let norm = channel_statistics(&train)?;
    train.norm = Some(norm.clone());
    test.norm = Some(norm);
    Ok((train, test))
}

fn unit_uniform(rng: &mut ChaCha8Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / 9007199254740992.0)
}

/// One stand-in record: a noisy sinusoidal grating, horizontal for label 0,
/// vertical for label 1, with random frequency, phase, amplitude and
/// per-channel gain. Learnable from pixels but not from any single pixel.
fn grating_record(label: u8, rng: &mut ChaCha8Rng) -> RawRecord {
    let cycles = 2.0 + (rng.next_u64() % 3) as f64;
    let phase = unit_uniform(rng) * std::f64::consts::TAU;
    let amplitude = 40.0 + unit_uniform(rng) * 50.0;
    let gains = [
        0.8 + unit_uniform(rng) * 0.4,
        0.8 + unit_uniform(rng) * 0.4,
        0.8 + unit_uniform(rng) * 0.4,
    ];
    let mut pixels = vec![0u8; IMAGE_BYTES];
    for y in 0..SIDE {
        for x in 0..SIDE {
            let coord = if label == 0 { y } else { x } as f64;
            let wave = (std::f64::consts::TAU * cycles * coord / SIDE as f64 + phase).sin();
            for (c, &gain) in gains.iter().enumerate() {
                let noise = (unit_uniform(rng) - 0.5) * 50.0;
                let value = 127.0 + gain * amplitude * wave + noise;
                pixels[c * SIDE * SIDE + y * SIDE + x] = value.clamp(0.0, 255.0) as u8;
            }
        }
    }
    (label, pixels)
}

/// Deterministically generate a stand-in two-class split in the standard
/// binary layout: labels alternate 0,1 so every file is class-balanced.
pub fn gen_grating_records(count: usize, seed: u64, split_tag: u64) -> Vec<RawRecord> {
    (0..count)
        .map(|idx| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream((split_tag << 32) | idx as u64);
            grating_record((idx % 2) as u8, &mut rng)
        })
        .collect()
}

/// Write a complete stand-in dataset directory: five training batch files
/// plus the test batch, all in the standard record format.
pub fn write_grating_standin(
    dir: &Path,
    train_total: usize,
    test_total: usize,
    seed: u64,
) -> Result<()> {
    if !train_total.is_multiple_of(TRAIN_FILES.len()) {
        return Err(DistaError::Config(format!(
            "train_total {train_total} must split evenly across {} files",
            TRAIN_FILES.len()
        )));
    }
    fs::create_dir_all(dir).map_err(|e| DistaError::io("creating stand-in dir", e))?;
    let train = gen_grating_records(train_total, seed, 0);
    let per_file = train_total / TRAIN_FILES.len();
    for (i, name) in TRAIN_FILES.iter().enumerate() {
        write_batch_file(&dir.join(name), &train[i * per_file..(i + 1) * per_file])?;
    }
    let test = gen_grating_records(test_total, seed, 1);
    write_batch_file(&dir.join(TEST_FILE), &test)
}
