//! Dataset ingestion and spike encoding.
//!
//! Two dataset families feed the model: image sets in the classic CIFAR-10
//! binary layout (see [`cifar`]) and a generated temporal-order set whose
//! classes differ only in the order frames appear (see [`synthetic`]).
//! Images enter the network as a constant current repeated at every
//! timestep ("direct" encoding); sequences carry their own time axis.

pub mod cifar;
pub mod synthetic;

use crate::model::{ModelInput, StemInput};
use crate::numerics::{Scalar, Tensor};
use crate::{DistaError, Result};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// What one sample's flattened input vector means.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataKind {
    /// Rows are `channels * side * side` channel-planar pixel values in [0,1].
    Image { channels: usize, side: usize },
    /// Rows are `timesteps * tokens * features` current values, time-major.
    Sequence {
        timesteps: usize,
        tokens: usize,
        features: usize,
    },
}

impl DataKind {
    pub fn sample_len(&self) -> usize {
        match *self {
            DataKind::Image { channels, side } => channels * side * side,
            DataKind::Sequence {
                timesteps,
                tokens,
                features,
            } => timesteps * tokens * features,
        }
    }
}

/// Per-channel standardization statistics, computed from a training split.
#[derive(Clone, Debug)]
pub struct ChannelNorm<T> {
    pub mean: Vec<T>,
    pub std: Vec<T>,
}

/// One split: flattened per-sample inputs plus class labels.
#[derive(Clone, Debug)]
pub struct Dataset<T: Scalar> {
    pub kind: DataKind,
    pub inputs: Vec<Vec<T>>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    /// Image standardization applied when batches are formed; `None` for
    /// sequences (they are already unit-scale binary currents).
    pub norm: Option<ChannelNorm<T>>,
}

impl<T: Scalar> Dataset<T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Model stem matching this data. Images need the patch size used to
    /// split them into tokens; sequences carry token geometry themselves.
    pub fn stem_input(&self, patch: usize) -> Result<StemInput> {
        match self.kind {
            DataKind::Image { channels, side } => {
                if patch == 0 || side % patch != 0 {
                    return Err(DistaError::Config(format!(
                        "patch size {patch} must divide image side {side}"
                    )));
                }
                Ok(StemInput::Image {
                    channels,
                    side,
                    patch,
                })
            }
            DataKind::Sequence {
                tokens, features, ..
            } => Ok(StemInput::Tokens { tokens, features }),
        }
    }

    pub fn timesteps(&self) -> Option<usize> {
        match self.kind {
            DataKind::Sequence { timesteps, .. } => Some(timesteps),
            DataKind::Image { .. } => None,
        }
    }

    /// Check the invariants every loader promises: consistent input lengths,
    /// in-range labels, and value ranges per kind (pixels in [0,1], sequence
    /// entries binary).
    pub fn validate(&self) -> Result<()> {
        if self.inputs.len() != self.labels.len() {
            return Err(DistaError::Data(format!(
                "{} inputs vs {} labels",
                self.inputs.len(),
                self.labels.len()
            )));
        }
        let expect = self.kind.sample_len();
        for (i, (input, &label)) in self.inputs.iter().zip(&self.labels).enumerate() {
            if input.len() != expect {
                return Err(DistaError::Data(format!(
                    "sample {i}: {} values, expected {expect}",
                    input.len()
                )));
            }
            if label >= self.num_classes {
                return Err(DistaError::Data(format!(
                    "sample {i}: label {label} out of range for {} classes",
                    self.num_classes
                )));
            }
            for &v in input {
                let v = v.to_f64();
                let ok = match self.kind {
                    DataKind::Image { .. } => (0.0..=1.0).contains(&v),
                    DataKind::Sequence { .. } => v == 0.0 || v == 1.0,
                };
                if !ok {
                    return Err(DistaError::Data(format!(
                        "sample {i}: value {v} outside the legal range for {:?}",
                        self.kind
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Standardize channel-planar image rows in place: `(x - mean_c) / std_c`.
pub fn standardize_images<T: Scalar>(
    rows: &mut Tensor<T>,
    norm: &ChannelNorm<T>,
    channels: usize,
) -> Result<()> {
    let cols = rows.cols();
    if channels == 0 || !cols.is_multiple_of(channels) {
        return Err(DistaError::Shape(format!(
            "{cols} pixels do not split into {channels} channels"
        )));
    }
    if norm.mean.len() != channels || norm.std.len() != channels {
        return Err(DistaError::Shape(format!(
            "norm has {} channels, image has {channels}",
            norm.mean.len()
        )));
    }
    let plane = cols / channels;
    let n_rows = rows.rows();
    for r in 0..n_rows {
        let row = rows.row_mut(r);
        for c in 0..channels {
            let mean = norm.mean[c];
            let inv = T::one() / norm.std[c];
            for v in &mut row[c * plane..(c + 1) * plane] {
                *v = (*v - mean) * inv;
            }
        }
    }
    Ok(())
}

/// Direct (constant-current) encoding: the image is presented unchanged at
/// every timestep and the LIF stem turns it into time-varying spikes.
pub fn encode_direct<T: Scalar>(image: &Tensor<T>, timesteps: usize) -> Result<Vec<Tensor<T>>> {
    if timesteps == 0 {
        return Err(DistaError::Config(
            "direct encoding needs at least one timestep".into(),
        ));
    }
    Ok(vec![image.clone(); timesteps])
}

/// Gather the selected samples into a model input plus labels. Image rows
/// are standardized with the dataset's stored training-split statistics.
pub fn make_batch<T: Scalar>(
    ds: &Dataset<T>,
    idxs: &[usize],
) -> Result<(ModelInput<T>, Vec<usize>)> {
    if idxs.is_empty() {
        return Err(DistaError::Contract("empty batch".into()));
    }
    let labels: Vec<usize> = idxs.iter().map(|&i| ds.labels[i]).collect();
    match ds.kind {
        DataKind::Image { channels, side } => {
            let cols = channels * side * side;
            let mut data = Vec::with_capacity(idxs.len() * cols);
            for &i in idxs {
                data.extend_from_slice(&ds.inputs[i]);
            }
            let mut rows = Tensor::from_vec(&[idxs.len(), cols], data)?;
            if let Some(norm) = &ds.norm {
                standardize_images(&mut rows, norm, channels)?;
            }
            Ok((ModelInput::Image(rows), labels))
        }
        DataKind::Sequence {
            timesteps,
            tokens,
            features,
        } => {
            let frame = tokens * features;
            let mut steps = Vec::with_capacity(timesteps);
            for t in 0..timesteps {
                let mut data = Vec::with_capacity(idxs.len() * frame);
                for &i in idxs {
                    data.extend_from_slice(&ds.inputs[i][t * frame..(t + 1) * frame]);
                }
                steps.push(Tensor::from_vec(&[idxs.len() * tokens, features], data)?);
            }
            Ok((ModelInput::Tokens(steps), labels))
        }
    }
}

/// Epoch-seeded shuffled batching. The shuffle is a Fisher-Yates pass driven
/// by a counter-mode stream per epoch, so any (seed, epoch) pair yields the
/// same order on every run and platform. A trailing batch of fewer than two
/// samples is dropped: train-mode batchnorm needs at least two rows.
pub fn batch_iter(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(DistaError::Config("batch_size must be >= 1".into()));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    for i in (1..n).rev() {
        let j = (rng.next_u64() % (i as u64 + 1)) as usize;
        idx.swap(i, j);
    }
    let mut batches: Vec<Vec<usize>> = idx.chunks(batch_size).map(|c| c.to_vec()).collect();
    if batches.last().map(|b| b.len() < 2).unwrap_or(false) {
        batches.pop();
    }
    Ok(batches)
}

/// Deterministic unshuffled batching for evaluation; keeps every sample
/// (inference-mode batchnorm accepts single rows).
pub fn eval_batches(n: usize, batch_size: usize) -> Vec<Vec<usize>> {
    (0..n)
        .collect::<Vec<_>>()
        .chunks(batch_size.max(1))
        .map(|c| c.to_vec())
        .collect()
}

/// Order-blind linear probe: average each sequence over time, then fit a
/// softmax regression by full-batch gradient descent. Returns test accuracy.
/// On a dataset whose classes share the same multiset of frames, the pooled
/// features carry no class signal and the probe stays at chance level.
pub fn pooled_probe_accuracy<T: Scalar>(
    train: &Dataset<T>,
    test: &Dataset<T>,
    gd_steps: usize,
    lr: f64,
) -> Result<f64> {
    let (timesteps, frame) = match train.kind {
        DataKind::Sequence {
            timesteps,
            tokens,
            features,
        } => (timesteps, tokens * features),
        DataKind::Image { .. } => {
            return Err(DistaError::Contract(
                "the order-blind probe applies to sequence datasets".into(),
            ))
        }
    };
    if train.kind != test.kind || train.is_empty() || test.is_empty() {
        return Err(DistaError::Contract(
            "probe needs matching non-empty splits".into(),
        ));
    }
    let classes = train.num_classes;
    let pool = |ds: &Dataset<T>| -> Vec<Vec<f64>> {
        ds.inputs
            .iter()
            .map(|input| {
                let mut mean = vec![0.0f64; frame];
                for t in 0..timesteps {
                    for (m, &v) in mean.iter_mut().zip(&input[t * frame..(t + 1) * frame]) {
                        *m += v.to_f64();
                    }
                }
                for m in &mut mean {
                    *m /= timesteps as f64;
                }
                mean
            })
            .collect()
    };
    let x_train = pool(train);
    let x_test = pool(test);
    // Weights [frame + 1 bias][classes], zero-initialized; plain softmax
    // regression under mean cross-entropy.
    let mut w = vec![0.0f64; (frame + 1) * classes];
    let logits = |w: &[f64], x: &[f64]| -> Vec<f64> {
        (0..classes)
            .map(|c| {
                let mut z = w[frame * classes + c];
                for (j, &xj) in x.iter().enumerate() {
                    z += w[j * classes + c] * xj;
                }
                z
            })
            .collect()
    };
    let n = x_train.len() as f64;
    for _ in 0..gd_steps {
        let mut grad = vec![0.0f64; w.len()];
        for (x, &y) in x_train.iter().zip(&train.labels) {
            let z = logits(&w, x);
            let zmax = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = z.iter().map(|&v| (v - zmax).exp()).collect();
            let sum: f64 = exps.iter().sum();
            for c in 0..classes {
                let p = exps[c] / sum - if c == y { 1.0 } else { 0.0 };
                for (j, &xj) in x.iter().enumerate() {
                    grad[j * classes + c] += p * xj;
                }
                grad[frame * classes + c] += p;
            }
        }
        for (wi, gi) in w.iter_mut().zip(&grad) {
            *wi -= lr * gi / n;
        }
    }
    let mut correct = 0usize;
    for (x, &y) in x_test.iter().zip(&test.labels) {
        let z = logits(&w, x);
        let mut best = 0usize;
        for c in 1..classes {
            if z[c] > z[best] {
                best = c;
            }
        }
        if best == y {
            correct += 1;
        }
    }
    Ok(correct as f64 / x_test.len() as f64)
}
