//! Generated temporal-order classification task.
//!
//! Every class shows the SAME set of binary frames; classes differ only in
//! the cyclic order the frames appear. Each sample optionally starts at a
//! random phase of its class's cycle, which makes the frame shown at any
//! fixed timestep uniform over all frames for every class — so neither a
//! time-pooled nor a per-timestep readout can separate classes. The only
//! class signal is *which frame follows which*, i.e. temporal order.

use super::{DataKind, Dataset};
use crate::numerics::records::{read_record, read_u32, write_record, write_u32};
use crate::numerics::{Scalar, Tensor};
use crate::{DistaError, Result};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

/// Stream ids: sample streams are `split_tag << 32 | index`, so reserving a
/// tag far above any split keeps frame generation collision-free.
const FRAME_STREAM: u64 = 1 << 40;
const TRAIN_TAG: u64 = 0;
const TEST_TAG: u64 = 1;

/// Full description of one generated temporal-order task.
#[derive(Clone, Debug)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    /// K binary frames, each `frame_side * frame_side` entries in {0,1}.
    pub frames: Vec<Vec<u8>>,
    pub frame_side: usize,
    pub timesteps: usize,
    /// One ordering of the K frame indices per class.
    pub permutations: Vec<Vec<usize>>,
    /// Per-entry flip probability applied independently to every pixel.
    pub noise_rate: f64,
    /// Start each sample at a random point of its class cycle. This is what
    /// guarantees per-timestep marginals are class-independent; disable it
    /// only for constructions that need aligned sequences.
    pub random_phase: bool,
    pub seed: u64,
}

impl SyntheticSpec {
    /// The default desk-scale task: four classes over four half-dense 8x8
    /// frames, distinguishable only through their cyclic frame order.
    pub fn default_task(num_classes: usize, timesteps: usize, noise_rate: f64, seed: u64) -> Self {
        let frame_side = 8;
        let k = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(FRAME_STREAM);
        let frames = equal_density_frames(k, frame_side * frame_side, &mut rng);
        // Orderings pairwise distinct as cycles (no rotation maps one onto
        // another), so random phases cannot alias classes.
        let pool: [[usize; 4]; 6] = [
            [0, 1, 2, 3],
            [0, 1, 3, 2],
            [0, 2, 1, 3],
            [0, 3, 2, 1],
            [0, 2, 3, 1],
            [0, 3, 1, 2],
        ];
        let permutations = pool
            .iter()
            .take(num_classes)
            .map(|p| p.to_vec())
            .collect();
        SyntheticSpec {
            num_classes,
            frames,
            frame_side,
            timesteps,
            permutations,
            noise_rate,
            random_phase: true,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.frames.len();
        if k == 0 {
            return Err(DistaError::Config("need at least one frame".into()));
        }
        if self.timesteps == 0 {
            return Err(DistaError::Config("need at least one timestep".into()));
        }
        if self.num_classes < 2 {
            return Err(DistaError::Config("need at least two classes".into()));
        }
        if self.permutations.len() != self.num_classes {
            return Err(DistaError::Config(format!(
                "{} orderings for {} classes",
                self.permutations.len(),
                self.num_classes
            )));
        }
        if !(0.0..1.0).contains(&self.noise_rate) {
            return Err(DistaError::Config(format!(
                "noise_rate {} outside [0,1)",
                self.noise_rate
            )));
        }
        let pixels = self.frame_side * self.frame_side;
        for (i, f) in self.frames.iter().enumerate() {
            if f.len() != pixels {
                return Err(DistaError::Config(format!(
                    "frame {i}: {} entries, expected {pixels}",
                    f.len()
                )));
            }
            if f.iter().any(|&b| b > 1) {
                return Err(DistaError::Config(format!("frame {i} is not binary")));
            }
            for (j, g) in self.frames[..i].iter().enumerate() {
                if f == g {
                    return Err(DistaError::Config(format!("frames {j} and {i} coincide")));
                }
            }
        }
        for (c, p) in self.permutations.iter().enumerate() {
            let mut seen = vec![false; k];
            if p.len() != k {
                return Err(DistaError::Config(format!(
                    "class {c}: ordering length {} != {k} frames",
                    p.len()
                )));
            }
            for &f in p {
                if f >= k || seen[f] {
                    return Err(DistaError::Config(format!(
                        "class {c}: ordering is not a permutation of the frames"
                    )));
                }
                seen[f] = true;
            }
        }
        for c in 0..self.num_classes {
            for d in 0..c {
                let equal = if self.random_phase {
                    cyclically_equal(&self.permutations[c], &self.permutations[d])
                } else {
                    self.permutations[c] == self.permutations[d]
                };
                if equal {
                    return Err(DistaError::Config(format!(
                        "classes {d} and {c} share the same frame order{}",
                        if self.random_phase { " up to rotation" } else { "" }
                    )));
                }
            }
        }
        Ok(())
    }

    /// Which position of the class cycle a timestep reads. With more steps
    /// than frames, each frame holds for a block of consecutive steps; with
    /// fewer, the sequence is a truncated window of the cycle.
    fn cycle_position(&self, t: usize) -> usize {
        let k = self.frames.len();
        if self.timesteps >= k {
            t * k / self.timesteps
        } else {
            t
        }
    }
}

fn cyclically_equal(a: &[usize], b: &[usize]) -> bool {
    let k = a.len();
    (0..k).any(|shift| (0..k).all(|i| a[i] == b[(i + shift) % k]))
}

/// K distinct binary patterns with exactly half the entries set, so no frame
/// is identifiable by overall activity.
fn equal_density_frames(k: usize, pixels: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<u8>> {
    let mut frames: Vec<Vec<u8>> = Vec::with_capacity(k);
    while frames.len() < k {
        let mut order: Vec<usize> = (0..pixels).collect();
        for i in (1..pixels).rev() {
            let j = (rng.next_u64() % (i as u64 + 1)) as usize;
            order.swap(i, j);
        }
        let mut frame = vec![0u8; pixels];
        for &p in order.iter().take(pixels / 2) {
            frame[p] = 1;
        }
        if !frames.contains(&frame) {
            frames.push(frame);
        }
    }
    frames
}

fn unit_uniform(rng: &mut ChaCha8Rng) -> f64 {
    // 53 mantissa bits of a raw draw; avoids sampler implementation drift.
    (rng.next_u64() >> 11) as f64 * (1.0 / 9007199254740992.0)
}

/// Generate one split. Every sample gets its own counter-mode stream keyed
/// by (split, index), so the result is independent of generation order.
fn gen_split<T: Scalar>(spec: &SyntheticSpec, count: usize, split_tag: u64) -> Result<Dataset<T>> {
    if !count.is_multiple_of(spec.num_classes) {
        return Err(DistaError::Config(format!(
            "split size {count} is not divisible by {} classes",
            spec.num_classes
        )));
    }
    let k = spec.frames.len();
    let pixels = spec.frame_side * spec.frame_side;
    let mut inputs = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    for idx in 0..count {
        let label = idx % spec.num_classes;
        let perm = &spec.permutations[label];
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream((split_tag << 32) | idx as u64);
        let phase = if spec.random_phase {
            (rng.next_u64() % k as u64) as usize
        } else {
            0
        };
        let mut data = Vec::with_capacity(spec.timesteps * pixels);
        for t in 0..spec.timesteps {
            let frame = &spec.frames[perm[(phase + spec.cycle_position(t)) % k]];
            for &bit in frame {
                let mut v = bit;
                if spec.noise_rate > 0.0 && unit_uniform(&mut rng) < spec.noise_rate {
                    v ^= 1;
                }
                data.push(T::from_f64(v as f64));
            }
        }
        inputs.push(data);
        labels.push(label);
    }
    Ok(Dataset {
        kind: DataKind::Sequence {
            timesteps: spec.timesteps,
            tokens: spec.frame_side,
            features: spec.frame_side,
        },
        inputs,
        labels,
        num_classes: spec.num_classes,
        norm: None,
    })
}

/// Generate train and test splits of the temporal-order task.
pub fn gen_temporal_synthetic<T: Scalar>(
    spec: &SyntheticSpec,
    train_count: usize,
    test_count: usize,
) -> Result<(Dataset<T>, Dataset<T>)> {
    spec.validate()?;
    let train = gen_split(spec, train_count, TRAIN_TAG)?;
    let test = gen_split(spec, test_count, TEST_TAG)?;
    Ok((train, test))
}

const DATASET_MAGIC: &[u8; 4] = b"DSDS";
const DATASET_VERSION: u32 = 1;

/// Serialize a sequence dataset as a self-describing tensor-record container
/// (same record layout as checkpoints).
pub fn save_dataset<T: Scalar>(path: &Path, ds: &Dataset<T>) -> Result<()> {
    let (timesteps, tokens, features) = match ds.kind {
        DataKind::Sequence {
            timesteps,
            tokens,
            features,
        } => (timesteps, tokens, features),
        DataKind::Image { .. } => {
            return Err(DistaError::Contract(
                "dataset containers hold sequence datasets".into(),
            ))
        }
    };
    let file = File::create(path).map_err(|e| DistaError::io("creating dataset file", e))?;
    let mut w = BufWriter::new(file);
    w.write_all(DATASET_MAGIC)
        .map_err(|e| DistaError::io("writing dataset magic", e))?;
    write_u32(&mut w, DATASET_VERSION)?;
    let meta: Vec<T> = [
        ds.num_classes,
        timesteps,
        tokens,
        features,
        ds.len(),
    ]
    .iter()
    .map(|&v| T::from_f64(v as f64))
    .collect();
    write_record(&mut w, "meta", &[meta.len()], &meta)?;
    let labels: Vec<T> = ds.labels.iter().map(|&l| T::from_f64(l as f64)).collect();
    write_record(&mut w, "labels", &[labels.len()], &labels)?;
    let flat: Vec<T> = ds.inputs.iter().flatten().copied().collect();
    write_record(
        &mut w,
        "inputs",
        &[ds.len(), timesteps * tokens * features],
        &flat,
    )?;
    w.flush().map_err(|e| DistaError::io("flushing dataset file", e))
}

/// Read back a container written by [`save_dataset`].
pub fn load_dataset<T: Scalar>(path: &Path) -> Result<Dataset<T>> {
    let file = File::open(path).map_err(|e| DistaError::io("opening dataset file", e))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    std::io::Read::read_exact(&mut r, &mut magic)
        .map_err(|e| DistaError::io("reading dataset magic", e))?;
    if &magic != DATASET_MAGIC {
        return Err(DistaError::Format(format!(
            "bad dataset magic {magic:?}, expected {DATASET_MAGIC:?}"
        )));
    }
    let version = read_u32(&mut r)?;
    if version != DATASET_VERSION {
        return Err(DistaError::Format(format!(
            "dataset container version {version}, expected {DATASET_VERSION}"
        )));
    }
    let mut named: std::collections::HashMap<String, Tensor<T>> = std::collections::HashMap::new();
    for _ in 0..3 {
        let (name, tensor) = read_record(&mut r)?;
        named.insert(name, tensor);
    }
    let need = |named: &std::collections::HashMap<String, Tensor<T>>, key: &str| {
        named
            .get(key)
            .cloned()
            .ok_or_else(|| DistaError::Format(format!("dataset container lacks record {key}")))
    };
    let meta = need(&named, "meta")?;
    if meta.len() != 5 {
        return Err(DistaError::Format("malformed dataset meta record".into()));
    }
    let p = |i: usize| meta.data()[i].to_f64() as usize;
    let (num_classes, timesteps, tokens, features, count) = (p(0), p(1), p(2), p(3), p(4));
    let labels_t = need(&named, "labels")?;
    let inputs_t = need(&named, "inputs")?;
    let sample = timesteps * tokens * features;
    if labels_t.len() != count || inputs_t.len() != count * sample {
        return Err(DistaError::Format(
            "dataset record sizes disagree with meta".into(),
        ));
    }
    let labels: Vec<usize> = labels_t.data().iter().map(|&l| l.to_f64() as usize).collect();
    let inputs: Vec<Vec<T>> = (0..count)
        .map(|i| inputs_t.data()[i * sample..(i + 1) * sample].to_vec())
        .collect();
    let ds = Dataset {
        kind: DataKind::Sequence {
            timesteps,
            tokens,
            features,
        },
        inputs,
        labels,
        num_classes,
        norm: None,
    };
    ds.validate()?;
    Ok(ds)
}
