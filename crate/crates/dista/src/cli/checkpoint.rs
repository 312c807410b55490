//! Binary checkpoint container: fixed little-endian layout, byte-identical
//! round trips, and two-phase (validate-then-apply) restore so a bad file
//! never leaves a model half-mutated.
//!
//! Layout: magic `DSTA` | u32 version | u32 config length | canonical config
//! text | u32 completed epochs | u64 optimizer step | u64 seed | u32 record
//! count | named tensor records (parameters, then batchnorm running
//! statistics, then first and second Adam moments, all in registry order).

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::model::DistaModel;
use crate::numerics::records::{read_record, read_u32, read_u64, write_record, write_u32, write_u64};
use crate::numerics::{Scalar, Tensor};
use crate::training::OptimState;
use crate::{DistaError, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DSTA";
pub const CHECKPOINT_VERSION: u32 = 1;
/// Upper bound on the embedded config text; larger claims are corruption.
const MAX_CONFIG_BYTES: u32 = 1 << 20;
/// Upper bound on the record count; larger claims are corruption.
const MAX_RECORDS: u32 = 1 << 20;

/// A parsed checkpoint, not yet applied to any model.
#[derive(Clone, Debug)]
pub struct Checkpoint<T: Scalar> {
    /// The canonical experiment-identity config the run was trained with.
    pub config_identity: String,
    /// Number of completed epochs; resuming continues at the next one.
    pub epochs_done: u32,
    pub optim_step: u64,
    /// The run seed. All shuffling and noise derive from (seed, epoch)
    /// counters, so seed plus epoch count reconstructs the exact stream
    /// state an uninterrupted run would have.
    pub seed: u64,
    pub records: Vec<(String, Tensor<T>)>,
}

/// The record names and shapes a model/optimizer pair serializes to, in
/// file order.
fn expected_records<T: Scalar>(model: &DistaModel<T>) -> Vec<(String, Vec<usize>)> {
    let mut expected = Vec::new();
    for entry in model.params.entries() {
        expected.push((format!("param.{}", entry.name), entry.value.shape().to_vec()));
    }
    for (name, values) in model.state_tensors() {
        expected.push((format!("state.{name}"), vec![values.len()]));
    }
    for moment in ["m", "v"] {
        for entry in model.params.entries() {
            expected.push((
                format!("optim.{moment}.{}", entry.name),
                entry.value.shape().to_vec(),
            ));
        }
    }
    expected
}

/// Serialize model + optimizer state to `path` atomically (write a
/// temporary sibling, then rename into place).
pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    config_identity: &str,
    model: &DistaModel<T>,
    optim: &OptimState<T>,
    epochs_done: u32,
    seed: u64,
) -> Result<()> {
    let state = model.state_tensors();
    let n_records = model.params.len() + state.len() + 2 * model.params.len();
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    write_u32(&mut buf, CHECKPOINT_VERSION)?;
    let cfg_bytes = config_identity.as_bytes();
    if cfg_bytes.len() > MAX_CONFIG_BYTES as usize {
        return Err(DistaError::Format(format!(
            "config text of {} bytes exceeds the checkpoint limit",
            cfg_bytes.len()
        )));
    }
    write_u32(&mut buf, cfg_bytes.len() as u32)?;
    buf.extend_from_slice(cfg_bytes);
    write_u32(&mut buf, epochs_done)?;
    write_u64(&mut buf, optim.step)?;
    write_u64(&mut buf, seed)?;
    write_u32(&mut buf, n_records as u32)?;
    for entry in model.params.entries() {
        write_record(
            &mut buf,
            &format!("param.{}", entry.name),
            entry.value.shape(),
            entry.value.data(),
        )?;
    }
    for (name, values) in &state {
        write_record(&mut buf, &format!("state.{name}"), &[values.len()], values)?;
    }
    for (moment, tensors) in [("m", &optim.m), ("v", &optim.v)] {
        if tensors.len() != model.params.len() {
            return Err(DistaError::Contract(format!(
                "optimizer holds {} {moment}-tensors for {} parameters",
                tensors.len(),
                model.params.len()
            )));
        }
        for (entry, t) in model.params.entries().iter().zip(tensors.iter()) {
            write_record(
                &mut buf,
                &format!("optim.{moment}.{}", entry.name),
                t.shape(),
                t.data(),
            )?;
        }
    }

    let tmp = path.with_file_name(format!(
        "{}.tmp",
        path.file_name()
            .and_then(|n| n.to_str())
            .unwrap_or("checkpoint.bin")
    ));
    {
        let file = fs::File::create(&tmp)
            .map_err(|e| DistaError::io(format!("creating {}", tmp.display()), e))?;
        let mut w = BufWriter::new(file);
        w.write_all(&buf)
            .map_err(|e| DistaError::io(format!("writing {}", tmp.display()), e))?;
        w.flush()
            .map_err(|e| DistaError::io(format!("flushing {}", tmp.display()), e))?;
    }
    fs::rename(&tmp, path).map_err(|e| {
        DistaError::io(
            format!("renaming {} to {}", tmp.display(), path.display()),
            e,
        )
    })
}

/// Parse a checkpoint file. Rejects bad magic, unknown versions, hostile
/// lengths, and trailing garbage; never mutates anything.
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let file = fs::File::open(path)
        .map_err(|e| DistaError::io(format!("opening checkpoint {}", path.display()), e))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|e| DistaError::io("reading checkpoint magic", e))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(DistaError::Format(format!(
            "bad checkpoint magic {magic:?} (expected {CHECKPOINT_MAGIC:?})"
        )));
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(DistaError::Format(format!(
            "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let cfg_len = read_u32(&mut r)?;
    if cfg_len > MAX_CONFIG_BYTES {
        return Err(DistaError::Format(format!(
            "config length {cfg_len} exceeds the checkpoint limit"
        )));
    }
    let mut cfg_bytes = vec![0u8; cfg_len as usize];
    r.read_exact(&mut cfg_bytes)
        .map_err(|e| DistaError::io("reading embedded config", e))?;
    let config_identity = String::from_utf8(cfg_bytes)
        .map_err(|_| DistaError::Format("embedded config is not valid UTF-8".into()))?;
    let epochs_done = read_u32(&mut r)?;
    let optim_step = read_u64(&mut r)?;
    let seed = read_u64(&mut r)?;
    let n_records = read_u32(&mut r)?;
    if n_records > MAX_RECORDS {
        return Err(DistaError::Format(format!(
            "record count {n_records} exceeds the checkpoint limit"
        )));
    }
    let mut records = Vec::with_capacity(n_records as usize);
    for _ in 0..n_records {
        records.push(read_record::<T, _>(&mut r)?);
    }
    let mut probe = [0u8; 1];
    match r.read(&mut probe) {
        Ok(0) => {}
        Ok(_) => {
            return Err(DistaError::Format(
                "trailing bytes after the last checkpoint record".into(),
            ))
        }
        Err(e) => return Err(DistaError::io("probing for end of checkpoint", e)),
    }
    Ok(Checkpoint {
        config_identity,
        epochs_done,
        optim_step,
        seed,
        records,
    })
}

/// Restore model parameters, batchnorm running statistics, and optimizer
/// moments from a parsed checkpoint. Validates the complete record list
/// (names, order, count, shapes) against the model's registry before
/// touching any state, so a mismatch leaves everything unchanged.
pub fn apply_checkpoint<T: Scalar>(
    ckpt: &Checkpoint<T>,
    model: &mut DistaModel<T>,
    optim: &mut OptimState<T>,
) -> Result<()> {
    let expected = expected_records(model);
    if ckpt.records.len() != expected.len() {
        return Err(DistaError::Compat(format!(
            "checkpoint holds {} records, model expects {}",
            ckpt.records.len(),
            expected.len()
        )));
    }
    for ((got_name, got), (want_name, want_shape)) in ckpt.records.iter().zip(&expected) {
        if got_name != want_name {
            return Err(DistaError::Compat(format!(
                "checkpoint record {got_name:?} where model expects {want_name:?}"
            )));
        }
        if got.shape() != want_shape.as_slice() {
            return Err(DistaError::Compat(format!(
                "record {got_name}: checkpoint shape {:?} does not match model shape {want_shape:?}",
                got.shape()
            )));
        }
    }
    if optim.m.len() != model.params.len() {
        return Err(DistaError::Contract(format!(
            "optimizer holds {} moment tensors for {} parameters",
            optim.m.len(),
            model.params.len()
        )));
    }

    let n_params = model.params.len();
    let n_state = model.state_tensors().len();
    for (i, (name, tensor)) in ckpt.records.iter().enumerate() {
        if i < n_params {
            model.params.entries_mut()[i].value = tensor.clone();
        } else if i < n_params + n_state {
            let state_name = name.strip_prefix("state.").expect("validated above");
            model.load_state(state_name, tensor.data())?;
        } else if i < 2 * n_params + n_state {
            optim.m[i - n_params - n_state] = tensor.clone();
        } else {
            optim.v[i - 2 * n_params - n_state] = tensor.clone();
        }
    }
    optim.step = ckpt.optim_step;
    Ok(())
}
