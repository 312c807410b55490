//! Deterministic tensor numerics: flat row-major tensors over f32/f64, a
//! reverse-mode gradient tape, batch normalization, and a central-difference
//! gradient oracle. Every kernel accumulates in a fixed order, so repeated
//! runs on identical inputs are bit-identical.

pub mod batchnorm;
pub mod fdiff;
pub mod matmul;
pub mod params;
pub mod records;
pub mod tape;
pub mod tensor;

pub use batchnorm::{batchnorm, BatchNormState, BnMode, RunningStats, BN_EPS, BN_MOMENTUM};
pub use fdiff::finite_diff_grad;
pub use matmul::matmul;
pub use params::{ParamEntry, ParamKind, ParamSet};
pub use tape::{Gradients, ParamId, SpikeMode, Tape, TapeStats, ValueId};
pub use tensor::Tensor;

/// Element type of every tensor: f32 for training, f64 for gradient oracles.
pub trait Scalar:
    num_traits::Float
    + std::fmt::Debug
    + std::fmt::Display
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + Default
    + Send
    + Sync
    + 'static
{
    const DTYPE: Dtype;
    /// Bytes per element in the checkpoint encoding.
    const BYTE_WIDTH: usize;

    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

/// On-disk element-type tag.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Dtype::F32),
            1 => Some(Dtype::F64),
            _ => None,
        }
    }
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;
    const BYTE_WIDTH: usize = 4;

    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().unwrap())
    }
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;
    const BYTE_WIDTH: usize = 8;

    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().unwrap())
    }
}

/// Relative error with an absolute floor: |a-b| / max(|a|, |b|, floor).
/// The floor keeps near-zero gradient pairs from reporting spurious blowups.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / (a.abs().max(b.abs()).max(floor))
}
