//! Named-tensor records: the fixed little-endian unit shared by checkpoint
//! files and dataset containers.
//!
//! One record is `u32 name-length | name bytes (UTF-8) | u8 dtype code |
//! u32 rank | rank x u64 dims | row-major little-endian payload`. All
//! integers are little-endian. Readers validate every length before
//! allocating so a truncated or corrupt file fails cleanly instead of
//! producing a partially-filled tensor.

use super::{Dtype, Scalar, Tensor};
use crate::{DistaError, Result};
use std::io::{Read, Write};

/// Longest accepted record name; anything larger is treated as corruption.
const MAX_NAME_BYTES: u32 = 4096;
/// Highest accepted tensor rank; anything larger is treated as corruption.
const MAX_RANK: u32 = 8;

pub fn write_u32<W: Write>(w: &mut W, x: u32) -> Result<()> {
    w.write_all(&x.to_le_bytes())
        .map_err(|e| DistaError::io("writing u32", e))
}

pub fn write_u64<W: Write>(w: &mut W, x: u64) -> Result<()> {
    w.write_all(&x.to_le_bytes())
        .map_err(|e| DistaError::io("writing u64", e))
}

pub fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|e| DistaError::io("reading u32", e))?;
    Ok(u32::from_le_bytes(buf))
}

pub fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)
        .map_err(|e| DistaError::io("reading u64", e))?;
    Ok(u64::from_le_bytes(buf))
}

pub fn read_u8<R: Read>(r: &mut R) -> Result<u8> {
    let mut buf = [0u8; 1];
    r.read_exact(&mut buf)
        .map_err(|e| DistaError::io("reading u8", e))?;
    Ok(buf[0])
}

/// Write one named tensor record.
pub fn write_record<T: Scalar, W: Write>(
    w: &mut W,
    name: &str,
    shape: &[usize],
    data: &[T],
) -> Result<()> {
    let expected: usize = shape.iter().product();
    if expected != data.len() {
        return Err(DistaError::Shape(format!(
            "record {name}: shape {shape:?} holds {expected} elements, got {}",
            data.len()
        )));
    }
    let name_bytes = name.as_bytes();
    if name_bytes.len() > MAX_NAME_BYTES as usize {
        return Err(DistaError::Format(format!(
            "record name {} bytes exceeds limit {MAX_NAME_BYTES}",
            name_bytes.len()
        )));
    }
    write_u32(w, name_bytes.len() as u32)?;
    w.write_all(name_bytes)
        .map_err(|e| DistaError::io("writing record name", e))?;
    w.write_all(&[T::DTYPE.code()])
        .map_err(|e| DistaError::io("writing dtype code", e))?;
    write_u32(w, shape.len() as u32)?;
    for &d in shape {
        write_u64(w, d as u64)?;
    }
    let mut payload = Vec::with_capacity(data.len() * T::BYTE_WIDTH);
    for &x in data {
        x.write_le(&mut payload);
    }
    w.write_all(&payload)
        .map_err(|e| DistaError::io("writing record payload", e))
}

/// Read one named tensor record; the stored dtype must match `T`.
pub fn read_record<T: Scalar, R: Read>(r: &mut R) -> Result<(String, Tensor<T>)> {
    let name_len = read_u32(r)?;
    if name_len > MAX_NAME_BYTES {
        return Err(DistaError::Format(format!(
            "record name length {name_len} exceeds limit {MAX_NAME_BYTES}"
        )));
    }
    let mut name_bytes = vec![0u8; name_len as usize];
    r.read_exact(&mut name_bytes)
        .map_err(|e| DistaError::io("reading record name", e))?;
    let name = String::from_utf8(name_bytes)
        .map_err(|_| DistaError::Format("record name is not valid UTF-8".into()))?;
    let code = read_u8(r)?;
    let dtype = Dtype::from_code(code)
        .ok_or_else(|| DistaError::Format(format!("record {name}: unknown dtype code {code}")))?;
    if dtype != T::DTYPE {
        return Err(DistaError::Compat(format!(
            "record {name}: stored dtype {dtype:?} does not match requested {:?}",
            T::DTYPE
        )));
    }
    let rank = read_u32(r)?;
    if rank > MAX_RANK {
        return Err(DistaError::Format(format!(
            "record {name}: rank {rank} exceeds limit {MAX_RANK}"
        )));
    }
    let mut shape = Vec::with_capacity(rank as usize);
    let mut count: usize = 1;
    for _ in 0..rank {
        let d = read_u64(r)?;
        let d = usize::try_from(d)
            .map_err(|_| DistaError::Format(format!("record {name}: dimension {d} overflows")))?;
        count = count.checked_mul(d).ok_or_else(|| {
            DistaError::Format(format!("record {name}: element count overflows"))
        })?;
        shape.push(d);
    }
    let mut payload = vec![0u8; count * T::BYTE_WIDTH];
    r.read_exact(&mut payload)
        .map_err(|e| DistaError::io(format!("reading payload of record {name}"), e))?;
    let mut data = Vec::with_capacity(count);
    for chunk in payload.chunks_exact(T::BYTE_WIDTH) {
        data.push(T::read_le(chunk));
    }
    Ok((name, Tensor::from_vec(&shape, data)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn record_round_trips_name_shape_and_payload() {
        let data: Vec<f32> = (0..12).map(|i| i as f32 * 0.5 - 3.0).collect();
        let mut buf = Vec::new();
        write_record(&mut buf, "block0.attn.w_out", &[3, 4], &data).unwrap();
        let mut cursor = buf.as_slice();
        let (name, tensor) = read_record::<f32, _>(&mut cursor).unwrap();
        assert_eq!(name, "block0.attn.w_out");
        assert_eq!(tensor.shape(), &[3, 4]);
        assert_eq!(tensor.data(), data.as_slice());
        assert!(cursor.is_empty());
    }

    #[test]
    fn rewriting_a_parsed_record_is_byte_identical() {
        let data: Vec<f64> = vec![1.25, -0.5, 3.0];
        let mut buf = Vec::new();
        write_record(&mut buf, "head.b", &[3], &data).unwrap();
        let (name, tensor) = read_record::<f64, _>(&mut buf.as_slice()).unwrap();
        let mut again = Vec::new();
        write_record(&mut again, &name, tensor.shape(), tensor.data()).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn truncated_payload_is_a_clean_error() {
        let mut buf = Vec::new();
        write_record::<f32, _>(&mut buf, "w", &[4], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        buf.truncate(buf.len() - 3);
        let err = read_record::<f32, _>(&mut buf.as_slice()).unwrap_err();
        assert!(matches!(err, DistaError::Io { .. }), "got {err:?}");
    }

    #[test]
    fn dtype_mismatch_is_a_compat_error() {
        let mut buf = Vec::new();
        write_record::<f32, _>(&mut buf, "w", &[1], &[1.0]).unwrap();
        let err = read_record::<f64, _>(&mut buf.as_slice()).unwrap_err();
        assert!(matches!(err, DistaError::Compat(_)), "got {err:?}");
    }

    #[test]
    fn hostile_lengths_are_rejected_before_allocation() {
        // A name length far beyond the limit must fail as Format, not OOM.
        let mut buf = Vec::new();
        buf.extend_from_slice(&u32::MAX.to_le_bytes());
        let err = read_record::<f32, _>(&mut buf.as_slice()).unwrap_err();
        assert!(matches!(err, DistaError::Format(_)), "got {err:?}");
    }

    #[test]
    fn shape_data_disagreement_is_rejected_on_write() {
        let mut buf = Vec::new();
        let err = write_record::<f32, _>(&mut buf, "w", &[2, 2], &[1.0]).unwrap_err();
        assert!(matches!(err, DistaError::Shape(_)), "got {err:?}");
    }
}
