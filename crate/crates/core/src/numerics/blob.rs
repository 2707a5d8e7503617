//! Binary tensor files: a sequence of records, each a `u64` little-endian
//! header length, a JSON header `{name, dtype, shape}`, then the C-order
//! little-endian payload.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tensor::{DType, Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    name: String,
    dtype: DType,
    shape: Vec<usize>,
}

/// Serialises records into bytes, each tensor stored with its own dtype.
pub fn encode<T: Scalar>(records: &[(&str, &Tensor<T>)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for (name, t) in records {
        let header = serde_json::to_vec(&Header {
            name: name.to_string(),
            dtype: T::DTYPE,
            shape: t.shape().to_vec(),
        })?;
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.reserve(t.numel() * T::DTYPE.size_of());
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    Ok(out)
}

/// Parses records, converting every payload to `T`.
pub fn decode<T: Scalar>(bytes: &[u8], path: &Path) -> Result<Vec<(String, Tensor<T>)>> {
    let corrupt = |reason: String| Error::Corrupt {
        path: path.to_path_buf(),
        reason,
    };
    let mut pos = 0usize;
    let mut out = Vec::new();
    while pos < bytes.len() {
        let len_bytes = bytes
            .get(pos..pos + 8)
            .ok_or_else(|| corrupt(format!("truncated header length at byte {pos}")))?;
        let hlen = u64::from_le_bytes(len_bytes.try_into().unwrap()) as usize;
        pos += 8;
        let hbytes = bytes
            .get(pos..pos.saturating_add(hlen))
            .ok_or_else(|| corrupt(format!("truncated header at byte {pos}")))?;
        let header: Header = serde_json::from_slice(hbytes).map_err(|e| corrupt(format!("bad header: {e}")))?;
        pos += hlen;
        let numel = header
            .shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| corrupt("shape overflows".into()))?;
        let width = header.dtype.size_of();
        let payload = bytes
            .get(pos..pos.saturating_add(numel.saturating_mul(width)))
            .ok_or_else(|| corrupt(format!("truncated payload for {}", header.name)))?;
        pos += numel * width;
        let data: Vec<T> = match header.dtype {
            DType::F32 => payload
                .chunks_exact(4)
                .map(|c| T::from_f64_lossy(f32::read_le(c) as f64))
                .collect(),
            DType::F64 => payload
                .chunks_exact(8)
                .map(|c| T::from_f64_lossy(f64::read_le(c)))
                .collect(),
        };
        let t = Tensor::new(&header.shape, data)?;
        if !t.all_finite() {
            return Err(corrupt(format!("non-finite values in {}", header.name)));
        }
        out.push((header.name, t));
    }
    Ok(out)
}

pub fn write_file<T: Scalar>(path: &Path, records: &[(&str, &Tensor<T>)]) -> Result<()> {
    let bytes = encode(records)?;
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    w.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_file<T: Scalar>(path: &Path) -> Result<Vec<(String, Tensor<T>)>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_cross_dtype() {
        let a = Tensor::<f32>::from_fn(&[2, 3], |i| i as f32 * 0.5);
        let b = Tensor::<f32>::scalar(-1.25);
        let bytes = encode(&[("a", &a), ("b", &b)]).unwrap();
        let back = decode::<f32>(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back[0].0, "a");
        assert_eq!(back[0].1, a);
        assert_eq!(back[1].1, b);
        let wide = decode::<f64>(&bytes, Path::new("mem")).unwrap();
        assert_eq!(wide[0].1.data()[3], 1.5);
    }

    #[test]
    fn truncation_detected() {
        let a = Tensor::<f32>::ones(&[4]);
        let bytes = encode(&[("a", &a)]).unwrap();
        let err = decode::<f32>(&bytes[..bytes.len() - 1], Path::new("mem")).unwrap_err();
        assert!(matches!(err, Error::Corrupt { .. }));
    }
}
