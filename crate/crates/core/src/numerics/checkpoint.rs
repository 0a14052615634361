//! Binary serialization of named tensors.
//!
//! Layout (little endian):
//!
//! ```text
//! magic      8 bytes  "EENDTNSR"
//! version    u32
//! dtype      u8       32 or 64
//! count      u32
//! repeated count times:
//!   name_len u32, name (utf-8)
//!   rank     u8, dims u64 * rank
//!   data     dtype * prod(dims)
//! ```
//!
//! Identical inputs always produce identical bytes.

use std::fs;
use std::path::Path;

use super::{ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"EENDTNSR";
pub const FORMAT_VERSION: u32 = 1;

pub fn encode<T: Scalar>(tensors: &[(String, Tensor<T>)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(T::DTYPE);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.shape().len() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            if T::DTYPE == 32 {
                out.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
            } else {
                out.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
            }
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Load(format!(
                "truncated tensor file at byte {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Decodes tensors written at either precision into `T`.
pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<Vec<(String, Tensor<T>)>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Load("not a tensor file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Load(format!(
            "unsupported format version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let dtype = r.u8()?;
    if dtype != 32 && dtype != 64 {
        return Err(Error::Load(format!("unknown dtype tag {dtype}")));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::Load("tensor name is not utf-8".into()))?;
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            let v = if dtype == 32 {
                f32::from_le_bytes(r.take(4)?.try_into().unwrap()) as f64
            } else {
                f64::from_le_bytes(r.take(8)?.try_into().unwrap())
            };
            data.push(T::from_f64_lossy(v));
        }
        out.push((name, Tensor::from_vec(&shape, data).map_err(|e| Error::Load(e.to_string()))?));
    }
    if r.pos != bytes.len() {
        return Err(Error::Load("trailing bytes after last tensor".into()));
    }
    Ok(out)
}

pub fn write_tensors<T: Scalar>(path: &Path, tensors: &[(String, Tensor<T>)]) -> Result<()> {
    fs::write(path, encode(tensors)).map_err(|e| Error::io(path, e))
}

pub fn read_tensors<T: Scalar>(path: &Path) -> Result<Vec<(String, Tensor<T>)>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

pub fn save_params<T: Scalar>(store: &ParamStore<T>, path: &Path) -> Result<()> {
    write_tensors(path, &store.named_values())
}

/// Loads values into an already-built store, checking names and shapes.
pub fn load_params<T: Scalar>(store: &mut ParamStore<T>, path: &Path) -> Result<()> {
    let tensors = read_tensors(path)?;
    store.load_values(&tensors)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_byte_stability() {
        let ts = vec![
            ("a.weight".to_string(), Tensor::<f64>::from_fn(2, 3, |i, j| (i + j) as f64 * 0.1)),
            ("b".to_string(), Tensor::scalar(-1.5)),
        ];
        let bytes = encode(&ts);
        assert_eq!(bytes, encode(&ts));
        let back: Vec<(String, Tensor<f64>)> = decode(&bytes).unwrap();
        assert_eq!(back, ts);
    }

    #[test]
    fn rejects_garbage() {
        assert!(decode::<f32>(b"nonsense").is_err());
        let mut bytes = encode(&[("x".to_string(), Tensor::<f32>::scalar(1.0))]);
        bytes.pop();
        assert!(decode::<f32>(&bytes).is_err());
    }
}
