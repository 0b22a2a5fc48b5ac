//! Binary checkpoint format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "SDCK" | u32 version (=1) | u32 tensor count
//! per tensor: u16 name length | name (UTF-8) | u8 dtype (0=f32, 1=f64)
//!             | u8 rank | u32 × rank dims | row-major payload
//! ```

use std::path::Path;

use crate::autodiff::{DType, Scalar, Tensor};
use crate::error::{Error, Result};
use crate::model::MultiExitModel;

pub const MAGIC: &[u8; 4] = b"SDCK";
pub const VERSION: u32 = 1;

/// A stored tensor of either precision.
#[derive(Clone, Debug, PartialEq)]
pub enum StoredTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl StoredTensor {
    pub fn shape(&self) -> &[usize] {
        match self {
            StoredTensor::F32(t) => t.shape(),
            StoredTensor::F64(t) => t.shape(),
        }
    }

    pub fn dtype(&self) -> DType {
        match self {
            StoredTensor::F32(_) => DType::F32,
            StoredTensor::F64(_) => DType::F64,
        }
    }

    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Self {
        match T::DTYPE {
            DType::F32 => StoredTensor::F32(t.cast()),
            DType::F64 => StoredTensor::F64(t.cast()),
        }
    }

    /// Converts to precision `T`; exact when the stored dtype matches.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        match self {
            StoredTensor::F32(t) => t.cast(),
            StoredTensor::F64(t) => t.cast(),
        }
    }
}

pub type Entries = Vec<(String, StoredTensor)>;

fn put_payload<T: Scalar>(t: &Tensor<T>, out: &mut Vec<u8>) {
    for &v in t.data() {
        v.write_le(out);
    }
}

pub fn encode(entries: &[(String, StoredTensor)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        let len = u16::try_from(name.len())
            .map_err(|_| Error::invalid(format!("checkpoint: name `{name}` too long")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.dtype().tag());
        let rank = u8::try_from(t.shape().len())
            .map_err(|_| Error::invalid(format!("checkpoint: `{name}` rank too large")))?;
        out.push(rank);
        for &d in t.shape() {
            let d = u32::try_from(d)
                .map_err(|_| Error::invalid(format!("checkpoint: `{name}` dim too large")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        match t {
            StoredTensor::F32(t) => put_payload(t, &mut out),
            StoredTensor::F64(t) => put_payload(t, &mut out),
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.corrupt(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn corrupt(&self, reason: String) -> Error {
        Error::Corrupt {
            path: self.path.to_path_buf(),
            reason,
        }
    }

    fn tensor<T: Scalar>(&mut self, shape: Vec<usize>) -> Result<Tensor<T>> {
        let n: usize = shape.iter().product();
        let size = T::DTYPE.size();
        let raw = self.take(n.checked_mul(size).ok_or_else(|| self.corrupt("payload size overflow".into()))?)?;
        let data = raw.chunks_exact(size).map(T::read_le).collect();
        Tensor::new(shape, data)
    }
}

/// Parses checkpoint bytes; `path` is only used in error messages.
pub fn decode(bytes: &[u8], path: &Path) -> Result<Entries> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(4)? != MAGIC {
        return Err(r.corrupt("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(r.corrupt(format!("unsupported version {version}")));
    }
    let count = r.u32()?;
    let mut entries = Vec::new();
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| r.corrupt("tensor name is not UTF-8".into()))?
            .to_string();
        let tag = r.u8()?;
        let dtype = DType::from_tag(tag).ok_or_else(|| r.corrupt(format!("unknown dtype tag {tag}")))?;
        let rank = r.u8()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let t = match dtype {
            DType::F32 => StoredTensor::F32(r.tensor(shape)?),
            DType::F64 => StoredTensor::F64(r.tensor(shape)?),
        };
        entries.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(r.corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(entries)
}

pub fn write_file(path: &Path, entries: &[(String, StoredTensor)]) -> Result<()> {
    let bytes = encode(entries)?;
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_file(path: &Path) -> Result<Entries> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

/// Every stored tensor of the model (parameters and running statistics), in store order.
pub fn model_entries<T: Scalar>(model: &MultiExitModel<T>) -> Entries {
    model
        .params()
        .iter()
        .map(|p| (p.name.clone(), StoredTensor::from_tensor(&p.tensor)))
        .collect()
}

pub fn save_model<T: Scalar>(model: &MultiExitModel<T>, path: &Path) -> Result<()> {
    write_file(path, &model_entries(model))
}

/// Restores tensors by name into an already built model of the same architecture.
pub fn load_into<T: Scalar>(model: &mut MultiExitModel<T>, entries: &[(String, StoredTensor)]) -> Result<()> {
    let store = model.params_mut();
    if entries.len() != store.len() {
        return Err(Error::Model(format!(
            "checkpoint holds {} tensors, model expects {}",
            entries.len(),
            store.len()
        )));
    }
    for (name, stored) in entries {
        let Some(param) = store.iter_mut().find(|p| &p.name == name) else {
            return Err(Error::Model(format!("checkpoint tensor `{name}` not in model")));
        };
        if param.tensor.shape() != stored.shape() {
            return Err(Error::Shape {
                op: "checkpoint.load",
                lhs: stored.shape().to_vec(),
                rhs: param.tensor.shape().to_vec(),
            });
        }
        let t = stored.to_tensor::<T>();
        param.tensor.data_mut().copy_from_slice(t.data());
    }
    Ok(())
}

pub fn load_model<T: Scalar>(model: &mut MultiExitModel<T>, path: &Path) -> Result<()> {
    load_into(model, &read_file(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_layout_is_exact() {
        let t = Tensor::<f32>::new(vec![2], vec![1.0, -2.0]).unwrap();
        let bytes = encode(&[("ab".into(), StoredTensor::F32(t))]).unwrap();
        let mut want = b"SDCK".to_vec();
        want.extend([1, 0, 0, 0, 1, 0, 0, 0]);
        want.extend([2, 0, b'a', b'b', 0, 1, 2, 0, 0, 0]);
        want.extend(1.0f32.to_le_bytes());
        want.extend((-2.0f32).to_le_bytes());
        assert_eq!(bytes, want);
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let a = Tensor::<f64>::new(vec![2, 3], vec![0.1, -0.0, f64::MIN_POSITIVE, 1e300, -7.5, 3.0]).unwrap();
        let b = Tensor::<f32>::new(vec![], vec![f32::EPSILON]).unwrap();
        let entries = vec![
            ("w".to_string(), StoredTensor::F64(a)),
            ("s".to_string(), StoredTensor::F32(b)),
        ];
        let bytes = encode(&entries).unwrap();
        let back = decode(&bytes, Path::new("mem")).unwrap();
        assert_eq!(encode(&back).unwrap(), bytes);
        match (&entries[0].1, &back[0].1) {
            (StoredTensor::F64(x), StoredTensor::F64(y)) => {
                let xb: Vec<u64> = x.data().iter().map(|v| v.to_bits()).collect();
                let yb: Vec<u64> = y.data().iter().map(|v| v.to_bits()).collect();
                assert_eq!(xb, yb);
            }
            _ => panic!("dtype changed"),
        }
    }

    #[test]
    fn rejects_corruption() {
        let t = Tensor::<f32>::zeros(vec![3]);
        let bytes = encode(&[("x".into(), StoredTensor::F32(t))]).unwrap();
        let p = Path::new("ck.bin");
        assert!(decode(&bytes[..bytes.len() - 1], p).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad, p).unwrap_err().to_string().contains("ck.bin"));
        let mut extra = bytes;
        extra.push(0);
        assert!(decode(&extra, p).is_err());
    }
}
