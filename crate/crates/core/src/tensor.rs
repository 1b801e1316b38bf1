//! Dense row-major f32 tensor and the DMXT tensor container.
//!
//! DMXT layout: magic `DMXT`, u32 little-endian tensor count, then per
//! tensor: u16 name length, UTF-8 name, u8 dtype code (1 = f32), u8 ndim,
//! ndim x u32 dims, raw little-endian f32 payload.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape {shape:?} implies {expected} elements, got {actual}")]
    ShapeMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("shape dimensions must be positive, got {0:?}")]
    ZeroDim(Vec<usize>),
    #[error("non-finite value at flat index {0}")]
    NonFinite(usize),
    #[error("duplicate tensor name {0:?}")]
    DuplicateName(String),
    #[error("tensor name must be non-empty")]
    EmptyName,
    #[error("bad magic bytes, expected DMXT")]
    BadMagic,
    #[error("unsupported dtype code {0}")]
    BadDtype(u8),
    #[error("truncated or corrupt container: {0}")]
    Corrupt(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Dense 32-bit float n-dimensional array, row-major. All constructors
/// reject NaN/Inf so a `Tensor` always holds finite values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self, TensorError> {
        if shape.iter().any(|&d| d == 0) {
            return Err(TensorError::ZeroDim(shape));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::ShapeMismatch {
                shape,
                expected,
                actual: data.len(),
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite(i));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: Vec<usize>, value: f32) -> Result<Self, TensorError> {
        let n = shape.iter().product();
        Self::new(shape, vec![value; n])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Finite-preserving writes are the caller's responsibility; training
    /// code funnels every store through a non-finite loss check.
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Flat offset for a multi-dimensional index (row-major).
    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut off = 0;
        for (i, &ix) in index.iter().enumerate() {
            debug_assert!(ix < self.shape[i]);
            off = off * self.shape[i] + ix;
        }
        off
    }

    pub fn at(&self, index: &[usize]) -> f32 {
        self.data[self.offset(index)]
    }
}

/// Named tensor map with deterministic iteration order.
pub type NamedTensors = BTreeMap<String, Tensor>;

const MAGIC: &[u8; 4] = b"DMXT";
const DTYPE_F32: u8 = 1;

/// Writes a named tensor map; byte-exact round trip with [`read_tensors`].
pub fn write_tensors(path: &Path, tensors: &NamedTensors) -> Result<(), TensorError> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    write_tensors_to(&mut w, tensors)?;
    w.flush()?;
    Ok(())
}

pub fn write_tensors_to<W: Write>(w: &mut W, tensors: &NamedTensors) -> Result<(), TensorError> {
    w.write_all(MAGIC)?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        if name.is_empty() {
            return Err(TensorError::EmptyName);
        }
        let name_bytes = name.as_bytes();
        w.write_all(&(name_bytes.len() as u16).to_le_bytes())?;
        w.write_all(name_bytes)?;
        w.write_all(&[DTYPE_F32, t.shape().len() as u8])?;
        for &d in t.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_tensors(path: &Path) -> Result<NamedTensors, TensorError> {
    let file = File::open(path)?;
    let mut r = BufReader::new(file);
    read_tensors_from(&mut r)
}

pub fn read_tensors_from<R: Read>(r: &mut R) -> Result<NamedTensors, TensorError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| TensorError::Corrupt("missing magic".into()))?;
    if &magic != MAGIC {
        return Err(TensorError::BadMagic);
    }
    let count = read_u32(r)? as usize;
    let mut out = NamedTensors::new();
    for _ in 0..count {
        let name_len = read_u16(r)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)
            .map_err(|_| TensorError::Corrupt("truncated name".into()))?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| TensorError::Corrupt("name is not UTF-8".into()))?;
        if name.is_empty() {
            return Err(TensorError::EmptyName);
        }
        let mut dtype_ndim = [0u8; 2];
        r.read_exact(&mut dtype_ndim)
            .map_err(|_| TensorError::Corrupt("truncated header".into()))?;
        if dtype_ndim[0] != DTYPE_F32 {
            return Err(TensorError::BadDtype(dtype_ndim[0]));
        }
        let ndim = dtype_ndim[1] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u32(r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut payload = vec![0u8; numel * 4];
        r.read_exact(&mut payload)
            .map_err(|_| TensorError::Corrupt(format!("truncated payload for {name:?}")))?;
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let tensor = Tensor::new(shape, data)?;
        if out.insert(name.clone(), tensor).is_some() {
            return Err(TensorError::DuplicateName(name));
        }
    }
    Ok(out)
}

fn read_u16<R: Read>(r: &mut R) -> Result<u16, TensorError> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)
        .map_err(|_| TensorError::Corrupt("truncated u16".into()))?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, TensorError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| TensorError::Corrupt("truncated u32".into()))?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_shape_mismatch_and_nonfinite() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::new(vec![2], vec![f32::NAN, 0.0]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
    }

    #[test]
    fn round_trips_single_tensor() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.dmxt");
        let mut map = NamedTensors::new();
        map.insert(
            "w".into(),
            Tensor::new(vec![2, 2], vec![1.0, -2.5, 3.25, 0.0]).unwrap(),
        );
        write_tensors(&path, &map).unwrap();
        let back = read_tensors(&path).unwrap();
        assert_eq!(back, map);
    }

    #[test]
    fn round_trips_empty_map() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.dmxt");
        write_tensors(&path, &NamedTensors::new()).unwrap();
        let back = read_tensors(&path).unwrap();
        assert!(back.is_empty());
    }

    #[test]
    fn rejects_bad_magic() {
        let mut buf: &[u8] = b"NOPE\x00\x00\x00\x00";
        assert!(matches!(
            read_tensors_from(&mut buf),
            Err(TensorError::BadMagic)
        ));
    }

    #[test]
    fn rejects_truncated_payload() {
        let mut bytes = Vec::new();
        let mut map = NamedTensors::new();
        map.insert("t".into(), Tensor::new(vec![4], vec![1.0; 4]).unwrap());
        write_tensors_to(&mut bytes, &map).unwrap();
        bytes.truncate(bytes.len() - 3);
        assert!(matches!(
            read_tensors_from(&mut bytes.as_slice()),
            Err(TensorError::Corrupt(_))
        ));
    }
}
