//! Binary container for named arrays, used by checkpoints and by
//! feature-extractor weight assets.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes   "BIGANST\0"
//! version    u32       FORMAT_VERSION
//! header     u32 len + UTF-8 `key=value` lines
//! count      u32
//! per array: u16 name len, name, u8 dtype (0 = f32, 1 = f64),
//!            u8 rank, rank × u64 dims, raw payload
//! trailer    4 bytes   "END\0"
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::scalar::{DType, Real};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"BIGANST\0";
pub const FORMAT_VERSION: u32 = 1;
const TRAILER: &[u8; 4] = b"END\0";

#[derive(Debug, Error)]
pub enum ArrayFileError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not an array file (bad magic)")]
    BadMagic,
    #[error("unsupported format version {found} (expected {FORMAT_VERSION})")]
    Version { found: u32 },
    #[error("corrupt array file: {0}")]
    Corrupt(String),
    #[error("array `{name}` stored as {found}, expected {expected}")]
    DType { name: String, expected: &'static str, found: &'static str },
    #[error("header key `{0}` contains a newline or `=`")]
    BadHeaderKey(String),
}

/// Header plus arrays, in file order.
#[derive(Clone, Debug, PartialEq)]
pub struct ArrayFile<T> {
    pub header: BTreeMap<String, String>,
    pub arrays: Vec<(String, Tensor<T>)>,
}

impl<T: Real> Default for ArrayFile<T> {
    fn default() -> Self {
        Self { header: BTreeMap::new(), arrays: Vec::new() }
    }
}

impl<T: Real> ArrayFile<T> {
    pub fn to_bytes(&self) -> Result<Vec<u8>, ArrayFileError> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let mut header = String::new();
        for (k, v) in &self.header {
            if k.contains(['\n', '=']) || v.contains('\n') {
                return Err(ArrayFileError::BadHeaderKey(k.clone()));
            }
            header.push_str(k);
            header.push('=');
            header.push_str(v);
            header.push('\n');
        }
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for (name, t) in &self.arrays {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(T::DTYPE.code());
            out.push(t.shape().len() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                v.write_le(&mut out);
            }
        }
        out.extend_from_slice(TRAILER);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ArrayFileError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(ArrayFileError::BadMagic);
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(ArrayFileError::Version { found: version });
        }
        let hlen = r.u32()? as usize;
        let htext = std::str::from_utf8(r.take(hlen)?)
            .map_err(|_| ArrayFileError::Corrupt("header is not UTF-8".into()))?;
        let mut header = BTreeMap::new();
        for line in htext.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| ArrayFileError::Corrupt(format!("bad header line `{line}`")))?;
            header.insert(k.to_string(), v.to_string());
        }
        let count = r.u32()? as usize;
        let mut arrays = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let nlen = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(nlen)?)
                .map_err(|_| ArrayFileError::Corrupt("array name is not UTF-8".into()))?
                .to_string();
            let code = r.take(1)?[0];
            let dtype =
                DType::from_code(code).ok_or_else(|| ArrayFileError::Corrupt(format!("unknown dtype code {code}")))?;
            if dtype != T::DTYPE {
                return Err(ArrayFileError::DType { name, expected: T::DTYPE.name(), found: dtype.name() });
            }
            let rank = r.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| ArrayFileError::Corrupt(format!("array `{name}` is too large")))?;
            let size = dtype.size();
            let payload = r.take(n.checked_mul(size).ok_or_else(|| ArrayFileError::Corrupt("overflow".into()))?)?;
            let data = payload.chunks_exact(size).map(T::read_le).collect();
            arrays.push((name, Tensor::from_vec(&shape, data)));
        }
        if r.take(4)? != TRAILER {
            return Err(ArrayFileError::Corrupt("missing trailer".into()));
        }
        if r.pos != bytes.len() {
            return Err(ArrayFileError::Corrupt("trailing bytes after trailer".into()));
        }
        Ok(Self { header, arrays })
    }

    pub fn save(&self, path: &Path) -> Result<(), ArrayFileError> {
        let bytes = self.to_bytes()?;
        fs::write(path, bytes).map_err(|source| ArrayFileError::Io { path: path.display().to_string(), source })
    }

    pub fn load(path: &Path) -> Result<Self, ArrayFileError> {
        let bytes = fs::read(path).map_err(|source| ArrayFileError::Io { path: path.display().to_string(), source })?;
        Self::from_bytes(&bytes)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ArrayFileError> {
        if self.bytes.len() - self.pos < n {
            return Err(ArrayFileError::Corrupt(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, ArrayFileError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, ArrayFileError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, ArrayFileError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> ArrayFile<f32> {
        let mut f = ArrayFile::default();
        f.header.insert("kind".into(), "test".into());
        f.arrays.push(("a".into(), Tensor::from_fn(&[2, 3], |i| i as f32 * 0.5)));
        f.arrays.push(("b.weight".into(), Tensor::from_fn(&[1, 1, 3, 3], |i| -(i as f32))));
        f
    }

    #[test]
    fn truncation_is_detected_everywhere() {
        let bytes = sample().to_bytes().unwrap();
        for cut in 0..bytes.len() {
            let err = ArrayFile::<f32>::from_bytes(&bytes[..cut]).unwrap_err();
            assert!(
                matches!(err, ArrayFileError::Corrupt(_) | ArrayFileError::BadMagic),
                "cut {cut}: {err:?}"
            );
        }
    }

    #[test]
    fn version_and_dtype_are_checked() {
        let mut bytes = sample().to_bytes().unwrap();
        assert!(matches!(ArrayFile::<f64>::from_bytes(&bytes), Err(ArrayFileError::DType { .. })));
        bytes[8] = 9;
        assert!(matches!(ArrayFile::<f32>::from_bytes(&bytes), Err(ArrayFileError::Version { found: 9 })));
    }

    proptest! {
        #[test]
        fn round_trip_is_bitwise(values in proptest::collection::vec(any::<f64>(), 1..40), key in "[a-z]{1,8}") {
            let mut f = ArrayFile::<f64>::default();
            f.header.insert(key, "v".into());
            let n = values.len();
            f.arrays.push(("x".into(), Tensor::from_vec(&[n], values)));
            let back = ArrayFile::<f64>::from_bytes(&f.to_bytes().unwrap()).unwrap();
            let a: Vec<u64> = f.arrays[0].1.data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = back.arrays[0].1.data().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
            prop_assert_eq!(f.header, back.header);
        }
    }
}
