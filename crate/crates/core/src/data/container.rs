//! Versioned binary array container.
//!
//! ```text
//! 0   8 bytes   magic "DSARRAY\0"
//! 8   u16       version (1)
//! 10  u8        dtype: 1 = f32, 2 = u8, 3 = f64
//! 11  u8        ndim
//! 12  ndim×u64  shape
//! ..            row-major little-endian data
//! ```

use std::fs;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"DSARRAY\0";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    F32(ArrayD<f32>),
    U8(ArrayD<u8>),
    F64(ArrayD<f64>),
}

impl From<ArrayD<f32>> for ArrayData {
    fn from(a: ArrayD<f32>) -> Self {
        ArrayData::F32(a)
    }
}

impl From<ArrayD<u8>> for ArrayData {
    fn from(a: ArrayD<u8>) -> Self {
        ArrayData::U8(a)
    }
}

impl From<ArrayD<f64>> for ArrayData {
    fn from(a: ArrayD<f64>) -> Self {
        ArrayData::F64(a)
    }
}

impl ArrayData {
    fn dtype(&self) -> u8 {
        match self {
            ArrayData::F32(_) => 1,
            ArrayData::U8(_) => 2,
            ArrayData::F64(_) => 3,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            ArrayData::F32(a) => a.shape(),
            ArrayData::U8(a) => a.shape(),
            ArrayData::F64(a) => a.shape(),
        }
    }

    pub fn into_f32(self) -> Result<ArrayD<f32>> {
        match self {
            ArrayData::F32(a) => Ok(a),
            _ => Err(Error::Data("expected an f32 array".into())),
        }
    }

    pub fn into_f64(self) -> Result<ArrayD<f64>> {
        match self {
            ArrayData::F64(a) => Ok(a),
            ArrayData::F32(a) => Ok(a.mapv(f64::from)),
            ArrayData::U8(a) => Ok(a.mapv(f64::from)),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let shape = self.shape();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.dtype());
        out.push(shape.len() as u8);
        for &d in shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match self {
            ArrayData::F32(a) => a.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            ArrayData::U8(a) => out.extend(a.iter().copied()),
            ArrayData::F64(a) => a.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::Data(format!("array container: {m}"));
        if bytes.len() < 12 || &bytes[..8] != MAGIC {
            return Err(bad("bad magic".into()));
        }
        let version = u16::from_le_bytes([bytes[8], bytes[9]]);
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let dtype = bytes[10];
        let ndim = bytes[11] as usize;
        let data_start = 12 + 8 * ndim;
        if bytes.len() < data_start {
            return Err(bad("truncated shape".into()));
        }
        let shape: Vec<usize> = (0..ndim)
            .map(|i| u64::from_le_bytes(bytes[12 + 8 * i..20 + 8 * i].try_into().unwrap()) as usize)
            .collect();
        let n: usize = shape.iter().product();
        let data = &bytes[data_start..];
        let width = match dtype {
            1 => 4,
            2 => 1,
            3 => 8,
            other => return Err(bad(format!("unknown dtype {other}"))),
        };
        if data.len() != n * width {
            return Err(bad(format!("expected {} data bytes, found {}", n * width, data.len())));
        }
        let shape = IxDyn(&shape);
        let arr = match dtype {
            1 => ArrayData::F32(
                ArrayD::from_shape_vec(
                    shape,
                    data.chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                )
                .map_err(|e| bad(e.to_string()))?,
            ),
            2 => ArrayData::U8(ArrayD::from_shape_vec(shape, data.to_vec()).map_err(|e| bad(e.to_string()))?),
            _ => ArrayData::F64(
                ArrayD::from_shape_vec(
                    shape,
                    data.chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                )
                .map_err(|e| bad(e.to_string()))?,
            ),
        };
        Ok(arr)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let a = ArrayData::U8(ArrayD::from_shape_vec(IxDyn(&[2, 1]), vec![7, 9]).unwrap());
        let b = a.to_bytes();
        assert_eq!(&b[..8], MAGIC);
        assert_eq!(&b[8..12], &[1, 0, 2, 2]);
        assert_eq!(&b[12..20], &2u64.to_le_bytes());
        assert_eq!(&b[28..], &[7, 9]);
    }

    #[test]
    fn rejects_truncation() {
        let a = ArrayData::F32(ArrayD::zeros(IxDyn(&[3, 3])));
        let b = a.to_bytes();
        assert!(ArrayData::from_bytes(&b[..b.len() - 1]).is_err());
        assert!(ArrayData::from_bytes(&b[..5]).is_err());
    }

    proptest! {
        #[test]
        fn round_trip(dims in proptest::collection::vec(1usize..5, 1..4), seed in any::<u64>()) {
            let n: usize = dims.iter().product();
            let vals: Vec<f64> = (0..n).map(|i| (i as f64 + seed as f64 * 1e-3).sin()).collect();
            let a = ArrayData::F64(ArrayD::from_shape_vec(IxDyn(&dims), vals.clone()).unwrap());
            prop_assert_eq!(ArrayData::from_bytes(&a.to_bytes()).unwrap(), a);
            let f = ArrayData::F32(ArrayD::from_shape_vec(IxDyn(&dims), vals.iter().map(|&v| v as f32).collect()).unwrap());
            prop_assert_eq!(ArrayData::from_bytes(&f.to_bytes()).unwrap(), f);
        }
    }
}
