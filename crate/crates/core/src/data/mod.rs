//! Labelled slices: synthetic generation, preprocessing transforms, the
//! on-disk array container and manifest, and the train/test split.

pub mod container;
pub mod manifest;
pub mod preprocess;
pub mod split;
pub mod synthetic;

use ndarray::{s, Array3};

use crate::error::{check_shape, Error, Result};

/// One image prior with its binary ground-truth mask.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSlice {
    pub id: String,
    /// `(c, h, w)`, normalized to `[-1, 1]`.
    pub prior: Array3<f32>,
    /// `(1, h, w)`, values in `{0, 1}`.
    pub mask: Array3<u8>,
}

impl LabeledSlice {
    pub fn new(id: impl Into<String>, prior: Array3<f32>, mask: Array3<u8>) -> Result<Self> {
        let slice = LabeledSlice {
            id: id.into(),
            prior,
            mask,
        };
        slice.validate()?;
        Ok(slice)
    }

    /// Patient part of a `p0007_s042`-style id; the whole id otherwise.
    pub fn patient(&self) -> &str {
        patient_of(&self.id)
    }

    pub fn channels(&self) -> usize {
        self.prior.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.mask.iter().all(|&m| m == 0)
    }

    pub fn prior_f64(&self) -> Array3<f64> {
        self.prior.mapv(f64::from)
    }

    pub fn mask_f64(&self) -> Array3<f64> {
        self.mask.mapv(f64::from)
    }

    pub fn validate(&self) -> Result<()> {
        let (c, h, w) = self.prior.dim();
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::Data(format!("{}: degenerate prior shape", self.id)));
        }
        check_shape(&[1, h, w], self.mask.shape())?;
        if self.mask.iter().any(|&m| m > 1) {
            return Err(Error::Data(format!("{}: mask is not binary", self.id)));
        }
        if self.prior.iter().any(|v| !v.is_finite() || v.abs() > 1.0) {
            return Err(Error::Data(format!("{}: prior outside [-1, 1]", self.id)));
        }
        Ok(())
    }

    /// Stacked `(c+1, h, w)` array with the mask (as 0/1 floats) last; the
    /// on-disk representation.
    pub fn to_stacked(&self) -> Array3<f32> {
        let (c, h, w) = self.prior.dim();
        let mut out = Array3::zeros((c + 1, h, w));
        out.slice_mut(s![..c, .., ..]).assign(&self.prior);
        out.slice_mut(s![c.., .., ..]).assign(&self.mask.mapv(f32::from));
        out
    }

    pub fn from_stacked(id: impl Into<String>, stacked: Array3<f32>) -> Result<Self> {
        let (c1, _, _) = stacked.dim();
        if c1 < 2 {
            return Err(Error::Data("stacked slice needs a prior and a mask channel".into()));
        }
        let prior = stacked.slice(s![..c1 - 1, .., ..]).to_owned();
        let raw = stacked.slice(s![c1 - 1.., .., ..]);
        if raw.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Data("mask channel is not binary".into()));
        }
        LabeledSlice::new(id, prior, raw.mapv(|v| v as u8))
    }
}

pub fn patient_of(id: &str) -> &str {
    match id.rfind("_s") {
        Some(i) if i > 0 => &id[..i],
        _ => id,
    }
}

pub fn slice_id(patient: usize, slice: usize) -> String {
    format!("p{patient:04}_s{slice:03}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_and_patients() {
        assert_eq!(slice_id(7, 42), "p0007_s042");
        assert_eq!(patient_of("p0007_s042"), "p0007");
        assert_eq!(patient_of("loose"), "loose");
    }

    #[test]
    fn validation() {
        let prior = Array3::from_elem((2, 3, 3), 0.5f32);
        let mask = Array3::from_elem((1, 3, 3), 1u8);
        assert!(LabeledSlice::new("a", prior.clone(), mask.clone()).is_ok());
        assert!(LabeledSlice::new("a", prior.mapv(|v| v * 3.0), mask.clone()).is_err());
        assert!(LabeledSlice::new("a", prior.clone(), mask.mapv(|v| v * 2)).is_err());
        assert!(LabeledSlice::new("a", prior, Array3::zeros((1, 3, 4))).is_err());
    }

    #[test]
    fn stacked_round_trip() {
        let prior = Array3::from_shape_fn((2, 2, 2), |(c, i, j)| (c + i + j) as f32 / 4.0);
        let mask = Array3::from_shape_vec((1, 2, 2), vec![0u8, 1, 1, 0]).unwrap();
        let s = LabeledSlice::new("p0001_s001", prior, mask).unwrap();
        let back = LabeledSlice::from_stacked("p0001_s001", s.to_stacked()).unwrap();
        assert_eq!(back, s);
    }
}
