//! Intensity clipping, spatial crop/pad, label merging and volume slicing.
//!
//! Percentiles use linear interpolation between order statistics: for `n`
//! sorted values the `p`-th percentile sits at fractional rank
//! `p / 100 * (n - 1)`.

use std::collections::BTreeSet;

use ndarray::{s, Array, Array3, ArrayView, ArrayView3, ArrayView4, Axis, Dimension};
use serde::{Deserialize, Serialize};

use super::{slice_id, LabeledSlice};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessSpec {
    pub clip_percentiles: (f64, f64),
    pub crop_size: (usize, usize),
    /// Number of lowest and uppermost slices to drop from a volume.
    pub slice_range: Option<(usize, usize)>,
    pub merge_labels: bool,
    pub foreground_ids: Vec<i32>,
}

impl Default for PreprocessSpec {
    fn default() -> Self {
        PreprocessSpec {
            clip_percentiles: (1.0, 99.0),
            crop_size: (224, 224),
            slice_range: Some((80, 26)),
            merge_labels: true,
            foreground_ids: vec![1, 2, 4],
        }
    }
}

impl PreprocessSpec {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.clip_percentiles;
        if !(0.0..100.0).contains(&lo) || hi <= lo || hi > 100.0 {
            return Err(Error::Config(format!("invalid clip percentiles ({lo}, {hi})")));
        }
        if self.crop_size.0 == 0 || self.crop_size.1 == 0 {
            return Err(Error::Config("crop size must be positive".into()));
        }
        Ok(())
    }
}

/// Percentile of already-sorted values.
pub fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of an empty set");
    let rank = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Clip to the `[low, high]` percentile values, then rescale affinely to `[-1, 1]`.
/// A zero-width range yields all zeros.
pub fn percentile_clip<D: Dimension>(x: ArrayView<'_, f32, D>, low: f64, high: f64) -> Result<Array<f32, D>> {
    if !(0.0..100.0).contains(&low) || high <= low || high > 100.0 {
        return Err(Error::Config(format!("invalid percentiles ({low}, {high})")));
    }
    if x.is_empty() {
        return Ok(x.to_owned());
    }
    let mut sorted: Vec<f64> = x.iter().map(|&v| f64::from(v)).collect();
    if sorted.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("non-finite intensity".into()));
    }
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let lo = percentile_sorted(&sorted, low);
    let hi = percentile_sorted(&sorted, high);
    if hi - lo <= 0.0 {
        log::warn!("degenerate intensity range at {lo}; returning zeros");
        return Ok(x.mapv(|_| 0.0));
    }
    Ok(x.mapv(|v| {
        let c = f64::from(v).clamp(lo, hi);
        ((2.0 * (c - lo) / (hi - lo) - 1.0) as f32).clamp(-1.0, 1.0)
    }))
}

/// `(source start, destination start, copy length)` along one axis. The odd
/// extra pixel is removed from, or added to, the high side.
fn crop_pad_axis(len: usize, target: usize) -> (usize, usize, usize) {
    if len >= target {
        ((len - target) / 2, 0, target)
    } else {
        (0, (target - len) / 2, len)
    }
}

/// Centered crop or zero pad of the two trailing axes to `target = (h, w)`.
pub fn center_crop_or_pad<T: Clone + Default>(x: ArrayView3<'_, T>, target: (usize, usize)) -> Array3<T> {
    let (c, h, w) = x.dim();
    let (sy, dy, ly) = crop_pad_axis(h, target.0);
    let (sx, dx, lx) = crop_pad_axis(w, target.1);
    let mut out = Array3::from_elem((c, target.0, target.1), T::default());
    out.slice_mut(s![.., dy..dy + ly, dx..dx + lx])
        .assign(&x.slice(s![.., sy..sy + ly, sx..sx + lx]));
    out
}

/// 1 where the label is in `foreground`, else 0.
pub fn merge_labels<D: Dimension>(mask: ArrayView<'_, i32, D>, foreground: &BTreeSet<i32>) -> Array<u8, D> {
    mask.mapv(|v| u8::from(foreground.contains(&v)))
}

/// Turn one volume into labelled axial slices.
///
/// `image` is `(c, depth, h, w)` and `labels` is `(depth, h, w)`. Each
/// channel is percentile-clipped over the whole volume, slices outside the
/// configured range are dropped, and every kept slice is cropped/padded to
/// `crop_size`. Labels are binarised with `foreground_ids` (or `!= 0` when
/// merging is disabled).
pub fn preprocess_volume(
    patient: usize,
    image: ArrayView4<'_, f32>,
    labels: ArrayView3<'_, i32>,
    spec: &PreprocessSpec,
) -> Result<Vec<LabeledSlice>> {
    spec.validate()?;
    let (c, depth, h, w) = image.dim();
    if labels.dim() != (depth, h, w) {
        return Err(Error::Shape {
            expected: vec![depth, h, w],
            actual: labels.shape().to_vec(),
        });
    }
    let (lo, hi) = spec.clip_percentiles;
    let mut norm = Array::zeros(image.raw_dim());
    for ch in 0..c {
        norm.index_axis_mut(Axis(0), ch)
            .assign(&percentile_clip(image.index_axis(Axis(0), ch), lo, hi)?);
    }
    let (skip_low, skip_high) = spec.slice_range.unwrap_or((0, 0));
    if skip_low + skip_high >= depth {
        return Err(Error::Data(format!(
            "excluding {skip_low}+{skip_high} slices leaves nothing of depth {depth}"
        )));
    }
    let foreground: BTreeSet<i32> = spec.foreground_ids.iter().copied().collect();
    (skip_low..depth - skip_high)
        .map(|z| {
            let prior = center_crop_or_pad(norm.slice(s![.., z, .., ..]), spec.crop_size);
            let lab = labels.slice(s![z..z + 1, .., ..]);
            let mask = if spec.merge_labels {
                merge_labels(lab, &foreground)
            } else {
                lab.mapv(|v| u8::from(v != 0))
            };
            LabeledSlice::new(
                slice_id(patient, z),
                prior,
                center_crop_or_pad(mask.view(), spec.crop_size),
            )
        })
        .collect()
}
