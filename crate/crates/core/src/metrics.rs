//! Overlap and boundary-distance metrics plus report aggregation.
//!
//! HD95 conventions: boundary pixels are foreground pixels with at least one
//! background 4-neighbour (the image border counts as background). Both
//! directed boundary-to-boundary distance sets are pooled and the 95th
//! percentile of the pooled set is reported, using linear interpolation
//! between order statistics. Nearest-boundary distances come from an exact
//! Euclidean distance transform, so per-axis spacing is honoured.

use std::fmt::Write as _;

use ndarray::{Array2, ArrayView2, Zip};
use serde::{Deserialize, Serialize};

use crate::data::preprocess::percentile_sorted;
use crate::error::{check_shape, Result};

fn counts(pred: ArrayView2<'_, u8>, gt: ArrayView2<'_, u8>) -> Result<(usize, usize, usize)> {
    check_shape(gt.shape(), pred.shape())?;
    let (mut a, mut b, mut both) = (0, 0, 0);
    Zip::from(&pred).and(&gt).for_each(|&p, &g| {
        let (p, g) = (p != 0, g != 0);
        a += usize::from(p);
        b += usize::from(g);
        both += usize::from(p && g);
    });
    Ok((a, b, both))
}

/// `2|A∩B| / (|A|+|B|)`; 1 when both masks are empty.
pub fn dice(pred: ArrayView2<'_, u8>, gt: ArrayView2<'_, u8>) -> Result<f64> {
    let (a, b, both) = counts(pred, gt)?;
    Ok(if a + b == 0 {
        1.0
    } else {
        2.0 * both as f64 / (a + b) as f64
    })
}

/// `|A∩B| / |A∪B|`; 1 when both masks are empty.
pub fn jaccard(pred: ArrayView2<'_, u8>, gt: ArrayView2<'_, u8>) -> Result<f64> {
    let (a, b, both) = counts(pred, gt)?;
    let union = a + b - both;
    Ok(if union == 0 { 1.0 } else { both as f64 / union as f64 })
}

pub fn is_empty(mask: ArrayView2<'_, u8>) -> bool {
    mask.iter().all(|&v| v == 0)
}

/// Foreground pixels touching background (4-connectivity, border = background).
pub fn boundary(mask: ArrayView2<'_, u8>) -> Vec<(usize, usize)> {
    let (h, w) = mask.dim();
    let on = |i: isize, j: isize| -> bool {
        i >= 0 && j >= 0 && (i as usize) < h && (j as usize) < w && mask[[i as usize, j as usize]] != 0
    };
    let mut out = Vec::new();
    for i in 0..h {
        for j in 0..w {
            if mask[[i, j]] == 0 {
                continue;
            }
            let (ii, jj) = (i as isize, j as isize);
            if !on(ii - 1, jj) || !on(ii + 1, jj) || !on(ii, jj - 1) || !on(ii, jj + 1) {
                out.push((i, j));
            }
        }
    }
    out
}

const FAR: f64 = 1e30;

/// Lower envelope of parabolas (Felzenszwalb & Huttenlocher) on a grid with
/// the given spacing. `f` holds squared distances (`FAR` where unknown).
fn dt1d(f: &[f64], spacing: f64) -> Vec<f64> {
    let n = f.len();
    let pos = |q: usize| q as f64 * spacing;
    let mut v = vec![0usize; n];
    let mut z = vec![0f64; n + 1];
    let mut k = 0usize;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let meet = |q: usize, p: usize| ((f[q] + pos(q).powi(2)) - (f[p] + pos(p).powi(2))) / (2.0 * (pos(q) - pos(p)));
    for q in 1..n {
        let mut s = meet(q, v[k]);
        while s <= z[k] {
            k -= 1;
            s = meet(q, v[k]);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    let mut out = vec![0f64; n];
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < pos(q) {
            k += 1;
        }
        *o = (pos(q) - pos(v[k])).powi(2) + f[v[k]];
    }
    out
}

/// Squared Euclidean distance from every pixel to the nearest feature pixel.
pub fn squared_distance_transform(
    features: &[(usize, usize)],
    shape: (usize, usize),
    spacing: (f64, f64),
) -> Array2<f64> {
    let (h, w) = shape;
    let mut grid = Array2::from_elem((h, w), FAR);
    for &(i, j) in features {
        grid[[i, j]] = 0.0;
    }
    for j in 0..w {
        let col: Vec<f64> = grid.column(j).to_vec();
        for (i, v) in dt1d(&col, spacing.0).into_iter().enumerate() {
            grid[[i, j]] = v;
        }
    }
    for i in 0..h {
        let row: Vec<f64> = grid.row(i).to_vec();
        for (j, v) in dt1d(&row, spacing.1).into_iter().enumerate() {
            grid[[i, j]] = v;
        }
    }
    grid
}

/// 95th-percentile symmetric boundary distance; `None` if either mask is empty.
pub fn hd95(pred: ArrayView2<'_, u8>, gt: ArrayView2<'_, u8>, spacing: (f64, f64)) -> Result<Option<f64>> {
    check_shape(gt.shape(), pred.shape())?;
    let ba = boundary(pred);
    let bb = boundary(gt);
    if ba.is_empty() || bb.is_empty() {
        return Ok(None);
    }
    let shape = pred.dim();
    let to_b = squared_distance_transform(&bb, shape, spacing);
    let to_a = squared_distance_transform(&ba, shape, spacing);
    let mut pooled: Vec<f64> = ba
        .iter()
        .map(|&p| to_b[p].sqrt())
        .chain(bb.iter().map(|&p| to_a[p].sqrt()))
        .collect();
    pooled.sort_by(|a, b| a.total_cmp(b));
    Ok(Some(percentile_sorted(&pooled, 95.0)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    pub dice: f64,
    pub jaccard: f64,
    pub hd95: Option<f64>,
    /// The prediction has no foreground.
    pub empty: bool,
}

impl ImageRecord {
    pub fn evaluate(
        id: impl Into<String>,
        pred: ArrayView2<'_, u8>,
        gt: ArrayView2<'_, u8>,
        spacing: (f64, f64),
    ) -> Result<Self> {
        Ok(ImageRecord {
            id: id.into(),
            dice: dice(pred, gt)?,
            jaccard: jaccard(pred, gt)?,
            hd95: hd95(pred, gt, spacing)?,
            empty: is_empty(pred),
        })
    }

    pub fn tsv_line(&self) -> String {
        let hd = self.hd95.map_or_else(|| "NA".to_string(), |v| format!("{v:.6}"));
        format!(
            "{}\t{:.6}\t{:.6}\t{}\t{}",
            self.id, self.dice, self.jaccard, hd, self.empty as u8
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_image: Vec<ImageRecord>,
    pub dice_all: f64,
    pub jaccard_all: f64,
    /// Averages over non-empty predictions; `None` when every prediction is empty.
    pub dice_nonempty: Option<f64>,
    pub jaccard_nonempty: Option<f64>,
    pub hd95_nonempty: Option<f64>,
    pub empty_count: usize,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Fold per-image records into a report, ordered by id. Empty predictions
/// score Dice/Jaccard 0 against non-empty ground truth and are excluded
/// from the bracketed averages.
pub fn aggregate(mut records: Vec<ImageRecord>) -> MetricsReport {
    records.sort_by(|a, b| a.id.cmp(&b.id));
    let nonempty = || records.iter().filter(|r| !r.empty);
    MetricsReport {
        dice_all: mean(records.iter().map(|r| r.dice)).unwrap_or(f64::NAN),
        jaccard_all: mean(records.iter().map(|r| r.jaccard)).unwrap_or(f64::NAN),
        dice_nonempty: mean(nonempty().map(|r| r.dice)),
        jaccard_nonempty: mean(nonempty().map(|r| r.jaccard)),
        hd95_nonempty: mean(records.iter().filter_map(|r| r.hd95)),
        empty_count: records.iter().filter(|r| r.empty).count(),
        per_image: records,
    }
}

impl MetricsReport {
    pub fn records_tsv(&self) -> String {
        let mut out = String::from("id\tdice\tjaccard\thd95\tempty\n");
        for r in &self.per_image {
            out.push_str(&r.tsv_line());
            out.push('\n');
        }
        out
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.3}"))
}

/// Human-readable table with columns Method / Dice / HD95 / Jaccard / empty;
/// bracketed numbers exclude empty predictions. HD95 is averaged per slice.
pub fn format_table(rows: &[(&str, &MetricsReport)]) -> String {
    let width = rows.iter().map(|(m, _)| m.len()).max().unwrap_or(6).max(6);
    let mut out = String::new();
    let _ = writeln!(out, "# averages are per slice; [..] excludes empty predictions");
    let _ = writeln!(
        out,
        "{:<width$}  {:<15}  {:<7}  {:<15}  empty",
        "Method", "Dice", "HD95", "Jaccard"
    );
    for (method, r) in rows {
        let _ = writeln!(
            out,
            "{:<width$}  {:<15}  {:<7}  {:<15}  {}",
            method,
            format!("{:.3} [{}]", r.dice_all, fmt_opt(r.dice_nonempty)),
            fmt_opt(r.hd95_nonempty),
            format!("{:.3} [{}]", r.jaccard_all, fmt_opt(r.jaccard_nonempty)),
            r.empty_count
        );
    }
    out
}
