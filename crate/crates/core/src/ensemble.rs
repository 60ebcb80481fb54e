//! Implicit ensembles: repeated stochastic sampling of masks for one prior,
//! reduced to mean, variance and thresholded maps.
//!
//! Trajectories are evaluated in fixed-width chunks. Member `i` always lands
//! in slot `i % chunk` of chunk `i / chunk`, and unused slots are padded, so a
//! member's result never depends on the ensemble size. With `chunk = 1` every
//! member is exactly [`sample_mask`] with its own seed.

use ndarray::{Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::LabeledSlice;
use crate::denoiser::{predict_arrays, NoisePredictor};
use crate::diffusion::{reverse_step, signed_to_unit, ConditionedState};
use crate::error::{check_shape, Error, Result};
use crate::metrics::{self, ImageRecord, MetricsReport};
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VarianceEstimator {
    /// Denominator `n - 1`.
    Unbiased,
    /// Denominator `n`.
    Biased,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingOptions {
    /// Inject noise at the final step `t = 1` as a literal reading of the
    /// sampling loop would; off by default.
    pub noise_at_final_step: bool,
    /// Trajectories evaluated per network call.
    pub chunk: usize,
    pub variance: VarianceEstimator,
    pub threshold: f64,
}

impl Default for SamplingOptions {
    fn default() -> Self {
        SamplingOptions {
            noise_at_final_step: false,
            chunk: 1,
            variance: VarianceEstimator::Unbiased,
            threshold: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleSummary {
    /// Each `(1, h, w)` in `[0, 1]`, in seed order.
    pub samples: Vec<Array3<f64>>,
    pub mean_map: Array3<f64>,
    pub variance_map: Array3<f64>,
    pub binary_mask: Array3<u8>,
    pub n: usize,
    pub seeds: Vec<u64>,
}

impl EnsembleSummary {
    /// `(n, 1, h, w)` stack of the samples.
    pub fn sample_stack(&self) -> ndarray::Array4<f64> {
        let views: Vec<_> = self.samples.iter().map(|s| s.view()).collect();
        ndarray::stack(Axis(0), &views).expect("samples share a shape")
    }
}

/// Strict threshold: `1` iff `value > threshold`.
pub fn binarize(map: &Array3<f64>, threshold: f64) -> Array3<u8> {
    map.mapv(|v| u8::from(v > threshold))
}

pub fn is_empty(binary_mask: &Array3<u8>) -> bool {
    binary_mask.iter().all(|&v| v == 0)
}

fn draw_normal(rng: &mut ChaCha8Rng, shape: (usize, usize, usize)) -> Array3<f64> {
    Array3::from_shape_simple_fn(shape, || rng.sample(StandardNormal))
}

/// Run one reverse trajectory per seed and return masks mapped to `[0, 1]`.
pub fn sample_masks(
    model: &impl NoisePredictor,
    prior: &Array3<f64>,
    schedule: &NoiseSchedule,
    seeds: &[u64],
    opts: &SamplingOptions,
) -> Result<Vec<Array3<f64>>> {
    let (c, h, w) = prior.dim();
    if c + 1 != model.in_channels() {
        return Err(Error::Shape {
            expected: vec![model.in_channels() - 1, h, w],
            actual: prior.shape().to_vec(),
        });
    }
    let width = opts.chunk.max(1);
    let steps_total = schedule.steps();
    let mask_shape = (1, h, w);
    let mut out = Vec::with_capacity(seeds.len());

    for chunk in seeds.chunks(width) {
        let mut rngs: Vec<ChaCha8Rng> = chunk.iter().map(|&s| ChaCha8Rng::seed_from_u64(s)).collect();
        let mut states: Vec<ConditionedState> = rngs
            .iter_mut()
            .map(|rng| ConditionedState::new(prior.clone(), draw_normal(rng, mask_shape), steps_total))
            .collect::<Result<_>>()?;
        let padding = ConditionedState::new(prior.clone(), Array3::zeros(mask_shape), steps_total)?;

        for t in (1..=steps_total).rev() {
            let mut stacked: Vec<Array3<f64>> = states.iter().map(ConditionedState::stacked).collect();
            stacked.resize(width, padding.stacked());
            let outputs = predict_arrays(model, &stacked, &vec![t; width])?;
            let mut next = Vec::with_capacity(states.len());
            for ((state, output), rng) in states.into_iter().zip(&outputs).zip(rngs.iter_mut()) {
                let z = if t > 1 || opts.noise_at_final_step {
                    draw_normal(rng, mask_shape)
                } else {
                    Array3::zeros(mask_shape)
                };
                let x = reverse_step(&state, output, z.view(), schedule)?;
                if x.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!("sampling trajectory diverged at t={t}")));
                }
                next.push(state.advance(x)?);
            }
            states = next;
        }
        out.extend(states.iter().map(|s| signed_to_unit(s.noisy_mask().view())));
    }
    Ok(out)
}

/// One mask sample for `prior` driven entirely by `seed`.
pub fn sample_mask(
    model: &impl NoisePredictor,
    prior: &Array3<f64>,
    schedule: &NoiseSchedule,
    seed: u64,
    opts: &SamplingOptions,
) -> Result<Array3<f64>> {
    let single = SamplingOptions {
        chunk: 1,
        ..opts.clone()
    };
    Ok(sample_masks(model, prior, schedule, &[seed], &single)?.remove(0))
}

/// Reduce samples (in seed order) to mean, variance and binary maps.
pub fn summarize(samples: Vec<Array3<f64>>, seeds: Vec<u64>, opts: &SamplingOptions) -> Result<EnsembleSummary> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Config("ensemble size must be >= 1".into()))?;
    let shape = first.raw_dim();
    // Welford accumulation, folded in seed order.
    let mut mean = Array3::<f64>::zeros(shape);
    let mut m2 = Array3::<f64>::zeros(shape);
    for (k, s) in samples.iter().enumerate() {
        check_shape(first.shape(), s.shape())?;
        let k = (k + 1) as f64;
        ndarray::Zip::from(&mut mean).and(&mut m2).and(s).for_each(|m, q, &x| {
            let delta = x - *m;
            *m += delta / k;
            *q += delta * (x - *m);
        });
    }
    let n = samples.len();
    let variance = match (n, opts.variance) {
        (1, _) => m2.mapv(|_| 0.0),
        (_, VarianceEstimator::Unbiased) => m2.mapv(|q| (q / (n - 1) as f64).max(0.0)),
        (_, VarianceEstimator::Biased) => m2.mapv(|q| (q / n as f64).max(0.0)),
    };
    Ok(EnsembleSummary {
        binary_mask: binarize(&mean, opts.threshold),
        mean_map: mean,
        variance_map: variance,
        n,
        seeds,
        samples,
    })
}

pub fn ensemble_seeds(base_seed: u64, n: usize) -> Vec<u64> {
    (0..n as u64).map(|i| base_seed.wrapping_add(i)).collect()
}

pub fn build_ensemble(
    model: &impl NoisePredictor,
    prior: &Array3<f64>,
    schedule: &NoiseSchedule,
    n: usize,
    base_seed: u64,
    opts: &SamplingOptions,
) -> Result<EnsembleSummary> {
    if n == 0 {
        return Err(Error::Config("ensemble size must be >= 1".into()));
    }
    let seeds = ensemble_seeds(base_seed, n);
    let samples = sample_masks(model, prior, schedule, &seeds, opts)?;
    summarize(samples, seeds, opts)
}

/// Dice of each prefix ensemble against `gt`, from samples already drawn.
pub fn curve_from_samples(
    samples: &[Array3<f64>],
    gt: &Array3<u8>,
    sizes: &[usize],
    opts: &SamplingOptions,
) -> Result<Vec<(usize, f64)>> {
    if sizes.is_empty() || sizes.windows(2).any(|w| w[0] >= w[1]) || sizes[0] == 0 {
        return Err(Error::Config(
            "curve sizes must be positive and strictly ascending".into(),
        ));
    }
    let max = *sizes.last().unwrap();
    if samples.len() < max {
        return Err(Error::Config(format!(
            "{} samples cannot cover size {max}",
            samples.len()
        )));
    }
    sizes
        .iter()
        .map(|&n| {
            let summary = summarize(samples[..n].to_vec(), Vec::new(), opts)?;
            let d = metrics::dice(summary.binary_mask.index_axis(Axis(0), 0), gt.index_axis(Axis(0), 0))?;
            Ok((n, d))
        })
        .collect()
}

pub fn ensemble_curve(
    model: &impl NoisePredictor,
    prior: &Array3<f64>,
    gt: &Array3<u8>,
    schedule: &NoiseSchedule,
    sizes: &[usize],
    base_seed: u64,
    opts: &SamplingOptions,
) -> Result<Vec<(usize, f64)>> {
    let max = sizes.iter().copied().max().unwrap_or(0);
    let samples = sample_masks(model, prior, schedule, &ensemble_seeds(base_seed, max), opts)?;
    curve_from_samples(&samples, gt, sizes, opts)
}

/// Base seed for one image, derived from the run seed and the image id.
pub fn image_seed(base_seed: u64, id: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(base_seed.to_le_bytes());
    h.update(id.as_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
}

/// Everything computed for one evaluated image.
#[derive(Debug, Clone)]
pub struct ImageEvaluation {
    pub id: String,
    /// First sample alone, thresholded.
    pub single: ImageRecord,
    /// Mean over the first `n` samples of each sample's own Dice.
    pub mean_single_dice: f64,
    /// Ensemble of the first `n` samples.
    pub ensemble: ImageRecord,
    pub curve: Vec<(usize, f64)>,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub images: Vec<ImageEvaluation>,
    pub single: MetricsReport,
    pub ensemble: MetricsReport,
    pub n: usize,
}

impl Evaluation {
    pub fn mean_single_dice(&self) -> f64 {
        self.images.iter().map(|i| i.mean_single_dice).sum::<f64>() / self.images.len() as f64
    }

    /// Average Dice per curve size over all images.
    pub fn mean_curve(&self) -> Vec<(usize, f64)> {
        let Some(first) = self.images.first() else {
            return Vec::new();
        };
        first
            .curve
            .iter()
            .enumerate()
            .map(|(k, &(n, _))| {
                let avg = self.images.iter().map(|i| i.curve[k].1).sum::<f64>() / self.images.len() as f64;
                (n, avg)
            })
            .collect()
    }
}

/// What [`evaluate_slices`] computes per image.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalPlan {
    /// Ensemble size for the ensemble row.
    pub n: usize,
    /// Prefix sizes for the Dice curve; may be empty.
    pub curve_sizes: Vec<usize>,
    pub base_seed: u64,
    /// Pixel spacing `(row, column)` for HD95.
    pub spacing: (f64, f64),
}

/// Sample `max(n, sizes)` masks per slice once and derive the single-run,
/// ensemble-of-`n` and prefix-curve results from them.
pub fn evaluate_slices(
    model: &impl NoisePredictor,
    slices: &[LabeledSlice],
    schedule: &NoiseSchedule,
    plan: &EvalPlan,
    opts: &SamplingOptions,
    mut progress: impl FnMut(usize, &ImageEvaluation),
) -> Result<Evaluation> {
    let EvalPlan {
        n,
        ref curve_sizes,
        base_seed,
        spacing,
    } = *plan;
    if n == 0 {
        return Err(Error::Config("ensemble size must be >= 1".into()));
    }
    let draw = curve_sizes.iter().copied().max().unwrap_or(0).max(n);
    let mut images = Vec::with_capacity(slices.len());
    for (k, slice) in slices.iter().enumerate() {
        let seeds = ensemble_seeds(image_seed(base_seed, &slice.id), draw);
        let samples = sample_masks(model, &slice.prior_f64(), schedule, &seeds, opts)?;
        let gt = slice.mask.index_axis(Axis(0), 0);

        let single_mask = binarize(&samples[0], opts.threshold);
        let single = ImageRecord::evaluate(&slice.id, single_mask.index_axis(Axis(0), 0), gt, spacing)?;
        let mut dice_sum = 0.0;
        for s in &samples[..n] {
            dice_sum += metrics::dice(binarize(s, opts.threshold).index_axis(Axis(0), 0), gt)?;
        }
        let summary = summarize(samples[..n].to_vec(), seeds[..n].to_vec(), opts)?;
        let ensemble = ImageRecord::evaluate(&slice.id, summary.binary_mask.index_axis(Axis(0), 0), gt, spacing)?;
        let curve = if curve_sizes.is_empty() {
            Vec::new()
        } else {
            curve_from_samples(&samples, &slice.mask, curve_sizes, opts)?
        };
        let eval = ImageEvaluation {
            id: slice.id.clone(),
            single,
            mean_single_dice: dice_sum / n as f64,
            ensemble,
            curve,
        };
        progress(k, &eval);
        images.push(eval);
    }
    Ok(Evaluation {
        single: metrics::aggregate(images.iter().map(|i| i.single.clone()).collect()),
        ensemble: metrics::aggregate(images.iter().map(|i| i.ensemble.clone()).collect()),
        images,
        n,
    })
}
