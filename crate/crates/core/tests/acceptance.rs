//! Acceptance suite. Prints one `PASS`/`FAIL` line per criterion and exits
//! non-zero if any criterion fails.
//!
//! Criteria 6 and 7 train the desk-scale model (about two hours on one CPU
//! core). Set `DIFFSEG_ACCEPTANCE_DIR` to keep the dataset and checkpoint in
//! that directory and reuse them on later runs; by default a fresh directory
//! under the cargo target dir is used and every run retrains.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use diffseg::cli::commands::{cmd_generate_data, cmd_sample, cmd_train, write_evaluation, SampleSource};
use diffseg::cli::config::RunConfig;
use diffseg::data::manifest::{load_split, SplitName};
use diffseg::data::preprocess::percentile_sorted;
use diffseg::data::LabeledSlice;
use diffseg::diffusion::{forward_noise, posterior, reverse_step, ConditionedState, DenoiserOutput};
use diffseg::ensemble::{evaluate_slices, summarize, EvalPlan, SamplingOptions};
use diffseg::metrics::{self, dice, hd95, jaccard, ImageRecord};
use diffseg::schedule::NoiseSchedule;
use diffseg::{Checkpoint, NoisePredictor};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use tch::{Kind, Tensor};

/// Desk-scale settings for criteria 6 and 7.
const DESK_T: usize = 100;
const DESK_ITERATIONS: u64 = 8000;
const DESK_LR: f64 = 1e-4;
const EVAL_IMAGES: usize = 50;
/// CPU-only budget for training plus evaluation. A reused checkpoint only
/// counts the evaluation.
const DESK_BUDGET_SECS: f64 = 6.0 * 3600.0;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn normal_grid(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Array3<f64> {
    Array3::from_shape_simple_fn((1, h, w), || rng.sample(StandardNormal))
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
}

// 1. Schedule invariants and left-fold oracle.
fn schedule_suite() -> Outcome {
    let mut problems = Vec::new();
    let mut worst = 0.0f64;
    for steps in [1usize, 10, 100, 1000, 10_000] {
        let s = match NoiseSchedule::linear(steps, 1e-4, 0.02) {
            Ok(s) => s,
            Err(e) => {
                problems.push(format!("T={steps}: {e}"));
                continue;
            }
        };
        let beta = s.beta();
        if beta.len() != steps || s.alpha().len() != steps || s.alpha_bar().len() != steps {
            problems.push(format!("T={steps}: wrong lengths"));
        }
        if beta.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            problems.push(format!("T={steps}: beta outside (0,1)"));
        }
        if beta.windows(2).any(|w| w[1] < w[0]) {
            problems.push(format!("T={steps}: beta not non-decreasing"));
        }
        if beta[0] != 1e-4 || (steps > 1 && beta[steps - 1] != 0.02) {
            problems.push(format!("T={steps}: endpoints not exact"));
        }
        if s.alpha_bar().windows(2).any(|w| w[1] >= w[0]) {
            problems.push(format!("T={steps}: alpha_bar not strictly decreasing"));
        }
        let mut acc = 1.0f64;
        for (i, &b) in beta.iter().enumerate() {
            acc *= 1.0 - b;
            worst = worst.max(rel_err(s.alpha_bar()[i], acc));
            let c = s.coefficients_at(i + 1).unwrap();
            if (c.alpha - (1.0 - b)).abs() > 0.0 {
                problems.push(format!("T={steps}: alpha_{} != 1 - beta", i + 1));
            }
            if (c.sqrt_alpha_bar.powi(2) + c.sqrt_one_minus_alpha_bar.powi(2) - 1.0).abs() > 1e-12 {
                problems.push(format!("T={steps}: coefficient identity at t={}", i + 1));
            }
            if !(c.beta_tilde >= 0.0 && c.beta_tilde <= b) {
                problems.push(format!("T={steps}: posterior variance bound at t={}", i + 1));
            }
        }
        if s.coefficients_at(0).is_ok() || s.coefficients_at(steps + 1).is_ok() {
            problems.push(format!("T={steps}: out-of-range step accepted"));
        }
    }
    match NoiseSchedule::linear(1, 0.5, 0.5) {
        Ok(s) if s.beta() == [0.5] && s.alpha_bar() == [0.5] && s.posterior_beta_tilde() == [0.0] => {}
        _ => problems.push("degenerate T=1 schedule".into()),
    }
    if worst > 1e-12 {
        problems.push(format!("left-fold oracle rel err {worst:e}"));
    }
    let pass = problems.is_empty();
    outcome(
        pass,
        if pass {
            format!("T in {{1,10,100,1000,10000}}; max alpha_bar rel err vs left fold {worst:.1e}")
        } else {
            problems.join("; ")
        },
    )
}

// 2. Monte Carlo moments of the forward process.
fn forward_moments() -> Outcome {
    let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let draws = 10_000;
    let mut lines = Vec::new();
    let mut pass = true;
    for _ in 0..3 {
        let t = rng.gen_range(1..=1000);
        let x0 = Array3::from_shape_simple_fn((1, 2, 2), || rng.gen_range(-1.0..1.0));
        let mut sum = Array3::<f64>::zeros((1, 2, 2));
        let mut sq = Array3::<f64>::zeros((1, 2, 2));
        for _ in 0..draws {
            let eps = normal_grid(&mut rng, 2, 2);
            let x_t = forward_noise(x0.view(), t, eps.view(), &s).unwrap();
            sum += &x_t;
            sq += &x_t.mapv(|v| v * v);
        }
        let ab = s.alpha_bar()[t - 1];
        let target_var = 1.0 - ab;
        let se = (target_var / draws as f64).sqrt();
        let n = draws as f64;
        let mut worst_z = 0.0f64;
        let mut var_sum = 0.0;
        for ((&m, &q), &x) in sum.iter().zip(sq.iter()).zip(x0.iter()) {
            let mean = m / n;
            worst_z = worst_z.max((mean - ab.sqrt() * x).abs() / se);
            var_sum += (q - n * mean * mean) / (n - 1.0);
        }
        let var = var_sum / x0.len() as f64;
        let var_rel = (var - target_var).abs() / target_var;
        pass &= worst_z <= 3.0 && var_rel <= 0.02;
        lines.push(format!(
            "t={t}: max |z|={worst_z:.2}, var rel err {:.2}%",
            100.0 * var_rel
        ));
    }
    outcome(pass, lines.join("; "))
}

// 3. Reverse step with the true noise.
fn oracle_collapse() -> Outcome {
    let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut worst_claim, mut worst_post, mut within) = (0.0f64, 0.0f64, 0usize);
    for _ in 0..100 {
        let t = rng.gen_range(2..=1000);
        let x0 = Array3::from_shape_simple_fn((1, 4, 4), || rng.gen_range(-1.0..1.0));
        let eps = normal_grid(&mut rng, 4, 4);
        let x_t = forward_noise(x0.view(), t, eps.view(), &s).unwrap();
        let state = ConditionedState::new(Array3::zeros((1, 4, 4)), x_t.clone(), t).unwrap();
        let out = DenoiserOutput::new(eps, Array3::zeros((1, 4, 4))).unwrap();
        let prev = reverse_step(&state, &out, Array3::zeros((1, 4, 4)).view(), &s).unwrap();
        let scale = s.alpha_bar()[t - 2].sqrt();
        let case_err = prev
            .iter()
            .zip(x0.iter())
            .map(|(p, x)| rel_err(*p, scale * x))
            .fold(0.0, f64::max);
        within += usize::from(case_err <= 1e-6);
        worst_claim = worst_claim.max(case_err);
        let (post_mean, _) = posterior(x0.view(), x_t.view(), t, &s).unwrap();
        let post_err = prev
            .iter()
            .zip(post_mean.iter())
            .map(|(p, m)| rel_err(*p, *m))
            .fold(0.0, f64::max);
        worst_post = worst_post.max(post_err);
    }
    outcome(
        within == 100,
        format!(
            "{within}/100 cases within 1e-6 of sqrt(alpha_bar_(t-1))*x0 (max rel err {worst_claim:.2e}); \
             the same outputs match the posterior mean of q(x_(t-1)|x_t,x0) to {worst_post:.1e}"
        ),
    )
}

fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Array2<u8> {
    let p = rng.gen_range(0.0..0.6);
    Array2::from_shape_simple_fn((h, w), || u8::from(rng.gen_bool(p)))
}

fn brute_boundary(m: &Array2<u8>) -> Vec<(f64, f64)> {
    let (h, w) = m.dim();
    let mut out = Vec::new();
    for i in 0..h {
        for j in 0..w {
            if m[[i, j]] == 0 {
                continue;
            }
            let interior = i > 0
                && j > 0
                && i + 1 < h
                && j + 1 < w
                && m[[i - 1, j]] != 0
                && m[[i + 1, j]] != 0
                && m[[i, j - 1]] != 0
                && m[[i, j + 1]] != 0;
            if !interior {
                out.push((i as f64, j as f64));
            }
        }
    }
    out
}

fn brute_hd95(a: &Array2<u8>, b: &Array2<u8>, spacing: (f64, f64)) -> Option<f64> {
    let (ba, bb) = (brute_boundary(a), brute_boundary(b));
    if ba.is_empty() || bb.is_empty() {
        return None;
    }
    let nearest = |p: &(f64, f64), set: &[(f64, f64)]| {
        set.iter()
            .map(|q| (((p.0 - q.0) * spacing.0).powi(2) + ((p.1 - q.1) * spacing.1).powi(2)).sqrt())
            .fold(f64::INFINITY, f64::min)
    };
    let mut all: Vec<f64> = ba
        .iter()
        .map(|p| nearest(p, &bb))
        .chain(bb.iter().map(|p| nearest(p, &ba)))
        .collect();
    all.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let rank = 0.95 * (all.len() - 1) as f64;
    let (lo, hi) = (rank.floor() as usize, rank.ceil() as usize);
    Some(all[lo] + (all[hi] - all[lo]) * (rank - lo as f64))
}

// 4. Metric identities and brute-force HD95.
fn metrics_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst_identity = 0.0f64;
    for _ in 0..1000 {
        let (h, w) = (rng.gen_range(1..=16), rng.gen_range(1..=16));
        let (a, b) = (random_mask(&mut rng, h, w), random_mask(&mut rng, h, w));
        let d = dice(a.view(), b.view()).unwrap();
        let j = jaccard(a.view(), b.view()).unwrap();
        worst_identity = worst_identity.max((d - 2.0 * j / (1.0 + j)).abs());
    }
    let mut worst_hd = 0.0f64;
    let mut mismatched_definedness = 0;
    let mut defined = 0;
    for k in 0..200 {
        let (h, w) = (rng.gen_range(2..=16), rng.gen_range(2..=16));
        let (a, b) = (random_mask(&mut rng, h, w), random_mask(&mut rng, h, w));
        let spacing = if k % 4 == 3 { (1.0, 2.5) } else { (1.0, 1.0) };
        match (hd95(a.view(), b.view(), spacing).unwrap(), brute_hd95(&a, &b, spacing)) {
            (Some(x), Some(y)) => {
                defined += 1;
                worst_hd = worst_hd.max((x - y).abs());
            }
            (None, None) => {}
            _ => mismatched_definedness += 1,
        }
    }
    // The interpolation helper used by the oracle above agrees with the library's.
    let probe = [0.5, 1.0, 2.0, 4.0];
    let same_percentile = (percentile_sorted(&probe, 95.0) - 3.7).abs() < 1e-12;
    let pass = worst_identity <= 1e-12 && worst_hd <= 1e-9 && mismatched_definedness == 0 && same_percentile;
    outcome(
        pass,
        format!(
            "dice-jaccard identity max err {worst_identity:.1e} over 1000 pairs; \
             hd95 vs brute force max err {worst_hd:.1e} over {defined} defined pairs, \
             {mismatched_definedness} definedness mismatches"
        ),
    )
}

// 5. Variance-map bound and unanimity.
fn variance_bound() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let bound = 0.25 * 100.0 / 99.0 + 1e-9;
    let opts = SamplingOptions::default();
    let mut worst = 0.0f64;
    for stack in 0..20 {
        let probs = Array2::from_shape_simple_fn((8, 8), || rng.gen_range(0.0..1.0));
        let mut samples: Vec<Array3<f64>> = (0..100)
            .map(|_| Array3::from_shape_fn((1, 8, 8), |(_, i, j)| f64::from(u8::from(rng.gen_bool(probs[[i, j]])))))
            .collect();
        if stack == 0 {
            for (k, s) in samples.iter_mut().enumerate() {
                s[[0, 0, 0]] = if k < 50 { 1.0 } else { 0.0 };
            }
        }
        let e = summarize(samples, (0..100).collect(), &opts).unwrap();
        worst = worst.max(e.variance_map.iter().copied().fold(0.0, f64::max));
    }
    let unanimous: Vec<Array3<f64>> = (0..100)
        .map(|_| Array3::from_shape_fn((1, 8, 8), |(_, i, j)| f64::from(u8::from((i + j) % 3 == 0))))
        .collect();
    let u = summarize(unanimous, (0..100).collect(), &opts).unwrap();
    let zero = u.variance_map.iter().all(|&v| v == 0.0);
    outcome(
        worst <= bound && zero,
        format!(
            "max variance {worst:.6} (bound {:.6}) over 20 stacks of 100; unanimity gives exact zero: {zero}",
            bound - 1e-9
        ),
    )
}

fn work_dir() -> (PathBuf, bool) {
    match std::env::var_os("DIFFSEG_ACCEPTANCE_DIR") {
        Some(d) => (PathBuf::from(d), true),
        None => {
            let d = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
            let _ = fs::remove_dir_all(&d);
            (d, false)
        }
    }
}

fn desk_config() -> RunConfig {
    RunConfig::from_toml(
        "",
        &[
            ("schedule.T".into(), DESK_T.to_string()),
            ("train.iterations".into(), DESK_ITERATIONS.to_string()),
            ("train.lr".into(), DESK_LR.to_string()),
            ("train.log_every".into(), "250".into()),
        ],
    )
    .expect("desk config is valid")
}

/// Mean loss over the 200 iterations ending at `end` (or fewer at the start).
fn running_loss(metrics: &str, end: u64) -> Option<f64> {
    let losses: Vec<f64> = metrics
        .lines()
        .filter_map(|l| {
            let mut f = l.split('\t');
            let it: u64 = f.next()?.parse().ok()?;
            let loss: f64 = f.next()?.parse().ok()?;
            (it + 200 > end && it <= end).then_some(loss)
        })
        .collect();
    (!losses.is_empty()).then(|| losses.iter().sum::<f64>() / losses.len() as f64)
}

struct Desk {
    cfg: RunConfig,
    dataset: PathBuf,
    checkpoint: PathBuf,
    root: PathBuf,
    train_secs: f64,
    train_slices: usize,
}

fn desk_setup() -> Result<Desk, String> {
    let (root, reuse) = work_dir();
    let cfg = desk_config();
    let dataset = root.join("data");
    let run = root.join("train");
    let started = Instant::now();
    if !(reuse && dataset.join("manifest.tsv").exists()) {
        cmd_generate_data(&cfg, &dataset, true).map_err(|e| format!("generate-data: {e}"))?;
    }
    let final_ckpt = diffseg::trainer::checkpoint_path(&run, DESK_ITERATIONS);
    if !(reuse && final_ckpt.exists()) {
        let resume = reuse && diffseg::trainer::latest_checkpoint(&run).ok().flatten().is_some();
        cmd_train(&cfg, &dataset, &run, resume).map_err(|e| format!("train: {e}"))?;
    }
    let train_slices = load_split(&dataset, SplitName::Train).map_err(|e| e.to_string())?.len();
    Ok(Desk {
        cfg,
        dataset,
        checkpoint: final_ckpt,
        root,
        train_secs: started.elapsed().as_secs_f64(),
        train_slices,
    })
}

// 6. Desk-scale trend.
fn desk_trend(desk: &Desk) -> Outcome {
    let started = Instant::now();
    let run = || -> diffseg::Result<(diffseg::ensemble::Evaluation, usize)> {
        let ckpt = Checkpoint::load(&desk.checkpoint)?;
        let model = ckpt.denoiser()?;
        let schedule = desk.cfg.schedule.build()?;
        let test: Vec<LabeledSlice> = load_split(&desk.dataset, SplitName::Test)?;
        let available = test.len();
        let test: Vec<LabeledSlice> = test.into_iter().filter(|s| !s.is_empty()).take(EVAL_IMAGES).collect();
        let plan = EvalPlan {
            n: 5,
            curve_sizes: vec![1, 5, 25],
            base_seed: desk.cfg.ensemble.base_seed,
            spacing: (1.0, 1.0),
        };
        let eval = evaluate_slices(&model, &test, &schedule, &plan, &desk.cfg.ensemble.options(), |_, _| {})?;
        let out = desk.root.join("evaluation");
        fs::create_dir_all(&out).map_err(|e| diffseg::Error::io(&out, e))?;
        write_evaluation(&out, &eval)?;
        Ok((eval, available))
    };
    match run() {
        Err(e) => outcome(false, format!("evaluation failed: {e}")),
        Ok((eval, available)) => {
            let single = eval.mean_single_dice();
            let first = eval.single.dice_all;
            let ens = eval.ensemble.dice_all;
            let curve = eval.mean_curve();
            let d = |n: usize| curve.iter().find(|p| p.0 == n).map_or(f64::NAN, |p| p.1);
            let a = single >= 0.80;
            let b = ens >= single - 0.005;
            let c = d(25) - d(5) < d(5) - d(1) + 0.01;
            let metrics =
                fs::read_to_string(desk.root.join("train").join(diffseg::trainer::METRICS_FILE)).unwrap_or_default();
            let (early, late) = (running_loss(&metrics, 100), running_loss(&metrics, 2000));
            let converging = matches!((early, late), (Some(e), Some(l)) if l < e);
            outcome(
                eval.images.len() == EVAL_IMAGES && desk.train_slices >= 2000 && converging && a && b && c,
                format!(
                    "{} train slices, running loss {:.4} at 100 and {:.4} at 2000; {} of {available} test slices; mean single-sample Dice {single:.4} (a: {}), \
                     first-sample Dice {first:.4}, ensemble-of-5 Dice {ens:.4} (b: {}), \
                     curve D1={:.4} D5={:.4} D25={:.4} (c: {}); empty {} / {}; \
                     train {:.0}s, eval {:.0}s",
                    desk.train_slices,
                    early.unwrap_or(f64::NAN),
                    late.unwrap_or(f64::NAN),
                    eval.images.len(),
                    a,
                    b,
                    d(1),
                    d(5),
                    d(25),
                    c,
                    eval.single.empty_count,
                    eval.ensemble.empty_count,
                    desk.train_secs,
                    started.elapsed().as_secs_f64()
                ),
            )
        }
    }
}

// 7. Bitwise determinism of sampling and the prefix property.
fn determinism(desk: &Desk) -> Outcome {
    let started = Instant::now();
    let run = || -> diffseg::Result<(bool, bool)> {
        let test = load_split(&desk.dataset, SplitName::Test)?;
        let source = SampleSource::Dataset {
            dir: desk.dataset.clone(),
            id: test[0].id.clone(),
        };
        let mut cfg = desk.cfg.clone();
        cfg.ensemble.n = 5;
        let dirs = [
            desk.root.join("sample-a"),
            desk.root.join("sample-b"),
            desk.root.join("sample-n6"),
        ];
        for d in &dirs {
            let _ = fs::remove_dir_all(d);
        }
        cmd_sample(&cfg, &desk.checkpoint, &source, &dirs[0])?;
        cmd_sample(&cfg, &desk.checkpoint, &source, &dirs[1])?;
        let files = ["samples.dsa", "mean.dsa", "variance.dsa", "binary.dsa", "summary.json"];
        let identical = files.iter().all(|f| {
            let a = fs::read(dirs[0].join(f)).unwrap_or_default();
            let b = fs::read(dirs[1].join(f)).unwrap_or_else(|_| vec![1]);
            !a.is_empty() && a == b
        });
        cfg.ensemble.n = 6;
        let six = cmd_sample(&cfg, &desk.checkpoint, &source, &dirs[2])?;
        let stack = |dir: &Path| -> diffseg::Result<Vec<f64>> {
            let arr = diffseg::data::container::ArrayData::load(&dir.join("samples.dsa"))?.into_f64()?;
            Ok(arr.iter().copied().collect())
        };
        let five = stack(&dirs[0])?;
        let six_flat: Vec<f64> = six.sample_stack().iter().copied().collect();
        let prefix =
            six.samples.len() == 6 && five.len() * 6 == six_flat.len() * 5 && six_flat[..five.len()] == five[..];
        Ok((identical, prefix))
    };
    match run() {
        Err(e) => outcome(false, format!("sampling failed: {e}")),
        Ok((identical, prefix)) => outcome(
            identical && prefix,
            format!(
                "repeat run bit-identical: {identical}; n=5 is a bitwise prefix of n=6: {prefix}; {:.0}s",
                started.elapsed().as_secs_f64()
            ),
        ),
    }
}

/// Reads the ground truth (±1) from prior channel 1 and predicts the noise
/// that leads there, except for images flagged in channel 0, which are sent
/// to all background.
struct FlaggedOracle {
    schedule: NoiseSchedule,
}

impl NoisePredictor for FlaggedOracle {
    fn in_channels(&self) -> usize {
        3
    }

    fn predict(&self, stacked: &Tensor, steps: &[usize]) -> diffseg::Result<(Tensor, Tensor)> {
        let flag = stacked.narrow(1, 0, 1);
        let gt = stacked.narrow(1, 1, 1);
        let x_t = stacked.narrow(1, 2, 1).to_kind(Kind::Double);
        let target = gt
            .where_self(&flag.le(0.0), &(gt.ones_like() * -1.0))
            .to_kind(Kind::Double);
        let col = |f: fn(&diffseg::schedule::StepCoefficients) -> f64| {
            let v: Vec<f64> = steps
                .iter()
                .map(|&t| f(&self.schedule.coefficients_at(t).unwrap()))
                .collect();
            Tensor::from_slice(&v).view([steps.len() as i64, 1, 1, 1])
        };
        let eps = (x_t - target * col(|c| c.sqrt_alpha_bar)) / col(|c| c.sqrt_one_minus_alpha_bar);
        Ok((eps.to_kind(Kind::Float), flag.zeros_like()))
    }
}

// 8. Empty-prediction accounting.
fn empty_accounting() -> Outcome {
    let schedule = NoiseSchedule::linear(20, 1e-3, 0.3).unwrap();
    let model = FlaggedOracle {
        schedule: schedule.clone(),
    };
    let mut slices = Vec::new();
    for k in 0..8usize {
        let mask = Array3::from_shape_fn((1, 12, 12), |(_, i, j)| {
            u8::from((2 + k % 3..7 + k % 4).contains(&i) && (3..6 + k % 5).contains(&j))
        });
        let flag = if k % 3 == 1 { 1.0f32 } else { -1.0 };
        let prior = Array3::from_shape_fn((2, 12, 12), |(c, i, j)| {
            if c == 0 {
                flag
            } else if mask[[0, i, j]] == 1 {
                1.0
            } else {
                -1.0
            }
        });
        slices.push(LabeledSlice::new(format!("p0000_s{k:03}"), prior, mask).unwrap());
    }
    let forced: Vec<String> = slices
        .iter()
        .filter(|s| s.prior[[0, 0, 0]] > 0.0)
        .map(|s| s.id.clone())
        .collect();
    let plan = EvalPlan {
        n: 5,
        curve_sizes: vec![],
        base_seed: 1,
        spacing: (1.0, 1.0),
    };
    let eval = match evaluate_slices(
        &model,
        &slices,
        &schedule,
        &plan,
        &SamplingOptions::default(),
        |_, _| {},
    ) {
        Ok(e) => e,
        Err(e) => return outcome(false, format!("evaluation failed: {e}")),
    };
    let report = &eval.ensemble;
    let empties: Vec<&ImageRecord> = report.per_image.iter().filter(|r| r.empty).collect();
    let flagged_match = empties.iter().map(|r| r.id.clone()).collect::<Vec<_>>() == forced;
    let hd_undefined = empties.iter().all(|r| r.hd95.is_none());
    let kept: Vec<&ImageRecord> = report.per_image.iter().filter(|r| !r.empty).collect();
    let mean = |v: Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
    let dice_br = mean(kept.iter().map(|r| r.dice).collect());
    let jac_br = mean(kept.iter().map(|r| r.jaccard).collect());
    let hd_br = mean(kept.iter().filter_map(|r| r.hd95).collect());
    let brackets = report.dice_nonempty.is_some_and(|v| (v - dice_br).abs() < 1e-12)
        && report.jaccard_nonempty.is_some_and(|v| (v - jac_br).abs() < 1e-12)
        && report.hd95_nonempty.is_some_and(|v| (v - hd_br).abs() < 1e-12)
        && (report.dice_all - mean(report.per_image.iter().map(|r| r.dice).collect())).abs() < 1e-12;
    let tsv_na = report.records_tsv().lines().filter(|l| l.contains("\tNA\t")).count() == 3;
    let table = metrics::format_table(&[("Ours (ensemble of 5 runs)", report)]);
    let row_count = table.lines().last().is_some_and(|l| l.trim_end().ends_with(" 3"));
    outcome(
        report.empty_count == 3 && flagged_match && hd_undefined && brackets && tsv_na && row_count,
        format!(
            "empty_count {} (forced {:?}); HD95 undefined for empties: {hd_undefined}; \
             Dice {:.3} [{:.3}] with brackets over non-empty only: {brackets}; NA in records: {tsv_na}",
            report.empty_count,
            forced,
            report.dice_all,
            report.dice_nonempty.unwrap_or(f64::NAN)
        ),
    )
}

fn main() {
    // Let `cargo test -- --list` and filters pass through harmlessly.
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    tch::set_num_threads(1);
    let mut failed = 0;
    let mut report = |id: usize, name: &str, started: Instant, limit: f64, mut o: Outcome| {
        let secs = started.elapsed().as_secs_f64();
        if secs > limit {
            o.pass = false;
            o.detail = format!("{} (over the {limit:.0}s budget)", o.detail);
        }
        let verdict = if o.pass { "PASS" } else { "FAIL" };
        println!(
            "acceptance {id} [{verdict}] {name} ({:.1}s): {}",
            started.elapsed().as_secs_f64(),
            o.detail
        );
        failed += usize::from(!o.pass);
    };
    type Check = fn() -> Outcome;
    let quick: [(usize, &str, f64, Check); 5] = [
        (1, "schedule suite", 1.0, schedule_suite),
        (2, "forward-process moments", 30.0, forward_moments),
        (3, "oracle-denoiser collapse", 10.0, oracle_collapse),
        (4, "metrics oracle equivalence", 60.0, metrics_oracles),
        (5, "variance-map bound", 5.0, variance_bound),
    ];
    for (id, name, limit, f) in quick {
        let t = Instant::now();
        report(id, name, t, limit, f());
    }
    let t = Instant::now();
    match desk_setup() {
        Ok(desk) => {
            report(6, "desk-scale trend", t, DESK_BUDGET_SECS, desk_trend(&desk));
            let t = Instant::now();
            report(7, "determinism", t, 300.0, determinism(&desk));
        }
        Err(e) => {
            report(6, "desk-scale trend", t, DESK_BUDGET_SECS, outcome(false, e.clone()));
            report(7, "determinism", Instant::now(), 300.0, outcome(false, e));
        }
    }
    let t = Instant::now();
    report(8, "empty-mask accounting", t, f64::INFINITY, empty_accounting());
    println!("acceptance: {} of 8 criteria passed", 8 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
