//! Subcommand bodies. Each writes its resolved configuration to `run.json`
//! in the directory it produces.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array3, Axis, Ix3};
use serde_json::json;

use super::config::RunConfig;
use super::export::{write_curve_png, write_map_png};
use crate::data::container::ArrayData;
use crate::data::manifest::{load_split, read_manifest, sha256_hex, write_dataset, SplitName};
use crate::data::split::split_dataset;
use crate::data::synthetic::generate_synthetic;
use crate::data::LabeledSlice;
use crate::denoiser::checkpoint::Checkpoint;
use crate::denoiser::Denoiser;
use crate::ensemble::{build_ensemble, evaluate_slices, EnsembleSummary, EvalPlan, Evaluation};
use crate::error::{Error, Result};
use crate::metrics::{self, format_table};
use crate::schedule::NoiseSchedule;
use crate::trainer::{latest_checkpoint, Trainer};

pub const RUN_FILE: &str = "run.json";

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Data(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Echo the resolved configuration into `dir`. An existing `run.json` is
/// kept and the new echo goes to `run-<suffix>.json`.
pub fn write_run_json(dir: &Path, command: &str, cfg: &RunConfig, extra: serde_json::Value) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut path = dir.join(RUN_FILE);
    let mut k = 1;
    while path.exists() {
        path = dir.join(format!("run-{k}.json"));
        k += 1;
    }
    let echo = json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "config": cfg,
        "inputs": extra,
    });
    write_json(&path, &echo)?;
    Ok(path)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Generate the synthetic corpus, split it and write it with a manifest.
pub fn cmd_generate_data(cfg: &RunConfig, dataset: &Path, force: bool) -> Result<usize> {
    let manifest = dataset.join(crate::data::manifest::MANIFEST_FILE);
    if manifest.exists() && !force {
        return Err(Error::Config(format!(
            "{} already exists (pass --force to overwrite)",
            manifest.display()
        )));
    }
    let slices = generate_synthetic(&cfg.data)?;
    let count = slices.len();
    let split = split_dataset(
        slices,
        cfg.split.train_fraction,
        cfg.split.seed,
        cfg.split.group_by_patient,
    )?;
    log::info!(
        "{} slices: {} train, {} test, {} excluded (empty test ground truth)",
        count,
        split.train.len(),
        split.test.len(),
        split.dropped.len()
    );
    if force && dataset.join("slices").exists() {
        let dir = dataset.join("slices");
        fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    write_dataset(dataset, &split, force)?;
    if force {
        let run = dataset.join(RUN_FILE);
        if run.exists() {
            fs::remove_file(&run).map_err(|e| Error::io(&run, e))?;
        }
    }
    write_run_json(dataset, "generate-data", cfg, json!({}))?;
    Ok(count)
}

fn check_slices(cfg: &RunConfig, slices: &[LabeledSlice]) -> Result<()> {
    for s in slices {
        let (c, h, w) = s.prior.dim();
        if c + 1 != cfg.model.in_channels || h != cfg.model.image_size || w != cfg.model.image_size {
            return Err(Error::Data(format!(
                "slice {} is {c}x{h}x{w}; the model expects {}x{}x{}",
                s.id,
                cfg.model.in_channels - 1,
                cfg.model.image_size,
                cfg.model.image_size
            )));
        }
    }
    Ok(())
}

/// Train on the `train` split of `dataset`, writing into `out_dir`. With
/// `resume`, continue from the newest checkpoint already in `out_dir`.
pub fn cmd_train(cfg: &RunConfig, dataset: &Path, out_dir: &Path, resume: bool) -> Result<PathBuf> {
    let schedule = cfg.schedule.build()?;
    let train = load_split(dataset, SplitName::Train)?;
    if train.is_empty() {
        return Err(Error::Data(format!("{} has no training slices", dataset.display())));
    }
    check_slices(cfg, &train)?;
    let mut trainer = if resume {
        let path = latest_checkpoint(out_dir)?
            .ok_or_else(|| Error::Config(format!("no checkpoint to resume in {}", out_dir.display())))?;
        let ckpt = Checkpoint::load(&path)?;
        ckpt.ensure_config(&cfg.model)?;
        check_schedule(&ckpt, &schedule)?;
        log::info!("resuming from {} (iteration {})", path.display(), ckpt.iteration);
        Trainer::from_checkpoint(&ckpt, schedule, cfg.train.clone())?
    } else {
        if latest_checkpoint(out_dir)?.is_some() {
            return Err(Error::Config(format!(
                "{} already holds checkpoints; use --resume",
                out_dir.display()
            )));
        }
        Trainer::new(cfg.model.clone(), schedule, cfg.train.clone())?
    };
    write_run_json(
        out_dir,
        "train",
        cfg,
        json!({"dataset": dataset, "resume_from": trainer.iteration(), "train_slices": train.len()}),
    )?;
    log::info!(
        "training {} parameters on {} slices for {} iterations",
        trainer.model().parameter_count(),
        train.len(),
        cfg.train.iterations
    );
    trainer.fit(&train, out_dir)
}

fn check_schedule(ckpt: &Checkpoint, schedule: &NoiseSchedule) -> Result<()> {
    match ckpt.metadata.get("schedule_fingerprint").and_then(|v| v.as_str()) {
        Some(fp) if fp != schedule.fingerprint() => Err(Error::Config(
            "checkpoint was trained with a different noise schedule".into(),
        )),
        _ => Ok(()),
    }
}

/// Load a checkpoint that must match the configured model and schedule.
pub fn load_model(cfg: &RunConfig, checkpoint: &Path) -> Result<(Denoiser, String)> {
    let bytes = fs::read(checkpoint).map_err(|e| Error::io(checkpoint, e))?;
    let ckpt = Checkpoint::from_bytes(&bytes)?;
    ckpt.ensure_config(&cfg.model)?;
    check_schedule(&ckpt, &cfg.schedule.build()?)?;
    Ok((ckpt.denoiser()?, sha256_hex(&bytes)))
}

/// Where `sample` takes its image from.
#[derive(Debug, Clone)]
pub enum SampleSource {
    /// A slice id in a dataset directory.
    Dataset { dir: PathBuf, id: String },
    /// A `.dsa` array: `(c, h, w)` prior or `(c+1, h, w)` stacked slice.
    File(PathBuf),
}

fn load_source(cfg: &RunConfig, source: &SampleSource) -> Result<(String, Array3<f64>, Option<Array3<u8>>)> {
    match source {
        SampleSource::Dataset { dir, id } => {
            let record = read_manifest(dir)?
                .into_iter()
                .find(|r| &r.id == id)
                .ok_or_else(|| Error::Data(format!("no slice {id} in {}", dir.display())))?;
            let slice = crate::data::manifest::load_slice(dir, &record)?;
            Ok((slice.id.clone(), slice.prior_f64(), Some(slice.mask)))
        }
        SampleSource::File(path) => {
            let arr = ArrayData::load(path)?
                .into_f64()?
                .into_dimensionality::<Ix3>()
                .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
            let id = path
                .file_stem()
                .map_or("input".into(), |s| s.to_string_lossy().into_owned());
            let c = arr.dim().0;
            if c == cfg.model.in_channels {
                let prior = arr.slice_axis(Axis(0), (0..c - 1).into()).to_owned();
                let mask = arr.slice_axis(Axis(0), (c - 1..c).into()).mapv(|v| u8::from(v > 0.5));
                Ok((id, prior, Some(mask)))
            } else if c + 1 == cfg.model.in_channels {
                Ok((id, arr, None))
            } else {
                Err(Error::Data(format!(
                    "{}: {c} channels, expected {} or {}",
                    path.display(),
                    cfg.model.in_channels - 1,
                    cfg.model.in_channels
                )))
            }
        }
    }
}

/// Draw `ensemble.n` masks for one image and write the sample stack, mean,
/// variance and binary maps, PNG previews and `summary.json`.
pub fn cmd_sample(
    cfg: &RunConfig,
    checkpoint: &Path,
    source: &SampleSource,
    out_dir: &Path,
) -> Result<EnsembleSummary> {
    let (model, ckpt_hash) = load_model(cfg, checkpoint)?;
    let schedule = cfg.schedule.build()?;
    let (id, prior, gt) = load_source(cfg, source)?;
    write_run_json(
        out_dir,
        "sample",
        cfg,
        json!({"checkpoint": checkpoint, "checkpoint_sha256": ckpt_hash, "image": id}),
    )?;
    let opts = cfg.ensemble.options();
    let summary = build_ensemble(&model, &prior, &schedule, cfg.ensemble.n, cfg.ensemble.base_seed, &opts)?;

    let save = |name: &str, data: ArrayData| write_bytes(&out_dir.join(name), &data.to_bytes());
    save("samples.dsa", ArrayData::F64(summary.sample_stack().into_dyn()))?;
    save("mean.dsa", ArrayData::F64(summary.mean_map.clone().into_dyn()))?;
    save("variance.dsa", ArrayData::F64(summary.variance_map.clone().into_dyn()))?;
    save("binary.dsa", ArrayData::U8(summary.binary_mask.clone().into_dyn()))?;
    write_map_png(&out_dir.join("mean.png"), summary.mean_map.index_axis(Axis(0), 0))?;
    write_map_png(
        &out_dir.join("variance.png"),
        summary.variance_map.index_axis(Axis(0), 0),
    )?;
    write_map_png(
        &out_dir.join("binary.png"),
        summary.binary_mask.index_axis(Axis(0), 0).mapv(f64::from).view(),
    )?;

    let dice = gt
        .as_ref()
        .map(|g| metrics::dice(summary.binary_mask.index_axis(Axis(0), 0), g.index_axis(Axis(0), 0)))
        .transpose()?;
    let variance_max = summary.variance_map.iter().copied().fold(0.0, f64::max);
    write_json(
        &out_dir.join("summary.json"),
        &json!({
            "image": id,
            "n": summary.n,
            "seeds": summary.seeds,
            "threshold": opts.threshold,
            "variance_estimator": opts.variance,
            "schedule_fingerprint": schedule.fingerprint(),
            "checkpoint_sha256": ckpt_hash,
            "empty": crate::ensemble::is_empty(&summary.binary_mask),
            "variance_max": variance_max,
            "dice": dice,
        }),
    )?;
    log::info!("{id}: n={} variance_max={variance_max:.4} dice={dice:?}", summary.n);
    Ok(summary)
}

fn eval_slices(cfg: &RunConfig, dataset: &Path) -> Result<Vec<LabeledSlice>> {
    let split: SplitName = cfg
        .eval
        .split
        .parse()
        .map_err(|_| Error::Config(format!("unknown split {}", cfg.eval.split)))?;
    let mut slices = load_split(dataset, split)?;
    if cfg.eval.limit > 0 {
        slices.truncate(cfg.eval.limit);
    }
    if slices.is_empty() {
        return Err(Error::Data(format!("split {split} of {} is empty", dataset.display())));
    }
    check_slices(cfg, &slices)?;
    Ok(slices)
}

pub fn single_label() -> &'static str {
    "Ours (1 sampling run)"
}

pub fn ensemble_label(n: usize) -> String {
    format!("Ours (ensemble of {n} runs)")
}

/// Score the single-sample and ensemble-of-`n` predictions on a split.
pub fn cmd_evaluate(cfg: &RunConfig, checkpoint: &Path, dataset: &Path, out_dir: &Path) -> Result<Evaluation> {
    let (model, ckpt_hash) = load_model(cfg, checkpoint)?;
    let schedule = cfg.schedule.build()?;
    let slices = eval_slices(cfg, dataset)?;
    write_run_json(
        out_dir,
        "evaluate",
        cfg,
        json!({"checkpoint": checkpoint, "checkpoint_sha256": ckpt_hash, "dataset": dataset, "images": slices.len()}),
    )?;
    let plan = EvalPlan {
        n: cfg.ensemble.n,
        curve_sizes: Vec::new(),
        base_seed: cfg.ensemble.base_seed,
        spacing: cfg.eval.spacing,
    };
    let total = slices.len();
    let eval = evaluate_slices(&model, &slices, &schedule, &plan, &cfg.ensemble.options(), |k, e| {
        log::info!(
            "[{}/{total}] {} single {:.3} ensemble {:.3}",
            k + 1,
            e.id,
            e.single.dice,
            e.ensemble.dice
        );
    })?;
    let table = write_evaluation(out_dir, &eval)?;
    print!("{table}");
    Ok(eval)
}

/// Write the report files and return the human-readable table.
pub fn write_evaluation(out_dir: &Path, eval: &Evaluation) -> Result<String> {
    let ens_label = ensemble_label(eval.n);
    let table = format_table(&[(single_label(), &eval.single), (&ens_label, &eval.ensemble)]);
    write_bytes(&out_dir.join("report.txt"), table.as_bytes())?;
    write_bytes(
        &out_dir.join("records_single.tsv"),
        eval.single.records_tsv().as_bytes(),
    )?;
    write_bytes(
        &out_dir.join("records_ensemble.tsv"),
        eval.ensemble.records_tsv().as_bytes(),
    )?;
    let summary = |r: &metrics::MetricsReport| {
        json!({
            "dice": r.dice_all,
            "dice_nonempty": r.dice_nonempty,
            "jaccard": r.jaccard_all,
            "jaccard_nonempty": r.jaccard_nonempty,
            "hd95_nonempty": r.hd95_nonempty,
            "empty_count": r.empty_count,
            "images": r.per_image.len(),
        })
    };
    write_json(
        &out_dir.join("report.json"),
        &json!({
            "n": eval.n,
            "single": summary(&eval.single),
            "ensemble": summary(&eval.ensemble),
            "mean_single_sample_dice": eval.mean_single_dice(),
            "hd95_averaging": "per slice",
        }),
    )?;
    Ok(table)
}

/// Per-image Dice as a function of ensemble size, plus the mean curve.
pub type CurveTable = Vec<(String, Vec<(usize, f64)>)>;

pub fn curve_tsv(table: &[(String, Vec<(usize, f64)>)], mean: &[(usize, f64)]) -> String {
    let mut out = String::from("id\tn\tdice\n");
    for (id, curve) in table {
        for (n, d) in curve {
            out.push_str(&format!("{id}\t{n}\t{d:.6}\n"));
        }
    }
    for (n, d) in mean {
        out.push_str(&format!("mean\t{n}\t{d:.6}\n"));
    }
    out
}

pub fn cmd_curve(
    cfg: &RunConfig,
    checkpoint: &Path,
    dataset: &Path,
    ids: &[String],
    out_dir: &Path,
) -> Result<(CurveTable, Vec<(usize, f64)>)> {
    let (model, ckpt_hash) = load_model(cfg, checkpoint)?;
    let schedule = cfg.schedule.build()?;
    let mut slices = eval_slices(cfg, dataset)?;
    if !ids.is_empty() {
        let all: Vec<LabeledSlice> = load_split(dataset, SplitName::Train)?
            .into_iter()
            .chain(load_split(dataset, SplitName::Test)?)
            .chain(load_split(dataset, SplitName::Excluded)?)
            .collect();
        slices = ids
            .iter()
            .map(|id| {
                all.iter()
                    .find(|s| &s.id == id)
                    .cloned()
                    .ok_or_else(|| Error::Data(format!("no slice {id} in {}", dataset.display())))
            })
            .collect::<Result<_>>()?;
        check_slices(cfg, &slices)?;
    }
    if cfg.eval.curve_sizes.is_empty() {
        return Err(Error::Config("eval.curve_sizes is empty".into()));
    }
    write_run_json(
        out_dir,
        "curve",
        cfg,
        json!({"checkpoint": checkpoint, "checkpoint_sha256": ckpt_hash, "dataset": dataset,
               "images": slices.iter().map(|s| s.id.clone()).collect::<Vec<_>>()}),
    )?;
    let plan = EvalPlan {
        n: 1,
        curve_sizes: cfg.eval.curve_sizes.clone(),
        base_seed: cfg.ensemble.base_seed,
        spacing: cfg.eval.spacing,
    };
    let total = slices.len();
    let eval = evaluate_slices(&model, &slices, &schedule, &plan, &cfg.ensemble.options(), |k, e| {
        log::info!("[{}/{total}] {} {:?}", k + 1, e.id, e.curve);
    })?;
    let table: CurveTable = eval.images.iter().map(|i| (i.id.clone(), i.curve.clone())).collect();
    let mean = eval.mean_curve();
    write_bytes(&out_dir.join("curve.tsv"), curve_tsv(&table, &mean).as_bytes())?;
    // Plot from the written table so a replot reproduces it byte for byte.
    replot_curve(out_dir)?;
    print!("{}", curve_tsv(&[], &mean));
    Ok((table, mean))
}

/// Rebuild `curve.png` from an existing `curve.tsv`.
pub fn replot_curve(dir: &Path) -> Result<()> {
    let path = dir.join("curve.tsv");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut table: CurveTable = Vec::new();
    let mut mean = Vec::new();
    for line in text.lines().skip(1) {
        let f: Vec<&str> = line.split('\t').collect();
        let bad = || Error::Data(format!("{}: bad line {line:?}", path.display()));
        if f.len() != 3 {
            return Err(bad());
        }
        let n: usize = f[1].parse().map_err(|_| bad())?;
        let d: f64 = f[2].parse().map_err(|_| bad())?;
        if f[0] == "mean" {
            mean.push((n, d));
        } else {
            match table.last_mut() {
                Some((id, c)) if id == f[0] => c.push((n, d)),
                _ => table.push((f[0].to_string(), vec![(n, d)])),
            }
        }
    }
    write_curve_png(&dir.join("curve.png"), &table, &mean)
}
