//! Hybrid-loss training loop with checkpointable optimizer and RNG state.
//!
//! Everything random in a run comes from the run seed: network initialisation,
//! the per-epoch batch order, and one ChaCha stream for timesteps and noise.
//! The stream is stored in each checkpoint, so resuming reproduces the
//! uninterrupted run.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use tch::{Kind, Tensor};

use crate::data::LabeledSlice;
use crate::denoiser::checkpoint::{tensor_map, to_tensors, Checkpoint, OptimizerState};
use crate::denoiser::{Denoiser, DenoiserConfig, NoisePredictor};
use crate::diffusion::graph;
use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;

pub const METRICS_FILE: &str = "metrics.tsv";
pub const CHECKPOINT_DIR: &str = "checkpoints";

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    #[serde(alias = "lr")]
    pub learning_rate: f64,
    pub batch_size: usize,
    pub iterations: u64,
    pub lambda_vlb: f64,
    pub seed: u64,
    pub checkpoint_every: u64,
    /// Global gradient-norm clip; `0` disables.
    pub clip_grad_norm: f64,
    /// EMA decay for sampling weights; `0` disables.
    pub ema_decay: f64,
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            batch_size: 10,
            iterations: 8000,
            lambda_vlb: 0.001,
            seed: 0,
            checkpoint_every: 1000,
            clip_grad_norm: 0.0,
            ema_decay: 0.0,
            log_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.lambda_vlb < 0.0 {
            return bad("lambda_vlb must be non-negative");
        }
        if self.checkpoint_every == 0 || self.log_every == 0 {
            return bad("checkpoint_every and log_every must be positive");
        }
        if self.clip_grad_norm < 0.0 {
            return bad("clip_grad_norm must be non-negative");
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return bad("ema_decay must be in [0, 1)");
        }
        Ok(())
    }
}

/// Per-step loss values; `total` keeps the autograd graph.
pub struct BatchLoss {
    pub total: Tensor,
    pub simple: f64,
    pub vlb: f64,
    pub steps: Vec<usize>,
}

/// Uniform timesteps in `1..=steps`.
pub fn draw_steps(rng: &mut impl Rng, steps: usize, n: usize) -> Vec<usize> {
    (0..n).map(|_| rng.gen_range(1..=steps)).collect()
}

fn slices_tensor(items: &[&LabeledSlice], pick: impl Fn(&LabeledSlice) -> Vec<f32>, channels: usize) -> Tensor {
    let (_, h, w) = items[0].mask.dim();
    let flat: Vec<f32> = items.iter().flat_map(|s| pick(s)).collect();
    Tensor::from_slice(&flat).view([items.len() as i64, channels as i64, h as i64, w as i64])
}

/// Hybrid loss for one batch. Draws one timestep per item, then the noise,
/// from `rng` in that order.
pub fn batch_loss(
    model: &impl NoisePredictor,
    batch: &[&LabeledSlice],
    rng: &mut impl Rng,
    schedule: &NoiseSchedule,
    lambda_vlb: f64,
) -> Result<BatchLoss> {
    let first = batch.first().ok_or_else(|| Error::Data("empty batch".into()))?;
    let c = first.channels();
    let (_, h, w) = first.mask.dim();
    for s in batch {
        crate::error::check_shape(&[c, h, w], s.prior.shape())?;
    }
    let steps = draw_steps(rng, schedule.steps(), batch.len());
    let eps_flat: Vec<f32> = (0..batch.len() * h * w)
        .map(|_| rng.sample::<f64, _>(StandardNormal) as f32)
        .collect();
    let eps = Tensor::from_slice(&eps_flat).view([batch.len() as i64, 1, h as i64, w as i64]);
    let prior = slices_tensor(batch, |s| s.prior.iter().copied().collect(), c);
    let x0 = slices_tensor(
        batch,
        |s| s.mask.iter().map(|&m| if m > 0 { 1.0 } else { -1.0 }).collect(),
        1,
    );

    let x_t = graph::noise_masks(&x0, &steps, &eps, schedule)?;
    let stacked = Tensor::cat(&[&prior, &x_t], 1);
    let (eps_hat, v) = model.predict(&stacked, &steps)?;
    let simple = graph::mse(&eps, &eps_hat);
    let vlb = graph::vlb(&x0, &x_t, &steps, &eps_hat.detach(), &v, schedule)?;
    let total = &simple + &vlb * lambda_vlb;
    Ok(BatchLoss {
        simple: simple.double_value(&[]),
        vlb: vlb.double_value(&[]),
        total,
        steps,
    })
}

/// Adam with bias correction, state keyed by parameter name.
#[derive(Debug)]
struct Adam {
    step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    fn new(params: &BTreeMap<String, Tensor>) -> Self {
        let zeros = || params.iter().map(|(k, p)| (k.clone(), p.zeros_like())).collect();
        Adam {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    fn apply(&mut self, params: &BTreeMap<String, Tensor>, lr: f64, clip: f64) {
        tch::no_grad(|| {
            let mut grads: BTreeMap<&String, Tensor> = params.iter().map(|(k, p)| (k, p.grad().copy())).collect();
            if clip > 0.0 {
                let norm = grads
                    .values()
                    .map(|g| g.square().sum(Kind::Double).double_value(&[]))
                    .sum::<f64>()
                    .sqrt();
                if norm > clip {
                    for g in grads.values_mut() {
                        *g = &*g * (clip / norm);
                    }
                }
            }
            self.step += 1;
            let bc1 = 1.0 - ADAM_BETA1.powi(self.step as i32);
            let bc2 = 1.0 - ADAM_BETA2.powi(self.step as i32);
            for (name, p) in params {
                let g = &grads[name];
                let m = self.m.get_mut(name).expect("state per parameter");
                *m = &*m * ADAM_BETA1 + g * (1.0 - ADAM_BETA1);
                let v = self.v.get_mut(name).expect("state per parameter");
                *v = &*v * ADAM_BETA2 + g.square() * (1.0 - ADAM_BETA2);
                let update = (&*m / bc1) / ((&*v / bc2).sqrt() + ADAM_EPS) * lr;
                let mut p = p.shallow_clone();
                let _ = p.f_sub_(&update);
                p.zero_grad();
            }
        });
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub iteration: u64,
    pub loss: f64,
    pub loss_simple: f64,
    pub loss_vlb: f64,
}

impl StepRecord {
    pub fn tsv_line(&self, seconds: f64) -> String {
        format!(
            "{}\t{:.8e}\t{:.8e}\t{:.8e}\t{:.3}",
            self.iteration, self.loss, self.loss_simple, self.loss_vlb, seconds
        )
    }
}

pub struct Trainer {
    model: Denoiser,
    params: BTreeMap<String, Tensor>,
    adam: Adam,
    ema: Option<BTreeMap<String, Tensor>>,
    rng: ChaCha8Rng,
    iteration: u64,
    elapsed: f64,
    schedule: NoiseSchedule,
    config: TrainConfig,
}

impl std::fmt::Debug for Trainer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Trainer")
            .field("iteration", &self.iteration)
            .field("config", &self.config)
            .finish()
    }
}

/// Indices of the training items used at `iteration`: a fresh permutation of
/// the training set per epoch, consumed `batch` items at a time.
pub fn batch_indices(seed: u64, iteration: u64, batch: usize, n: usize) -> Vec<usize> {
    let mut cached: Option<(u64, Vec<usize>)> = None;
    (0..batch as u64)
        .map(|k| {
            let pos = iteration * batch as u64 + k;
            let epoch = pos / n as u64;
            if cached.as_ref().map(|c| c.0) != Some(epoch) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6261_7463_685f_6f72);
                rng.set_stream(epoch);
                let mut perm: Vec<usize> = (0..n).collect();
                perm.shuffle(&mut rng);
                cached = Some((epoch, perm));
            }
            cached.as_ref().unwrap().1[(pos % n as u64) as usize]
        })
        .collect()
}

pub fn checkpoint_path(dir: &Path, iteration: u64) -> PathBuf {
    dir.join(CHECKPOINT_DIR).join(format!("ckpt-{iteration:07}.dsc"))
}

/// Newest checkpoint in a run directory, if any.
pub fn latest_checkpoint(dir: &Path) -> Result<Option<PathBuf>> {
    let ckpt_dir = dir.join(CHECKPOINT_DIR);
    if !ckpt_dir.exists() {
        return Ok(None);
    }
    let mut best: Option<(u64, PathBuf)> = None;
    for entry in fs::read_dir(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))? {
        let path = entry.map_err(|e| Error::io(&ckpt_dir, e))?.path();
        let it = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("ckpt-")?.strip_suffix(".dsc")?.parse::<u64>().ok());
        if let Some(it) = it {
            if best.as_ref().is_none_or(|b| it > b.0) {
                best = Some((it, path));
            }
        }
    }
    Ok(best.map(|b| b.1))
}

impl Trainer {
    pub fn new(model_config: DenoiserConfig, schedule: NoiseSchedule, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = Denoiser::new(model_config, config.seed)?;
        let params = model.named_parameters();
        let ema =
            (config.ema_decay > 0.0).then(|| params.iter().map(|(k, p)| (k.clone(), p.detach().copy())).collect());
        Ok(Trainer {
            adam: Adam::new(&params),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            params,
            model,
            ema,
            iteration: 0,
            elapsed: 0.0,
            schedule,
            config,
        })
    }

    /// Continue from `ckpt`. The configured iteration budget still counts from zero.
    pub fn from_checkpoint(ckpt: &Checkpoint, schedule: NoiseSchedule, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut model = Denoiser::new(ckpt.config.clone(), config.seed)?;
        model.load_parameters(&to_tensors(&ckpt.params))?;
        let params = model.named_parameters();
        let adam = Adam {
            step: ckpt.optimizer.step,
            m: to_tensors(&ckpt.optimizer.first_moment),
            v: to_tensors(&ckpt.optimizer.second_moment),
        };
        if adam.m.len() != params.len() || adam.v.len() != params.len() {
            return Err(Error::Checkpoint(
                "optimizer state does not cover every parameter".into(),
            ));
        }
        let ema = match (&ckpt.ema, config.ema_decay > 0.0) {
            (Some(e), true) => Some(to_tensors(e)),
            (None, true) => Some(params.iter().map(|(k, p)| (k.clone(), p.detach().copy())).collect()),
            (_, false) => None,
        };
        let rng: ChaCha8Rng =
            serde_json::from_value(ckpt.rng.clone()).map_err(|e| Error::Checkpoint(format!("rng state: {e}")))?;
        let elapsed = ckpt
            .metadata
            .get("elapsed_seconds")
            .and_then(|v| v.as_f64())
            .unwrap_or(0.0);
        Ok(Trainer {
            model,
            params,
            adam,
            ema,
            rng,
            iteration: ckpt.iteration,
            elapsed,
            schedule,
            config,
        })
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn model(&self) -> &Denoiser {
        &self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint {
            config: self.model.config().clone(),
            iteration: self.iteration,
            params: tensor_map(&self.params)?,
            optimizer: OptimizerState {
                step: self.adam.step,
                first_moment: tensor_map(&self.adam.m)?,
                second_moment: tensor_map(&self.adam.v)?,
            },
            ema: self.ema.as_ref().map(tensor_map).transpose()?,
            rng: serde_json::to_value(&self.rng).map_err(|e| Error::Checkpoint(e.to_string()))?,
            metadata: serde_json::json!({
                "elapsed_seconds": self.elapsed,
                "schedule_fingerprint": self.schedule.fingerprint(),
                "train": self.config,
            }),
        })
    }

    /// One optimizer update on `batch`.
    pub fn train_step(&mut self, batch: &[&LabeledSlice]) -> Result<StepRecord> {
        let loss = batch_loss(
            &self.model,
            batch,
            &mut self.rng,
            &self.schedule,
            self.config.lambda_vlb,
        )?;
        let total = loss.total.double_value(&[]);
        if !total.is_finite() {
            return Err(Error::NonFinite(format!(
                "training loss is {total} at iteration {}",
                self.iteration + 1
            )));
        }
        loss.total.backward();
        self.adam
            .apply(&self.params, self.config.learning_rate, self.config.clip_grad_norm);
        if let Some(ema) = &mut self.ema {
            let d = self.config.ema_decay;
            tch::no_grad(|| {
                for (name, e) in ema.iter_mut() {
                    *e = &*e * d + &self.params[name] * (1.0 - d);
                }
            });
        }
        self.iteration += 1;
        Ok(StepRecord {
            iteration: self.iteration,
            loss: total,
            loss_simple: loss.simple,
            loss_vlb: loss.vlb,
        })
    }

    fn save_checkpoint(&self, out_dir: &Path) -> Result<PathBuf> {
        let path = checkpoint_path(out_dir, self.iteration);
        self.checkpoint()?.save(&path)?;
        Ok(path)
    }

    /// Train until the configured iteration count, writing checkpoints under
    /// `out_dir/checkpoints` and one metrics line per iteration to
    /// `out_dir/metrics.tsv`. Returns the last checkpoint written.
    pub fn fit(&mut self, train: &[LabeledSlice], out_dir: &Path) -> Result<PathBuf> {
        if train.is_empty() {
            return Err(Error::Data("training split is empty".into()));
        }
        let ckpt_dir = out_dir.join(CHECKPOINT_DIR);
        fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
        let metrics_path = out_dir.join(METRICS_FILE);
        truncate_metrics(&metrics_path, self.iteration)?;
        let mut metrics = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&metrics_path)
            .map_err(|e| Error::io(&metrics_path, e))?;

        let mut last = if self.iteration == 0 || !checkpoint_path(out_dir, self.iteration).exists() {
            self.save_checkpoint(out_dir)?
        } else {
            checkpoint_path(out_dir, self.iteration)
        };
        let started = Instant::now();
        let base_elapsed = self.elapsed;
        while self.iteration < self.config.iterations {
            let idx = batch_indices(self.config.seed, self.iteration, self.config.batch_size, train.len());
            let batch: Vec<&LabeledSlice> = idx.iter().map(|&i| &train[i]).collect();
            let record = self.train_step(&batch)?;
            self.elapsed = base_elapsed + started.elapsed().as_secs_f64();
            writeln!(metrics, "{}", record.tsv_line(self.elapsed)).map_err(|e| Error::io(&metrics_path, e))?;
            if record.iteration % self.config.log_every == 0 {
                log::info!(
                    "iter {} loss {:.5} (simple {:.5}, vlb {:.5}) {:.1}s",
                    record.iteration,
                    record.loss,
                    record.loss_simple,
                    record.loss_vlb,
                    self.elapsed
                );
            }
            if self.iteration.is_multiple_of(self.config.checkpoint_every) || self.iteration == self.config.iterations {
                metrics.flush().map_err(|e| Error::io(&metrics_path, e))?;
                last = self.save_checkpoint(out_dir)?;
            }
        }
        Ok(last)
    }
}

/// Drop metric lines past `iteration`, left over from a run that outlived
/// its last checkpoint.
fn truncate_metrics(path: &Path, iteration: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let kept: String = text
        .lines()
        .filter(|l| {
            l.split('\t')
                .next()
                .and_then(|f| f.parse::<u64>().ok())
                .is_some_and(|it| it <= iteration)
        })
        .map(|l| format!("{l}\n"))
        .collect();
    if kept.len() != text.len() {
        fs::write(path, kept).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}
