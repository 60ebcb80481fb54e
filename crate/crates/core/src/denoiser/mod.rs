//! Noise-prediction network and its checkpoint container.

pub mod checkpoint;
mod unet;

use std::collections::BTreeMap;

use ndarray::{Array3, Axis};
use serde::{Deserialize, Serialize};
use tch::{nn, Device, Kind, Tensor};

use crate::diffusion::graph::map_variance;
use crate::diffusion::DenoiserOutput;
use crate::error::{Error, Result};
use unet::UNet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    pub num_res_blocks: usize,
    pub attention_resolutions: Vec<usize>,
    pub attention_heads: usize,
    pub time_embedding_dim: usize,
    pub image_size: usize,
    pub norm_groups: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            in_channels: 5,
            base_channels: 32,
            channel_multipliers: vec![1, 2, 2],
            num_res_blocks: 1,
            attention_resolutions: vec![16],
            attention_heads: 1,
            time_embedding_dim: 128,
            image_size: 64,
            norm_groups: 8,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.in_channels < 2 {
            return bad(format!("in_channels must be >= 2, got {}", self.in_channels));
        }
        if self.base_channels == 0 {
            return bad("base_channels must be positive".into());
        }
        if self.channel_multipliers.is_empty() || self.channel_multipliers.contains(&0) {
            return bad("channel_multipliers must be non-empty and positive".into());
        }
        if self.num_res_blocks == 0 {
            return bad("num_res_blocks must be positive".into());
        }
        if self.time_embedding_dim == 0 || !self.base_channels.is_multiple_of(2) {
            return bad("time embedding needs an even base_channels and positive time_embedding_dim".into());
        }
        let levels = self.channel_multipliers.len() as u32;
        if self.image_size == 0 || !self.image_size.is_multiple_of(2usize.pow(levels - 1)) {
            return bad(format!(
                "image_size {} not divisible by 2^{}",
                self.image_size,
                levels - 1
            ));
        }
        if self.norm_groups == 0 {
            return bad("norm_groups must be positive".into());
        }
        let mut widths = vec![self.base_channels];
        widths.extend(self.channel_multipliers.iter().map(|m| m * self.base_channels));
        if let Some(w) = widths.iter().find(|w| *w % self.norm_groups != 0) {
            return bad(format!("width {w} not divisible by norm_groups {}", self.norm_groups));
        }
        if self.attention_heads == 0 || widths.iter().any(|w| w % self.attention_heads != 0) {
            return bad("attention_heads must divide every width".into());
        }
        Ok(())
    }

    pub fn prior_channels(&self) -> usize {
        self.in_channels - 1
    }
}

/// Anything that maps a stacked batch `(B, c+1, H, W)` and per-item steps to
/// `(eps_hat, v)`, each `(B, 1, H, W)` with `v` in `[0, 1]`.
pub trait NoisePredictor {
    fn in_channels(&self) -> usize;
    fn predict(&self, stacked: &Tensor, steps: &[usize]) -> Result<(Tensor, Tensor)>;
}

/// Owned network parameters plus the module graph built over them.
pub struct Denoiser {
    config: DenoiserConfig,
    vs: nn::VarStore,
    net: UNet,
}

impl std::fmt::Debug for Denoiser {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Denoiser")
            .field("config", &self.config)
            .field("parameters", &self.parameter_count())
            .finish()
    }
}

impl Denoiser {
    /// Freshly initialised parameters; `seed` drives libtorch's generator.
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        tch::manual_seed(seed as i64);
        let vs = nn::VarStore::new(Device::Cpu);
        let net = UNet::new(vs.root(), &config);
        Ok(Denoiser { config, vs, net })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn var_store(&self) -> &nn::VarStore {
        &self.vs
    }

    /// Trainable tensors keyed by canonical (dotted path) name.
    pub fn named_parameters(&self) -> BTreeMap<String, Tensor> {
        self.vs.variables().into_iter().collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.vs.trainable_variables().iter().map(|t| t.numel()).sum()
    }

    /// Overwrite every parameter from `values`; names and shapes must match exactly.
    pub fn load_parameters(&mut self, values: &BTreeMap<String, Tensor>) -> Result<()> {
        let own = self.named_parameters();
        if own.len() != values.len() || own.keys().any(|k| !values.contains_key(k)) {
            return Err(Error::Checkpoint(
                "parameter names do not match the configuration".into(),
            ));
        }
        tch::no_grad(|| -> Result<()> {
            for (name, mut dst) in own {
                let src = &values[&name];
                if src.size() != dst.size() {
                    return Err(Error::Checkpoint(format!(
                        "parameter {name}: expected {:?}, found {:?}",
                        dst.size(),
                        src.size()
                    )));
                }
                dst.copy_(src);
            }
            Ok(())
        })
    }

    /// Switch parameters to f64; inputs are cast to match.
    pub fn to_double(&mut self) {
        self.vs.set_kind(Kind::Double);
    }

    /// Raw two-channel network output without validation.
    pub(crate) fn forward_raw(&self, stacked: &Tensor, steps: &[usize]) -> Tensor {
        let kind = self.vs.kind();
        let t: Vec<f32> = steps.iter().map(|&t| t as f32).collect();
        self.net
            .forward(&stacked.to_kind(kind), &Tensor::from_slice(&t).to_kind(kind))
    }

    /// Convenience wrapper: evaluate a batch of `(c+1, H, W)` arrays without
    /// building an autograd graph.
    pub fn predict_arrays(&self, stacked: &[Array3<f64>], steps: &[usize]) -> Result<Vec<DenoiserOutput>> {
        predict_arrays(self, stacked, steps)
    }
}

impl NoisePredictor for Denoiser {
    fn in_channels(&self) -> usize {
        self.config.in_channels
    }

    fn predict(&self, stacked: &Tensor, steps: &[usize]) -> Result<(Tensor, Tensor)> {
        let size = stacked.size();
        let s = self.config.image_size as i64;
        let expected = [steps.len() as i64, self.config.in_channels as i64, s, s];
        if size != expected {
            return Err(Error::Shape {
                expected: expected.iter().map(|&d| d as usize).collect(),
                actual: size.iter().map(|&d| d as usize).collect(),
            });
        }
        let out = self.forward_raw(stacked, steps);
        let eps_hat = out.narrow(1, 0, 1);
        let v = map_variance(&out.narrow(1, 1, 1));
        Ok((eps_hat, v))
    }
}

/// Pack `(c, H, W)` f64 arrays into a `(B, c, H, W)` f32 tensor.
pub fn batch_tensor(items: &[Array3<f64>]) -> Result<Tensor> {
    let first = items.first().ok_or_else(|| Error::Data("empty batch".into()))?;
    let (c, h, w) = first.dim();
    let mut flat = Vec::with_capacity(items.len() * c * h * w);
    for item in items {
        crate::error::check_shape(first.shape(), item.shape())?;
        flat.extend(item.iter().map(|&v| v as f32));
    }
    Ok(Tensor::from_slice(&flat).view([items.len() as i64, c as i64, h as i64, w as i64]))
}

/// Split a `(B, 1, H, W)` tensor back into per-item f64 arrays.
pub fn unbatch_tensor(t: &Tensor) -> Result<Vec<Array3<f64>>> {
    let (b, c, h, w) = t.size4()?;
    let flat: Vec<f32> = Vec::try_from(t.to_kind(Kind::Float).contiguous().flatten(0, -1))?;
    let all = Array3::from_shape_vec(
        ((b * c) as usize, h as usize, w as usize),
        flat.into_iter().map(f64::from).collect(),
    )
    .map_err(|e| Error::Data(e.to_string()))?;
    Ok(all
        .axis_chunks_iter(Axis(0), c as usize)
        .map(|v| v.to_owned())
        .collect())
}

pub fn predict_arrays(
    model: &impl NoisePredictor,
    stacked: &[Array3<f64>],
    steps: &[usize],
) -> Result<Vec<DenoiserOutput>> {
    let x = batch_tensor(stacked)?;
    let (eps, v) = tch::no_grad(|| model.predict(&x, steps))?;
    unbatch_tensor(&eps)?
        .into_iter()
        .zip(unbatch_tensor(&v)?)
        .map(|(e, v)| DenoiserOutput::new(e, v))
        .collect()
}

/// Exact trainable-parameter count for `config` (builds the graph on a
/// scratch store).
pub fn count_parameters(config: &DenoiserConfig) -> Result<usize> {
    config.validate()?;
    let vs = nn::VarStore::new(Device::Cpu);
    let _ = UNet::new(vs.root(), config);
    Ok(vs.trainable_variables().iter().map(|t| t.numel()).sum())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> DenoiserConfig {
        DenoiserConfig {
            in_channels: 3,
            base_channels: 8,
            channel_multipliers: vec![1, 2],
            num_res_blocks: 1,
            attention_resolutions: vec![8],
            attention_heads: 1,
            time_embedding_dim: 16,
            image_size: 16,
            norm_groups: 4,
        }
    }

    #[test]
    fn validation_rejects_bad_configs() {
        let cases = [
            DenoiserConfig {
                base_channels: 0,
                ..toy()
            },
            DenoiserConfig {
                in_channels: 1,
                ..toy()
            },
            DenoiserConfig {
                image_size: 15,
                ..toy()
            },
            DenoiserConfig {
                channel_multipliers: vec![],
                ..toy()
            },
            DenoiserConfig {
                norm_groups: 3,
                ..toy()
            },
        ];
        for c in cases {
            assert!(c.validate().is_err(), "{c:?}");
            assert!(count_parameters(&c).is_err());
        }
        assert!(toy().validate().is_ok());
        assert!(DenoiserConfig::default().validate().is_ok());
    }

    #[test]
    fn parameter_count_matches_store() {
        let model = Denoiser::new(toy(), 0).unwrap();
        assert_eq!(model.parameter_count(), count_parameters(&toy()).unwrap());
    }

    #[test]
    fn predict_rejects_wrong_shapes() {
        let model = Denoiser::new(toy(), 0).unwrap();
        let x = Tensor::zeros([2, 4, 16, 16], (Kind::Float, Device::Cpu));
        assert!(model.predict(&x, &[1, 2]).is_err());
        let x = Tensor::zeros([2, 3, 16, 16], (Kind::Float, Device::Cpu));
        assert!(model.predict(&x, &[1]).is_err());
        assert!(model.predict(&x, &[1, 2]).is_ok());
    }

    #[test]
    fn batch_round_trip() {
        let a = Array3::from_shape_fn((1, 2, 3), |(_, i, j)| (i * 3 + j) as f64);
        let b = a.mapv(|v| -v);
        let t = batch_tensor(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(t.size(), vec![2, 1, 2, 3]);
        assert_eq!(unbatch_tensor(&t).unwrap(), vec![a, b]);
    }
}
