//! Run configuration: one TOML file with a flat `section.key` namespace plus
//! `--section.key value` overrides from the command line.
//!
//! ```toml
//! [schedule]
//! T = 100
//!
//! [train]
//! lr = 1e-4
//! iterations = 4000
//!
//! [ensemble]
//! n = 5
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::synthetic::SyntheticConfig;
use crate::denoiser::DenoiserConfig;
use crate::ensemble::{SamplingOptions, VarianceEstimator};
use crate::error::{Error, Result};
use crate::schedule::ScheduleConfig;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub train_fraction: f64,
    pub seed: u64,
    pub group_by_patient: bool,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            train_fraction: 0.9,
            seed: 0,
            group_by_patient: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnsembleConfig {
    pub n: usize,
    pub base_seed: u64,
    pub chunk: usize,
    pub noise_at_final_step: bool,
    pub variance: VarianceEstimator,
    pub threshold: f64,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        let o = SamplingOptions::default();
        EnsembleConfig {
            n: 5,
            base_seed: 0,
            chunk: o.chunk,
            noise_at_final_step: o.noise_at_final_step,
            variance: o.variance,
            threshold: o.threshold,
        }
    }
}

impl EnsembleConfig {
    pub fn options(&self) -> SamplingOptions {
        SamplingOptions {
            noise_at_final_step: self.noise_at_final_step,
            chunk: self.chunk,
            variance: self.variance,
            threshold: self.threshold,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub split: String,
    /// Evaluate only the first `limit` slices of the split; `0` means all.
    pub limit: usize,
    pub curve_sizes: Vec<usize>,
    /// Pixel spacing `(row, column)` used for HD95.
    pub spacing: (f64, f64),
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            split: "test".into(),
            limit: 0,
            curve_sizes: vec![1, 5, 25],
            spacing: (1.0, 1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RuntimeConfig {
    /// Worker threads; `0` uses every available core.
    pub jobs: usize,
    /// Pin libtorch to one intra-op thread so results do not depend on the
    /// machine's core count.
    pub deterministic: bool,
}

impl Default for RuntimeConfig {
    fn default() -> Self {
        RuntimeConfig {
            jobs: 0,
            deterministic: true,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub schedule: ScheduleConfig,
    pub model: DenoiserConfig,
    pub data: SyntheticConfig,
    pub split: SplitConfig,
    pub train: TrainConfig,
    pub ensemble: EnsembleConfig,
    pub eval: EvalConfig,
    pub runtime: RuntimeConfig,
}

impl RunConfig {
    /// Parse a TOML document, apply overrides and validate.
    pub fn from_toml(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e| Error::Config(format!("{e}")))?;
        for (key, value) in overrides {
            apply_override(&mut table, key, value)?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::from_toml(&text, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.build()?;
        self.model.validate()?;
        self.data.validate()?;
        self.train.validate()?;
        if self.model.in_channels != self.data.channels + 1 {
            return Err(Error::Config(format!(
                "model.in_channels ({}) must equal data.channels + 1 ({})",
                self.model.in_channels,
                self.data.channels + 1
            )));
        }
        if self.ensemble.n == 0 || self.ensemble.chunk == 0 {
            return Err(Error::Config("ensemble.n and ensemble.chunk must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.ensemble.threshold) {
            return Err(Error::Config("ensemble.threshold must be in [0, 1)".into()));
        }
        if self.eval.curve_sizes.windows(2).any(|w| w[0] >= w[1]) || self.eval.curve_sizes.contains(&0) {
            return Err(Error::Config(
                "eval.curve_sizes must be positive and strictly ascending".into(),
            ));
        }
        self.eval
            .split
            .parse::<crate::data::manifest::SplitName>()
            .map_err(|_| Error::Config(format!("eval.split: unknown split {:?}", self.eval.split)))?;
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Interpret `raw` as a TOML value, falling back to a plain string.
fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn apply_override(table: &mut toml::Table, key: &str, raw: &str) -> Result<()> {
    let (section, field) = key
        .split_once('.')
        .filter(|(s, f)| !s.is_empty() && !f.is_empty() && !f.contains('.'))
        .ok_or_else(|| Error::Config(format!("override key {key:?} must look like section.key")))?;
    let entry = table
        .entry(section.to_string())
        .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    let toml::Value::Table(inner) = entry else {
        return Err(Error::Config(format!("{section} is not a table")));
    };
    inner.insert(field.to_string(), parse_value(raw));
    Ok(())
}

/// A `section.key` override and its raw value.
pub type Override = (String, String);

/// Pull `--section.key value` and `--section.key=value` pairs out of `args`,
/// returning the overrides and the remaining arguments.
pub fn extract_overrides(args: Vec<String>) -> Result<(Vec<Override>, Vec<String>)> {
    let mut overrides = Vec::new();
    let mut rest = Vec::new();
    let mut iter = args.into_iter();
    while let Some(arg) = iter.next() {
        let Some(body) = arg.strip_prefix("--").filter(|b| {
            let name = b.split('=').next().unwrap_or("");
            name.contains('.') && !name.starts_with('.')
        }) else {
            rest.push(arg);
            continue;
        };
        match body.split_once('=') {
            Some((k, v)) => overrides.push((k.to_string(), v.to_string())),
            None => {
                let v = iter
                    .next()
                    .ok_or_else(|| Error::Config(format!("override --{body} needs a value")))?;
                overrides.push((body.to_string(), v));
            }
        }
    }
    Ok((overrides, rest))
}
