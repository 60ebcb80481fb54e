//! Command-line front end.
//!
//! Global options come before or after the subcommand; any
//! `--section.key value` argument overrides the matching config entry.

pub mod commands;
pub mod config;
pub mod export;

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::error::{Error, Result};
use commands::SampleSource;
use config::{extract_overrides, RunConfig};

#[derive(Debug, Parser)]
#[command(
    name = "diffseg",
    version,
    about = "Diffusion-model segmentation with implicit ensembles"
)]
pub struct Cli {
    /// TOML run configuration; defaults apply to anything not set.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Base directory for per-run output directories.
    #[arg(long, global = true, default_value = "runs")]
    pub out: PathBuf,
    /// Output directory name under `--out`; defaults to `<command>-<timestamp>`.
    #[arg(long, global = true)]
    pub run_name: Option<String>,
    /// Cap on worker threads (overrides runtime.jobs).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic corpus and its train/test manifest.
    GenerateData {
        #[arg(long, default_value = "data/synthetic")]
        dataset: PathBuf,
        /// Number of slices (overrides data.count).
        #[arg(long)]
        count: Option<usize>,
        /// Overwrite an existing dataset.
        #[arg(long)]
        force: bool,
    },
    /// Train a denoiser on the dataset's training split.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        /// Continue the run in this directory from its newest checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Sample an implicit ensemble for one image.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, requires = "id", conflicts_with = "input")]
        dataset: Option<PathBuf>,
        #[arg(long, requires = "dataset")]
        id: Option<String>,
        /// `.dsa` array holding a prior or a stacked prior+mask slice.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Ensemble size (overrides ensemble.n).
        #[arg(long)]
        n: Option<usize>,
    },
    /// Score single-sample and ensemble predictions on a split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Overrides eval.split.
        #[arg(long)]
        split: Option<String>,
        /// Overrides ensemble.n.
        #[arg(long)]
        n: Option<usize>,
    },
    /// Dice against ensemble size for selected images.
    Curve {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Comma-separated slice ids; defaults to the evaluation split.
        #[arg(long, value_delimiter = ',')]
        ids: Vec<String>,
        /// Comma-separated ensemble sizes (overrides eval.curve_sizes).
        #[arg(long, value_delimiter = ',')]
        sizes: Option<Vec<usize>>,
    },
    /// Print the fully resolved configuration as TOML.
    ShowConfig,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenerateData { .. } => "generate-data",
            Command::Train { .. } => "train",
            Command::Sample { .. } => "sample",
            Command::Evaluate { .. } => "evaluate",
            Command::Curve { .. } => "curve",
            Command::ShowConfig => "show-config",
        }
    }

    /// Subcommand flags that are shorthands for config keys.
    fn overrides(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        let mut push = |k: &str, v: String| out.push((k.to_string(), v));
        match self {
            Command::GenerateData { count: Some(c), .. } => push("data.count", c.to_string()),
            Command::Sample { n: Some(n), .. } => push("ensemble.n", n.to_string()),
            Command::Evaluate { split, n, .. } => {
                if let Some(s) = split {
                    push("eval.split", format!("{s:?}"));
                }
                if let Some(n) = n {
                    push("ensemble.n", n.to_string());
                }
            }
            Command::Curve { sizes: Some(s), .. } => push("eval.curve_sizes", format!("{s:?}")),
            _ => {}
        }
        out
    }
}

/// Fresh `<out>/<command>-<timestamp>` directory, or `<out>/<run_name>`.
fn run_dir(out: &Path, run_name: Option<&str>, command: &str) -> PathBuf {
    if let Some(name) = run_name {
        return out.join(name);
    }
    let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S%.3f");
    let base = out.join(format!("{command}-{stamp}"));
    let mut dir = base.clone();
    let mut k = 1;
    while dir.exists() {
        dir = PathBuf::from(format!("{}-{k}", base.display()));
        k += 1;
    }
    dir
}

fn configure_threads(cfg: &RunConfig) {
    let jobs = if cfg.runtime.jobs == 0 {
        std::thread::available_parallelism().map_or(1, |n| n.get())
    } else {
        cfg.runtime.jobs
    };
    // Only the first call in a process can size the global pool.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global();
    tch::set_num_threads(if cfg.runtime.deterministic { 1 } else { jobs as i32 });
}

/// What a finished command produced.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub command: &'static str,
    /// Output directory (dataset directory for `generate-data`).
    pub dir: Option<PathBuf>,
}

/// Parse `args` (including the program name) and run the command.
pub fn run(args: Vec<String>) -> Result<Outcome> {
    let (mut overrides, rest) = extract_overrides(args)?;
    let cli = match Cli::try_parse_from(rest) {
        Ok(cli) => cli,
        Err(e)
            if matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            ) =>
        {
            print!("{e}");
            return Ok(Outcome {
                command: "help",
                dir: None,
            });
        }
        Err(e) => return Err(Error::Config(e.to_string())),
    };
    overrides.extend(cli.command.overrides());
    if let Some(j) = cli.jobs {
        overrides.push(("runtime.jobs".into(), j.to_string()));
    }
    let cfg = RunConfig::load(cli.config.as_deref(), &overrides)?;
    configure_threads(&cfg);
    let name = cli.command.name();
    let fresh_dir = || run_dir(&cli.out, cli.run_name.as_deref(), name);

    let dir = match &cli.command {
        Command::GenerateData { dataset, force, .. } => {
            let n = commands::cmd_generate_data(&cfg, dataset, *force)?;
            log::info!("wrote {n} slices to {}", dataset.display());
            Some(dataset.clone())
        }
        Command::Train { dataset, resume } => {
            let (dir, resuming) = match resume {
                Some(d) => (d.clone(), true),
                None => (fresh_dir(), false),
            };
            let last = commands::cmd_train(&cfg, dataset, &dir, resuming)?;
            log::info!("final checkpoint {}", last.display());
            Some(dir)
        }
        Command::Sample {
            checkpoint,
            dataset,
            id,
            input,
            ..
        } => {
            let source = match (dataset, id, input) {
                (Some(d), Some(i), None) => SampleSource::Dataset {
                    dir: d.clone(),
                    id: i.clone(),
                },
                (None, None, Some(p)) => SampleSource::File(p.clone()),
                _ => return Err(Error::Config("sample needs --dataset with --id, or --input".into())),
            };
            let dir = fresh_dir();
            commands::cmd_sample(&cfg, checkpoint, &source, &dir)?;
            Some(dir)
        }
        Command::Evaluate {
            checkpoint, dataset, ..
        } => {
            let dir = fresh_dir();
            commands::cmd_evaluate(&cfg, checkpoint, dataset, &dir)?;
            Some(dir)
        }
        Command::Curve {
            checkpoint,
            dataset,
            ids,
            ..
        } => {
            let dir = fresh_dir();
            commands::cmd_curve(&cfg, checkpoint, dataset, ids, &dir)?;
            Some(dir)
        }
        Command::ShowConfig => {
            print!("{}", cfg.to_toml()?);
            None
        }
    };
    if let Some(d) = &dir {
        log::info!("output in {}", d.display());
    }
    Ok(Outcome { command: name, dir })
}
