//! Conditional diffusion models for binary lesion segmentation.
//!
//! A denoiser is trained to recover a segmentation mask from noise while the
//! image channels ride along unchanged as conditioning. Repeated sampling of
//! the same image gives an implicit ensemble whose mean and variance maps
//! serve as the prediction and its uncertainty.

pub mod cli;
pub mod data;
pub mod denoiser;
pub mod diffusion;
pub mod ensemble;
pub mod error;
pub mod metrics;
pub mod schedule;
pub mod trainer;

pub use denoiser::checkpoint::Checkpoint;
pub use denoiser::{Denoiser, DenoiserConfig, NoisePredictor};
pub use ensemble::{build_ensemble, sample_mask, EnsembleSummary, SamplingOptions};
pub use error::{Error, Result};
pub use schedule::{NoiseSchedule, ScheduleConfig};
