//! Training engine: schedules, optimizer, EMA teacher, data-parallel
//! execution (replicated and sharded-optimizer modes), structured logging,
//! checkpointing, and cross-model distillation.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod distill;
pub mod ema;
pub mod logging;
pub mod optim;
pub mod reduce;
pub mod schedule;
pub mod trainer;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("config: {0}")]
    Config(#[from] config::ConfigError),
    #[error("manifest: {0}")]
    Manifest(#[from] dinomx_core::manifest::ManifestError),
    #[error("image: {0}")]
    Image(#[from] dinomx_core::image::ImageError),
    #[error("tensor: {0}")]
    Tensor(#[from] dinomx_core::tensor::TensorError),
    #[error("augmentation: {0}")]
    Augment(#[from] dinomx_core::augment::AugmentError),
    #[error("encoder: {0}")]
    Vit(#[from] dinomx_core::vit::VitError),
    #[error("loss: {0}")]
    Loss(#[from] dinomx_core::loss::LossError),
    #[error("peft: {0}")]
    Peft(#[from] dinomx_core::peft::PeftError),
    #[error("ema: {0}")]
    Ema(#[from] ema::EmaError),
    #[error("reduce: {0}")]
    Reduce(#[from] reduce::ReduceError),
    #[error("netpbm: {0}")]
    Netpbm(#[from] dinomx_core::netpbm::NetpbmError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(
        "non-finite loss at iteration {iteration} (local {local}, global {global}, ibot {ibot})"
    )]
    NonFiniteLoss {
        iteration: usize,
        local: f64,
        global: f64,
        ibot: f64,
    },
    #[error("teacher backbone changed at iteration {iteration}")]
    TeacherMutated { iteration: usize },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}
