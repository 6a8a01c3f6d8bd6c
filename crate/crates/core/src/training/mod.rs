//! NADAM, the plateau learning-rate schedule, the MSE objective and the
//! epoch loop with best-validation checkpointing.

mod loss;
mod nadam;
mod schedule;
mod trainer;

use thiserror::Error;

pub use loss::mse_loss;
pub use nadam::{NadamConfig, OptimizerState};
pub use schedule::{PlateauConfig, PlateauSchedule};
pub use trainer::{
    evaluate, load_samples, model_input, read_history, train, write_history, EpochRecord, EvalSummary, Sample,
    TrainOutcome, TrainRunConfig,
};

use crate::dataset::NormalizationError;
use crate::model::ModelError;
use crate::plane::PlaneError;
use crate::preprocess::PreprocessError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("prediction/target batch sizes differ or are empty ({pred} vs {target})")]
    ShapeMismatch { pred: usize, target: usize },
    #[error("non-finite gradient in {param} at epoch {epoch}")]
    NonFiniteGradient { param: String, epoch: usize },
    #[error("training diverged at epoch {epoch}: non-finite {what}")]
    Diverged {
        epoch: usize,
        what: &'static str,
        history: Vec<EpochRecord>,
    },
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Image { path: String, source: PlaneError },
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error(transparent)]
    Normalization(#[from] NormalizationError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Mixes `tags` into `base` (SplitMix64 finalizer per step) so that every
/// random stream in a run is a pure function of the run seed.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    let mix = |mut z: u64| {
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    };
    tags.iter()
        .fold(mix(base.wrapping_add(0x9e37_79b9_7f4a_7c15)), |acc, &t| {
            mix(acc ^ t.wrapping_add(0x9e37_79b9_7f4a_7c15))
        })
}
