//! Acetabular version regression from AP pelvic radiographs: dataset
//! handling, preprocessing, the attention-pooled CNN, NADAM training,
//! five-fold cross-validation, evaluation reports and a synthetic phantom.

pub mod cli;
pub mod config;
pub mod cv;
pub mod dataset;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod phantom;
pub mod plane;
pub mod preprocess;
pub mod training;

use thiserror::Error;

/// Any failure surfaced by the command-line pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Config(#[from] config::ConfigError),
    #[error(transparent)]
    Dataset(#[from] dataset::DatasetError),
    #[error(transparent)]
    Normalization(#[from] dataset::NormalizationError),
    #[error(transparent)]
    Image(#[from] plane::PlaneError),
    #[error(transparent)]
    Preprocess(#[from] preprocess::PreprocessError),
    #[error(transparent)]
    Model(#[from] model::ModelError),
    #[error(transparent)]
    Train(#[from] training::TrainError),
    #[error(transparent)]
    Cv(#[from] cv::CvError),
    #[error(transparent)]
    Metrics(#[from] metrics::MetricsError),
    #[error(transparent)]
    Phantom(#[from] phantom::PhantomError),
    #[error("{0}")]
    Input(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Stable, machine-parsable category name.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Config(config::ConfigError::Device(_)) => "device",
            Error::Config(_) => "config",
            Error::Dataset(_) => "dataset",
            Error::Normalization(_) => "normalization",
            Error::Image(_) => "image",
            Error::Preprocess(_) => "preprocess",
            Error::Model(_) => "model",
            Error::Train(_) => "train",
            Error::Cv(cv::CvError::Train(_)) => "train",
            Error::Cv(cv::CvError::Experiment { source, .. }) if matches!(**source, cv::CvError::Train(_)) => "train",
            Error::Cv(_) => "cv",
            Error::Metrics(_) => "metrics",
            Error::Phantom(_) => "phantom",
            Error::Input(_) => "input",
            Error::Io(_) => "io",
        }
    }
}
