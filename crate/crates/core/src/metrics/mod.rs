//! Per-sample errors, the three clinical error bands, fold/gender/age tables,
//! the error-vs-angle histogram, and report emission.

mod plots;
mod report;
mod tables;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use plots::emit_plots;
pub use report::{build_report, emit_report, EvaluationReport, ReportOptions};
pub use tables::{
    angle_histogram, audit_average_row, fold_table, group_report, load_fold_predictions, mean_of_fold_means,
    AuditFlag, Column, FoldRow, FoldTable, GroupReport, HipReport, HistogramBin, COLUMNS,
};

use crate::cv::PredictionRow;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("absolute error must be a non-negative number, got {0}")]
    NegativeError(f64),
    #[error("missing prediction files for folds {0:?}")]
    MissingFolds(Vec<usize>),
    #[error("fold table needs {expected} folds, got {got}")]
    FoldCount { expected: usize, got: usize },
    #[error("histogram bin width must be positive, got {0}")]
    BinWidth(f64),
    #[error(transparent)]
    Cv(#[from] crate::cv::CvError),
    #[error("{path}: {source}")]
    Csv { path: String, source: csv::Error },
    #[error("plot {path}: {source}")]
    Image { path: String, source: image::ImageError },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ErrorBand {
    Accurate,
    Moderate,
    Poor,
}

impl ErrorBand {
    pub const ALL: [ErrorBand; 3] = [ErrorBand::Accurate, ErrorBand::Moderate, ErrorBand::Poor];

    pub fn name(self) -> &'static str {
        match self {
            ErrorBand::Accurate => "accurate",
            ErrorBand::Moderate => "moderate",
            ErrorBand::Poor => "poor",
        }
    }
}

/// `≤ 3°` accurate, `(3°, 6°]` moderate, `> 6°` poor.
pub fn classify_error(abs_error_deg: f64) -> Result<ErrorBand, MetricsError> {
    if !(abs_error_deg >= 0.0) {
        return Err(MetricsError::NegativeError(abs_error_deg));
    }
    Ok(if abs_error_deg <= 3.0 {
        ErrorBand::Accurate
    } else if abs_error_deg <= 6.0 {
        ErrorBand::Moderate
    } else {
        ErrorBand::Poor
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Hip {
    Right,
    Left,
}

impl Hip {
    pub const BOTH: [Hip; 2] = [Hip::Right, Hip::Left];

    pub fn name(self) -> &'static str {
        match self {
            Hip::Right => "right",
            Hip::Left => "left",
        }
    }
}

/// A prediction row with its absolute errors.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleError {
    pub row: PredictionRow,
    pub err_right: f64,
    pub err_left: f64,
}

impl SampleError {
    pub fn new(row: PredictionRow) -> Self {
        Self {
            err_right: (row.pred_right - row.true_right).abs(),
            err_left: (row.pred_left - row.true_left).abs(),
            row,
        }
    }

    pub fn error(&self, hip: Hip) -> f64 {
        match hip {
            Hip::Right => self.err_right,
            Hip::Left => self.err_left,
        }
    }

    pub fn truth(&self, hip: Hip) -> f64 {
        match hip {
            Hip::Right => self.row.true_right,
            Hip::Left => self.row.true_left,
        }
    }

    pub fn prediction(&self, hip: Hip) -> f64 {
        match hip {
            Hip::Right => self.row.pred_right,
            Hip::Left => self.row.pred_left,
        }
    }

    pub fn band(&self, hip: Hip) -> ErrorBand {
        classify_error(self.error(hip)).expect("absolute errors of finite values are non-negative")
    }
}
