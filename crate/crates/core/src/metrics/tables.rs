use std::path::Path;

use serde::Serialize;

use super::{classify_error, ErrorBand, Hip, MetricsError, SampleError};
use crate::cv::{self, PredictionRow, FOLDS};
use crate::dataset::{AgeBins, Gender, GenderGroup, SdConvention, Summary};

/// One error column of the fold table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct Column {
    pub gender: GenderGroup,
    pub hip: Hip,
}

impl Column {
    pub fn label(self) -> String {
        format!("{}_{}", self.gender.name(), self.hip.name())
    }
}

/// Fold-table column order: male, female, both genders; left before right within each.
pub const COLUMNS: [Column; 6] = [
    Column { gender: GenderGroup::Male, hip: Hip::Left },
    Column { gender: GenderGroup::Male, hip: Hip::Right },
    Column { gender: GenderGroup::Female, hip: Hip::Left },
    Column { gender: GenderGroup::Female, hip: Hip::Right },
    Column { gender: GenderGroup::All, hip: Hip::Left },
    Column { gender: GenderGroup::All, hip: Hip::Right },
];

#[derive(Debug, Clone, PartialEq)]
pub struct FoldRow {
    pub fold: usize,
    pub n_male: usize,
    pub n_female: usize,
    /// Mean ± SD of the absolute error per column; `None` for an empty group.
    pub cells: [Option<Summary>; 6],
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoldTable {
    pub folds: Vec<FoldRow>,
    /// Unweighted mean of the fold means, per column.
    pub average: [Option<f64>; 6],
    /// SD of the pooled per-sample errors across folds, per column.
    pub average_sd: [Option<f64>; 6],
}

pub fn mean_of_fold_means(means: &[f64]) -> f64 {
    means.iter().sum::<f64>() / means.len() as f64
}

fn column_errors<'a>(samples: &'a [SampleError], col: Column) -> impl Iterator<Item = f64> + 'a {
    samples
        .iter()
        .filter(move |s| col.gender.contains(s.row.gender))
        .map(move |s| s.error(col.hip))
}

pub fn fold_table(folds: &[Vec<PredictionRow>]) -> Result<FoldTable, MetricsError> {
    if folds.len() != FOLDS {
        return Err(MetricsError::FoldCount {
            expected: FOLDS,
            got: folds.len(),
        });
    }
    let per_fold: Vec<Vec<SampleError>> = folds
        .iter()
        .map(|rows| rows.iter().cloned().map(SampleError::new).collect())
        .collect();
    let rows: Vec<FoldRow> = per_fold
        .iter()
        .enumerate()
        .map(|(fold, samples)| FoldRow {
            fold,
            n_male: samples.iter().filter(|s| s.row.gender == Gender::Male).count(),
            n_female: samples.iter().filter(|s| s.row.gender == Gender::Female).count(),
            cells: COLUMNS.map(|c| Summary::of(&column_errors(samples, c).collect::<Vec<_>>(), SdConvention::Sample)),
        })
        .collect();
    let pooled: Vec<SampleError> = per_fold.into_iter().flatten().collect();
    let mut average = [None; 6];
    let mut average_sd = [None; 6];
    for (k, col) in COLUMNS.iter().enumerate() {
        let means: Vec<f64> = rows.iter().filter_map(|r| r.cells[k].map(|s| s.mean)).collect();
        if !means.is_empty() {
            average[k] = Some(mean_of_fold_means(&means));
        }
        average_sd[k] = Summary::of(&column_errors(&pooled, *col).collect::<Vec<_>>(), SdConvention::Sample).map(|s| s.sd);
    }
    Ok(FoldTable {
        folds: rows,
        average,
        average_sd,
    })
}

/// A printed average that disagrees with the average of its own column.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AuditFlag {
    pub column: Column,
    pub printed: f64,
    pub recomputed: f64,
}

/// Compares printed average-row values with the unweighted mean of the
/// printed fold means (`fold_means[fold][column]`, [`COLUMNS`] order).
pub fn audit_average_row(fold_means: &[[f64; 6]], printed: &[f64; 6], tolerance: f64) -> Vec<AuditFlag> {
    COLUMNS
        .iter()
        .enumerate()
        .filter_map(|(k, &column)| {
            let recomputed = mean_of_fold_means(&fold_means.iter().map(|r| r[k]).collect::<Vec<_>>());
            ((printed[k] - recomputed).abs() > tolerance).then_some(AuditFlag {
                column,
                printed: printed[k],
                recomputed,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct HipReport {
    pub hip: Hip,
    pub error: Summary,
    /// Band of the mean error.
    pub band: ErrorBand,
    /// Fraction of samples in each band, in [`ErrorBand::ALL`] order.
    pub band_fractions: [f64; 3],
    /// `(truth, prediction)` per sample.
    pub scatter: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupReport {
    pub gender: GenderGroup,
    pub age_group: Option<usize>,
    pub label: String,
    pub n: usize,
    /// Right then left; empty for an empty group.
    pub hips: Vec<HipReport>,
}

impl GroupReport {
    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn hip(&self, hip: Hip) -> Option<&HipReport> {
        self.hips.iter().find(|h| h.hip == hip)
    }
}

/// Errors of the samples in `gender` (and in age group `age.1` of `age.0` when given).
pub fn group_report(samples: &[SampleError], gender: GenderGroup, age: Option<(&AgeBins, usize)>) -> GroupReport {
    let members: Vec<&SampleError> = samples
        .iter()
        .filter(|s| gender.contains(s.row.gender))
        .filter(|s| age.is_none_or(|(bins, i)| bins.index(s.row.age_years) == i))
        .collect();
    let label = match age {
        None => gender.name().to_string(),
        Some((bins, i)) => format!("{} {}", gender.name(), bins.label(i)),
    };
    let hips = if members.is_empty() {
        Vec::new()
    } else {
        Hip::BOTH
            .iter()
            .map(|&hip| {
                let errors: Vec<f64> = members.iter().map(|s| s.error(hip)).collect();
                let error = Summary::of(&errors, SdConvention::Sample).expect("non-empty");
                let mut counts = [0usize; 3];
                for s in &members {
                    counts[s.band(hip) as usize] += 1;
                }
                HipReport {
                    hip,
                    band: classify_error(error.mean).expect("mean of absolute errors"),
                    error,
                    band_fractions: counts.map(|c| c as f64 / members.len() as f64),
                    scatter: members.iter().map(|s| (s.truth(hip), s.prediction(hip))).collect(),
                }
            })
            .collect()
    };
    GroupReport {
        gender,
        age_group: age.map(|(_, i)| i),
        label,
        n: members.len(),
        hips,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub mean_error: Option<f64>,
    pub band: Option<ErrorBand>,
}

/// Bins samples by their mean true angle over both hips, with `[lo, hi)`
/// bins aligned to multiples of `bin_width`. Each sample contributes its mean
/// absolute error over both hips; empty bins between the extremes are kept
/// with a zero count and no band.
pub fn angle_histogram(samples: &[SampleError], bin_width: f64) -> Result<Vec<HistogramBin>, MetricsError> {
    if !(bin_width > 0.0 && bin_width.is_finite()) {
        return Err(MetricsError::BinWidth(bin_width));
    }
    if samples.is_empty() {
        return Ok(Vec::new());
    }
    let key = |s: &SampleError| (s.row.true_right + s.row.true_left) / 2.0;
    let slot = |v: f64| (v / bin_width).floor() as i64;
    let first = samples.iter().map(|s| slot(key(s))).min().expect("non-empty");
    let last = samples.iter().map(|s| slot(key(s))).max().expect("non-empty");
    let mut sums = vec![(0usize, 0.0f64); (last - first + 1) as usize];
    for s in samples {
        let b = &mut sums[(slot(key(s)) - first) as usize];
        b.0 += 1;
        b.1 += (s.err_right + s.err_left) / 2.0;
    }
    Ok(sums
        .into_iter()
        .enumerate()
        .map(|(i, (count, sum))| {
            let k = first + i as i64;
            let mean_error = (count > 0).then(|| sum / count as f64);
            HistogramBin {
                lo: k as f64 * bin_width,
                hi: (k + 1) as f64 * bin_width,
                count,
                mean_error,
                band: mean_error.map(|m| classify_error(m).expect("mean of absolute errors")),
            }
        })
        .collect())
}

/// Reads `fold_<i>/predictions.csv` for all five folds of a run.
pub fn load_fold_predictions(run_dir: &Path) -> Result<Vec<Vec<PredictionRow>>, MetricsError> {
    let missing: Vec<usize> = (0..FOLDS).filter(|&e| !cv::predictions_path(run_dir, e).is_file()).collect();
    if !missing.is_empty() {
        return Err(MetricsError::MissingFolds(missing));
    }
    (0..FOLDS)
        .map(|e| Ok(cv::read_predictions(&cv::predictions_path(run_dir, e))?))
        .collect()
}
