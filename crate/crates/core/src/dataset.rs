//! Patient records: metadata ingestion, demographic statistics and the
//! scalar normalizations fed to the network.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::plane;

/// Exact column order written by this crate; ingestion accepts any order.
pub const METADATA_HEADER: [&str; 6] = [
    "patient_id",
    "age_years",
    "gender",
    "right_angle_deg",
    "left_angle_deg",
    "image_file",
];

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("metadata table is missing column `{0}`")]
    MissingColumn(String),
    #[error("duplicate patient_id `{0}`")]
    DuplicatePatientId(String),
    #[error("{} invalid record(s): {}", .0.len(), format_issues(.0))]
    InvalidRecords(Vec<RecordIssue>),
    #[error("dataset is empty")]
    Empty,
    #[error("age bin edges must be finite and strictly increasing: {0:?}")]
    InvalidBins(Vec<f64>),
    #[error("reading {path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },
}

/// A configuration value that cannot define a valid scalar normalization.
#[derive(Debug, Error, PartialEq)]
pub enum NormalizationError {
    #[error("age bounds must satisfy lo < hi, got [{lo}, {hi}]")]
    AgeBounds { lo: f64, hi: f64 },
    #[error("angle_max must be positive and finite, got {0}")]
    AngleMax(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecordIssue {
    /// 1-based data row (header excluded).
    pub row: usize,
    pub patient_id: String,
    pub problem: String,
}

fn format_issues(issues: &[RecordIssue]) -> String {
    issues
        .iter()
        .map(|i| format!("row {} `{}`: {}", i.row, i.patient_id, i.problem))
        .collect::<Vec<_>>()
        .join("; ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Gender {
    #[serde(rename = "M")]
    Male,
    #[serde(rename = "F")]
    Female,
}

impl Gender {
    pub fn code(self) -> &'static str {
        match self {
            Gender::Male => "M",
            Gender::Female => "F",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim() {
            "M" | "m" => Some(Gender::Male),
            "F" | "f" => Some(Gender::Female),
            _ => None,
        }
    }
}

impl fmt::Display for Gender {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub patient_id: String,
    pub age_years: f64,
    pub gender: Gender,
    pub right_angle_deg: f64,
    pub left_angle_deg: f64,
    pub image_path: PathBuf,
}

/// Plausibility limits applied at ingestion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IngestLimits {
    pub age_range: [f64; 2],
    pub angle_range: [f64; 2],
}

impl Default for IngestLimits {
    fn default() -> Self {
        Self {
            age_range: [0.0, 120.0],
            angle_range: [-10.0, 50.0],
        }
    }
}

/// Reads the metadata CSV and validates every row against `image_root`.
///
/// All row-level problems are collected and reported together; a duplicate
/// identifier stops ingestion immediately.
pub fn ingest(
    metadata: &Path,
    image_root: &Path,
    limits: &IngestLimits,
) -> Result<Vec<PatientRecord>, DatasetError> {
    let csv_err = |source| DatasetError::Csv {
        path: metadata.display().to_string(),
        source,
    };
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(metadata)
        .map_err(csv_err)?;
    let header = reader.headers().map_err(csv_err)?.clone();
    let mut columns = [0usize; 6];
    for (slot, name) in columns.iter_mut().zip(METADATA_HEADER) {
        *slot = header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DatasetError::MissingColumn(name.to_string()))?;
    }

    let mut seen = HashSet::new();
    let mut records = Vec::new();
    let mut issues = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row = row.map_err(csv_err)?;
        let field = |k: usize| row.get(columns[k]).unwrap_or("");
        let patient_id = field(0).to_string();
        if !seen.insert(patient_id.clone()) {
            return Err(DatasetError::DuplicatePatientId(patient_id));
        }
        match parse_row(&patient_id, [field(1), field(2), field(3), field(4), field(5)], image_root, limits) {
            Ok(rec) => records.push(rec),
            Err(problem) => issues.push(RecordIssue {
                row: i + 1,
                patient_id,
                problem,
            }),
        }
    }
    if issues.is_empty() {
        Ok(records)
    } else {
        Err(DatasetError::InvalidRecords(issues))
    }
}

fn parse_row(
    patient_id: &str,
    [age, gender, right, left, image_file]: [&str; 5],
    image_root: &Path,
    limits: &IngestLimits,
) -> Result<PatientRecord, String> {
    if patient_id.is_empty() {
        return Err("empty patient_id".into());
    }
    let number = |name: &str, s: &str| -> Result<f64, String> {
        s.parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| format!("{name} `{s}` is not a finite number"))
    };
    let age_years = number("age_years", age)?;
    let [lo, hi] = limits.age_range;
    if !(lo..=hi).contains(&age_years) {
        return Err(format!("age_years {age_years} outside [{lo}, {hi}]"));
    }
    let gender = Gender::parse(gender).ok_or_else(|| format!("gender `{gender}` is not M or F"))?;
    let [alo, ahi] = limits.angle_range;
    let right_angle_deg = number("right_angle_deg", right)?;
    let left_angle_deg = number("left_angle_deg", left)?;
    for (name, v) in [("right_angle_deg", right_angle_deg), ("left_angle_deg", left_angle_deg)] {
        if !(alo..=ahi).contains(&v) {
            return Err(format!("{name} {v} outside [{alo}, {ahi}]"));
        }
    }
    if image_file.is_empty() {
        return Err("empty image_file".into());
    }
    let image_path = image_root.join(image_file);
    if !image_path.is_file() {
        return Err(format!("image {} not found", image_path.display()));
    }
    plane::probe_dimensions(&image_path).map_err(|e| format!("unreadable image: {e}"))?;
    Ok(PatientRecord {
        patient_id: patient_id.to_string(),
        age_years,
        gender,
        right_angle_deg,
        left_angle_deg,
        image_path,
    })
}

/// Writes records in the canonical header order, with image paths relative to `image_root`
/// when possible.
pub fn write_metadata(
    path: &Path,
    records: &[PatientRecord],
    image_root: &Path,
) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(METADATA_HEADER)?;
    for r in records {
        let rel = r.image_path.strip_prefix(image_root).unwrap_or(&r.image_path);
        w.write_record([
            r.patient_id.clone(),
            r.age_years.to_string(),
            r.gender.code().to_string(),
            r.right_angle_deg.to_string(),
            r.left_angle_deg.to_string(),
            rel.to_string_lossy().into_owned(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Age groups

/// Age groups from edges `e1 < … < ek`: `[min, e1]`, `(e1, e2]`, …,
/// `(e(k-1), ek)`, `[ek, max]`. With the default edges `[45, 65]` this gives
/// the three groups ≤45, 45–65 and ≥65 with every age in exactly one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgeBins {
    edges: Vec<f64>,
}

impl Default for AgeBins {
    fn default() -> Self {
        Self {
            edges: vec![45.0, 65.0],
        }
    }
}

impl AgeBins {
    pub fn new(edges: Vec<f64>) -> Result<Self, DatasetError> {
        let ok = !edges.is_empty()
            && edges.iter().all(|e| e.is_finite())
            && edges.windows(2).all(|w| w[0] < w[1]);
        if ok {
            Ok(Self { edges })
        } else {
            Err(DatasetError::InvalidBins(edges))
        }
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn len(&self) -> usize {
        self.edges.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn index(&self, age: f64) -> usize {
        let k = self.edges.len();
        if age <= self.edges[0] {
            0
        } else if age >= self.edges[k - 1] {
            k
        } else {
            // e(i-1) < age <= e(i) for the first edge not below age
            self.edges.iter().position(|&e| age <= e).unwrap_or(k - 1)
        }
    }

    pub fn label(&self, index: usize) -> String {
        let k = self.edges.len();
        let fmt = |v: f64| {
            if v.fract() == 0.0 {
                format!("{v:.0}")
            } else {
                format!("{v}")
            }
        };
        if index == 0 {
            format!("<={}", fmt(self.edges[0]))
        } else if index == k {
            format!(">={}", fmt(self.edges[k - 1]))
        } else {
            format!("{}-{}", fmt(self.edges[index - 1]), fmt(self.edges[index]))
        }
    }
}

// ---------------------------------------------------------------------------
// Statistics

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum SdConvention {
    /// n − 1 denominator.
    #[default]
    Sample,
    /// n denominator.
    Population,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub sd: f64,
    /// False when the SD has no defined value (a single sample under the
    /// sample convention); `sd` is then reported as 0.
    pub sd_defined: bool,
}

impl Summary {
    pub fn of(values: &[f64], convention: SdConvention) -> Option<Self> {
        let n = values.len();
        if n == 0 {
            return None;
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
        let denom = match convention {
            SdConvention::Sample => n as f64 - 1.0,
            SdConvention::Population => n as f64,
        };
        if denom <= 0.0 {
            Some(Self {
                mean,
                sd: 0.0,
                sd_defined: false,
            })
        } else {
            Some(Self {
                mean,
                sd: (ss / denom).sqrt(),
                sd_defined: true,
            })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GenderGroup {
    All,
    Male,
    Female,
}

impl GenderGroup {
    pub fn contains(self, g: Gender) -> bool {
        match self {
            GenderGroup::All => true,
            GenderGroup::Male => g == Gender::Male,
            GenderGroup::Female => g == Gender::Female,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            GenderGroup::All => "all",
            GenderGroup::Male => "male",
            GenderGroup::Female => "female",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub gender: GenderGroup,
    /// `None` for the all-ages row.
    pub age_group: Option<usize>,
    pub label: String,
    pub count: usize,
    pub age: Option<Summary>,
    pub right_angle: Option<Summary>,
    pub left_angle: Option<Summary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub total: usize,
    pub bins: AgeBins,
    pub convention: SdConvention,
    /// Ordered by gender group (all, male, female), then all-ages followed by each age group.
    pub groups: Vec<GroupStats>,
}

impl DatasetStats {
    pub fn group(&self, gender: GenderGroup, age_group: Option<usize>) -> &GroupStats {
        self.groups
            .iter()
            .find(|g| g.gender == gender && g.age_group == age_group)
            .expect("every gender/age combination is present")
    }
}

pub fn compute_stats(
    records: &[PatientRecord],
    bins: &AgeBins,
    convention: SdConvention,
) -> Result<DatasetStats, DatasetError> {
    if records.is_empty() {
        return Err(DatasetError::Empty);
    }
    let mut groups = Vec::new();
    for gender in [GenderGroup::All, GenderGroup::Male, GenderGroup::Female] {
        let ages: Vec<Option<usize>> = std::iter::once(None).chain((0..bins.len()).map(Some)).collect();
        for age_group in ages {
            let members: Vec<&PatientRecord> = records
                .iter()
                .filter(|r| gender.contains(r.gender))
                .filter(|r| age_group.is_none_or(|a| bins.index(r.age_years) == a))
                .collect();
            let col = |f: fn(&PatientRecord) -> f64| -> Vec<f64> { members.iter().map(|r| f(r)).collect() };
            let label = match age_group {
                None => gender.name().to_string(),
                Some(a) => format!("{} {}", gender.name(), bins.label(a)),
            };
            groups.push(GroupStats {
                gender,
                age_group,
                label,
                count: members.len(),
                age: Summary::of(&col(|r| r.age_years), convention),
                right_angle: Summary::of(&col(|r| r.right_angle_deg), convention),
                left_angle: Summary::of(&col(|r| r.left_angle_deg), convention),
            });
        }
    }
    Ok(DatasetStats {
        total: records.len(),
        bins: bins.clone(),
        convention,
        groups,
    })
}

// ---------------------------------------------------------------------------
// Scalar normalization

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgeBounds {
    lo: f64,
    hi: f64,
}

impl Default for AgeBounds {
    fn default() -> Self {
        Self { lo: 0.0, hi: 100.0 }
    }
}

impl AgeBounds {
    pub fn new(lo: f64, hi: f64) -> Result<Self, NormalizationError> {
        if lo.is_finite() && hi.is_finite() && lo < hi {
            Ok(Self { lo, hi })
        } else {
            Err(NormalizationError::AgeBounds { lo, hi })
        }
    }

    /// Bounds spanning the observed ages of `records`.
    pub fn from_records(records: &[PatientRecord]) -> Result<Self, NormalizationError> {
        let (lo, hi) = records.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| {
            (lo.min(r.age_years), hi.max(r.age_years))
        });
        Self::new(lo, hi)
    }

    pub fn lo(&self) -> f64 {
        self.lo
    }

    pub fn hi(&self) -> f64 {
        self.hi
    }
}

pub fn normalize_age(age_years: f64, bounds: AgeBounds) -> f64 {
    ((age_years - bounds.lo) / (bounds.hi - bounds.lo)).clamp(0.0, 1.0)
}

pub fn denormalize_age(value: f64, bounds: AgeBounds) -> f64 {
    bounds.lo + value * (bounds.hi - bounds.lo)
}

/// Male → 1, female → 0.
pub fn encode_gender(gender: Gender) -> f64 {
    match gender {
        Gender::Male => 1.0,
        Gender::Female => 0.0,
    }
}

pub fn decode_gender(value: f64) -> Gender {
    if value >= 0.5 {
        Gender::Male
    } else {
        Gender::Female
    }
}

/// Validated divisor for max-normalized angle targets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct AngleScale(f64);

impl AngleScale {
    pub fn new(angle_max: f64) -> Result<Self, NormalizationError> {
        if angle_max.is_finite() && angle_max > 0.0 {
            Ok(Self(angle_max))
        } else {
            Err(NormalizationError::AngleMax(angle_max))
        }
    }

    /// Largest angle of either hip over `records` (the training split).
    pub fn from_records(records: &[PatientRecord]) -> Result<Self, NormalizationError> {
        let max = records
            .iter()
            .flat_map(|r| [r.right_angle_deg, r.left_angle_deg])
            .fold(f64::NEG_INFINITY, f64::max);
        Self::new(max)
    }

    pub fn value(self) -> f64 {
        self.0
    }

    pub fn normalize(self, right_deg: f64, left_deg: f64) -> (f64, f64) {
        (right_deg / self.0, left_deg / self.0)
    }

    pub fn denormalize(self, right: f64, left: f64) -> (f64, f64) {
        (right * self.0, left * self.0)
    }
}

impl TryFrom<f64> for AngleScale {
    type Error = NormalizationError;
    fn try_from(v: f64) -> Result<Self, Self::Error> {
        Self::new(v)
    }
}

impl From<AngleScale> for f64 {
    fn from(s: AngleScale) -> f64 {
        s.0
    }
}

pub fn normalize_angles(
    right_deg: f64,
    left_deg: f64,
    angle_max: f64,
) -> Result<(f64, f64), NormalizationError> {
    Ok(AngleScale::new(angle_max)?.normalize(right_deg, left_deg))
}
