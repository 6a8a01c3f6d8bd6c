//! Five-fold partitioning and the train/validate/test experiment loop.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{AgeBounds, Gender, PatientRecord};
use crate::model::{ModelBundle, ModelError, NetworkSpec};
use crate::training::{self, derive_seed, Sample, TrainError, TrainRunConfig};

pub const FOLDS: usize = 5;

#[derive(Debug, Error)]
pub enum CvError {
    #[error("need at least {FOLDS} records for {FOLDS}-fold cross-validation, got {0}")]
    TooFewRecords(usize),
    #[error("fold plan does not match the records: {0}")]
    PlanMismatch(String),
    #[error("experiment {experiment}: {source}")]
    Experiment {
        experiment: usize,
        #[source]
        source: Box<CvError>,
    },
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{path}: {source}")]
    Csv { path: String, source: csv::Error },
    #[error("{path}: {source}")]
    Json { path: String, source: serde_json::Error },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub patient_id: String,
    pub fold: usize,
}

/// Fold roles of one experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExperimentRoles {
    pub experiment: usize,
    pub test: usize,
    pub val: usize,
    pub train: [usize; 3],
}

impl ExperimentRoles {
    /// Test fold `e`, validation fold `e + 1 (mod 5)`, training on the rest.
    pub fn for_experiment(e: usize) -> Self {
        let val = (e + 1) % FOLDS;
        let mut train = [0; 3];
        for (slot, f) in train.iter_mut().zip((0..FOLDS).filter(|&f| f != e && f != val)) {
            *slot = f;
        }
        Self {
            experiment: e,
            test: e,
            val,
            train,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub seed: u64,
    pub stratified: bool,
    pub assignments: Vec<FoldAssignment>,
    pub roles: Vec<ExperimentRoles>,
}

/// Records of one experiment split by role.
#[derive(Debug, Clone)]
pub struct FoldSplit<'a> {
    pub roles: ExperimentRoles,
    pub train: Vec<&'a PatientRecord>,
    pub val: Vec<&'a PatientRecord>,
    pub test: Vec<&'a PatientRecord>,
}

/// Shuffles with `seed` and deals records round-robin into five folds. When
/// stratified, each gender is shuffled and dealt in turn with the fold pointer
/// carried over, so per-gender and total fold sizes both differ by at most one.
pub fn make_folds(records: &[PatientRecord], seed: u64, stratify_by_gender: bool) -> Result<FoldPlan, CvError> {
    if records.len() < FOLDS {
        return Err(CvError::TooFewRecords(records.len()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let groups: Vec<Vec<usize>> = if stratify_by_gender {
        [Gender::Male, Gender::Female]
            .iter()
            .map(|&g| (0..records.len()).filter(|&i| records[i].gender == g).collect())
            .collect()
    } else {
        vec![(0..records.len()).collect()]
    };
    let mut fold_of = vec![0; records.len()];
    let mut next = 0;
    for mut group in groups {
        group.shuffle(&mut rng);
        for i in group {
            fold_of[i] = next;
            next = (next + 1) % FOLDS;
        }
    }
    Ok(FoldPlan {
        seed,
        stratified: stratify_by_gender,
        assignments: records
            .iter()
            .zip(fold_of)
            .map(|(r, fold)| FoldAssignment {
                patient_id: r.patient_id.clone(),
                fold,
            })
            .collect(),
        roles: (0..FOLDS).map(ExperimentRoles::for_experiment).collect(),
    })
}

impl FoldPlan {
    pub fn fold_sizes(&self) -> [usize; FOLDS] {
        let mut sizes = [0; FOLDS];
        for a in &self.assignments {
            sizes[a.fold] += 1;
        }
        sizes
    }

    fn lookup(&self) -> HashMap<&str, usize> {
        self.assignments.iter().map(|a| (a.patient_id.as_str(), a.fold)).collect()
    }

    /// Checks that the plan covers exactly `records`.
    pub fn check_covers(&self, records: &[PatientRecord]) -> Result<(), CvError> {
        let lookup = self.lookup();
        if lookup.len() != self.assignments.len() {
            return Err(CvError::PlanMismatch("duplicate patient_id in plan".into()));
        }
        if let Some(a) = self.assignments.iter().find(|a| a.fold >= FOLDS) {
            return Err(CvError::PlanMismatch(format!("{} assigned to fold {}", a.patient_id, a.fold)));
        }
        let ids: HashSet<&str> = records.iter().map(|r| r.patient_id.as_str()).collect();
        if let Some(r) = records.iter().find(|r| !lookup.contains_key(r.patient_id.as_str())) {
            return Err(CvError::PlanMismatch(format!("{} has no fold", r.patient_id)));
        }
        if let Some(a) = self.assignments.iter().find(|a| !ids.contains(a.patient_id.as_str())) {
            return Err(CvError::PlanMismatch(format!("{} is not in the dataset", a.patient_id)));
        }
        Ok(())
    }

    pub fn split<'a>(&self, records: &'a [PatientRecord], experiment: usize) -> FoldSplit<'a> {
        let roles = self.roles[experiment];
        let lookup = self.lookup();
        let mut split = FoldSplit {
            roles,
            train: Vec::new(),
            val: Vec::new(),
            test: Vec::new(),
        };
        for r in records {
            match lookup.get(r.patient_id.as_str()) {
                Some(&f) if f == roles.test => split.test.push(r),
                Some(&f) if f == roles.val => split.val.push(r),
                Some(_) => split.train.push(r),
                None => {}
            }
        }
        split
    }

    pub fn save(&self, path: &Path) -> Result<(), CvError> {
        let json = serde_json::to_string_pretty(self).map_err(|source| CvError::Json {
            path: path.display().to_string(),
            source,
        })?;
        write_atomic(path, format!("{json}\n").as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self, CvError> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|source| CvError::Json {
            path: path.display().to_string(),
            source,
        })
    }
}

/// One line of a per-experiment prediction file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub patient_id: String,
    pub gender: Gender,
    pub age_years: f64,
    pub true_right: f64,
    pub true_left: f64,
    pub pred_right: f64,
    pub pred_left: f64,
    pub fold: usize,
}

impl PredictionRow {
    pub fn new(record: &PatientRecord, (pred_right, pred_left): (f64, f64), fold: usize) -> Self {
        Self {
            patient_id: record.patient_id.clone(),
            gender: record.gender,
            age_years: record.age_years,
            true_right: record.right_angle_deg,
            true_left: record.left_angle_deg,
            pred_right,
            pred_left,
            fold,
        }
    }
}

pub fn write_predictions(path: &Path, rows: &[PredictionRow]) -> Result<(), CvError> {
    let csv_err = |source| CvError::Csv {
        path: path.display().to_string(),
        source,
    };
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    if rows.is_empty() {
        w.write_record(PREDICTION_HEADER).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| CvError::Io(e.into_error()))?;
    write_atomic(path, &bytes)
}

pub const PREDICTION_HEADER: [&str; 8] = [
    "patient_id",
    "gender",
    "age_years",
    "true_right",
    "true_left",
    "pred_right",
    "pred_left",
    "fold",
];

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRow>, CvError> {
    let csv_err = |source| CvError::Csv {
        path: path.display().to_string(),
        source,
    };
    csv::Reader::from_path(path)
        .map_err(csv_err)?
        .deserialize()
        .collect::<Result<_, _>>()
        .map_err(csv_err)
}

/// Writes through a sibling temporary file so readers never see a partial file.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CvError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn fold_dir(run_dir: &Path, experiment: usize) -> PathBuf {
    run_dir.join(format!("fold_{experiment}"))
}

pub fn predictions_path(run_dir: &Path, experiment: usize) -> PathBuf {
    fold_dir(run_dir, experiment).join("predictions.csv")
}

/// Produces test-fold predictions for one experiment. `dir` is the
/// experiment's output directory for any artifacts (bundle, history).
pub trait FoldTrainer {
    fn run_experiment(&mut self, split: &FoldSplit<'_>, dir: &Path) -> Result<Vec<(f64, f64)>, CvError>;
}

/// Runs the five experiments in order. The plan is written first; an
/// experiment whose prediction file already exists is not rerun. A failing
/// experiment stops the run, leaving earlier results on disk.
pub fn run_cv(
    records: &[PatientRecord],
    plan: &FoldPlan,
    trainer: &mut impl FoldTrainer,
    run_dir: &Path,
) -> Result<Vec<Vec<PredictionRow>>, CvError> {
    plan.check_covers(records)?;
    let plan_path = run_dir.join("foldplan.json");
    if plan_path.exists() {
        if FoldPlan::load(&plan_path)? != *plan {
            return Err(CvError::PlanMismatch(format!("{} holds a different plan", plan_path.display())));
        }
    } else {
        plan.save(&plan_path)?;
    }
    let mut all = Vec::with_capacity(FOLDS);
    for e in 0..FOLDS {
        let path = predictions_path(run_dir, e);
        if path.exists() {
            all.push(read_predictions(&path)?);
            continue;
        }
        let split = plan.split(records, e);
        let wrap = |source: CvError| CvError::Experiment {
            experiment: e,
            source: Box::new(source),
        };
        let dir = fold_dir(run_dir, e);
        fs::create_dir_all(&dir)?;
        let preds = trainer.run_experiment(&split, &dir).map_err(wrap)?;
        if preds.len() != split.test.len() {
            return Err(wrap(CvError::PlanMismatch(format!(
                "{} predictions for {} test records",
                preds.len(),
                split.test.len()
            ))));
        }
        let rows: Vec<PredictionRow> = split.test.iter().zip(preds).map(|(r, p)| PredictionRow::new(r, p, e)).collect();
        write_predictions(&path, &rows)?;
        all.push(rows);
    }
    Ok(all)
}

/// Baseline that predicts the training-split mean of each hip.
#[derive(Debug, Default, Clone, Copy)]
pub struct TrainMeanPredictor;

impl FoldTrainer for TrainMeanPredictor {
    fn run_experiment(&mut self, split: &FoldSplit<'_>, _dir: &Path) -> Result<Vec<(f64, f64)>, CvError> {
        let n = split.train.len() as f64;
        let r = split.train.iter().map(|r| r.right_angle_deg).sum::<f64>() / n;
        let l = split.train.iter().map(|r| r.left_angle_deg).sum::<f64>() / n;
        Ok(vec![(r, l); split.test.len()])
    }
}

/// Trains the network on each experiment's training folds, selecting the
/// checkpoint on the validation fold, and predicts the test fold.
pub struct NetworkTrainer {
    pub spec: NetworkSpec,
    pub train: TrainRunConfig,
    pub age_bounds: AgeBounds,
    pub config_digest: String,
    /// Prints one line per epoch to stderr when set.
    pub verbose: bool,
    samples: HashMap<String, Sample>,
}

impl NetworkTrainer {
    /// Decodes and preprocesses every record's image once.
    pub fn new(
        records: &[PatientRecord],
        spec: NetworkSpec,
        train: TrainRunConfig,
        age_bounds: AgeBounds,
        config_digest: String,
    ) -> Result<Self, CvError> {
        let samples = training::load_samples(records, spec.input_side)?
            .into_iter()
            .map(|s| (s.record.patient_id.clone(), s))
            .collect();
        Ok(Self {
            spec,
            train,
            age_bounds,
            config_digest,
            verbose: false,
            samples,
        })
    }

    fn gather(&self, records: &[&PatientRecord]) -> Vec<Sample> {
        records.iter().map(|r| self.samples[&r.patient_id].clone()).collect()
    }
}

impl FoldTrainer for NetworkTrainer {
    fn run_experiment(&mut self, split: &FoldSplit<'_>, dir: &Path) -> Result<Vec<(f64, f64)>, CvError> {
        let e = split.roles.experiment as u64;
        let mut spec = self.spec.clone();
        spec.init_seed = derive_seed(spec.init_seed, &[e]);
        let mut bundle = ModelBundle::new(spec, self.age_bounds)?;
        bundle.config_digest = self.config_digest.clone();
        let mut config = self.train.clone();
        config.seed = derive_seed(config.seed, &[e]);

        let (train, val, test) = (self.gather(&split.train), self.gather(&split.val), self.gather(&split.test));
        let verbose = self.verbose;
        let outcome = match training::train(bundle, &train, &val, &config, |r| {
            if verbose {
                eprintln!(
                    "fold {e} epoch {:>4} train {:.5} val {:.5} mae {:.3}° lr {:.2e}",
                    r.epoch, r.train_loss, r.val_loss, r.val_mae_deg, r.lr
                );
            }
        }) {
            Ok(o) => o,
            Err(TrainError::Diverged { epoch, what, history }) => {
                training::write_history(&dir.join("history.jsonl"), &history)?;
                return Err(TrainError::Diverged { epoch, what, history }.into());
            }
            Err(err) => return Err(err.into()),
        };
        training::write_history(&dir.join("history.jsonl"), &outcome.history)?;
        outcome.bundle.save(&dir.join("bundle.tar"))?;
        Ok(predict_samples(&outcome.bundle, &test, config.batch_size)?)
    }
}

/// Degree predictions for preprocessed samples, in order.
pub fn predict_samples(bundle: &ModelBundle, samples: &[Sample], batch_size: usize) -> Result<Vec<(f64, f64)>, ModelError> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let inputs: Vec<_> = chunk
            .iter()
            .map(|s| training::model_input(&s.plane, &s.record, bundle.age_bounds))
            .collect();
        out.extend(bundle.predict_degrees(&inputs)?);
    }
    Ok(out)
}
