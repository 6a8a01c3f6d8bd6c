use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{derive_seed, mse_loss, NadamConfig, OptimizerState, PlateauConfig, PlateauSchedule, TrainError};
use crate::dataset::{encode_gender, normalize_age, AgeBounds, AngleScale, PatientRecord};
use crate::model::{ModelBundle, Network};
use crate::plane::{self, ImagePlane};
use crate::preprocess::{self, AugmentationPolicy, LabeledPlane, ModelInput};

/// A record with its image already decoded and preprocessed to the network side.
#[derive(Debug, Clone)]
pub struct Sample {
    pub record: PatientRecord,
    pub plane: ImagePlane,
}

pub fn load_samples(records: &[PatientRecord], side: usize) -> Result<Vec<Sample>, TrainError> {
    records
        .iter()
        .map(|r| {
            let raw = plane::load_grayscale(&r.image_path).map_err(|source| TrainError::Image {
                path: r.image_path.display().to_string(),
                source,
            })?;
            Ok(Sample {
                record: r.clone(),
                plane: preprocess::prepare(&raw, side)?,
            })
        })
        .collect()
}

pub fn model_input(plane: &ImagePlane, record: &PatientRecord, bounds: AgeBounds) -> ModelInput {
    ModelInput::new(plane, normalize_age(record.age_years, bounds), encode_gender(record.gender))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainRunConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub augment: AugmentationPolicy,
    pub optimizer: NadamConfig,
    pub schedule: PlateauConfig,
}

impl Default for TrainRunConfig {
    fn default() -> Self {
        Self {
            epochs: 1000,
            batch_size: 8,
            seed: 0,
            augment: AugmentationPolicy::default(),
            optimizer: NadamConfig::default(),
            schedule: PlateauConfig::default(),
        }
    }
}

impl TrainRunConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 {
            return Err(TrainError::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be at least 1".into()));
        }
        let s = &self.schedule;
        if !(s.base_lr >= 0.0 && s.floor >= 0.0 && s.factor > 0.0 && s.factor <= 1.0 && s.patience >= 1) {
            return Err(TrainError::Config("schedule needs lr, floor ≥ 0, factor in (0, 1], patience ≥ 1".into()));
        }
        self.augment.validate()?;
        Ok(())
    }
}

/// One line of the history file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Learning rate used for this epoch's updates.
    pub lr: f64,
    pub wall_time_s: f64,
    /// Mean absolute validation error in degrees over both hips.
    pub val_mae_deg: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Weights of the epoch with the lowest validation loss.
    pub bundle: ModelBundle,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalSummary {
    pub loss: f64,
    pub mae_deg: f64,
}

fn targets(samples: &[&Sample], scale: AngleScale) -> Vec<[f64; 2]> {
    samples
        .iter()
        .map(|s| {
            let (r, l) = scale.normalize(s.record.right_angle_deg, s.record.left_angle_deg);
            [r, l]
        })
        .collect()
}

/// Evaluation-mode loss (normalized units) and MAE (degrees) over `samples`.
pub fn evaluate(bundle: &ModelBundle, samples: &[Sample], batch_size: usize) -> Result<EvalSummary, TrainError> {
    let scale = bundle
        .angle_scale
        .ok_or_else(|| TrainError::Config("bundle has no angle scale".into()))?;
    let (mut sq, mut abs, mut count) = (0.0, 0.0, 0usize);
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let inputs: Vec<ModelInput> = chunk
            .iter()
            .map(|s| model_input(&s.plane, &s.record, bundle.age_bounds))
            .collect();
        let pred = bundle.forward(&inputs)?;
        for (p, t) in pred.iter().zip(targets(&refs, scale)) {
            for k in 0..2 {
                let d = p[k] - t[k];
                sq += d * d;
                abs += d.abs() * scale.value();
            }
            count += 2;
        }
    }
    Ok(EvalSummary {
        loss: sq / count as f64,
        mae_deg: abs / count as f64,
    })
}

/// Trains `bundle` on `train`, monitoring `val`. Sets the bundle's angle
/// scale from the training split. `on_epoch` sees each history record as it
/// is produced.
pub fn train(
    mut bundle: ModelBundle,
    train: &[Sample],
    val: &[Sample],
    config: &TrainRunConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if train.is_empty() {
        return Err(TrainError::Config("empty training set".into()));
    }
    if val.is_empty() {
        return Err(TrainError::Config("empty validation set".into()));
    }
    let train_ids: std::collections::HashSet<&str> = train.iter().map(|s| s.record.patient_id.as_str()).collect();
    if let Some(s) = val.iter().find(|s| train_ids.contains(s.record.patient_id.as_str())) {
        return Err(TrainError::Config(format!("{} is in both training and validation sets", s.record.patient_id)));
    }
    let train_records: Vec<PatientRecord> = train.iter().map(|s| s.record.clone()).collect();
    let scale = AngleScale::from_records(&train_records)?;
    bundle.angle_scale = Some(scale);

    let mut optimizer = OptimizerState::new(bundle.network.params(), config.optimizer, config.schedule.base_lr);
    let mut schedule = PlateauSchedule::new(config.schedule);
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, Network)> = None;
    let started = Instant::now();

    for epoch in 1..=config.epochs {
        let lr = schedule.lr();
        optimizer.lr = lr;
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[1, epoch as u64])));

        let mut loss_sum = 0.0;
        for (b, batch_idx) in order.chunks(config.batch_size).enumerate() {
            let augmented: Vec<LabeledPlane> = batch_idx
                .iter()
                .map(|&i| {
                    let s = &train[i];
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[2, epoch as u64, i as u64]));
                    let labeled = LabeledPlane {
                        plane: s.plane.clone(),
                        right_deg: s.record.right_angle_deg,
                        left_deg: s.record.left_angle_deg,
                    };
                    preprocess::augment(&labeled, &config.augment, &mut rng)
                })
                .collect();
            let inputs: Vec<ModelInput> = augmented
                .iter()
                .zip(batch_idx)
                .map(|(a, &i)| model_input(&a.plane, &train[i].record, bundle.age_bounds))
                .collect();
            let target: Vec<[f64; 2]> = augmented
                .iter()
                .map(|a| {
                    let (r, l) = scale.normalize(a.right_deg, a.left_deg);
                    [r, l]
                })
                .collect();
            let dropout_seed = derive_seed(config.seed, &[3, epoch as u64, b as u64]);
            let pass = match bundle.network.forward_train(&inputs, dropout_seed) {
                Ok(p) => p,
                Err(crate::model::ModelError::NonFiniteOutput) => {
                    return Err(TrainError::Diverged {
                        epoch,
                        what: "output",
                        history,
                    })
                }
                Err(e) => return Err(e.into()),
            };
            let (loss, d_out) = mse_loss(&pass.outputs, &target)?;
            if !loss.is_finite() {
                return Err(TrainError::Diverged {
                    epoch,
                    what: "training loss",
                    history,
                });
            }
            let grads = bundle.network.backward(&pass, &d_out);
            optimizer.step(bundle.network.params_mut(), &grads, epoch)?;
            bundle.network.update_running_stats(&pass);
            loss_sum += loss * batch_idx.len() as f64;
        }
        let train_loss = loss_sum / train.len() as f64;

        let eval = match evaluate(&bundle, val, config.batch_size) {
            Ok(e) if e.loss.is_finite() => e,
            Ok(_) | Err(TrainError::Model(crate::model::ModelError::NonFiniteOutput)) => {
                return Err(TrainError::Diverged {
                    epoch,
                    what: "validation loss",
                    history,
                })
            }
            Err(e) => return Err(e),
        };
        schedule.step(eval.loss);
        let record = EpochRecord {
            epoch,
            train_loss,
            val_loss: eval.loss,
            lr,
            wall_time_s: started.elapsed().as_secs_f64(),
            val_mae_deg: eval.mae_deg,
        };
        on_epoch(&record);
        history.push(record);
        if best.as_ref().is_none_or(|(l, _, _)| eval.loss < *l) {
            best = Some((eval.loss, epoch, bundle.network.clone()));
        }
    }

    let (best_val_loss, best_epoch, network) = best.expect("at least one epoch ran");
    bundle.network = network;
    Ok(TrainOutcome {
        bundle,
        history,
        best_epoch,
        best_val_loss,
    })
}

pub fn write_history(path: &Path, history: &[EpochRecord]) -> std::io::Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in history {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

pub fn read_history(path: &Path) -> std::io::Result<Vec<EpochRecord>> {
    BufReader::new(std::fs::File::open(path)?)
        .lines()
        .filter(|l| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
        .map(|l| Ok(serde_json::from_str(&l?)?))
        .collect()
}
