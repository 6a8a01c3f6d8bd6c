//! Synthetic radiograph-like population with geometrically encoded hip angles.
//!
//! Each image has a fixed left-right symmetric background and two elliptical
//! rims. The rim on the image's left half is the patient's right hip, rotated
//! counter-clockwise by the right angle; the rim on the right half is its
//! mirror image rotated by the left angle. Orientation is recovered by
//! [`reference_decode`] from second moments of the thresholded rim.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{self, Gender, PatientRecord};
use crate::plane::{self, ImagePlane, PlaneError, ValueRange};
use crate::training::derive_seed;

pub const MIN_SIDE: usize = 64;

#[derive(Debug, Error)]
pub enum PhantomError {
    #[error("image side {0} is too small to render the hip structures (minimum {MIN_SIDE})")]
    SideTooSmall(usize),
    #[error("invalid phantom spec: {0}")]
    Spec(String),
    #[error("decode failure: {0}")]
    Decode(String),
    #[error(transparent)]
    Plane(#[from] PlaneError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Normal marginals for one gender.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenderParams {
    pub age_mean: f64,
    pub age_sd: f64,
    pub right_mean: f64,
    pub right_sd: f64,
    pub left_mean: f64,
    pub left_sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSpec {
    pub population: usize,
    /// Male : female ratio; counts are rounded from it.
    pub gender_ratio: [f64; 2],
    pub male: GenderParams,
    pub female: GenderParams,
    pub age_clip: [f64; 2],
    pub angle_clip: [f64; 2],
    /// Shift of the angle mean per year of age away from the gender's mean age.
    pub drift_deg_per_year: f64,
    /// Correlation between the two hips' age-independent components.
    pub hip_correlation: f64,
    pub side: usize,
    /// Standard deviation of additive Gaussian pixel noise (intensities in [0, 1]).
    pub noise_sd: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            population: 300,
            gender_ratio: [244.0, 56.0],
            male: GenderParams {
                age_mean: 37.72,
                age_sd: 16.01,
                right_mean: 16.54,
                right_sd: 5.28,
                left_mean: 16.11,
                left_sd: 5.43,
            },
            female: GenderParams {
                age_mean: 46.95,
                age_sd: 16.39,
                right_mean: 20.61,
                right_sd: 5.70,
                left_mean: 19.55,
                left_sd: 5.20,
            },
            age_clip: [13.0, 92.0],
            angle_clip: [-10.0, 50.0],
            drift_deg_per_year: 0.08,
            hip_correlation: 0.7,
            side: 256,
            noise_sd: 0.02,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<(), PhantomError> {
        if self.side < MIN_SIDE {
            return Err(PhantomError::SideTooSmall(self.side));
        }
        let bad = |m: &str| Err(PhantomError::Spec(m.into()));
        if self.population == 0 {
            return bad("population must be positive");
        }
        if !(self.gender_ratio.iter().all(|r| *r >= 0.0) && self.gender_ratio.iter().sum::<f64>() > 0.0) {
            return bad("gender_ratio needs non-negative entries with a positive sum");
        }
        if !(self.noise_sd >= 0.0) {
            return bad("noise_sd must be non-negative");
        }
        if !(-1.0..=1.0).contains(&self.hip_correlation) {
            return bad("hip_correlation must lie in [-1, 1]");
        }
        for g in [&self.male, &self.female] {
            for (name, sd) in [("age", g.age_sd), ("right", g.right_sd), ("left", g.left_sd)] {
                if !(sd >= 0.0) {
                    return Err(PhantomError::Spec(format!("{name} sd must be non-negative")));
                }
            }
            if self.drift_deg_per_year.abs() * g.age_sd > g.right_sd.min(g.left_sd) {
                return bad("age drift explains more variance than the angle SDs allow");
            }
        }
        if self.age_clip[0] >= self.age_clip[1] || self.angle_clip[0] >= self.angle_clip[1] {
            return bad("clip ranges must be increasing");
        }
        Ok(())
    }

    pub fn counts(&self) -> (usize, usize) {
        let [m, f] = self.gender_ratio;
        let males = ((self.population as f64) * m / (m + f)).round() as usize;
        (males, self.population - males)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSubject {
    pub patient_id: String,
    pub gender: Gender,
    pub age_years: f64,
    pub right_deg: f64,
    pub left_deg: f64,
}

/// Draws the population (males first). Angle means drift linearly with age;
/// residual SDs are chosen so each hip's marginal SD matches its `GenderParams`.
pub fn sample_population(spec: &PhantomSpec) -> Result<Vec<PhantomSubject>, PhantomError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &[0x5f0b]));
    let (males, females) = spec.counts();
    let genders = std::iter::repeat_n(Gender::Male, males).chain(std::iter::repeat_n(Gender::Female, females));
    let rho = spec.hip_correlation;
    let mut out = Vec::with_capacity(spec.population);
    for (i, gender) in genders.enumerate() {
        let p = if gender == Gender::Male { &spec.male } else { &spec.female };
        let z: [f64; 3] = std::array::from_fn(|_| StandardNormal.sample(&mut rng));
        let age = (p.age_mean + p.age_sd * z[0]).clamp(spec.age_clip[0], spec.age_clip[1]);
        let shift = spec.drift_deg_per_year * (age - p.age_mean);
        let resid = |sd: f64| (sd * sd - (spec.drift_deg_per_year * p.age_sd).powi(2)).max(0.0).sqrt();
        let (zr, zl) = (z[1], rho * z[1] + (1.0 - rho * rho).sqrt() * z[2]);
        let clip = |v: f64| v.clamp(spec.angle_clip[0], spec.angle_clip[1]);
        out.push(PhantomSubject {
            patient_id: format!("P{:04}", i + 1),
            gender,
            age_years: (age * 100.0).round() / 100.0,
            right_deg: clip(((p.right_mean + shift + resid(p.right_sd) * zr) * 100.0).round() / 100.0),
            left_deg: clip(((p.left_mean + shift + resid(p.left_sd) * zl) * 100.0).round() / 100.0),
        });
    }
    Ok(out)
}

// Geometry in units of the image side.
const HIP_OFFSET: f64 = 0.25;
const RIM_MAJOR: f64 = 0.12;
const RIM_MINOR: f64 = 0.06;
/// Half-thickness of the rim in normalized elliptical radius.
const RIM_HALF_WIDTH: f64 = 0.35;
const RIM_PEAK: f64 = 0.7;

fn bump(z: f64) -> f64 {
    let t = 1.0 - z * z;
    if t > 0.0 {
        t * t
    } else {
        0.0
    }
}

/// Symmetric in `u`; peaks at 0.3, far below the rim threshold.
fn background(u: f64, v: f64) -> f64 {
    // pelvic ring, sacrum column, soft-tissue falloff
    let r = ((u / 0.47).powi(2) + ((v + 0.02) / 0.4).powi(2)).sqrt();
    let ring = bump((r - 1.0) / 0.08) * 0.12;
    let sacrum = bump(u / 0.07) * bump((v - 0.05) / 0.2) * 0.15;
    let tissue = 0.08 * bump((u * u + v * v).sqrt() / 0.75);
    ring + sacrum + tissue
}

/// Rim of the hip on the image's left (patient right), centered at
/// `(-HIP_OFFSET, 0)`, major axis rotated counter-clockwise by `deg`.
fn rim(u: f64, v: f64, deg: f64) -> f64 {
    let (s, c) = deg.to_radians().sin_cos();
    let (du, dv) = (u + HIP_OFFSET, v);
    let a = c * du + s * dv;
    let b = -s * du + c * dv;
    let r = ((a / RIM_MAJOR).powi(2) + (b / RIM_MINOR).powi(2)).sqrt();
    RIM_PEAK * bump((r - 1.0) / RIM_HALF_WIDTH)
}

/// Noise-free intensity at normalized coordinates (`u` right, `v` up, origin at center).
pub fn intensity(u: f64, v: f64, right_deg: f64, left_deg: f64) -> f64 {
    // the patient-left rim is the mirror of a patient-right rim, so mirror-exactness is structural
    background(u, v) + rim(u, v, right_deg) + rim(-u, v, left_deg)
}

/// Renders one image with values in [0, 1].
pub fn render(side: usize, right_deg: f64, left_deg: f64, noise_sd: f64, seed: u64) -> Result<ImagePlane, PhantomError> {
    if side < MIN_SIDE {
        return Err(PhantomError::SideTooSmall(side));
    }
    let half = side as f64 / 2.0;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, noise_sd).map_err(|e| PhantomError::Spec(e.to_string()))?;
    let plane = ImagePlane::from_fn(side, side, ValueRange::Interval { min: 0.0, max: 1.0 }, |y, x| {
        let u = (x as f64 + 0.5 - half) / side as f64;
        let v = (half - (y as f64 + 0.5)) / side as f64;
        let n = if noise_sd > 0.0 { noise.sample(&mut rng) } else { 0.0 };
        (intensity(u, v, right_deg, left_deg) + n).clamp(0.0, 1.0)
    })?;
    Ok(plane)
}

/// Writes `images/<id>.png` (16-bit) and `metadata.csv` under `out_dir`.
pub fn generate(spec: &PhantomSpec, out_dir: &Path) -> Result<Vec<PatientRecord>, PhantomError> {
    let subjects = sample_population(spec)?;
    let images = out_dir.join("images");
    fs::create_dir_all(&images)?;
    let records = subjects
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let seed = derive_seed(spec.seed, &[0x1a6e, i as u64]);
            let img = render(spec.side, s.right_deg, s.left_deg, spec.noise_sd, seed)?;
            let path = images.join(format!("{}.png", s.patient_id));
            plane::save_png16(&img, &path)?;
            Ok(PatientRecord {
                patient_id: s.patient_id.clone(),
                age_years: s.age_years,
                gender: s.gender,
                right_angle_deg: s.right_deg,
                left_angle_deg: s.left_deg,
                image_path: path,
            })
        })
        .collect::<Result<Vec<_>, PhantomError>>()?;
    dataset::write_metadata(&out_dir.join("metadata.csv"), &records, &images)?;
    Ok(records)
}

/// Recovers `(right_deg, left_deg)` from a phantom image: each half is
/// thresholded at mid-range and the rim's orientation is taken from the
/// second central moments of the above-threshold excess intensity.
pub fn reference_decode(image: &ImagePlane) -> Result<(f64, f64), PhantomError> {
    let (lo, hi) = match image.range() {
        ValueRange::BitDepth(d) => (0.0, ((1u64 << d) - 1) as f64),
        ValueRange::Interval { min, max } => (min, max),
    };
    if !(hi > lo) {
        return Err(PhantomError::Decode("image has an empty value range".into()));
    }
    let threshold = lo + 0.5 * (hi - lo);
    let (h, w) = (image.height(), image.width());
    let orientation = |xs: std::ops::Range<usize>| -> Result<f64, PhantomError> {
        // weights rise linearly above the threshold, which keeps the moments
        // smooth in the rim geometry instead of pixel-quantized
        let mut pts = Vec::new();
        for y in 0..h {
            for x in xs.clone() {
                let excess = image.get(y, x) - threshold;
                if excess > 0.0 {
                    pts.push((x as f64 + 0.5, -(y as f64 + 0.5), excess));
                }
            }
        }
        if pts.len() < 16 {
            return Err(PhantomError::Decode(format!("no rim found ({} pixels above threshold)", pts.len())));
        }
        let n: f64 = pts.iter().map(|p| p.2).sum();
        let (mx, my) = pts.iter().fold((0.0, 0.0), |(a, b), p| (a + p.2 * p.0 / n, b + p.2 * p.1 / n));
        let (mut m20, mut m02, mut m11) = (0.0, 0.0, 0.0);
        for (x, y, w) in &pts {
            m20 += w * (x - mx).powi(2);
            m02 += w * (y - my).powi(2);
            m11 += w * (x - mx) * (y - my);
        }
        if (m20 - m02).abs() + m11.abs() < 1e-9 * n {
            return Err(PhantomError::Decode("rim has no dominant orientation".into()));
        }
        Ok(0.5 * (2.0 * m11).atan2(m20 - m02).to_degrees())
    };
    let right = orientation(0..w / 2)?;
    let left = -orientation(w / 2..w)?;
    Ok((right, left))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_angles_decode_to_zero() {
        let img = render(128, 0.0, 0.0, 0.0, 0).unwrap();
        let (r, l) = reference_decode(&img).unwrap();
        assert!(r.abs() < 1e-9 && l.abs() < 1e-9, "{r} {l}");
    }

    #[test]
    fn decodes_known_angles() {
        let img = render(256, 17.0, 12.0, 0.0, 0).unwrap();
        let (r, l) = reference_decode(&img).unwrap();
        assert!((r - 17.0).abs() < 0.5 && (l - 12.0).abs() < 0.5, "{r} {l}");
    }

    #[test]
    fn mirror_equals_swapped_render() {
        let img = render(128, 23.5, -4.0, 0.0, 0).unwrap();
        let swapped = render(128, -4.0, 23.5, 0.0, 0).unwrap();
        assert_eq!(img.flip_horizontal(), swapped);
    }

    #[test]
    fn blank_image_fails() {
        let blank = ImagePlane::new(128, 128, vec![0.0; 128 * 128], ValueRange::Interval { min: 0.0, max: 1.0 }).unwrap();
        assert!(matches!(reference_decode(&blank), Err(PhantomError::Decode(_))));
    }

    #[test]
    fn rejects_small_side() {
        let spec = PhantomSpec {
            side: 63,
            ..PhantomSpec::default()
        };
        assert!(matches!(spec.validate(), Err(PhantomError::SideTooSmall(63))));
    }

    #[test]
    fn background_stays_below_threshold() {
        let mut peak: f64 = 0.0;
        for i in 0..200 {
            for j in 0..200 {
                peak = peak.max(background(i as f64 / 200.0 - 0.5, j as f64 / 200.0 - 0.5));
            }
        }
        assert!(peak < 0.35, "{peak}");
    }
}
