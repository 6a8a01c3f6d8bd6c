//! Radiograph preprocessing (square rescale, intensity normalization,
//! channel tripling) and training-time augmentation.
//!
//! Augmentation is restricted to translations, isotropic zoom and the
//! left-right mirror. Rotation would change the very angles being regressed,
//! so the transform type has no rotation component at all.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::FeatureMap;
use crate::plane::{ImagePlane, ValueRange};

#[derive(Debug, Error, PartialEq)]
pub enum PreprocessError {
    #[error("target side must be positive")]
    ZeroSide,
    #[error("augmentation {name} must lie in [0, 1), got {value}")]
    Range { name: &'static str, value: f64 },
    #[error("mirror_probability must lie in [0, 1], got {0}")]
    MirrorProbability(f64),
    #[error("rotation is not a permitted augmentation (got rotation_range = {0})")]
    RotationRequested(f64),
}

/// Network input: three identical channels plus the two auxiliary scalars.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput {
    pub image: FeatureMap,
    /// Normalized age in [0, 1].
    pub aux_age: f64,
    /// 1 for male, 0 for female.
    pub aux_gender: f64,
}

impl ModelInput {
    pub fn new(plane: &ImagePlane, aux_age: f64, aux_gender: f64) -> Self {
        Self {
            image: triple_channels(plane),
            aux_age,
            aux_gender,
        }
    }
}

/// A preprocessed single-channel plane with its labels, as carried through augmentation.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPlane {
    pub plane: ImagePlane,
    pub right_deg: f64,
    pub left_deg: f64,
}

#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    (a + (b - a) * t).clamp(a.min(b), a.max(b))
}

/// Bilinear sample at fractional pixel coordinates; coordinates outside the
/// grid are clamped, which fills with the nearest edge value.
#[inline]
fn sample_bilinear(img: &ImagePlane, sy: f64, sx: f64) -> f64 {
    let h = img.height();
    let w = img.width();
    let sy = sy.clamp(0.0, (h - 1) as f64);
    let sx = sx.clamp(0.0, (w - 1) as f64);
    let y0 = sy.floor() as usize;
    let x0 = sx.floor() as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let ty = sy - y0 as f64;
    let tx = sx - x0 as f64;
    let top = lerp(img.get(y0, x0), img.get(y0, x1), tx);
    let bottom = lerp(img.get(y1, x0), img.get(y1, x1), tx);
    lerp(top, bottom, ty)
}

/// Direct (non aspect preserving) bilinear resize to an arbitrary shape.
pub fn resize(image: &ImagePlane, height: usize, width: usize) -> Result<ImagePlane, PreprocessError> {
    if height == 0 || width == 0 {
        return Err(PreprocessError::ZeroSide);
    }
    let sy = image.height() as f64 / height as f64;
    let sx = image.width() as f64 / width as f64;
    let xs: Vec<f64> = (0..width).map(|x| (x as f64 + 0.5) * sx - 0.5).collect();
    let mut values = Vec::with_capacity(height * width);
    for y in 0..height {
        let src_y = (y as f64 + 0.5) * sy - 0.5;
        values.extend(xs.iter().map(|&src_x| sample_bilinear(image, src_y, src_x)));
    }
    Ok(ImagePlane::new(height, width, values, image.range()).expect("bilinear output is finite"))
}

/// Square resize to `side × side`.
pub fn rescale(image: &ImagePlane, side: usize) -> Result<ImagePlane, PreprocessError> {
    resize(image, side, side)
}

/// Per-image min-max mapping to [0, 1]. A constant image maps to zeros.
pub fn normalize_intensity(image: &ImagePlane) -> ImagePlane {
    let (lo, hi) = image.min_max();
    let span = hi - lo;
    let values = if span > 0.0 {
        image
            .values()
            .iter()
            .map(|v| ((v - lo) / span).clamp(0.0, 1.0))
            .collect()
    } else {
        vec![0.0; image.values().len()]
    };
    image.with_values(values, ValueRange::Interval { min: 0.0, max: 1.0 })
}

pub fn triple_channels(image: &ImagePlane) -> FeatureMap {
    let plane = image.values();
    let mut data = Vec::with_capacity(plane.len() * 3);
    for _ in 0..3 {
        data.extend_from_slice(plane);
    }
    FeatureMap::new(3, image.height(), image.width(), data)
}

/// Full inference-time preprocessing of a raw plane: normalize, rescale,
/// normalize again so the interpolated result spans exactly [0, 1].
pub fn prepare(image: &ImagePlane, side: usize) -> Result<ImagePlane, PreprocessError> {
    let scaled = rescale(&normalize_intensity(image), side)?;
    Ok(normalize_intensity(&scaled))
}

/// Left-right mirror with the right/left labels exchanged.
pub fn mirror_sample(image: &ImagePlane, right_deg: f64, left_deg: f64) -> (ImagePlane, f64, f64) {
    (image.flip_horizontal(), left_deg, right_deg)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FillMode {
    #[default]
    Nearest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationPolicy {
    /// Fraction of the image height/width for the shift draws.
    pub shift_range: f64,
    /// Zoom factor is drawn from `1 ± zoom_range`.
    pub zoom_range: f64,
    pub fill_mode: FillMode,
    pub mirror_probability: f64,
    /// Accepted only so that a config asking for rotation fails loudly; must be 0.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rotation_range: Option<f64>,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        Self {
            shift_range: 0.05,
            zoom_range: 0.05,
            fill_mode: FillMode::Nearest,
            mirror_probability: 0.5,
            rotation_range: None,
        }
    }
}

impl AugmentationPolicy {
    pub fn none() -> Self {
        Self {
            shift_range: 0.0,
            zoom_range: 0.0,
            fill_mode: FillMode::Nearest,
            mirror_probability: 0.0,
            rotation_range: None,
        }
    }

    pub const fn rotation_allowed() -> bool {
        false
    }

    pub fn validate(&self) -> Result<(), PreprocessError> {
        for (name, value) in [("shift_range", self.shift_range), ("zoom_range", self.zoom_range)] {
            if !(0.0..1.0).contains(&value) {
                return Err(PreprocessError::Range { name, value });
            }
        }
        if !(0.0..=1.0).contains(&self.mirror_probability) {
            return Err(PreprocessError::MirrorProbability(self.mirror_probability));
        }
        match self.rotation_range {
            Some(r) if r != 0.0 => Err(PreprocessError::RotationRequested(r)),
            _ => Ok(()),
        }
    }

    /// Draws one transform. Exactly four uniforms are consumed regardless of
    /// the ranges, so streams stay aligned across policies.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> AugmentTransform {
        let mut sym = |range: f64| (2.0 * rng.random::<f64>() - 1.0) * range;
        let shift_y = sym(self.shift_range);
        let shift_x = sym(self.shift_range);
        let zoom = 1.0 + sym(self.zoom_range);
        let mirror = rng.random::<f64>() < self.mirror_probability;
        AugmentTransform {
            shift_y,
            shift_x,
            zoom,
            mirror,
        }
    }
}

/// A sampled augmentation: shift (as fractions of height/width), isotropic
/// zoom, optional mirror. The linear part is always `zoom · I`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentTransform {
    pub shift_y: f64,
    pub shift_x: f64,
    pub zoom: f64,
    pub mirror: bool,
}

impl AugmentTransform {
    pub fn is_geometric_identity(&self) -> bool {
        self.shift_y == 0.0 && self.shift_x == 0.0 && self.zoom == 1.0
    }

    /// Linear part of the output→source map, row-major 2×2, before the mirror.
    pub fn linear_part(&self) -> [[f64; 2]; 2] {
        let s = 1.0 / self.zoom;
        [[s, 0.0], [0.0, s]]
    }

    /// Applies shift and zoom (bilinear, nearest fill), then the mirror with label swap.
    pub fn apply(&self, sample: &LabeledPlane) -> LabeledPlane {
        let img = &sample.plane;
        let moved = if self.is_geometric_identity() {
            img.clone()
        } else {
            let (h, w) = (img.height(), img.width());
            let cy = (h as f64 - 1.0) / 2.0;
            let cx = (w as f64 - 1.0) / 2.0;
            let dy = self.shift_y * h as f64;
            let dx = self.shift_x * w as f64;
            let inv = 1.0 / self.zoom;
            let mut values = Vec::with_capacity(h * w);
            for y in 0..h {
                let sy = cy + (y as f64 - cy) * inv - dy;
                for x in 0..w {
                    let sx = cx + (x as f64 - cx) * inv - dx;
                    values.push(sample_bilinear(img, sy, sx));
                }
            }
            img.with_values(values, img.range())
        };
        if self.mirror {
            let (plane, right_deg, left_deg) = mirror_sample(&moved, sample.right_deg, sample.left_deg);
            LabeledPlane {
                plane,
                right_deg,
                left_deg,
            }
        } else {
            LabeledPlane {
                plane: moved,
                right_deg: sample.right_deg,
                left_deg: sample.left_deg,
            }
        }
    }
}

pub fn augment<R: Rng + ?Sized>(sample: &LabeledPlane, policy: &AugmentationPolicy, rng: &mut R) -> LabeledPlane {
    policy.sample(rng).apply(sample)
}
