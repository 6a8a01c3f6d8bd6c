//! Single-channel intensity grids and grayscale image file I/O.

use std::path::Path;

use image::{DynamicImage, ImageBuffer, Luma};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PlaneError {
    #[error("image must have positive dimensions, got {height}x{width}")]
    EmptyImage { height: usize, width: usize },
    #[error("expected {expected} values for a {height}x{width} plane, got {actual}")]
    LengthMismatch {
        height: usize,
        width: usize,
        expected: usize,
        actual: usize,
    },
    #[error("non-finite intensity at index {index}")]
    NonFinite { index: usize },
    #[error("{path}: unsupported pixel layout {layout} (expected 8- or 16-bit single channel)")]
    UnsupportedLayout { path: String, layout: String },
    #[error("{path}: {source}")]
    Decode {
        path: String,
        #[source]
        source: image::ImageError,
    },
}

/// Where the stored values came from: an integer bit depth or an explicit interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ValueRange {
    BitDepth(u8),
    Interval { min: f64, max: f64 },
}

/// A row-major 2-D grid of finite intensities.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePlane {
    height: usize,
    width: usize,
    values: Vec<f64>,
    range: ValueRange,
}

impl ImagePlane {
    pub fn new(
        height: usize,
        width: usize,
        values: Vec<f64>,
        range: ValueRange,
    ) -> Result<Self, PlaneError> {
        if height == 0 || width == 0 {
            return Err(PlaneError::EmptyImage { height, width });
        }
        if values.len() != height * width {
            return Err(PlaneError::LengthMismatch {
                height,
                width,
                expected: height * width,
                actual: values.len(),
            });
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(PlaneError::NonFinite { index });
        }
        Ok(Self {
            height,
            width,
            values,
            range,
        })
    }

    /// Builds a plane from a closure over `(row, col)`.
    pub fn from_fn(
        height: usize,
        width: usize,
        range: ValueRange,
        mut f: impl FnMut(usize, usize) -> f64,
    ) -> Result<Self, PlaneError> {
        let mut values = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                values.push(f(y, x));
            }
        }
        Self::new(height, width, values, range)
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self, PlaneError> {
        Self::new(
            height,
            width,
            vec![value; height * width],
            ValueRange::Interval {
                min: value,
                max: value,
            },
        )
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn range(&self) -> ValueRange {
        self.range
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    /// Replaces the values, keeping the shape. Used by transforms that already
    /// guarantee finiteness.
    pub(crate) fn with_values(&self, values: Vec<f64>, range: ValueRange) -> Self {
        debug_assert_eq!(values.len(), self.values.len());
        Self {
            height: self.height,
            width: self.width,
            values,
            range,
        }
    }

    /// Flips about the vertical axis (left-right mirror).
    pub fn flip_horizontal(&self) -> Self {
        let mut values = Vec::with_capacity(self.values.len());
        for row in self.values.chunks_exact(self.width) {
            values.extend(row.iter().rev());
        }
        self.with_values(values, self.range)
    }
}

/// Reads an 8- or 16-bit single-channel PNG or TIFF. Values keep their raw
/// integer scale; `range` records the bit depth.
pub fn load_grayscale(path: &Path) -> Result<ImagePlane, PlaneError> {
    let shown = path.display().to_string();
    let img = image::ImageReader::open(path)
        .map_err(|e| PlaneError::Decode {
            path: shown.clone(),
            source: image::ImageError::IoError(e),
        })?
        .with_guessed_format()
        .map_err(|e| PlaneError::Decode {
            path: shown.clone(),
            source: image::ImageError::IoError(e),
        })?
        .decode()
        .map_err(|source| PlaneError::Decode {
            path: shown.clone(),
            source,
        })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (values, depth) = match img {
        DynamicImage::ImageLuma8(buf) => (buf.into_raw().into_iter().map(f64::from).collect(), 8),
        DynamicImage::ImageLuma16(buf) => {
            (buf.into_raw().into_iter().map(f64::from).collect(), 16)
        }
        other => {
            return Err(PlaneError::UnsupportedLayout {
                path: shown,
                layout: format!("{:?}", other.color()),
            })
        }
    };
    ImagePlane::new(h, w, values, ValueRange::BitDepth(depth))
}

/// Quantizes a plane with values in [0, 1] to a 16-bit grayscale PNG.
/// Values outside [0, 1] are clamped.
pub fn save_png16(plane: &ImagePlane, path: &Path) -> Result<(), PlaneError> {
    let raw: Vec<u16> = plane
        .values()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * f64::from(u16::MAX)).round() as u16)
        .collect();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(plane.width() as u32, plane.height() as u32, raw)
            .expect("buffer length matches plane dimensions");
    buf.save(path).map_err(|source| PlaneError::Decode {
        path: path.display().to_string(),
        source,
    })
}

/// Reads only the header to confirm a file is a decodable image.
pub fn probe_dimensions(path: &Path) -> Result<(u32, u32), PlaneError> {
    let shown = path.display().to_string();
    image::ImageReader::open(path)
        .and_then(|r| r.with_guessed_format())
        .map_err(|e| PlaneError::Decode {
            path: shown.clone(),
            source: image::ImageError::IoError(e),
        })?
        .into_dimensions()
        .map_err(|source| PlaneError::Decode {
            path: shown,
            source,
        })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shapes_and_values() {
        assert!(matches!(
            ImagePlane::new(0, 3, vec![], ValueRange::BitDepth(8)),
            Err(PlaneError::EmptyImage { .. })
        ));
        assert!(matches!(
            ImagePlane::new(2, 2, vec![0.0; 3], ValueRange::BitDepth(8)),
            Err(PlaneError::LengthMismatch { .. })
        ));
        assert!(matches!(
            ImagePlane::new(1, 2, vec![0.0, f64::NAN], ValueRange::BitDepth(8)),
            Err(PlaneError::NonFinite { index: 1 })
        ));
    }

    #[test]
    fn flip_reverses_rows() {
        let p = ImagePlane::new(2, 3, vec![1., 2., 3., 4., 5., 6.], ValueRange::BitDepth(8)).unwrap();
        assert_eq!(p.flip_horizontal().values(), &[3., 2., 1., 6., 5., 4.]);
        assert_eq!(p.flip_horizontal().flip_horizontal(), p);
    }

    #[test]
    fn png16_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.png");
        let p = ImagePlane::from_fn(4, 5, ValueRange::Interval { min: 0.0, max: 1.0 }, |y, x| {
            (y * 5 + x) as f64 / 19.0
        })
        .unwrap();
        save_png16(&p, &path).unwrap();
        assert_eq!(probe_dimensions(&path).unwrap(), (5, 4));
        let back = load_grayscale(&path).unwrap();
        assert_eq!(back.range(), ValueRange::BitDepth(16));
        for (a, b) in p.values().iter().zip(back.values()) {
            assert!((a * 65535.0 - b).abs() <= 0.5);
        }
    }
}
