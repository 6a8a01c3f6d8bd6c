//! Minimal raster plots (no text). The CSV series are the reference output;
//! these images only give a quick visual check.

use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};

use super::{ErrorBand, EvaluationReport, Hip, MetricsError};

const WHITE: Rgb<u8> = Rgb([255, 255, 255]);
const AXIS: Rgb<u8> = Rgb([60, 60, 60]);
const GUIDE: Rgb<u8> = Rgb([190, 190, 190]);
const RIGHT: Rgb<u8> = Rgb([200, 40, 40]);
const LEFT: Rgb<u8> = Rgb([40, 80, 200]);

fn band_color(band: ErrorBand) -> Rgb<u8> {
    match band {
        ErrorBand::Accurate => Rgb([40, 160, 60]),
        ErrorBand::Moderate => Rgb([235, 160, 30]),
        ErrorBand::Poor => Rgb([200, 40, 40]),
    }
}

struct Canvas {
    img: RgbImage,
    margin: u32,
}

impl Canvas {
    fn new(w: u32, h: u32) -> Self {
        let mut c = Self {
            img: RgbImage::from_pixel(w, h, WHITE),
            margin: 20,
        };
        let (m, w, h) = (c.margin, w, h);
        c.line((m as f64, (h - m) as f64), ((w - m) as f64, (h - m) as f64), AXIS);
        c.line((m as f64, m as f64), (m as f64, (h - m) as f64), AXIS);
        c
    }

    fn plot_w(&self) -> f64 {
        (self.img.width() - 2 * self.margin) as f64
    }

    fn plot_h(&self) -> f64 {
        (self.img.height() - 2 * self.margin) as f64
    }

    /// Maps unit coordinates (origin bottom-left) to pixels.
    fn to_px(&self, u: f64, v: f64) -> (f64, f64) {
        (self.margin as f64 + u * self.plot_w(), self.img.height() as f64 - self.margin as f64 - v * self.plot_h())
    }

    fn put(&mut self, x: i64, y: i64, c: Rgb<u8>) {
        if x >= 0 && y >= 0 && (x as u32) < self.img.width() && (y as u32) < self.img.height() {
            self.img.put_pixel(x as u32, y as u32, c);
        }
    }

    fn line(&mut self, a: (f64, f64), b: (f64, f64), c: Rgb<u8>) {
        let steps = (b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil().max(1.0) as usize;
        for i in 0..=steps {
            let t = i as f64 / steps as f64;
            self.put((a.0 + t * (b.0 - a.0)).round() as i64, (a.1 + t * (b.1 - a.1)).round() as i64, c);
        }
    }

    fn rect(&mut self, x0: f64, y0: f64, x1: f64, y1: f64, c: Rgb<u8>) {
        let (xa, xb) = (x0.min(x1).round() as i64, x0.max(x1).round() as i64);
        let (ya, yb) = (y0.min(y1).round() as i64, y0.max(y1).round() as i64);
        for y in ya..=yb {
            for x in xa..=xb {
                self.put(x, y, c);
            }
        }
    }

    fn save(&self, path: &Path) -> Result<(), MetricsError> {
        self.img.save(path).map_err(|source| MetricsError::Image {
            path: path.display().to_string(),
            source,
        })
    }
}

fn scatter(points: &[(f64, f64, Rgb<u8>)], path: &Path) -> Result<(), MetricsError> {
    let mut c = Canvas::new(400, 400);
    let (lo, hi) = points
        .iter()
        .flat_map(|p| [p.0, p.1])
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    let (lo, hi) = if lo.is_finite() && hi > lo { (lo - 1.0, hi + 1.0) } else { (0.0, 1.0) };
    let unit = |v: f64| (v - lo) / (hi - lo);
    let (a, b) = (c.to_px(0.0, 0.0), c.to_px(1.0, 1.0));
    c.line(a, b, GUIDE);
    for &(t, p, color) in points {
        let (x, y) = c.to_px(unit(t), unit(p));
        c.rect(x - 1.0, y - 1.0, x + 1.0, y + 1.0, color);
    }
    c.save(path)
}

/// Renders `scatter_{group}.png`, `average_error.png` and `histogram.png`.
pub fn emit_plots(report: &EvaluationReport, dir: &Path) -> Result<(), MetricsError> {
    fs::create_dir_all(dir)?;
    for g in &report.gender {
        let points: Vec<(f64, f64, Rgb<u8>)> = g
            .hips
            .iter()
            .flat_map(|h| {
                let color = if h.hip == Hip::Right { RIGHT } else { LEFT };
                h.scatter.iter().map(move |&(t, p)| (t, p, color))
            })
            .collect();
        scatter(&points, &dir.join(format!("scatter_{}.png", g.gender.name())))?;
    }

    let bars: Vec<(f64, ErrorBand)> = report
        .gender
        .iter()
        .flat_map(|g| g.hips.iter().map(|h| (h.error.mean, h.band)))
        .collect();
    let mut c = Canvas::new(400, 300);
    let top = bars.iter().map(|b| b.0).fold(6.0, f64::max);
    let slot = 1.0 / bars.len().max(1) as f64;
    for gap in [3.0, 6.0] {
        let (a, b) = (c.to_px(0.0, gap / top), c.to_px(1.0, gap / top));
        c.line(a, b, GUIDE);
    }
    for (i, &(mean, band)) in bars.iter().enumerate() {
        let (x0, y0) = c.to_px((i as f64 + 0.15) * slot, 0.0);
        let (x1, y1) = c.to_px((i as f64 + 0.85) * slot, mean / top);
        c.rect(x0, y0 - 1.0, x1, y1, band_color(band));
    }
    c.save(&dir.join("average_error.png"))?;

    let mut c = Canvas::new(500, 300);
    let max_count = report.histogram.iter().map(|b| b.count).max().unwrap_or(0).max(1) as f64;
    let slot = 1.0 / report.histogram.len().max(1) as f64;
    for (i, b) in report.histogram.iter().enumerate() {
        if let Some(band) = b.band {
            let (x0, y0) = c.to_px((i as f64 + 0.1) * slot, 0.0);
            let (x1, y1) = c.to_px((i as f64 + 0.9) * slot, b.count as f64 / max_count);
            c.rect(x0, y0 - 1.0, x1, y1, band_color(band));
        }
    }
    c.save(&dir.join("histogram.png"))
}
