//! Reconstruction metrics: mean absolute pixel error and a multi-scale
//! structural proxy for a perceptual distance.
//!
//! The proxy sums mean absolute differences over four levels of a Gaussian
//! pyramid. It needs no pretrained network and its values are not
//! comparable to learned-feature perceptual losses; reports label it
//! `pcpt_proxy` for that reason. [`PerceptualMetric`] is the extension point
//! for a learned-feature backend.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::canvas::CanvasImage;
use crate::error::{Error, Result};
use crate::inference::{paint, PaintOptions};
use crate::model::Painter;

pub const PYRAMID_LEVELS: usize = 4;

/// Anything that scores a reconstruction against its target (lower is
/// better).
pub trait PerceptualMetric {
    fn name(&self) -> &str;
    fn distance(&self, a: &CanvasImage, b: &CanvasImage) -> Result<f64>;
}

/// Mean absolute difference summed over Gaussian-pyramid levels.
#[derive(Debug, Clone, Copy)]
pub struct PyramidProxy {
    pub levels: usize,
}

impl Default for PyramidProxy {
    fn default() -> Self {
        Self { levels: PYRAMID_LEVELS }
    }
}

impl PerceptualMetric for PyramidProxy {
    fn name(&self) -> &str {
        "pcpt_proxy"
    }

    fn distance(&self, a: &CanvasImage, b: &CanvasImage) -> Result<f64> {
        a.ensure_same_shape(b)?;
        let (mut a, mut b) = (a.clone(), b.clone());
        let mut total = 0.0;
        for level in 0..self.levels {
            total += a.mean_abs_diff(&b)?;
            if level + 1 < self.levels {
                if a.height() < 2 || a.width() < 2 {
                    break;
                }
                a = pyramid_down(&a);
                b = pyramid_down(&b);
            }
        }
        Ok(total)
    }
}

/// Binomial `[1 4 6 4 1] / 16` blur (edge-clamped) followed by 2x
/// decimation.
pub fn pyramid_down(img: &CanvasImage) -> CanvasImage {
    const K: [f32; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];
    let (h, w) = img.dims();
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut horiz = CanvasImage::filled(h, w, 0.0);
    for r in 0..h {
        for c in 0..w {
            for ch in 0..3 {
                let v: f32 = K
                    .iter()
                    .enumerate()
                    .map(|(i, k)| k * img.get(r, clamp(c as isize + i as isize - 2, w), ch))
                    .sum();
                horiz.set(r, c, ch, v);
            }
        }
    }
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = CanvasImage::filled(oh, ow, 0.0);
    for r in 0..oh {
        for c in 0..ow {
            for ch in 0..3 {
                let v: f32 = K
                    .iter()
                    .enumerate()
                    .map(|(i, k)| k * horiz.get(clamp(2 * r as isize + i as isize - 2, h), 2 * c, ch))
                    .sum();
                out.set(r, c, ch, v);
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub name: String,
    pub pixel_l1: f64,
    pub pcpt_proxy: f64,
    pub strokes: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    /// Rows are kept sorted by name.
    pub fn new(mut rows: Vec<EvalRow>) -> Self {
        rows.sort_by(|a, b| a.name.cmp(&b.name));
        Self { rows }
    }

    fn mean(&self, f: impl Fn(&EvalRow) -> f64) -> f64 {
        if self.rows.is_empty() {
            return 0.0;
        }
        self.rows.iter().map(f).sum::<f64>() / self.rows.len() as f64
    }

    pub fn mean_pixel_l1(&self) -> f64 {
        self.mean(|r| r.pixel_l1)
    }

    pub fn mean_pcpt_proxy(&self) -> f64 {
        self.mean(|r| r.pcpt_proxy)
    }

    pub fn mean_strokes(&self) -> f64 {
        self.mean(|r| r.strokes as f64)
    }

    pub fn total_strokes(&self) -> usize {
        self.rows.iter().map(|r| r.strokes).sum()
    }

    pub fn total_seconds(&self) -> f64 {
        self.rows.iter().map(|r| r.seconds).sum()
    }

    /// Key/value summary followed by one tab-separated row per image.
    pub fn to_text(&self) -> String {
        let mut out = String::from("# dqpaint eval report\n");
        let _ = writeln!(out, "images = {}", self.rows.len());
        let _ = writeln!(out, "mean_pixel_l1 = {:.6}", self.mean_pixel_l1());
        let _ = writeln!(out, "mean_pcpt_proxy = {:.6}", self.mean_pcpt_proxy());
        let _ = writeln!(out, "mean_strokes = {:.3}", self.mean_strokes());
        let _ = writeln!(out, "total_strokes = {}", self.total_strokes());
        let _ = writeln!(out, "total_seconds = {:.3}", self.total_seconds());
        out.push_str("image\tpixel_l1\tpcpt_proxy\tstrokes\tseconds\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{}\t{:.6}\t{:.6}\t{}\t{:.3}",
                r.name, r.pixel_l1, r.pcpt_proxy, r.strokes, r.seconds
            );
        }
        out
    }
}

/// Scores a finished painting against its target.
pub fn score_pair(
    name: &str,
    painted: &CanvasImage,
    target: &CanvasImage,
    strokes: usize,
    seconds: f64,
) -> Result<EvalRow> {
    Ok(EvalRow {
        name: name.to_string(),
        pixel_l1: painted.mean_abs_diff(target)?,
        pcpt_proxy: PyramidProxy::default().distance(painted, target)?,
        strokes,
        seconds,
    })
}

/// Paints every readable image and scores it. Unreadable images are skipped
/// with a warning; an empty result is an error.
pub fn evaluate(images: &[PathBuf], painter: &Painter, opts: &PaintOptions, manifest_hash: &str) -> Result<EvalReport> {
    let mut rows = Vec::new();
    for path in images {
        let img = match CanvasImage::load(path) {
            Ok(img) => img,
            Err(e) => {
                log::warn!("skipping {}: {e}", path.display());
                continue;
            }
        };
        let start = Instant::now();
        let res = paint(&img, painter, opts, manifest_hash)?;
        let seconds = start.elapsed().as_secs_f64();
        rows.push(score_pair(
            &display_name(path),
            &res.canvas,
            &res.target,
            res.plan.accepted(),
            seconds,
        )?);
    }
    if rows.is_empty() {
        return Err(Error::Config("no readable images to evaluate".into()));
    }
    Ok(EvalReport::new(rows))
}

fn display_name(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn random_image(h: usize, w: usize, seed: u64) -> CanvasImage {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        CanvasImage::from_vec(h, w, (0..h * w * 3).map(|_| rng.random::<f32>()).collect()).unwrap()
    }

    #[test]
    fn self_distance_is_zero() {
        let a = random_image(32, 32, 1);
        let row = score_pair("a", &a, &a, 0, 0.0).unwrap();
        assert_eq!((row.pixel_l1, row.pcpt_proxy), (0.0, 0.0));
    }

    #[test]
    fn pixel_metric_matches_double_loop() {
        let a = random_image(17, 23, 2);
        let b = random_image(17, 23, 3);
        let mut sum = 0.0f64;
        for r in 0..17 {
            for c in 0..23 {
                for ch in 0..3 {
                    sum += (a.get(r, c, ch) as f64 - b.get(r, c, ch) as f64).abs();
                }
            }
        }
        let oracle = sum / (17.0 * 23.0 * 3.0);
        assert!((score_pair("x", &a, &b, 0, 0.0).unwrap().pixel_l1 - oracle).abs() < 1e-6);
    }

    #[test]
    fn pyramid_preserves_constants_and_halves() {
        let c = CanvasImage::filled(9, 8, 0.25);
        let d = pyramid_down(&c);
        assert_eq!(d.dims(), (5, 4));
        assert!(d.data().iter().all(|v| (v - 0.25).abs() < 1e-6));
        // Constant offset contributes once per level.
        let e = CanvasImage::filled(32, 32, 0.75);
        let f = CanvasImage::filled(32, 32, 0.25);
        assert!((PyramidProxy::default().distance(&e, &f).unwrap() - 2.0).abs() < 1e-6);
    }

    #[test]
    fn report_means_and_order() {
        let rows = vec![
            EvalRow {
                name: "b.png".into(),
                pixel_l1: 0.2,
                pcpt_proxy: 1.0,
                strokes: 3,
                seconds: 1.0,
            },
            EvalRow {
                name: "a.png".into(),
                pixel_l1: 0.4,
                pcpt_proxy: 2.0,
                strokes: 5,
                seconds: 2.0,
            },
        ];
        let rep = EvalReport::new(rows);
        assert_eq!(rep.rows[0].name, "a.png");
        assert!((rep.mean_pixel_l1() - 0.3).abs() < 1e-12);
        assert_eq!(rep.total_strokes(), 8);
        let text = rep.to_text();
        assert!(text.contains("mean_pixel_l1 = 0.300000"));
        assert!(text.contains("a.png\t0.400000\t2.000000\t5\t2.000"));
    }
}
