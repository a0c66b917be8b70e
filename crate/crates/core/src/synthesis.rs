//! Self-supervised training data: random background strokes build the
//! canvas, random foreground strokes on top of it build the target, and the
//! foreground set (with validity labels) is the ground truth.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::canvas::{CanvasImage, SignedImage};
use crate::error::{Error, Result};
use crate::render::{self, Brush};
use crate::stroke::{StrokeParams, StrokeSet, PARAM_COUNT};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Granularity {
    Background,
    Foreground,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub patch_size: usize,
    /// Number of foreground slots `|S_t|`.
    pub max_strokes: usize,
    /// Inclusive range of background stroke counts.
    pub background_count: (usize, usize),
    /// Range of `h` and `w` for background strokes.
    pub background_size: (f64, f64),
    /// Range of `h` and `w` for foreground strokes.
    pub foreground_size: (f64, f64),
    /// Lower bound of the number of active foreground slots; the count is
    /// drawn uniformly from `min_active..=max_strokes` and the remaining
    /// slots are labeled invalid.
    pub min_active: usize,
    /// A foreground stroke whose area is covered by more than this fraction
    /// of the accumulated foreground is labeled invalid.
    pub overlap_threshold: f64,
    /// Gray level of the empty canvas.
    pub canvas_color: f32,
    pub brush: Brush,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            patch_size: 32,
            max_strokes: 8,
            background_count: (4, 12),
            background_size: (0.3, 0.9),
            foreground_size: (0.1, 0.6),
            min_active: 0,
            overlap_threshold: 0.75,
            canvas_color: 0.5,
            brush: Brush::Plain,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.patch_size < 8 {
            return bad("patch_size must be at least 8");
        }
        if self.max_strokes == 0 {
            return bad("max_strokes must be positive");
        }
        if self.min_active > self.max_strokes {
            return bad("min_active exceeds max_strokes");
        }
        if self.background_count.0 == 0 || self.background_count.0 > self.background_count.1 {
            return bad("background_count must be a non-empty positive range");
        }
        for (lo, hi) in [self.background_size, self.foreground_size] {
            if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
                return bad("stroke size ranges must satisfy 0 < lo <= hi <= 1");
            }
        }
        Ok(())
    }

    fn size_range(&self, g: Granularity) -> (f64, f64) {
        match g {
            Granularity::Background => self.background_size,
            Granularity::Foreground => self.foreground_size,
        }
    }
}

/// `(I_c, I_t, I_d, S_t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub canvas: CanvasImage,
    pub target: CanvasImage,
    pub differential: SignedImage,
    pub target_strokes: StrokeSet,
}

fn uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// `n` strokes with uniformly drawn parameters and unit confidence.
pub fn sample_strokes(n: usize, granularity: Granularity, cfg: &SynthConfig, rng: &mut impl Rng) -> StrokeSet {
    let size = cfg.size_range(granularity);
    let strokes = (0..n)
        .map(|_| {
            let x = rng.random::<f64>();
            let y = rng.random::<f64>();
            let h = uniform(rng, size);
            let w = uniform(rng, size);
            let theta = rng.random::<f64>();
            let [r, g, b] = [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()];
            StrokeParams::new(x, y, h, w, theta, r, g, b)
        })
        .collect();
    StrokeSet::with_unit_confidence(strokes)
}

/// Walks strokes in order and labels each 1, or 0 when its binarized mask is
/// covered by more than `threshold` of the union of the strokes kept so far.
pub fn overlap_labels(strokes: &[StrokeParams], size: usize, brush: &Brush, threshold: f64) -> Result<Vec<f64>> {
    let mut accumulated = vec![0f32; size * size];
    let mut labels = Vec::with_capacity(strokes.len());
    for s in strokes {
        let r = render::rasterize_stroke(s, size, brush)?;
        let covered = render::coverage_fraction(&r.mask, &accumulated)?;
        if covered > threshold {
            labels.push(0.0);
        } else {
            labels.push(1.0);
            for (acc, m) in accumulated.iter_mut().zip(&r.mask) {
                if *m >= 0.5 {
                    *acc = 1.0;
                }
            }
        }
    }
    Ok(labels)
}

/// Element-wise `target - canvas`.
pub fn differential_image(target: &CanvasImage, canvas: &CanvasImage) -> Result<SignedImage> {
    SignedImage::difference(target, canvas)
}

pub fn build_training_pair(cfg: &SynthConfig, rng: &mut impl Rng) -> Result<TrainingSample> {
    let p = cfg.patch_size;
    let empty = CanvasImage::filled(p, p, cfg.canvas_color);
    let n_bg = rng.random_range(cfg.background_count.0..=cfg.background_count.1);
    let background = sample_strokes(n_bg, Granularity::Background, cfg, rng);
    let canvas = render::render_sequence(&empty, &background, &cfg.brush)?;

    let mut foreground = sample_strokes(cfg.max_strokes, Granularity::Foreground, cfg, rng);
    let active = rng.random_range(cfg.min_active..=cfg.max_strokes);
    let labels = overlap_labels(&foreground.strokes[..active], p, &cfg.brush, cfg.overlap_threshold)?;
    for (i, c) in foreground.confidences.iter_mut().enumerate() {
        *c = labels.get(i).copied().unwrap_or(0.0);
    }
    let rendered = render::render_sequence(&canvas, &foreground, &cfg.brush)?;
    let differential = differential_image(&rendered, &canvas)?;
    // Snap the target onto canvas + differential so the identity holds
    // exactly in f32 (moves a pixel by at most one ulp).
    let snapped = canvas
        .data()
        .iter()
        .zip(differential.data())
        .map(|(c, d)| c + d)
        .collect();
    let target = CanvasImage::from_vec(p, p, snapped)?;
    Ok(TrainingSample {
        canvas,
        target,
        differential,
        target_strokes: foreground,
    })
}

/// SplitMix64 finalizer; derives independent per-sample seeds.
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Sample `index` of the batch seeded by `batch_seed`. Each sample owns its
/// generator, so batches can be built in any order or in parallel.
pub fn sample_with_seed(cfg: &SynthConfig, batch_seed: u64, index: usize) -> Result<TrainingSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(batch_seed, index as u64));
    build_training_pair(cfg, &mut rng)
}

/// A batch of samples stacked into tensors.
#[derive(Debug, Clone)]
pub struct SampleBatch {
    /// `(B, 3, P, P)`
    pub canvas: Tensor,
    pub target: Tensor,
    pub differential: Tensor,
    /// `(B, N, 8)`
    pub strokes: Tensor,
    /// `(B, N)` in `{0, 1}`
    pub confidences: Tensor,
    pub samples: Vec<TrainingSample>,
}

impl SampleBatch {
    pub fn from_samples(samples: Vec<TrainingSample>, device: &Device, dtype: DType) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Config("empty batch".into()));
        }
        let stack = |f: &dyn Fn(&TrainingSample) -> Result<Tensor>| -> Result<Tensor> {
            let ts = samples.iter().map(f).collect::<Result<Vec<_>>>()?;
            Ok(Tensor::stack(&ts, 0)?)
        };
        let canvas = stack(&|s| s.canvas.to_tensor(device, dtype))?;
        let target = stack(&|s| s.target.to_tensor(device, dtype))?;
        let differential = stack(&|s| s.differential.to_tensor(device, dtype))?;
        let n = samples[0].target_strokes.len();
        let b = samples.len();
        let flat: Vec<f64> = samples
            .iter()
            .flat_map(|s| s.target_strokes.strokes.iter().flat_map(|p| p.to_array()))
            .collect();
        let conf: Vec<f64> = samples
            .iter()
            .flat_map(|s| s.target_strokes.confidences.iter().copied())
            .collect();
        let strokes = Tensor::from_vec(flat, (b, n, PARAM_COUNT), device)?.to_dtype(dtype)?;
        let confidences = Tensor::from_vec(conf, (b, n), device)?.to_dtype(dtype)?;
        Ok(Self {
            canvas,
            target,
            differential,
            strokes,
            confidences,
            samples,
        })
    }

    pub fn synthesize(cfg: &SynthConfig, batch_seed: u64, size: usize, device: &Device, dtype: DType) -> Result<Self> {
        let samples = (0..size)
            .map(|i| sample_with_seed(cfg, batch_seed, i))
            .collect::<Result<Vec<_>>>()?;
        Self::from_samples(samples, device, dtype)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Writes `canvas.png`, `target.png` and `differential.png` (shifted to
/// `[0,1]`) for one sample.
pub fn dump_sample(sample: &TrainingSample, dir: &Path, stem: &str) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    sample.canvas.save(&dir.join(format!("{stem}_canvas.png")))?;
    sample.target.save(&dir.join(format!("{stem}_target.png")))?;
    sample
        .differential
        .to_viewable()
        .save(&dir.join(format!("{stem}_differential.png")))?;
    Ok(())
}
