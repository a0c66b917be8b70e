//! Coarse-to-fine painting of whole images and the replayable stroke plan.
//!
//! At every scale the working canvas and the target are cut into a `g x g`
//! grid of patches, each resampled to the model's patch size. Predicted
//! strokes are mapped from patch-local to global coordinates, strokes with
//! a negative confidence are dropped, and the survivors are rendered onto the
//! full-resolution canvas in row-major patch order.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use candle_core::{DType, Tensor};

use crate::canvas::CanvasImage;
use crate::error::{Error, Result};
use crate::model::{self, Painter};
use crate::render::{self, Brush};
use crate::stroke::{is_drawn, wrap_unit, StrokeParams};

/// Canvas color of a fresh painting.
pub const DEFAULT_CANVAS: f32 = 0.5;

/// Grids `1, 2, 4, ...` while each patch still spans at least `patch` pixels.
pub fn default_scales(size: usize, patch: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut g = 1;
    while patch > 0 && size / g >= patch {
        out.push(g);
        g *= 2;
    }
    out
}

/// One accepted stroke of a plan, in global `[0,1]` frame coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlanStroke {
    /// Index into [`StrokePlan::scales`].
    pub scale: usize,
    pub row: usize,
    pub col: usize,
    pub stroke: StrokeParams,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StrokePlan {
    pub size: usize,
    pub scales: Vec<usize>,
    pub canvas: f32,
    pub manifest_hash: String,
    pub strokes: Vec<PlanStroke>,
}

/// Rounds to the plan's six fractional digits so that written and parsed
/// values coincide bit for bit.
pub fn quantize(v: f64) -> f64 {
    let q = (v * 1e6).round() / 1e6;
    if q == 0.0 {
        0.0
    } else {
        q
    }
}

fn quantize_stroke(s: &StrokeParams) -> StrokeParams {
    let mut q = StrokeParams::from_array(s.to_array().map(quantize));
    q.theta = wrap_unit(q.theta);
    q.h = q.h.max(1e-6);
    q.w = q.w.max(1e-6);
    q
}

/// Patch-local stroke to global frame coordinates for patch `(row, col)`
/// of a `grid x grid` split.
pub fn local_to_global(s: &StrokeParams, grid: usize, row: usize, col: usize) -> StrokeParams {
    let g = grid as f64;
    StrokeParams {
        x: (col as f64 + s.x) / g,
        y: (row as f64 + s.y) / g,
        h: s.h / g,
        w: s.w / g,
        ..*s
    }
}

impl StrokePlan {
    pub fn empty(size: usize, scales: Vec<usize>, canvas: f32, manifest_hash: String) -> Self {
        Self {
            size,
            scales,
            canvas,
            manifest_hash,
            strokes: Vec::new(),
        }
    }

    pub fn to_text(&self) -> String {
        let scales: Vec<String> = self.scales.iter().map(|g| g.to_string()).collect();
        let mut out = String::new();
        out.push_str("# dqpaint stroke plan\n");
        let _ = writeln!(out, "# size {}", self.size);
        let _ = writeln!(out, "# scales {}", scales.join(","));
        let _ = writeln!(out, "# canvas {:.6}", self.canvas);
        let _ = writeln!(out, "# manifest {}", self.manifest_hash);
        out.push_str("# scale row col x y h w theta r g b conf\n");
        for p in &self.strokes {
            let s = &p.stroke;
            let _ = writeln!(
                out,
                "{} {} {} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6}",
                p.scale, p.row, p.col, s.x, s.y, s.h, s.w, s.theta, s.r, s.g, s.b, p.confidence
            );
        }
        out
    }

    /// Parses the text form. `origin` names the source in error messages.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let err = |line: usize, msg: String| Error::Parse {
            path: origin.to_string(),
            line,
            msg,
        };
        let mut size = None;
        let mut scales = None;
        let mut canvas = DEFAULT_CANVAS;
        let mut manifest_hash = String::new();
        let mut strokes = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let n = i + 1;
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(header) = line.strip_prefix('#') {
                let mut parts = header.split_whitespace();
                match (parts.next(), parts.next()) {
                    (Some("size"), Some(v)) => size = Some(v.parse().map_err(|_| err(n, format!("bad size {v:?}")))?),
                    (Some("scales"), Some(v)) => {
                        let parsed = v
                            .split(',')
                            .map(|g| g.parse::<usize>())
                            .collect::<std::result::Result<Vec<_>, _>>()
                            .map_err(|_| err(n, format!("bad scales {v:?}")))?;
                        if parsed.contains(&0) {
                            return Err(err(n, "grid 0 in scales".into()));
                        }
                        scales = Some(parsed);
                    }
                    (Some("canvas"), Some(v)) => canvas = v.parse().map_err(|_| err(n, format!("bad canvas {v:?}")))?,
                    (Some("manifest"), Some(v)) => manifest_hash = v.to_string(),
                    _ => {}
                }
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 12 {
                return Err(err(n, format!("expected 12 fields, found {}", fields.len())));
            }
            let int = |j: usize| {
                fields[j]
                    .parse::<usize>()
                    .map_err(|_| err(n, format!("bad integer {:?}", fields[j])))
            };
            let real = |j: usize| {
                let v = fields[j]
                    .parse::<f64>()
                    .map_err(|_| err(n, format!("bad number {:?}", fields[j])))?;
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(err(n, format!("non-finite number {:?}", fields[j])))
                }
            };
            let (scale, row, col) = (int(0)?, int(1)?, int(2)?);
            let mut v = [0.0; 8];
            for (k, slot) in v.iter_mut().enumerate() {
                *slot = real(3 + k)?;
            }
            let stroke = StrokeParams::from_array(v);
            stroke.validate().map_err(|e| err(n, e.to_string()))?;
            let confidence = real(11)?;
            let grids = scales
                .as_ref()
                .ok_or_else(|| err(n, "stroke before the scales header".into()))?;
            let grid = *grids
                .get(scale)
                .ok_or_else(|| err(n, format!("scale index {scale} outside {} scales", grids.len())))?;
            if row >= grid || col >= grid {
                return Err(err(n, format!("patch ({row},{col}) outside a {grid}x{grid} grid")));
            }
            if !is_drawn(confidence) {
                return Err(err(n, format!("negative confidence {confidence} in plan")));
            }
            strokes.push(PlanStroke {
                scale,
                row,
                col,
                stroke,
                confidence,
            });
        }
        let size = size.ok_or_else(|| err(0, "missing size header".into()))?;
        let scales = scales.ok_or_else(|| err(0, "missing scales header".into()))?;
        Ok(Self {
            size,
            scales,
            canvas,
            manifest_hash,
            strokes,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?, &path.display().to_string())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn accepted(&self) -> usize {
        self.strokes.len()
    }
}

#[derive(Debug, Clone)]
pub struct PaintOptions {
    /// Output side; the image is resampled to `size x size`.
    pub size: usize,
    /// Patch grids in painting order.
    pub scales: Vec<usize>,
    pub canvas: f32,
    pub brush: Brush,
}

impl PaintOptions {
    pub fn new(size: usize, patch: usize) -> Self {
        Self {
            size,
            scales: default_scales(size, patch),
            canvas: DEFAULT_CANVAS,
            brush: Brush::Plain,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScaleStats {
    pub grid: usize,
    pub accepted: usize,
    /// Mean absolute pixel error after this scale.
    pub l1_after: f64,
}

#[derive(Debug, Clone)]
pub struct PaintResult {
    pub canvas: CanvasImage,
    pub plan: StrokePlan,
    pub target: CanvasImage,
    pub scales: Vec<ScaleStats>,
    /// Mean absolute pixel error of the initial canvas.
    pub l1_initial: f64,
}

/// Cuts `image` into a `grid x grid` set of patches, each resampled to
/// `patch`, stacked as `(g*g, 3, P, P)` in row-major order.
pub fn patch_batch(image: &CanvasImage, grid: usize, patch: usize, device: &candle_core::Device) -> Result<Tensor> {
    let side = image.height() / grid;
    let mut patches = Vec::with_capacity(grid * grid);
    for row in 0..grid {
        for col in 0..grid {
            let p = image.crop(row * side, col * side, side, side)?.resample(patch, patch);
            patches.push(p.to_tensor(device, DType::F32)?);
        }
    }
    Ok(Tensor::stack(&patches, 0)?)
}

fn check_square(image: &CanvasImage, size: usize, scales: &[usize]) -> Result<()> {
    if image.dims() != (size, size) {
        return Err(crate::error::shape_err(
            format!("{size}x{size}"),
            format!("{}x{}", image.height(), image.width()),
        ));
    }
    if let Some(g) = scales.iter().find(|g| **g == 0 || size % **g != 0) {
        return Err(Error::Config(format!("grid {g} does not divide size {size}")));
    }
    Ok(())
}

/// Paints `image` with `painter`. `manifest_hash` is copied into the plan.
pub fn paint(image: &CanvasImage, painter: &Painter, opts: &PaintOptions, manifest_hash: &str) -> Result<PaintResult> {
    let patch = painter.config().patch_size;
    let target = image.resample(opts.size, opts.size);
    check_square(&target, opts.size, &opts.scales)?;
    let device = painter.device();
    let mut canvas = CanvasImage::filled(opts.size, opts.size, opts.canvas);
    let mut plan = StrokePlan::empty(opts.size, opts.scales.clone(), opts.canvas, manifest_hash.to_string());
    let target_full = target.clone();
    let l1_initial = canvas.mean_abs_diff(&target)?;
    let mut stats = Vec::with_capacity(opts.scales.len());
    for (scale, &grid) in opts.scales.iter().enumerate() {
        let tgt = patch_batch(&target, grid, patch, &device)?;
        let cur = patch_batch(&canvas, grid, patch, &device)?;
        let diff = (&tgt - &cur)?;
        let out = painter.forward(&cur, &tgt, &diff)?;
        let preds = model::to_predictions(&out.strokes, &out.logits)?;
        let before = plan.strokes.len();
        for (k, pred) in preds.iter().enumerate() {
            let (row, col) = (k / grid, k % grid);
            for (s, conf) in pred.drawn() {
                let stroke = quantize_stroke(&local_to_global(s, grid, row, col));
                let confidence = quantize(conf).max(0.0);
                plan.strokes.push(PlanStroke {
                    scale,
                    row,
                    col,
                    stroke,
                    confidence,
                });
            }
        }
        for p in &plan.strokes[before..] {
            render::paint_stroke(&mut canvas, &p.stroke, 1.0, &opts.brush)?;
        }
        stats.push(ScaleStats {
            grid,
            accepted: plan.strokes.len() - before,
            l1_after: canvas.mean_abs_diff(&target)?,
        });
    }
    Ok(PaintResult {
        canvas,
        plan,
        target: target_full,
        scales: stats,
        l1_initial,
    })
}

#[derive(Debug, Clone)]
pub struct Replay {
    pub canvas: CanvasImage,
    /// With a stride `k`: the initial canvas, then one frame after every
    /// `k` strokes, plus a final frame for a trailing partial group.
    pub frames: Vec<CanvasImage>,
}

/// Re-renders a plan in order with the reference renderer.
pub fn replay(plan: &StrokePlan, stride: Option<usize>, brush: &Brush) -> Result<Replay> {
    if stride == Some(0) {
        return Err(Error::Config("frame stride must be positive".into()));
    }
    let mut canvas = CanvasImage::filled(plan.size, plan.size, plan.canvas);
    let mut frames = Vec::new();
    if stride.is_some() {
        frames.push(canvas.clone());
    }
    for (i, p) in plan.strokes.iter().enumerate() {
        render::paint_stroke(&mut canvas, &p.stroke, 1.0, brush)?;
        if let Some(k) = stride {
            if (i + 1) % k == 0 || i + 1 == plan.strokes.len() {
                frames.push(canvas.clone());
            }
        }
    }
    Ok(Replay { canvas, frames })
}

/// Writes frames as `frame_00000.png`, ... into `dir`.
pub fn save_frames(frames: &[CanvasImage], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (i, f) in frames.iter().enumerate() {
        f.save(&dir.join(format!("frame_{i:05}.png")))?;
    }
    Ok(())
}

/// Per-query attention mosaics of a whole image.
#[derive(Debug, Clone)]
pub struct AttentionMosaic {
    pub grid: usize,
    /// Cells per patch side (`P/4`).
    pub cell: usize,
    /// One row-major `(grid*cell)^2` map per query; every patch block sums
    /// to 1.
    pub maps: Vec<Vec<f32>>,
}

impl AttentionMosaic {
    pub fn side(&self) -> usize {
        self.grid * self.cell
    }

    /// Sum of one patch block of one query map.
    pub fn block_sum(&self, query: usize, row: usize, col: usize) -> f64 {
        let side = self.side();
        let mut total = 0.0;
        for y in 0..self.cell {
            for x in 0..self.cell {
                total += self.maps[query][(row * self.cell + y) * side + col * self.cell + x] as f64;
            }
        }
        total
    }

    /// Grayscale raster of one query map, each patch block scaled by its
    /// own maximum.
    pub fn to_gray(&self, query: usize) -> image::GrayImage {
        let side = self.side();
        let map = &self.maps[query];
        let mut out = image::GrayImage::new(side as u32, side as u32);
        for row in 0..self.grid {
            for col in 0..self.grid {
                let mut peak = 0f32;
                for y in 0..self.cell {
                    for x in 0..self.cell {
                        peak = peak.max(map[(row * self.cell + y) * side + col * self.cell + x]);
                    }
                }
                for y in 0..self.cell {
                    for x in 0..self.cell {
                        let (yy, xx) = (row * self.cell + y, col * self.cell + x);
                        let v = if peak > 0.0 { map[yy * side + xx] / peak } else { 0.0 };
                        out.put_pixel(xx as u32, yy as u32, image::Luma([(v * 255.0).round() as u8]));
                    }
                }
            }
        }
        out
    }
}

/// Runs the first pass of a fresh canvas at one grid and stitches the
/// per-patch attention maps into image-aligned mosaics.
pub fn stitch_attention(
    image: &CanvasImage,
    painter: &Painter,
    size: usize,
    grid: usize,
    canvas: f32,
) -> Result<AttentionMosaic> {
    let patch = painter.config().patch_size;
    let target = image.resample(size, size);
    check_square(&target, size, &[grid])?;
    let device = painter.device();
    let blank = CanvasImage::filled(size, size, canvas);
    let tgt = patch_batch(&target, grid, patch, &device)?;
    let cur = patch_batch(&blank, grid, patch, &device)?;
    let maps = painter.attention_maps(&cur, &tgt, &(&tgt - &cur)?)?;
    let cell = painter.config().grid_side();
    let queries = painter.config().max_strokes;
    let side = grid * cell;
    let mut out = vec![vec![0f32; side * side]; queries];
    for k in 0..grid * grid {
        let (row, col) = (k / grid, k % grid);
        let per_query = model::attention_to_vec(&maps, k)?;
        for (q, m) in per_query.iter().enumerate() {
            for (y, line) in m.iter().enumerate() {
                for (x, v) in line.iter().enumerate() {
                    out[q][(row * cell + y) * side + col * cell + x] = *v;
                }
            }
        }
    }
    Ok(AttentionMosaic { grid, cell, maps: out })
}
