//! Stroke rasterization and alpha compositing.
//!
//! A stroke is a brush template placed by an affine map: scaled to
//! `w x h`, rotated by `theta * pi` and centered on `(x, y)`. The default
//! template is a soft-edged rectangle whose edge ramps over 5% of each
//! half-extent (never sharper than a quarter pixel), so the mask is smooth
//! in every geometric parameter. Compositing follows
//! `I_n = R_n * c M_n + I_{n-1} * (1 - c M_n)`.
//!
//! [`diff`] holds the batched, differentiable tensor version used for
//! training; this module is the scalar reference used for data synthesis,
//! full-resolution painting and replay.

pub mod diff;

use std::path::Path;

use crate::canvas::CanvasImage;
use crate::error::{shape_err, Error, Result};
use crate::stroke::{StrokeParams, StrokeSet};

/// Edge ramp width as a fraction of the half-extent.
pub const EDGE_FRACTION: f64 = 0.05;
/// Ramp width divided by the sigmoid temperature.
pub const EDGE_SHARPNESS: f64 = 4.0;
/// Sigmoid arguments below `-SUPPORT_CUTOFF` are treated as outside the
/// mask support (`sigmoid(-16) < 1.2e-7`).
pub const SUPPORT_CUTOFF: f64 = 16.0;

/// Sigmoid temperature for one axis of a stroke rendered on a frame that is
/// `size` pixels across.
#[inline]
pub fn edge_temperature(half_extent: f64, size: usize) -> f64 {
    (EDGE_FRACTION * half_extent).max(1.0 / size as f64) / EDGE_SHARPNESS
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Grayscale brush texture; 8-bit values map linearly onto alpha `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BrushTexture {
    pub width: usize,
    pub height: usize,
    pub alpha: Vec<f32>,
}

impl BrushTexture {
    pub fn from_gray8(width: usize, height: usize, values: &[u8]) -> Result<Self> {
        if values.len() != width * height || width < 2 || height < 2 {
            return Err(shape_err(
                format!("{width}x{height} texture (at least 2x2)"),
                values.len(),
            ));
        }
        Ok(Self {
            width,
            height,
            alpha: values.iter().map(|v| *v as f32 / 255.0).collect(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| Error::Image {
                path: path.to_path_buf(),
                msg: e.to_string(),
            })?
            .to_luma8();
        let (w, h) = img.dimensions();
        Self::from_gray8(w as usize, h as usize, img.as_raw())
    }

    /// Bilinear lookup at texture coordinates `(u, v)` in `[0,1]^2`
    /// (clamped to the border).
    pub fn sample(&self, u: f64, v: f64) -> f64 {
        let fx = u.clamp(0.0, 1.0) * (self.width - 1) as f64;
        let fy = v.clamp(0.0, 1.0) * (self.height - 1) as f64;
        let x0 = (fx.floor() as usize).min(self.width - 2);
        let y0 = (fy.floor() as usize).min(self.height - 2);
        let tx = fx - x0 as f64;
        let ty = fy - y0 as f64;
        let at = |x: usize, y: usize| self.alpha[y * self.width + x] as f64;
        let top = at(x0, y0) * (1.0 - tx) + at(x0 + 1, y0) * tx;
        let bottom = at(x0, y0 + 1) * (1.0 - tx) + at(x0 + 1, y0 + 1) * tx;
        top * (1.0 - ty) + bottom * ty
    }
}

/// The static brush template every stroke is derived from.
#[derive(Debug, Clone, Default, PartialEq)]
pub enum Brush {
    /// Soft-edged rectangle with uniform alpha.
    #[default]
    Plain,
    /// Soft-edged rectangle multiplied by a grayscale texture, which also
    /// modulates the stroke color.
    Textured(BrushTexture),
}

impl Brush {
    pub fn texture(&self) -> Option<&BrushTexture> {
        match self {
            Brush::Plain => None,
            Brush::Textured(t) => Some(t),
        }
    }
}

/// Precomputed placement of one stroke on a frame.
#[derive(Debug, Clone, Copy)]
pub struct Placement {
    pub x: f64,
    pub y: f64,
    pub cos: f64,
    pub sin: f64,
    pub half_w: f64,
    pub half_h: f64,
    pub tau_w: f64,
    pub tau_h: f64,
}

impl Placement {
    pub fn new(s: &StrokeParams, size: usize) -> Self {
        let phi = s.angle();
        let half_w = 0.5 * s.w;
        let half_h = 0.5 * s.h;
        Self {
            x: s.x,
            y: s.y,
            cos: phi.cos(),
            sin: phi.sin(),
            half_w,
            half_h,
            tau_w: edge_temperature(half_w, size),
            tau_h: edge_temperature(half_h, size),
        }
    }

    /// Sigmoid arguments along the width and height axes at frame point
    /// `(px, py)`, plus the stroke-local coordinates.
    #[inline]
    fn local(&self, px: f64, py: f64) -> (f64, f64, f64, f64) {
        let dx = px - self.x;
        let dy = py - self.y;
        let a = dx * self.cos + dy * self.sin;
        let b = -dx * self.sin + dy * self.cos;
        (
            (self.half_w - a.abs()) / self.tau_w,
            (self.half_h - b.abs()) / self.tau_h,
            a,
            b,
        )
    }

    /// Alpha and texture shade at `(px, py)`; `None` outside the support.
    #[inline]
    pub fn sample(&self, px: f64, py: f64, brush: &Brush) -> Option<(f64, f64)> {
        let (zw, zh, a, b) = self.local(px, py);
        if zw < -SUPPORT_CUTOFF || zh < -SUPPORT_CUTOFF {
            return None;
        }
        let window = sigmoid(zw) * sigmoid(zh);
        match brush {
            Brush::Plain => Some((window, 1.0)),
            Brush::Textured(t) => {
                let u = a / (2.0 * self.half_w) + 0.5;
                let v = b / (2.0 * self.half_h) + 0.5;
                let shade = t.sample(u, v);
                Some((window * shade, shade))
            }
        }
    }

    /// Axis-aligned bounds of the support in frame units.
    fn extent(&self) -> (f64, f64) {
        let hw = self.half_w + SUPPORT_CUTOFF * self.tau_w;
        let hh = self.half_h + SUPPORT_CUTOFF * self.tau_h;
        (
            self.cos.abs() * hw + self.sin.abs() * hh,
            self.sin.abs() * hw + self.cos.abs() * hh,
        )
    }

    /// Inclusive pixel ranges `(row0, row1, col0, col1)` that may touch the
    /// support on an `h x w` frame, or `None` when entirely off-frame.
    fn pixel_bounds(&self, h: usize, w: usize) -> Option<(usize, usize, usize, usize)> {
        let (ex, ey) = self.extent();
        let span = |c: f64, e: f64, n: usize| -> Option<(usize, usize)> {
            let lo = ((c - e) * n as f64 - 0.5).floor();
            let hi = ((c + e) * n as f64 - 0.5).ceil();
            if hi < 0.0 || lo > (n - 1) as f64 {
                return None;
            }
            Some((lo.max(0.0) as usize, (hi as usize).min(n - 1)))
        };
        let (r0, r1) = span(self.y, ey, h)?;
        let (c0, c1) = span(self.x, ex, w)?;
        Some((r0, r1, c0, c1))
    }
}

/// Alpha value of one stroke at pixel `(row, col)` of a `size x size` frame,
/// in double precision.
pub fn mask_at(s: &StrokeParams, brush: &Brush, size: usize, row: usize, col: usize) -> f64 {
    let p = Placement::new(s, size);
    let px = (col as f64 + 0.5) / size as f64;
    let py = (row as f64 + 0.5) / size as f64;
    p.sample(px, py, brush).map_or(0.0, |(m, _)| m)
}

/// A stroke rasterized onto a square frame: color image `R` and alpha `M`.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedStroke {
    pub size: usize,
    /// `size x size x 3`, row-major.
    pub image: Vec<f32>,
    /// `size x size`, values in `[0,1]`.
    pub mask: Vec<f32>,
}

impl RenderedStroke {
    pub fn support(&self) -> usize {
        self.mask.iter().filter(|m| **m > 0.0).count()
    }

    /// Mask binarized at 0.5.
    pub fn binary_mask(&self) -> Vec<bool> {
        self.mask.iter().map(|m| *m >= 0.5).collect()
    }
}

/// Rasterizes `s` onto a `size x size` frame. Strokes partially or wholly
/// outside the frame are clipped.
pub fn rasterize_stroke(s: &StrokeParams, size: usize, brush: &Brush) -> Result<RenderedStroke> {
    s.validate_geometry()?;
    if size < 8 {
        return Err(Error::Config(format!("raster size {size} below minimum 8")));
    }
    let p = Placement::new(s, size);
    let color = s.color();
    let mut image = vec![0f32; size * size * 3];
    let mut mask = vec![0f32; size * size];
    if let Some((r0, r1, c0, c1)) = p.pixel_bounds(size, size) {
        let inv = 1.0 / size as f64;
        for row in r0..=r1 {
            let py = (row as f64 + 0.5) * inv;
            for col in c0..=c1 {
                let px = (col as f64 + 0.5) * inv;
                if let Some((m, shade)) = p.sample(px, py, brush) {
                    let i = row * size + col;
                    mask[i] = m as f32;
                    for c in 0..3 {
                        image[i * 3 + c] = (color[c] * shade) as f32;
                    }
                }
            }
        }
    }
    Ok(RenderedStroke { size, image, mask })
}

/// One compositing step; `confidence` is clamped to `[0,1]`.
pub fn composite(canvas: &CanvasImage, stroke: &RenderedStroke, confidence: f64) -> Result<CanvasImage> {
    if canvas.dims() != (stroke.size, stroke.size) {
        return Err(shape_err(
            format!("{0}x{0}", stroke.size),
            format!("{}x{}", canvas.height(), canvas.width()),
        ));
    }
    let c = confidence.clamp(0.0, 1.0) as f32;
    let mut out = canvas.clone();
    for (i, (px, m)) in out.data_mut().chunks_exact_mut(3).zip(&stroke.mask).enumerate() {
        let alpha = c * m;
        if alpha == 0.0 {
            continue;
        }
        for ch in 0..3 {
            let v = stroke.image[i * 3 + ch] * alpha + px[ch] * (1.0 - alpha);
            px[ch] = v.clamp(0.0, 1.0);
        }
    }
    Ok(out)
}

/// Composites `s` directly onto `canvas` in place without materializing a
/// full-frame stroke raster. Equivalent to `composite(rasterize_stroke(..))`
/// on square frames.
pub fn paint_stroke(canvas: &mut CanvasImage, s: &StrokeParams, confidence: f64, brush: &Brush) -> Result<()> {
    s.validate_geometry()?;
    let c = confidence.clamp(0.0, 1.0);
    if c == 0.0 {
        return Ok(());
    }
    let (h, w) = canvas.dims();
    let p = Placement::new(s, w);
    let Some((r0, r1, c0, c1)) = p.pixel_bounds(h, w) else {
        return Ok(());
    };
    let color = s.color();
    for row in r0..=r1 {
        let py = (row as f64 + 0.5) / h as f64;
        for col in c0..=c1 {
            let px = (col as f64 + 0.5) / w as f64;
            if let Some((m, shade)) = p.sample(px, py, brush) {
                let alpha = c as f32 * m as f32;
                for ch in 0..3 {
                    let r = (color[ch] * shade) as f32;
                    let prev = canvas.get(row, col, ch);
                    canvas.set(row, col, ch, (r * alpha + prev * (1.0 - alpha)).clamp(0.0, 1.0));
                }
            }
        }
    }
    Ok(())
}

/// Left fold of [`composite`] over the strokes in order, each weighted by its
/// confidence.
pub fn render_sequence(canvas: &CanvasImage, strokes: &StrokeSet, brush: &Brush) -> Result<CanvasImage> {
    let mut out = canvas.clone();
    for (s, c) in strokes.iter() {
        paint_stroke(&mut out, s, c, brush)?;
    }
    Ok(out)
}

/// Fraction of the new stroke's (binarized) area already covered by the
/// accumulated mask. An empty new mask yields 0.
pub fn coverage_fraction(mask_new: &[f32], mask_accumulated: &[f32]) -> Result<f64> {
    if mask_new.len() != mask_accumulated.len() {
        return Err(shape_err(mask_new.len(), mask_accumulated.len()));
    }
    let mut area = 0usize;
    let mut overlap = 0usize;
    for (n, a) in mask_new.iter().zip(mask_accumulated) {
        if *n >= 0.5 {
            area += 1;
            if *a >= 0.5 {
                overlap += 1;
            }
        }
    }
    if area == 0 {
        return Ok(0.0);
    }
    Ok(overlap as f64 / area as f64)
}
