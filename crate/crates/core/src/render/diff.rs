//! Batched differentiable renderer on candle tensors.
//!
//! Shapes: stroke parameters `(B, N, 8)` in slot order `x y h w theta r g b`,
//! confidences `(B, N)` in `[0,1]`, canvases `(B, 3, P, P)`. Mirrors the
//! scalar renderer in the parent module pixel for pixel.

use candle_core::{DType, Device, IndexOp, Tensor, D};

use super::{Brush, BrushTexture, EDGE_FRACTION, EDGE_SHARPNESS};
use crate::error::{shape_err, Result};

/// Pixel-center coordinates `(x: (1,1,1,P), y: (1,1,P,1))` in frame units.
fn pixel_grid(size: usize, device: &Device, dtype: DType) -> Result<(Tensor, Tensor)> {
    let centers: Vec<f64> = (0..size).map(|i| (i as f64 + 0.5) / size as f64).collect();
    let t = Tensor::from_vec(centers, size, device)?.to_dtype(dtype)?;
    Ok((t.reshape((1, 1, 1, size))?, t.reshape((1, 1, size, 1))?))
}

fn sigmoid(t: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::sigmoid(t)?)
}

/// Masks `(B, N, P, P)` and per-pixel shade `(B, N, P, P)` (ones for the
/// plain brush).
pub fn rasterize(params: &Tensor, size: usize, brush: &Brush) -> Result<(Tensor, Tensor)> {
    let (b, n, k) = params.dims3()?;
    if k != 8 {
        return Err(shape_err("8 stroke parameters", k));
    }
    let device = params.device();
    let dtype = params.dtype();
    let slot = |i: usize| -> Result<Tensor> { Ok(params.i((.., .., i))?.reshape((b, n, 1, 1))?) };
    let (x, y, h, w, theta) = (slot(0)?, slot(1)?, slot(2)?, slot(3)?, slot(4)?);
    let (gx, gy) = pixel_grid(size, device, dtype)?;

    let phi = (theta * std::f64::consts::PI)?;
    let (cos, sin) = (phi.cos()?, phi.sin()?);
    let dx = gx.broadcast_sub(&x)?;
    let dy = gy.broadcast_sub(&y)?;
    // a: along the width axis, b: along the height axis.
    let a = dx.broadcast_mul(&cos)?.broadcast_add(&dy.broadcast_mul(&sin)?)?;
    let bb = dy.broadcast_mul(&cos)?.broadcast_sub(&dx.broadcast_mul(&sin)?)?;

    let half_w = (w * 0.5)?;
    let half_h = (h * 0.5)?;
    let pixel = 1.0 / size as f64;
    let tau = |half: &Tensor| -> Result<Tensor> { Ok(((half * EDGE_FRACTION)?.maximum(pixel)? / EDGE_SHARPNESS)?) };
    let (tau_w, tau_h) = (tau(&half_w)?, tau(&half_h)?);
    let zw = half_w.broadcast_sub(&a.abs()?)?.broadcast_div(&tau_w)?;
    let zh = half_h.broadcast_sub(&bb.abs()?)?.broadcast_div(&tau_h)?;
    let window = (sigmoid(&zw)? * sigmoid(&zh)?)?;

    match brush {
        Brush::Plain => {
            let shade = window.ones_like()?;
            Ok((window, shade))
        }
        Brush::Textured(tex) => {
            let u = (a.broadcast_div(&(&half_w * 2.0)?)? + 0.5)?;
            let v = (bb.broadcast_div(&(&half_h * 2.0)?)? + 0.5)?;
            let shade = sample_texture(tex, &u, &v)?;
            Ok(((window * &shade)?, shade))
        }
    }
}

/// Bilinear texture lookup, differentiable in `(u, v)`.
fn sample_texture(tex: &BrushTexture, u: &Tensor, v: &Tensor) -> Result<Tensor> {
    let shape = u.dims().to_vec();
    let device = u.device();
    let dtype = u.dtype();
    let table = Tensor::from_slice(&tex.alpha, tex.alpha.len(), device)?.to_dtype(dtype)?;
    let axis = |t: &Tensor, n: usize| -> Result<(Tensor, Tensor)> {
        let f = (t.clamp(0.0, 1.0)? * (n - 1) as f64)?;
        let base = f.detach().floor()?.clamp(0.0, (n - 2) as f64)?;
        let frac = (f - &base)?;
        Ok((base, frac))
    };
    let (x0, tx) = axis(u, tex.width)?;
    let (y0, ty) = axis(v, tex.height)?;
    let idx = (y0 * tex.width as f64)?.add(&x0)?.flatten_all()?.to_dtype(DType::U32)?;
    let gather = |offset: u32| -> Result<Tensor> {
        let i = (&idx + offset as f64)?;
        Ok(table.index_select(&i, 0)?.reshape(shape.as_slice())?)
    };
    let w = tex.width as u32;
    let (v00, v01, v10, v11) = (gather(0)?, gather(1)?, gather(w)?, gather(w + 1)?);
    let one_tx = tx.affine(-1.0, 1.0)?;
    let one_ty = ty.affine(-1.0, 1.0)?;
    let top = ((v00 * &one_tx)? + (v01 * &tx)?)?;
    let bottom = ((v10 * &one_tx)? + (v11 * &tx)?)?;
    Ok(((top * one_ty)? + (bottom * ty)?)?)
}

/// Stroke color image `(B, N, 3, P, P)` from parameters and shade.
pub fn stroke_images(params: &Tensor, shade: &Tensor) -> Result<Tensor> {
    let (b, n, _) = params.dims3()?;
    let color = params.narrow(D::Minus1, 5, 3)?.reshape((b, n, 3, 1, 1))?;
    Ok(color.broadcast_mul(&shade.unsqueeze(2)?)?)
}

/// Single compositing step on tensors: `R * cM + I * (1 - cM)`, clamped.
/// `image (B,3,P,P)`, `mask (B,1,P,P)`, `confidence (B,1,1,1)`.
pub fn composite(canvas: &Tensor, image: &Tensor, mask: &Tensor, confidence: &Tensor) -> Result<Tensor> {
    let alpha = mask.broadcast_mul(confidence)?;
    let keep = alpha.affine(-1.0, 1.0)?;
    let out = image.broadcast_mul(&alpha)?.add(&canvas.broadcast_mul(&keep)?)?;
    Ok(out.clamp(0.0, 1.0)?)
}

/// Renders all strokes in index order onto `canvas`, each weighted by its
/// confidence. Gradients flow to the canvas, parameters and confidences.
pub fn render_strokes(canvas: &Tensor, params: &Tensor, confidence: &Tensor, brush: &Brush) -> Result<Tensor> {
    let (b, c, h, w) = canvas.dims4()?;
    let (pb, n, _) = params.dims3()?;
    if c != 3 || h != w || pb != b {
        return Err(shape_err(format!("({pb}, 3, P, P)"), format!("{:?}", canvas.dims())));
    }
    if confidence.dims() != [b, n] {
        return Err(shape_err(format!("({b}, {n})"), format!("{:?}", confidence.dims())));
    }
    let (masks, shade) = rasterize(params, h, brush)?;
    let images = stroke_images(params, &shade)?;
    let mut out = canvas.clone();
    for i in 0..n {
        let mask = masks.i((.., i..i + 1))?;
        let image = images.i((.., i))?;
        let conf = confidence.i((.., i))?.reshape((b, 1, 1, 1))?;
        out = composite(&out, &image, &mask, &conf)?;
    }
    Ok(out)
}
