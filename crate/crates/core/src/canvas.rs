//! Float rasters in row-major `H x W x 3` layout.

use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::error::{shape_err, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct CanvasImage {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl CanvasImage {
    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width * 3],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(shape_err(height * width * 3, data.len()));
        }
        Ok(Self { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> f32 {
        self.data[(row * self.width + col) * 3 + ch]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, ch: usize, v: f32) {
        self.data[(row * self.width + col) * 3 + ch] = v;
    }

    pub fn ensure_same_shape(&self, other: &Self) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(shape_err(
                format!("{}x{}", self.height, self.width),
                format!("{}x{}", other.height, other.width),
            ));
        }
        Ok(())
    }

    pub fn mean_abs_diff(&self, other: &Self) -> Result<f64> {
        self.ensure_same_shape(other)?;
        let sum: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (*a as f64 - *b as f64).abs())
            .sum();
        Ok(sum / self.data.len() as f64)
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        self.ensure_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (*a as f64 - *b as f64).abs())
            .fold(0.0, f64::max))
    }

    /// Copies the rectangle `[row0, row0+h) x [col0, col0+w)`.
    pub fn crop(&self, row0: usize, col0: usize, h: usize, w: usize) -> Result<Self> {
        if row0 + h > self.height || col0 + w > self.width {
            return Err(shape_err(
                format!("crop inside {}x{}", self.height, self.width),
                format!("{}x{} at ({row0},{col0})", h, w),
            ));
        }
        let mut out = Vec::with_capacity(h * w * 3);
        for r in row0..row0 + h {
            let start = (r * self.width + col0) * 3;
            out.extend_from_slice(&self.data[start..start + w * 3]);
        }
        Self::from_vec(h, w, out)
    }

    /// Box-filter resampling: every output pixel averages the input area it
    /// covers, with fractional weights at the borders.
    pub fn resample(&self, out_h: usize, out_w: usize) -> Self {
        if (out_h, out_w) == self.dims() {
            return self.clone();
        }
        let ys = axis_weights(self.height, out_h);
        let xs = axis_weights(self.width, out_w);
        let mut out = vec![0f32; out_h * out_w * 3];
        for (oy, wy) in ys.iter().enumerate() {
            for (ox, wx) in xs.iter().enumerate() {
                let mut acc = [0f64; 3];
                let mut total = 0f64;
                for &(iy, fy) in wy {
                    for &(ix, fx) in wx {
                        let f = fy * fx;
                        total += f;
                        let base = (iy * self.width + ix) * 3;
                        for (c, a) in acc.iter_mut().enumerate() {
                            *a += f * self.data[base + c] as f64;
                        }
                    }
                }
                let base = (oy * out_w + ox) * 3;
                for c in 0..3 {
                    out[base + c] = (acc[c] / total) as f32;
                }
            }
        }
        Self {
            height: out_h,
            width: out_w,
            data: out,
        }
    }

    pub fn clamp_unit(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    /// `(3, H, W)` tensor.
    pub fn to_tensor(&self, device: &Device, dtype: DType) -> Result<Tensor> {
        let t = Tensor::from_slice(&self.data, (self.height, self.width, 3), device)?
            .permute((2, 0, 1))?
            .contiguous()?
            .to_dtype(dtype)?;
        Ok(t)
    }

    /// Inverse of [`CanvasImage::to_tensor`]; accepts `(3, H, W)`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (c, h, w) = t.dims3()?;
        if c != 3 {
            return Err(shape_err("3 channels", c));
        }
        let data = t
            .to_dtype(DType::F32)?
            .permute((1, 2, 0))?
            .contiguous()?
            .flatten_all()?
            .to_vec1::<f32>()?;
        Self::from_vec(h, w, data)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| Error::Image {
                path: path.to_path_buf(),
                msg: e.to_string(),
            })?
            .to_rgb8();
        let (w, h) = img.dimensions();
        let data = img.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
        Self::from_vec(h as usize, w as usize, data)
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let raw = self
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        image::RgbImage::from_raw(self.width as u32, self.height as u32, raw).expect("buffer length matches dimensions")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_rgb8().save(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })
    }
}

/// For each output index, the contributing input indices with their overlap
/// lengths (in input-pixel units).
fn axis_weights(n_in: usize, n_out: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let lo = o as f64 * scale;
            let hi = lo + scale;
            let mut w = Vec::new();
            let mut i = lo.floor() as usize;
            while (i as f64) < hi && i < n_in {
                let overlap = (hi.min(i as f64 + 1.0) - lo.max(i as f64)).max(0.0);
                if overlap > 0.0 {
                    w.push((i, overlap));
                }
                i += 1;
            }
            if w.is_empty() {
                w.push(((((lo + hi) * 0.5) as usize).min(n_in - 1), 1.0));
            }
            w
        })
        .collect()
}

/// Signed raster, typically a differential `target - canvas` in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SignedImage {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl SignedImage {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> f32 {
        self.data[(row * self.width + col) * 3 + ch]
    }

    /// Element-wise `target - canvas`.
    pub fn difference(target: &CanvasImage, canvas: &CanvasImage) -> Result<Self> {
        target.ensure_same_shape(canvas)?;
        let data = target.data().iter().zip(canvas.data()).map(|(t, c)| t - c).collect();
        Ok(Self {
            height: target.height(),
            width: target.width(),
            data,
        })
    }

    /// Per-pixel maximum absolute channel value.
    pub fn magnitude(&self) -> Vec<f32> {
        self.data
            .chunks_exact(3)
            .map(|p| p.iter().fold(0f32, |m, v| m.max(v.abs())))
            .collect()
    }

    /// Shifted and scaled into `[0,1]` for viewing.
    pub fn to_viewable(&self) -> CanvasImage {
        let data = self.data.iter().map(|v| (v * 0.5 + 0.5).clamp(0.0, 1.0)).collect();
        CanvasImage::from_vec(self.height, self.width, data).expect("same length")
    }

    pub fn to_tensor(&self, device: &Device, dtype: DType) -> Result<Tensor> {
        let t = Tensor::from_slice(&self.data, (self.height, self.width, 3), device)?
            .permute((2, 0, 1))?
            .contiguous()?
            .to_dtype(dtype)?;
        Ok(t)
    }
}
