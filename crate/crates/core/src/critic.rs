//! Wasserstein critic: five convolutional blocks (the first sees coordinate
//! channels), global average pooling and a linear head with no output
//! nonlinearity.
//!
//! The gradient penalty needs `d/d(params) ||d score / d input||`. Instead of
//! differentiating through a backward pass, [`Critic::score_with_input_grad`]
//! writes the input gradient out as an explicit forward graph (transposed
//! convolutions gated by the leaky-ReLU derivative masks), which ordinary
//! first-order autodiff then differentiates with respect to the weights.

use candle_core::{DType, Device, Tensor};
use candle_nn::VarMap;

use crate::error::{shape_err, Result};
use crate::model::coord_channels;
use crate::nn::{leaky_relu, leaky_relu_mask, Conv2d, Linear, ParamStore};

pub const LEAKY_SLOPE: f64 = 0.2;

/// Anything that scores images and can report its input gradient.
pub trait CriticFn {
    /// Scores `(B,)` for images `(B, 3, P, P)`.
    fn score(&self, images: &Tensor) -> Result<Tensor>;

    /// Scores and `d score_b / d images_b`, the latter differentiable with
    /// respect to the critic's parameters.
    fn score_with_input_grad(&self, images: &Tensor) -> Result<(Tensor, Tensor)>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CriticConfig {
    pub patch_size: usize,
    pub base_width: usize,
    pub blocks: usize,
    pub use_coord: bool,
}

impl CriticConfig {
    pub fn desk(patch_size: usize) -> Self {
        Self {
            patch_size,
            base_width: 32,
            blocks: 5,
            use_coord: true,
        }
    }

    pub fn full(patch_size: usize) -> Self {
        Self {
            base_width: 64,
            ..Self::desk(patch_size)
        }
    }
}

pub struct Critic {
    cfg: CriticConfig,
    convs: Vec<Conv2d>,
    /// Spatial side of each block's input.
    sides: Vec<usize>,
    head: Linear,
    coords: Option<Tensor>,
    vars: VarMap,
}

impl Critic {
    pub fn new(cfg: CriticConfig, seed: u64, device: &Device, dtype: DType) -> Result<Self> {
        let mut store = ParamStore::new(seed, device, dtype);
        let mut convs = Vec::with_capacity(cfg.blocks);
        let mut sides = Vec::with_capacity(cfg.blocks);
        let mut c_in = if cfg.use_coord { 5 } else { 3 };
        let mut side = cfg.patch_size;
        for i in 0..cfg.blocks {
            let c_out = cfg.base_width << i;
            sides.push(side);
            // Downsample while there is room; afterwards keep the 1x1 grid.
            let conv = if side >= 2 {
                side /= 2;
                store.conv2d(&format!("block{i}"), c_in, c_out, 4, 2, 1)?
            } else {
                store.conv2d(&format!("block{i}"), c_in, c_out, 3, 1, 1)?
            };
            convs.push(conv);
            c_in = c_out;
        }
        let head = store.linear("head", c_in, 1)?;
        let coords = if cfg.use_coord {
            Some(coord_channels(cfg.patch_size, cfg.patch_size, device, dtype)?.unsqueeze(0)?)
        } else {
            None
        };
        Ok(Self {
            cfg,
            convs,
            sides,
            head,
            coords,
            vars: store.into_varmap(),
        })
    }

    pub fn config(&self) -> &CriticConfig {
        &self.cfg
    }

    pub fn varmap(&self) -> &VarMap {
        &self.vars
    }

    fn check(&self, images: &Tensor) -> Result<usize> {
        let (b, c, h, w) = images.dims4()?;
        let p = self.cfg.patch_size;
        if c != 3 || h != p || w != p {
            return Err(shape_err(format!("(B, 3, {p}, {p})"), format!("{:?}", images.dims())));
        }
        Ok(b)
    }

    fn input(&self, images: &Tensor, b: usize) -> Result<Tensor> {
        match &self.coords {
            Some(c) => {
                let (_, _, h, w) = c.dims4()?;
                Ok(Tensor::cat(&[images.clone(), c.broadcast_as((b, 2, h, w))?], 1)?)
            }
            None => Ok(images.clone()),
        }
    }

    /// Forward pass keeping every pre-activation.
    fn forward_trace(&self, images: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let b = self.check(images)?;
        let mut h = self.input(images, b)?;
        let mut pre = Vec::with_capacity(self.convs.len());
        for conv in &self.convs {
            let z = conv.forward(&h)?;
            h = leaky_relu(&z, LEAKY_SLOPE)?;
            pre.push(z);
        }
        let pooled = h.mean((2, 3))?;
        let score = self.head.forward(&pooled)?.squeeze(1)?;
        Ok((score, pre))
    }
}

impl CriticFn for Critic {
    fn score(&self, images: &Tensor) -> Result<Tensor> {
        Ok(self.forward_trace(images)?.0)
    }

    fn score_with_input_grad(&self, images: &Tensor) -> Result<(Tensor, Tensor)> {
        let (score, pre) = self.forward_trace(images)?;
        let last = pre.last().expect("at least one block");
        let (b, c, h, w) = last.dims4()?;
        // d score / d pooled = head weight; pooling spreads it evenly.
        let mut grad = (self.head.weight.reshape((1, c, 1, 1))? / (h * w) as f64)?.broadcast_as((b, c, h, w))?;
        for (i, conv) in self.convs.iter().enumerate().rev() {
            grad = (grad * leaky_relu_mask(&pre[i], LEAKY_SLOPE)?)?;
            grad = conv.transpose_forward(&grad, self.sides[i])?;
        }
        Ok((score, grad.narrow(1, 0, 3)?))
    }
}
