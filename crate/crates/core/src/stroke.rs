//! Parametric brushstrokes.
//!
//! All eight fields are normalized to the frame: `x`, `y` locate the center,
//! `w` and `h` are full extents, `theta` is a fraction of a half turn and
//! `r`, `g`, `b` are linear color channels.

use crate::error::{Error, Result};

pub const PARAM_COUNT: usize = 8;

pub const PARAM_NAMES: [&str; PARAM_COUNT] = ["x", "y", "h", "w", "theta", "r", "g", "b"];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StrokeParams {
    pub x: f64,
    pub y: f64,
    pub h: f64,
    pub w: f64,
    pub theta: f64,
    pub r: f64,
    pub g: f64,
    pub b: f64,
}

impl StrokeParams {
    pub fn new(x: f64, y: f64, h: f64, w: f64, theta: f64, r: f64, g: f64, b: f64) -> Self {
        Self {
            x,
            y,
            h,
            w,
            theta,
            r,
            g,
            b,
        }
    }

    /// Parameters in canonical slot order `x y h w theta r g b`.
    pub fn to_array(&self) -> [f64; PARAM_COUNT] {
        [self.x, self.y, self.h, self.w, self.theta, self.r, self.g, self.b]
    }

    pub fn from_array(v: [f64; PARAM_COUNT]) -> Self {
        Self::new(v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7])
    }

    /// Rotation in radians, in `[0, pi)` for valid strokes.
    pub fn angle(&self) -> f64 {
        self.theta * std::f64::consts::PI
    }

    pub fn color(&self) -> [f64; 3] {
        [self.r, self.g, self.b]
    }

    /// Checks the full domain: finite, `x,y,r,g,b` in `[0,1]`, `h,w > 0`,
    /// `theta` in `[0,1)`.
    pub fn validate(&self) -> Result<()> {
        self.validate_geometry()?;
        for (i, v) in self.to_array().into_iter().enumerate() {
            let name = PARAM_NAMES[i];
            let ok = match name {
                "h" | "w" => v > 0.0,
                "theta" => (0.0..1.0).contains(&v),
                _ => (0.0..=1.0).contains(&v),
            };
            if !ok {
                return Err(Error::ParamDomain { field: name, value: v });
            }
        }
        Ok(())
    }

    /// The weaker check the rasterizer needs: finite everywhere and positive
    /// extents. Out-of-frame centers and unwrapped angles are allowed.
    pub fn validate_geometry(&self) -> Result<()> {
        for (i, v) in self.to_array().into_iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::ParamDomain {
                    field: PARAM_NAMES[i],
                    value: v,
                });
            }
        }
        if self.h <= 0.0 {
            return Err(Error::ParamDomain {
                field: "h",
                value: self.h,
            });
        }
        if self.w <= 0.0 {
            return Err(Error::ParamDomain {
                field: "w",
                value: self.w,
            });
        }
        Ok(())
    }

    /// Maps an arbitrary raw vector into the valid domain: clamps the
    /// bounded slots and wraps `theta` onto `[0,1)`.
    pub fn squash_into_domain(mut self) -> Self {
        let clamp01 = |v: f64| v.clamp(0.0, 1.0);
        self.x = clamp01(self.x);
        self.y = clamp01(self.y);
        self.r = clamp01(self.r);
        self.g = clamp01(self.g);
        self.b = clamp01(self.b);
        self.h = self.h.clamp(1e-6, 1.0);
        self.w = self.w.clamp(1e-6, 1.0);
        self.theta = wrap_unit(self.theta);
        self
    }
}

/// Wraps onto `[0,1)`; guards the `1.0` that `rem_euclid` can return for
/// tiny negative inputs.
pub fn wrap_unit(v: f64) -> f64 {
    let t = v.rem_euclid(1.0);
    if t >= 1.0 {
        0.0
    } else {
        t
    }
}

/// An ordered set of strokes, each with a confidence. Ground-truth sets use
/// `{0, 1}` confidences; predictions carry raw logits.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StrokeSet {
    pub strokes: Vec<StrokeParams>,
    pub confidences: Vec<f64>,
}

impl StrokeSet {
    pub fn new(strokes: Vec<StrokeParams>, confidences: Vec<f64>) -> Result<Self> {
        if strokes.len() != confidences.len() {
            return Err(crate::error::shape_err(
                format!("{} confidences", strokes.len()),
                confidences.len(),
            ));
        }
        Ok(Self { strokes, confidences })
    }

    pub fn with_unit_confidence(strokes: Vec<StrokeParams>) -> Self {
        let confidences = vec![1.0; strokes.len()];
        Self { strokes, confidences }
    }

    pub fn len(&self) -> usize {
        self.strokes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.strokes.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&StrokeParams, f64)> {
        self.strokes.iter().zip(self.confidences.iter().copied())
    }

    /// Strokes whose ground-truth confidence is one.
    pub fn valid(&self) -> impl Iterator<Item = &StrokeParams> {
        self.iter().filter(|(_, c)| *c >= 0.5).map(|(s, _)| s)
    }
}

/// Inference-time validity rule: a stroke is drawn iff its logit is
/// non-negative.
pub fn is_drawn(logit: f64) -> bool {
    logit >= 0.0
}
