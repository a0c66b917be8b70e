//! Differential-query neural oil painting.
//!
//! A differentiable stroke renderer, a self-supervised stroke synthesizer, a
//! transformer painter whose decoder queries come from the differential image
//! `target - canvas`, a WGAN-GP critic, the matched-stroke training objective
//! and a coarse-to-fine inference pipeline that emits a replayable stroke plan.

pub mod canvas;
pub mod checkpoint;
pub mod critic;
pub mod error;
pub mod eval;
pub mod inference;
pub mod losses;
pub mod model;
pub mod nn;
pub mod render;
pub mod stroke;
pub mod synthesis;
pub mod training;

pub use canvas::{CanvasImage, SignedImage};
pub use critic::{Critic, CriticConfig, CriticFn};
pub use error::{Error, Result};
pub use inference::{PaintOptions, StrokePlan};
pub use model::{Painter, PainterConfig, PredictedStrokes};
pub use render::{Brush, BrushTexture, RenderedStroke};
pub use stroke::{StrokeParams, StrokeSet};
pub use synthesis::{SampleBatch, SynthConfig};
pub use training::{TrainConfig, Trainer};
