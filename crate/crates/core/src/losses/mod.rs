//! Training objective: pixel reconstruction, matched stroke loss with
//! confidence regularization, WGAN-GP adversarial terms and the adaptive
//! balance between pixel and adversarial losses.

pub mod gaussian;
pub mod matching;

use candle_core::{DType, Tensor, D};

use crate::critic::CriticFn;
use crate::error::{shape_err, Result};
use crate::stroke::{StrokeParams, PARAM_COUNT};

pub use gaussian::{gaussian_wasserstein, stroke_gaussian};
pub use matching::{match_strokes, Matching};

pub const LAMBDA_P: f64 = 8.0;
pub const LAMBDA_W: f64 = 10.0;
pub const LAMBDA_C: f64 = 0.1;
pub const LAMBDA_DIS: f64 = 10.0;
/// Guard in the adaptive balancing factor.
pub const GAMMA_EPS: f64 = 1e-8;

/// Loss weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub pixel: f64,
    pub wasserstein: f64,
    pub confidence: f64,
    pub gradient_penalty: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            pixel: LAMBDA_P,
            wasserstein: LAMBDA_W,
            confidence: LAMBDA_C,
            gradient_penalty: LAMBDA_DIS,
        }
    }
}

/// Mean absolute parameter difference with `theta` compared on the circle.
pub fn stroke_param_l1(u: &StrokeParams, v: &StrokeParams) -> f64 {
    let (a, b) = (u.to_array(), v.to_array());
    let mut sum = 0.0;
    for i in 0..PARAM_COUNT {
        let d = (a[i] - b[i]).abs();
        sum += if i == 4 { d.min(1.0 - d).abs() } else { d };
    }
    sum / PARAM_COUNT as f64
}

/// Binary cross-entropy of `sigmoid(logit)` against `label`, computed in the
/// overflow-safe logit form.
pub fn confidence_bce(label: f64, logit: f64) -> f64 {
    logit.max(0.0) - logit * label + (-logit.abs()).exp().ln_1p()
}

/// `lambda_p * mean |target - rendered|` over tensors of equal shape.
pub fn pixel_loss(target: &Tensor, rendered: &Tensor, lambda_p: f64) -> Result<Tensor> {
    if target.dims() != rendered.dims() {
        return Err(shape_err(
            format!("{:?}", target.dims()),
            format!("{:?}", rendered.dims()),
        ));
    }
    Ok(((target - rendered)?.abs()?.mean_all()? * lambda_p)?)
}

/// Per-pair `D_L1` over the last axis of `(..., 8)` tensors.
pub fn param_l1_tensor(u: &Tensor, v: &Tensor) -> Result<Tensor> {
    let d = (u - v)?.abs()?;
    let lead = d.narrow(D::Minus1, 0, 4)?;
    let theta = d.narrow(D::Minus1, 4, 1)?;
    let tail = d.narrow(D::Minus1, 5, 3)?;
    let wrapped = theta.minimum(&theta.affine(-1.0, 1.0)?.abs()?)?;
    let all = Tensor::cat(&[lead, wrapped, tail], D::Minus1)?;
    Ok(all.mean(D::Minus1)?)
}

/// Element-wise BCE-with-logits.
pub fn bce_with_logits(labels: &Tensor, logits: &Tensor) -> Result<Tensor> {
    let pos = logits.relu()?;
    let soft = logits.abs()?.neg()?.exp()?.affine(1.0, 1.0)?.log()?;
    Ok(((pos - (logits * labels)?)? + soft)?)
}

/// The two pieces of the stroke loss, batch-averaged.
#[derive(Debug, Clone)]
pub struct StrokeLoss {
    /// Matched term: `(1/N) sum_u [c_u (D_L1 + lambda_W D_W) + D_bce]`.
    pub matched: Tensor,
    /// `lambda_c (1/N) sum_u |c_hat_u|`.
    pub regularizer: Tensor,
    pub matchings: Vec<Matching>,
}

impl StrokeLoss {
    pub fn total(&self) -> Result<Tensor> {
        Ok((&self.matched + &self.regularizer)?)
    }
}

/// Stroke loss over a batch: targets `(B, N, 8)` with labels `(B, N)`,
/// predictions `(B, N, 8)` with logits `(B, N)`. Matching is recomputed per
/// sample on detached values.
pub fn stroke_loss(
    target: &Tensor,
    labels: &Tensor,
    predicted: &Tensor,
    logits: &Tensor,
    weights: &LossWeights,
) -> Result<StrokeLoss> {
    let (b, n, k) = target.dims3()?;
    if predicted.dims() != [b, n, k] || labels.dims() != [b, n] || logits.dims() != [b, n] || k != PARAM_COUNT {
        return Err(shape_err(
            format!("targets {:?}", target.dims()),
            format!("predictions {:?}, logits {:?}", predicted.dims(), logits.dims()),
        ));
    }
    let to_strokes = |t: &Tensor| -> Result<Vec<Vec<StrokeParams>>> {
        let rows = t.to_dtype(DType::F64)?.to_vec3::<f64>()?;
        Ok(rows
            .into_iter()
            .map(|set| {
                set.into_iter()
                    .map(|p| StrokeParams::from_array(p.try_into().expect("8 slots")))
                    .collect()
            })
            .collect())
    };
    let tgt = to_strokes(target)?;
    let pred = to_strokes(predicted)?;
    let mut index = Vec::with_capacity(b * n);
    let mut matchings = Vec::with_capacity(b);
    for (i, (t, p)) in tgt.iter().zip(&pred).enumerate() {
        let m = matching::match_strokes_weighted(t, p, weights.wasserstein)?;
        index.extend(m.assignment.iter().map(|&j| (i * n + j) as u32));
        matchings.push(m);
    }
    let index = Tensor::from_vec(index, b * n, predicted.device())?;
    let matched_pred = predicted
        .reshape((b * n, k))?
        .index_select(&index, 0)?
        .reshape((b, n, k))?;
    let matched_logits = logits.reshape(b * n)?.index_select(&index, 0)?.reshape((b, n))?;

    let geometric = (param_l1_tensor(target, &matched_pred)?
        + (gaussian::wasserstein_tensor(target, &matched_pred)? * weights.wasserstein)?)?;
    let per_pair = ((labels * geometric)? + bce_with_logits(labels, &matched_logits)?)?;
    let matched = per_pair.mean_all()?;
    let regularizer = (logits.abs()?.mean_all()? * weights.confidence)?;
    Ok(StrokeLoss {
        matched,
        regularizer,
        matchings,
    })
}

/// Critic-side WGAN-GP loss and its pieces.
#[derive(Debug, Clone)]
pub struct CriticLoss {
    pub loss: Tensor,
    /// `mean D(fake) - mean D(real)`.
    pub wasserstein: Tensor,
    /// `lambda_dis * mean (||grad D(interp)|| - 1)^2`.
    pub penalty: Tensor,
}

/// Gradient norm that is exactly zero for a zero gradient while keeping a
/// finite derivative there.
fn safe_norm(sum_sq: &Tensor) -> Result<Tensor> {
    const EPS: f64 = 1e-20;
    Ok((sum_sq.affine(1.0, EPS)?.sqrt()? - EPS.sqrt())?)
}

/// `mean D(fake) - mean D(real) + lambda_dis mean (||grad D(x~)|| - 1)^2`
/// with `x~ = eps real + (1 - eps) fake`. `eps` has shape `(B,)`; `fake`
/// should already be detached from the painter graph.
pub fn critic_loss<C: CriticFn + ?Sized>(
    critic: &C,
    real: &Tensor,
    fake: &Tensor,
    eps: &Tensor,
    lambda_dis: f64,
) -> Result<CriticLoss> {
    let b = real.dim(0)?;
    if fake.dims() != real.dims() || eps.dims() != [b] {
        return Err(shape_err(format!("{:?}", real.dims()), format!("{:?}", fake.dims())));
    }
    let e = eps.reshape((b, 1, 1, 1))?;
    let interp = (real.broadcast_mul(&e)? + fake.broadcast_mul(&e.affine(-1.0, 1.0)?)?)?;
    let wasserstein = (critic.score(fake)?.mean_all()? - critic.score(real)?.mean_all()?)?;
    let (_, grad) = critic.score_with_input_grad(&interp)?;
    let norm = safe_norm(&grad.sqr()?.flatten_from(1)?.sum(1)?)?;
    let penalty = ((norm - 1.0)?.sqr()?.mean_all()? * lambda_dis)?;
    let loss = (&wasserstein + &penalty)?;
    Ok(CriticLoss {
        loss,
        wasserstein,
        penalty,
    })
}

/// Wasserstein generator objective `-mean D(fake)`; gradients flow back
/// through `fake`.
pub fn generator_adv_loss<C: CriticFn + ?Sized>(critic: &C, fake: &Tensor) -> Result<Tensor> {
    Ok(critic.score(fake)?.mean_all()?.neg()?)
}

/// `gamma = |L_pixel| / (|L_adv| + eps)`, used as a constant coefficient.
pub fn adaptive_gamma(pixel: f64, adv: f64) -> f64 {
    pixel.abs() / (adv.abs() + GAMMA_EPS)
}

/// Named scalars for one training step.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossReport {
    pub pixel: f64,
    pub stroke_match: f64,
    pub confidence_reg: f64,
    pub adv_generator: f64,
    pub adv_critic: f64,
    pub total: f64,
    pub gamma: f64,
}

impl LossReport {
    pub const FIELDS: [&'static str; 7] = [
        "pixel",
        "stroke_match",
        "confidence_reg",
        "adv_generator",
        "adv_critic",
        "total",
        "gamma",
    ];

    /// Combines component values. With `adversarial = None` the adversarial
    /// terms and `gamma` are zero.
    pub fn assemble(pixel: f64, stroke_match: f64, confidence_reg: f64, adversarial: Option<(f64, f64)>) -> Self {
        let (adv_generator, adv_critic) = adversarial.unwrap_or((0.0, 0.0));
        let gamma = if adversarial.is_some() {
            adaptive_gamma(pixel, adv_generator)
        } else {
            0.0
        };
        Self {
            pixel,
            stroke_match,
            confidence_reg,
            adv_generator,
            adv_critic,
            total: pixel + stroke_match + confidence_reg + gamma * adv_generator,
            gamma,
        }
    }

    pub fn values(&self) -> [f64; 7] {
        [
            self.pixel,
            self.stroke_match,
            self.confidence_reg,
            self.adv_generator,
            self.adv_critic,
            self.total,
            self.gamma,
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.values().iter().all(|v| v.is_finite())
    }
}

/// Differentiable total objective. Returns the loss tensor and `gamma`.
pub fn total_loss(pixel: &Tensor, stroke: &Tensor, adv_generator: Option<&Tensor>) -> Result<(Tensor, f64)> {
    let base = (pixel + stroke)?;
    match adv_generator {
        None => Ok((base, 0.0)),
        Some(adv) => {
            let gamma = adaptive_gamma(scalar(pixel)?, scalar(adv)?);
            Ok(((base + (adv * gamma)?)?, gamma))
        }
    }
}

pub(crate) fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}
