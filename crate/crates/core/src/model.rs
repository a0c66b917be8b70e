//! The differential-query painter.
//!
//! Three coordinate-aware convolutional encoders map the canvas, target and
//! differential patches to `(P/4) x (P/4)` feature grids. Their tokens are
//! concatenated, tagged with learned positional embeddings and fused by a
//! pre-norm transformer encoder. The decoder's queries are a learned linear
//! reduction of the differential tokens (`(P/4)^2 -> N` along the token
//! axis); each decoder block runs self-attention over the queries,
//! cross-attention into the fused tokens and a feed-forward layer. Two MLP
//! heads emit the stroke parameters and one confidence logit per query.

use candle_core::{DType, Device, IndexOp, Tensor, D};
use candle_nn::VarMap;

use crate::error::{shape_err, Error, Result};
use crate::nn::{Conv2d, Init, LayerNorm, Linear, ParamStore};
use crate::stroke::{wrap_unit, StrokeParams, StrokeSet, PARAM_COUNT};

/// Lower bound on predicted extents.
pub const MIN_EXTENT: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PainterConfig {
    pub patch_size: usize,
    pub max_strokes: usize,
    pub width: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    /// When false, the differential encoder is dropped, its tokens are
    /// zeros and the queries are learned constants.
    pub use_differential: bool,
    /// When false, no coordinate channels are concatenated anywhere.
    pub use_coord: bool,
}

impl PainterConfig {
    pub fn full(patch_size: usize, max_strokes: usize) -> Self {
        Self {
            patch_size,
            max_strokes,
            width: 128,
            enc_layers: 3,
            dec_layers: 3,
            heads: 8,
            ffn_mult: 4,
            use_differential: true,
            use_coord: true,
        }
    }

    /// Half-width preset for single-machine runs.
    pub fn desk(patch_size: usize, max_strokes: usize) -> Self {
        Self {
            width: 64,
            enc_layers: 2,
            dec_layers: 2,
            heads: 4,
            ..Self::full(patch_size, max_strokes)
        }
    }

    pub fn grid_side(&self) -> usize {
        self.patch_size / 4
    }

    pub fn tokens_per_map(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch_size < 8 || self.patch_size % 4 != 0 {
            return bad(format!(
                "patch size {} must be a multiple of 4 and >= 8",
                self.patch_size
            ));
        }
        if self.max_strokes == 0 {
            return bad("max_strokes must be positive".into());
        }
        if self.heads == 0 || self.width % self.heads != 0 || self.width % 4 != 0 {
            return bad(format!(
                "width {} must be divisible by heads {} and by 4",
                self.width, self.heads
            ));
        }
        Ok(())
    }
}

/// Coordinate channels `(2, h, w)`: channel 0 is x, channel 1 is y, each
/// linearly spanning `[-1, 1]`; a single row or column sits at 0.
pub fn coord_channels(h: usize, w: usize, device: &Device, dtype: DType) -> Result<Tensor> {
    let axis = |n: usize| -> Vec<f64> {
        if n <= 1 {
            vec![0.0; n]
        } else {
            (0..n).map(|i| -1.0 + 2.0 * i as f64 / (n - 1) as f64).collect()
        }
    };
    let xs = Tensor::from_vec(axis(w), (1, w), device)?.broadcast_as((h, w))?;
    let ys = Tensor::from_vec(axis(h), (h, 1), device)?.broadcast_as((h, w))?;
    Ok(Tensor::stack(&[xs, ys], 0)?.to_dtype(dtype)?)
}

/// Convolutional encoder for one input image.
#[derive(Debug, Clone)]
pub struct LocalEncoder {
    convs: [Conv2d; 3],
    coords: Option<Tensor>,
    patch_size: usize,
}

impl LocalEncoder {
    fn new(store: &mut ParamStore, name: &str, cfg: &PainterConfig) -> Result<Self> {
        let c_in = if cfg.use_coord { 5 } else { 3 };
        let (c1, c2, c3) = (cfg.width / 4, cfg.width / 2, cfg.width);
        let convs = [
            store.conv2d(&format!("{name}.conv0"), c_in, c1, 3, 1, 1)?,
            store.conv2d(&format!("{name}.conv1"), c1, c2, 4, 2, 1)?,
            store.conv2d(&format!("{name}.conv2"), c2, c3, 4, 2, 1)?,
        ];
        let coords = if cfg.use_coord {
            Some(coord_channels(cfg.patch_size, cfg.patch_size, store.device(), store.dtype())?.unsqueeze(0)?)
        } else {
            None
        };
        Ok(Self {
            convs,
            coords,
            patch_size: cfg.patch_size,
        })
    }

    /// `(B, 3, P, P) -> (B, C, P/4, P/4)`.
    pub fn forward(&self, image: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = image.dims4()?;
        let p = self.patch_size;
        if c != 3 || h != p || w != p {
            return Err(shape_err(format!("(B, 3, {p}, {p})"), format!("{:?}", image.dims())));
        }
        let x = match &self.coords {
            Some(coords) => Tensor::cat(&[image.clone(), coords.broadcast_as((b, 2, p, p))?], 1)?,
            None => image.clone(),
        };
        let x = self.convs[0].forward(&x)?.relu()?;
        let x = self.convs[1].forward(&x)?.relu()?;
        self.convs[2].forward(&x)
    }
}

#[derive(Debug, Clone)]
struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
}

impl Attention {
    fn new(store: &mut ParamStore, name: &str, width: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            q: store.linear(&format!("{name}.q"), width, width)?,
            k: store.linear(&format!("{name}.k"), width, width)?,
            v: store.linear(&format!("{name}.v"), width, width)?,
            o: store.linear(&format!("{name}.o"), width, width)?,
            heads,
        })
    }

    fn split(&self, x: &Tensor) -> Result<Tensor> {
        let (b, t, c) = x.dims3()?;
        Ok(x.reshape((b, t, self.heads, c / self.heads))?
            .transpose(1, 2)?
            .contiguous()?)
    }

    /// `softmax(Q K^T / sqrt(l)) V` per head; returns the output and the
    /// attention weights `(B, H, Tq, Tk)`.
    fn forward(&self, queries: &Tensor, keys: &Tensor) -> Result<(Tensor, Tensor)> {
        let (b, tq, c) = queries.dims3()?;
        let q = self.split(&self.q.forward(queries)?)?;
        let k = self.split(&self.k.forward(keys)?)?;
        let v = self.split(&self.v.forward(keys)?)?;
        let scale = 1.0 / ((c / self.heads) as f64).sqrt();
        let scores = (q.matmul(&k.t()?)? * scale)?;
        let weights = candle_nn::ops::softmax_last_dim(&scores)?;
        let out = weights.matmul(&v)?.transpose(1, 2)?.reshape((b, tq, c))?;
        Ok((self.o.forward(&out)?, weights))
    }
}

#[derive(Debug, Clone)]
struct FeedForward {
    up: Linear,
    down: Linear,
}

impl FeedForward {
    fn new(store: &mut ParamStore, name: &str, width: usize, mult: usize) -> Result<Self> {
        Ok(Self {
            up: store.linear(&format!("{name}.up"), width, width * mult)?,
            down: store.linear(&format!("{name}.down"), width * mult, width)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.down.forward(&self.up.forward(x)?.gelu_erf()?)
    }
}

#[derive(Debug, Clone)]
struct EncoderBlock {
    norm1: LayerNorm,
    attn: Attention,
    norm2: LayerNorm,
    ffn: FeedForward,
}

impl EncoderBlock {
    fn new(store: &mut ParamStore, name: &str, cfg: &PainterConfig) -> Result<Self> {
        Ok(Self {
            norm1: store.layer_norm(&format!("{name}.norm1"), cfg.width)?,
            attn: Attention::new(store, &format!("{name}.attn"), cfg.width, cfg.heads)?,
            norm2: store.layer_norm(&format!("{name}.norm2"), cfg.width)?,
            ffn: FeedForward::new(store, &format!("{name}.ffn"), cfg.width, cfg.ffn_mult)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.norm1.forward(x)?;
        let x = (x + self.attn.forward(&h, &h)?.0)?;
        let h = self.norm2.forward(&x)?;
        Ok((&x + self.ffn.forward(&h)?)?)
    }
}

#[derive(Debug, Clone)]
struct DecoderBlock {
    norm1: LayerNorm,
    self_attn: Attention,
    norm2: LayerNorm,
    cross_attn: Attention,
    norm3: LayerNorm,
    ffn: FeedForward,
}

impl DecoderBlock {
    fn new(store: &mut ParamStore, name: &str, cfg: &PainterConfig) -> Result<Self> {
        Ok(Self {
            norm1: store.layer_norm(&format!("{name}.norm1"), cfg.width)?,
            self_attn: Attention::new(store, &format!("{name}.self_attn"), cfg.width, cfg.heads)?,
            norm2: store.layer_norm(&format!("{name}.norm2"), cfg.width)?,
            cross_attn: Attention::new(store, &format!("{name}.cross_attn"), cfg.width, cfg.heads)?,
            norm3: store.layer_norm(&format!("{name}.norm3"), cfg.width)?,
            ffn: FeedForward::new(store, &format!("{name}.ffn"), cfg.width, cfg.ffn_mult)?,
        })
    }

    fn forward(&self, queries: &Tensor, fused: &Tensor) -> Result<(Tensor, Tensor)> {
        let h = self.norm1.forward(queries)?;
        let x = (queries + self.self_attn.forward(&h, &h)?.0)?;
        let h = self.norm2.forward(&x)?;
        let (cross, weights) = self.cross_attn.forward(&h, fused)?;
        let x = (x + cross)?;
        let h = self.norm3.forward(&x)?;
        Ok(((&x + self.ffn.forward(&h)?)?, weights))
    }
}

/// Raw model output for a batch.
#[derive(Debug, Clone)]
pub struct PainterOutput {
    /// `(B, N, 8)`, each slot inside its stroke domain.
    pub strokes: Tensor,
    /// `(B, N)` unbounded confidence logits.
    pub logits: Tensor,
    /// First decoder layer cross-attention `(B, H, N, 3 (P/4)^2)`.
    pub first_cross_attention: Tensor,
}

/// Per-sample predictions converted to plain strokes.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictedStrokes {
    pub strokes: Vec<StrokeParams>,
    pub confidences: Vec<f64>,
}

impl PredictedStrokes {
    pub fn as_set(&self) -> StrokeSet {
        StrokeSet {
            strokes: self.strokes.clone(),
            confidences: self.confidences.clone(),
        }
    }

    /// Strokes the inference rule draws (`logit >= 0`), in order.
    pub fn drawn(&self) -> impl Iterator<Item = (&StrokeParams, f64)> {
        self.strokes
            .iter()
            .zip(self.confidences.iter().copied())
            .filter(|(_, c)| crate::stroke::is_drawn(*c))
    }
}

pub struct Painter {
    cfg: PainterConfig,
    enc_canvas: LocalEncoder,
    enc_target: LocalEncoder,
    enc_diff: Option<LocalEncoder>,
    pos_embed: Tensor,
    encoder: Vec<EncoderBlock>,
    fused_norm: LayerNorm,
    query_reduce: Option<Linear>,
    query_const: Option<Tensor>,
    decoder: Vec<DecoderBlock>,
    out_norm: LayerNorm,
    param_head: (Linear, Linear),
    conf_head: (Linear, Linear),
    vars: VarMap,
}

impl Painter {
    pub fn new(cfg: PainterConfig, seed: u64, device: &Device, dtype: DType) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new(seed, device, dtype);
        let t = cfg.tokens_per_map();
        let c = cfg.width;
        let enc_canvas = LocalEncoder::new(&mut store, "enc_canvas", &cfg)?;
        let enc_target = LocalEncoder::new(&mut store, "enc_target", &cfg)?;
        let enc_diff = if cfg.use_differential {
            Some(LocalEncoder::new(&mut store, "enc_diff", &cfg)?)
        } else {
            None
        };
        let pos_embed = store.get("pos_embed", &[3 * t, c], Init::Normal(0.02))?;
        let encoder = (0..cfg.enc_layers)
            .map(|i| EncoderBlock::new(&mut store, &format!("encoder.{i}"), &cfg))
            .collect::<Result<Vec<_>>>()?;
        let fused_norm = store.layer_norm("fused_norm", c)?;
        let (query_reduce, query_const) = if cfg.use_differential {
            (Some(store.linear("query_reduce", t, cfg.max_strokes)?), None)
        } else {
            (
                None,
                Some(store.get("query_const", &[cfg.max_strokes, c], Init::Normal(0.02))?),
            )
        };
        let decoder = (0..cfg.dec_layers)
            .map(|i| DecoderBlock::new(&mut store, &format!("decoder.{i}"), &cfg))
            .collect::<Result<Vec<_>>>()?;
        let out_norm = store.layer_norm("out_norm", c)?;
        let param_head = (
            store.linear("param_head.0", c, c)?,
            store.linear("param_head.1", c, PARAM_COUNT)?,
        );
        let conf_head = (store.linear("conf_head.0", c, c)?, store.linear("conf_head.1", c, 1)?);
        Ok(Self {
            cfg,
            enc_canvas,
            enc_target,
            enc_diff,
            pos_embed,
            encoder,
            fused_norm,
            query_reduce,
            query_const,
            decoder,
            out_norm,
            param_head,
            conf_head,
            vars: store.into_varmap(),
        })
    }

    pub fn config(&self) -> &PainterConfig {
        &self.cfg
    }

    pub fn varmap(&self) -> &VarMap {
        &self.vars
    }

    pub fn device(&self) -> Device {
        self.pos_embed.device().clone()
    }

    pub fn dtype(&self) -> DType {
        self.pos_embed.dtype()
    }

    /// `(B, C, g, g) -> (B, g*g, C)`.
    fn tokens(map: &Tensor) -> Result<Tensor> {
        Ok(map.flatten_from(2)?.transpose(1, 2)?.contiguous()?)
    }

    /// Local feature maps `F_c, F_t, F_d`.
    pub fn encode_local(&self, canvas: &Tensor, target: &Tensor, differential: &Tensor) -> Result<[Tensor; 3]> {
        let fc = self.enc_canvas.forward(canvas)?;
        let ft = self.enc_target.forward(target)?;
        let fd = match &self.enc_diff {
            Some(enc) => enc.forward(differential)?,
            None => fc.zeros_like()?,
        };
        Ok([fc, ft, fd])
    }

    /// Fused tokens `F_kv` of length `3 (P/4)^2`.
    pub fn dq_encode(&self, fc: &Tensor, ft: &Tensor, fd: &Tensor) -> Result<Tensor> {
        if fc.dims() != ft.dims() || fc.dims() != fd.dims() {
            return Err(shape_err(
                format!("{:?}", fc.dims()),
                format!("{:?} / {:?}", ft.dims(), fd.dims()),
            ));
        }
        let tokens = Tensor::cat(&[Self::tokens(fc)?, Self::tokens(ft)?, Self::tokens(fd)?], 1)?;
        let mut x = tokens.broadcast_add(&self.pos_embed)?;
        for block in &self.encoder {
            x = block.forward(&x)?;
        }
        self.fused_norm.forward(&x)
    }

    /// Decoded query tokens `(B, N, C)` and first-layer cross-attention.
    pub fn dq_decode(&self, fd: &Tensor, fused: &Tensor) -> Result<(Tensor, Tensor)> {
        let b = fused.dim(0)?;
        let mut q = match (&self.query_reduce, &self.query_const) {
            (Some(reduce), _) => {
                let fd_tokens = Self::tokens(fd)?;
                reduce
                    .forward(&fd_tokens.transpose(1, 2)?)?
                    .transpose(1, 2)?
                    .contiguous()?
            }
            (None, Some(c)) => c
                .unsqueeze(0)?
                .broadcast_as((b, self.cfg.max_strokes, self.cfg.width))?
                .contiguous()?,
            (None, None) => unreachable!("one query source is always configured"),
        };
        let mut first = None;
        for block in &self.decoder {
            let (next, weights) = block.forward(&q, fused)?;
            q = next;
            first.get_or_insert(weights);
        }
        let first = first.ok_or_else(|| Error::Config("decoder has no layers".into()))?;
        Ok((self.out_norm.forward(&q)?, first))
    }

    /// Stroke parameters squashed into their domains and raw logits.
    pub fn predict_strokes(&self, tokens: &Tensor) -> Result<(Tensor, Tensor)> {
        let raw = self.param_head.1.forward(&self.param_head.0.forward(tokens)?.relu()?)?;
        let logits = self
            .conf_head
            .1
            .forward(&self.conf_head.0.forward(tokens)?.relu()?)?
            .squeeze(D::Minus1)?;
        Ok((squash_params(&raw)?, logits))
    }

    pub fn forward(&self, canvas: &Tensor, target: &Tensor, differential: &Tensor) -> Result<PainterOutput> {
        let [fc, ft, fd] = self.encode_local(canvas, target, differential)?;
        let fused = self.dq_encode(&fc, &ft, &fd)?;
        let (tokens, first_cross_attention) = self.dq_decode(&fd, &fused)?;
        let (strokes, logits) = self.predict_strokes(&tokens)?;
        Ok(PainterOutput {
            strokes,
            logits,
            first_cross_attention,
        })
    }

    /// First-layer cross-attention restricted to the differential-image keys,
    /// renormalized, averaged over heads: `(B, N, P/4, P/4)`.
    pub fn attention_maps(&self, canvas: &Tensor, target: &Tensor, differential: &Tensor) -> Result<Tensor> {
        let out = self.forward(canvas, target, differential)?;
        attention_grid(&out.first_cross_attention, self.cfg.grid_side())
    }
}

/// Maps raw head output onto the stroke domains: sigmoid for position and
/// color, a floored sigmoid for extents and the fractional part for the
/// periodic angle.
pub fn squash_params(raw: &Tensor) -> Result<Tensor> {
    let sig = candle_nn::ops::sigmoid(raw)?;
    let pos = sig.narrow(D::Minus1, 0, 2)?;
    let ext = sig.narrow(D::Minus1, 2, 2)?.affine(1.0 - MIN_EXTENT, MIN_EXTENT)?;
    let z = raw.narrow(D::Minus1, 4, 1)?;
    let theta = (&z - z.floor()?)?;
    let color = sig.narrow(D::Minus1, 5, 3)?;
    Ok(Tensor::cat(&[pos, ext, theta, color], D::Minus1)?)
}

/// Keeps the differential-key slice of cross-attention weights
/// `(B, H, N, 3T)`, renormalizes each row and averages heads.
pub fn attention_grid(weights: &Tensor, side: usize) -> Result<Tensor> {
    let (b, _, n, keys) = weights.dims4()?;
    let t = side * side;
    if keys != 3 * t {
        return Err(shape_err(3 * t, keys));
    }
    let d = weights.narrow(3, 2 * t, t)?;
    let d = d.broadcast_div(&d.sum_keepdim(3)?)?;
    Ok(d.mean(1)?.reshape((b, n, side, side))?)
}

/// Converts a batch of predictions into per-sample stroke lists.
pub fn to_predictions(strokes: &Tensor, logits: &Tensor) -> Result<Vec<PredictedStrokes>> {
    let params = strokes.to_dtype(DType::F64)?.to_vec3::<f64>()?;
    let conf = logits.to_dtype(DType::F64)?.to_vec2::<f64>()?;
    Ok(params
        .into_iter()
        .zip(conf)
        .map(|(rows, confidences)| PredictedStrokes {
            strokes: rows
                .into_iter()
                .map(|p| {
                    let mut s = StrokeParams::from_array(p.try_into().expect("8 slots"));
                    s.theta = wrap_unit(s.theta);
                    s.squash_into_domain()
                })
                .collect(),
            confidences,
        })
        .collect())
}

/// Per-query attention for one sample `(N, g, g)` as nested vectors.
pub fn attention_to_vec(maps: &Tensor, sample: usize) -> Result<Vec<Vec<Vec<f32>>>> {
    Ok(maps.i(sample)?.to_dtype(DType::F32)?.to_vec3::<f32>()?)
}
