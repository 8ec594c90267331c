//! The toy segmentation network with a location-aware upsampling head.
//!
//! ```text
//! X ─ Conv3×3 ─ LReLU ─ Conv3×3 ─ LReLU ─ F ─ Conv1×1 ─ U (logits, h×w)
//!                                         │
//!                                         └ Conv1×1 ─ LReLU ─ Conv3×3 ─ PixelShuffle(k) ─ offsets (kh×kw)
//!
//! U, offsets ─ LaU(k) ─ bilinear(K/k) ─ logits (H×W) ─ loss
//! ```
//!
//! The offset branch ends in a zero-initialised convolution, so a fresh
//! network predicts zero offsets and the LaU stage starts out as bilinear.

use serde::{Deserialize, Serialize};

use crate::error::{LauError, Result};
use crate::losses::{
    candidate_weights, cross_entropy_grad, cross_entropy_map, offset_guided_weights,
    select_theta_opt, smooth_l1, smooth_l1_grad, CandidateSet, CoordinateMap, LossMap,
};
use crate::nn::{leaky_relu, leaky_relu_backward, ConvGrads, ConvLayer};
use crate::rng::Rng;
use crate::samplers::{
    bilinear_backward, bilinear_upsample, corner_upsample, lau_backward, lau_forward, pixel_shuffle,
    pixel_unshuffle, Corner, OffsetField,
};
use crate::tensor::{LabelMap, Tensor4};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    /// Plain per-pixel cross-entropy.
    Ce,
    /// Offset-guided loss: cross-entropy reweighted against the bilinear loss.
    Off,
    /// Offset regression loss over the LaU and corner candidates.
    Reg,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::Ce => "ce",
            LossKind::Off => "off",
            LossKind::Reg => "reg",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpsamplerKind {
    /// LaU for the first `k×`, bilinear for the rest.
    Lau,
    /// Bilinear for the whole factor; no offset branch.
    Bilinear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetConfig {
    pub in_channels: usize,
    pub classes: usize,
    pub decoder_channels: usize,
    /// Reduced channel count `C'` of the offset branch.
    pub hidden_channels: usize,
    /// Offset groups `M`: 1 (shared) or `classes`.
    pub groups: usize,
    pub lau_ratio: usize,
    pub total_upsample: usize,
    pub leaky_slope: f64,
    pub upsampler: UpsamplerKind,
    pub loss: LossKind,
    pub lambda: f64,
    pub gamma: f64,
    /// Decay for decoder layers; the offset branch always uses 0.
    pub weight_decay: f64,
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(LauError::config("classes", "need at least 2 classes"));
        }
        if self.in_channels == 0 {
            return Err(LauError::config("in_channels", "must be at least 1"));
        }
        if self.decoder_channels == 0 {
            return Err(LauError::config("decoder_channels", "must be at least 1"));
        }
        if self.hidden_channels == 0 {
            return Err(LauError::config("c_prime", "must be at least 1"));
        }
        if self.lau_ratio == 0 {
            return Err(LauError::config("lau_ratio", "must be at least 1"));
        }
        if self.total_upsample == 0 || !self.total_upsample.is_multiple_of(self.lau_ratio) {
            return Err(LauError::config(
                "lau_ratio",
                format!(
                    "lau_ratio {} must divide the output stride {}",
                    self.lau_ratio, self.total_upsample
                ),
            ));
        }
        if self.groups != 1 && self.groups != self.classes {
            return Err(LauError::config("m_channels", "must be 1 or equal to classes"));
        }
        if self.loss == LossKind::Reg && self.groups != 1 {
            return Err(LauError::config("m_channels", "the regression loss needs shared offsets (1)"));
        }
        if !(0.0..1.0).contains(&self.leaky_slope) {
            return Err(LauError::config("leaky_slope", "must lie in [0, 1)"));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(LauError::config("lambda", "must be finite and non-negative"));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(LauError::config("gamma", "must be finite and non-negative"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(LauError::config("weight_decay", "must be finite and non-negative"));
        }
        if self.upsampler == UpsamplerKind::Bilinear && self.loss != LossKind::Ce {
            return Err(LauError::config("loss", "the bilinear upsampler only supports `ce`"));
        }
        Ok(())
    }

    /// Bilinear factor applied after the LaU stage.
    pub fn residual_ratio(&self) -> usize {
        self.total_upsample / self.lau_ratio
    }
}

/// `Conv1×1 → LReLU → Conv3×3 → PixelShuffle(k)`, producing `2M` offset
/// channels at `k×` resolution as interleaved `(Δx, Δy)` pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct OffsetPredictor {
    pub reduce: ConvLayer,
    pub expand: ConvLayer,
    pub alpha: f64,
    pub ratio: usize,
    pub groups: usize,
}

struct PredictorCache {
    reduced: Tensor4,
    activated: Tensor4,
}

impl OffsetPredictor {
    pub fn new(
        in_ch: usize,
        hidden: usize,
        groups: usize,
        ratio: usize,
        alpha: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        Ok(OffsetPredictor {
            reduce: ConvLayer::uniform(in_ch, hidden, 1, rng)?,
            expand: ConvLayer::zeros(hidden, 2 * groups * ratio * ratio, 3)?,
            alpha,
            ratio,
            groups,
        })
    }

    pub fn forward(&self, features: &Tensor4) -> Result<OffsetField> {
        Ok(self.forward_cached(features)?.0)
    }

    fn forward_cached(&self, features: &Tensor4) -> Result<(OffsetField, PredictorCache)> {
        let reduced = self.reduce.forward(features)?;
        let activated = leaky_relu(&reduced, self.alpha);
        let expanded = self.expand.forward(&activated)?;
        let offsets = OffsetField::from_interleaved(&pixel_shuffle(&expanded, self.ratio)?)?;
        Ok((offsets, PredictorCache { reduced, activated }))
    }

    /// Returns `(dF, reduce grads, expand grads)`.
    fn backward(
        &self,
        features: &Tensor4,
        cache: &PredictorCache,
        doff: &OffsetField,
    ) -> Result<(Tensor4, ConvGrads, ConvGrads)> {
        let dexpanded = pixel_unshuffle(&doff.to_interleaved(), self.ratio)?;
        let expand = self.expand.backward(&cache.activated, &dexpanded)?;
        let dreduced = leaky_relu_backward(&cache.reduced, self.alpha, &expand.dx)?;
        let reduce = self.reduce.backward(features, &dreduced)?;
        Ok((reduce.dx.clone(), reduce, expand))
    }
}

/// `Conv3×3 → LReLU → Conv3×3 → LReLU` giving features `F`, then a `Conv1×1`
/// head giving low-resolution class logits `U`.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyDecoder {
    pub conv1: ConvLayer,
    pub conv2: ConvLayer,
    pub head: ConvLayer,
    pub alpha: f64,
}

struct DecoderCache {
    a1: Tensor4,
    h1: Tensor4,
    a2: Tensor4,
}

impl ToyDecoder {
    pub fn new(
        in_ch: usize,
        width: usize,
        classes: usize,
        alpha: f64,
        weight_decay: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        Ok(ToyDecoder {
            conv1: ConvLayer::uniform(in_ch, width, 3, rng)?.with_weight_decay(weight_decay),
            conv2: ConvLayer::uniform(width, width, 3, rng)?.with_weight_decay(weight_decay),
            head: ConvLayer::uniform(width, classes, 1, rng)?.with_weight_decay(weight_decay),
            alpha,
        })
    }

    /// Returns `(F, U_logits)`.
    pub fn forward(&self, x: &Tensor4) -> Result<(Tensor4, Tensor4)> {
        let (f, u, _) = self.forward_cached(x)?;
        Ok((f, u))
    }

    fn forward_cached(&self, x: &Tensor4) -> Result<(Tensor4, Tensor4, DecoderCache)> {
        let a1 = self.conv1.forward(x)?;
        let h1 = leaky_relu(&a1, self.alpha);
        let a2 = self.conv2.forward(&h1)?;
        let f = leaky_relu(&a2, self.alpha);
        let u = self.head.forward(&f)?;
        Ok((f, u, DecoderCache { a1, h1, a2 }))
    }

    fn backward(
        &self,
        x: &Tensor4,
        f: &Tensor4,
        cache: &DecoderCache,
        du: &Tensor4,
        df_extra: Option<&Tensor4>,
    ) -> Result<[ConvGrads; 3]> {
        let head = self.head.backward(f, du)?;
        let mut df = head.dx.clone();
        if let Some(extra) = df_extra {
            for (a, b) in df.data_mut().iter_mut().zip(extra.data()) {
                *a += b;
            }
        }
        let da2 = leaky_relu_backward(&cache.a2, self.alpha, &df)?;
        let conv2 = self.conv2.backward(&cache.h1, &da2)?;
        let da1 = leaky_relu_backward(&cache.a1, self.alpha, &conv2.dx)?;
        let conv1 = self.conv1.backward(x, &da1)?;
        Ok([conv1, conv2, head])
    }
}

/// Parameter gradients in [`LauNet::layers`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct NetGrads {
    pub layers: Vec<(Vec<f64>, Vec<f64>)>,
}

/// Intermediate values of one forward pass.
pub struct Forward {
    pub features: Tensor4,
    pub low_logits: Tensor4,
    pub offsets: Option<OffsetField>,
    /// Output of the first (`k×`) upsampling stage.
    pub stage1: Tensor4,
    /// Full-resolution logits.
    pub logits: Tensor4,
    decoder_cache: DecoderCache,
    predictor_cache: Option<PredictorCache>,
}

/// Scalar objective and what its backward pass needs.
pub struct Objective {
    pub loss: f64,
    /// Per-pixel weights on the LaU cross-entropy (already divided by the
    /// valid-pixel count).
    pub pixel_weights: Vec<f64>,
    /// Extra gradient on the offsets from the regression term.
    pub offset_grad: Option<OffsetField>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LauNet {
    pub config: NetConfig,
    pub decoder: ToyDecoder,
    pub predictor: Option<OffsetPredictor>,
}

impl LauNet {
    pub fn new(config: NetConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let decoder = ToyDecoder::new(
            config.in_channels,
            config.decoder_channels,
            config.classes,
            config.leaky_slope,
            config.weight_decay,
            rng,
        )?;
        let predictor = match config.upsampler {
            UpsamplerKind::Lau => Some(OffsetPredictor::new(
                config.decoder_channels,
                config.hidden_channels,
                config.groups,
                config.lau_ratio,
                config.leaky_slope,
                rng,
            )?),
            UpsamplerKind::Bilinear => None,
        };
        Ok(LauNet {
            config,
            decoder,
            predictor,
        })
    }

    /// Layers in declaration order: decoder conv1, conv2, head, then the
    /// offset branch's reduce and expand convolutions when present.
    pub fn layers(&self) -> Vec<(&'static str, &ConvLayer)> {
        let mut out = vec![
            ("dec_conv1", &self.decoder.conv1),
            ("dec_conv2", &self.decoder.conv2),
            ("dec_head", &self.decoder.head),
        ];
        if let Some(p) = &self.predictor {
            out.push(("off_reduce", &p.reduce));
            out.push(("off_expand", &p.expand));
        }
        out
    }

    pub fn layers_mut(&mut self) -> Vec<&mut ConvLayer> {
        let mut out = vec![
            &mut self.decoder.conv1,
            &mut self.decoder.conv2,
            &mut self.decoder.head,
        ];
        if let Some(p) = &mut self.predictor {
            out.push(&mut p.reduce);
            out.push(&mut p.expand);
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.layers().iter().map(|(_, l)| l.param_count()).sum()
    }

    pub fn forward(&self, x: &Tensor4) -> Result<Forward> {
        let (features, low_logits, decoder_cache) = self.decoder.forward_cached(x)?;
        let k = self.config.lau_ratio;
        let (offsets, predictor_cache, stage1) = match &self.predictor {
            Some(p) => {
                let (off, cache) = p.forward_cached(&features)?;
                let stage1 = lau_forward(&low_logits, &off, k)?;
                (Some(off), Some(cache), stage1)
            }
            None => (None, None, bilinear_upsample(&low_logits, k)?),
        };
        let logits = bilinear_upsample(&stage1, self.config.residual_ratio())?;
        Ok(Forward {
            features,
            low_logits,
            offsets,
            stage1,
            logits,
            decoder_cache,
            predictor_cache,
        })
    }

    /// Full-resolution logits.
    pub fn predict(&self, x: &Tensor4) -> Result<Tensor4> {
        Ok(self.forward(x)?.logits)
    }

    /// Upsamples low-resolution logits through the bilinear residual stage.
    fn to_full(&self, t: &Tensor4) -> Result<Tensor4> {
        bilinear_upsample(t, self.config.residual_ratio())
    }

    pub fn objective(&self, fwd: &Forward, labels: &LabelMap) -> Result<Objective> {
        let lau_loss = cross_entropy_map(&fwd.logits, labels)?;
        let valid = lau_loss.valid.iter().filter(|v| **v).count();
        if valid == 0 {
            return Err(LauError::EmptyReduction);
        }
        let scale = 1.0 / valid as f64;
        let k = self.config.lau_ratio;
        let (weights, offset_grad, extra) = match self.config.loss {
            LossKind::Ce => (lau_loss.valid.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect(), None, 0.0),
            LossKind::Off => {
                let reference = self.to_full(&bilinear_upsample(&fwd.low_logits, k)?)?;
                let aux = cross_entropy_map(&reference, labels)?;
                (offset_guided_weights(&lau_loss, &aux, self.config.lambda)?, None, 0.0)
            }
            LossKind::Reg => {
                let off = fwd
                    .offsets
                    .as_ref()
                    .ok_or_else(|| LauError::config("loss", "regression loss needs offsets"))?;
                let mut losses = vec![lau_loss.clone()];
                for corner in Corner::ALL {
                    let up = self.to_full(&corner_upsample(&fwd.low_logits, k, corner)?)?;
                    losses.push(cross_entropy_map(&up, labels)?);
                }
                let weights = candidate_weights(&losses, self.config.lambda);
                let (reg, grad) = self.regression_term(fwd, off, &losses)?;
                (weights, Some(grad), reg)
            }
        };
        let loss = lau_loss
            .values
            .iter()
            .zip(&weights)
            .map(|(l, w)| l * w)
            .sum::<f64>()
            * scale
            + extra;
        let pixel_weights = weights.into_iter().map(|w| w * scale).collect();
        Ok(Objective {
            loss,
            pixel_weights,
            offset_grad,
        })
    }

    /// `γ · mean SmoothL1(LaU point, Θ^opt)` over the LaU-stage grid, and its
    /// gradient on the offsets. Candidate losses are averaged over each
    /// residual-bilinear block so they align with the LaU-stage pixels.
    fn regression_term(
        &self,
        fwd: &Forward,
        off: &OffsetField,
        losses: &[LossMap],
    ) -> Result<(f64, OffsetField)> {
        let k = self.config.lau_ratio;
        let r = self.config.residual_ratio();
        let pooled: Vec<LossMap> = losses.iter().map(|m| pool_loss_map(m, r)).collect::<Result<_>>()?;
        let [n, _, h, w] = fwd.low_logits.shape();
        let mut coords = vec![CoordinateMap::from_offsets(off, k)?];
        for corner in Corner::ALL {
            coords.push(CoordinateMap::from_corner(corner, n, k, h, w));
        }
        let cs = CandidateSet::new(
            pooled.try_into().expect("five pooled losses"),
            coords.try_into().expect("five coordinate maps"),
        )?;
        let target = select_theta_opt(&cs);
        let sl = smooth_l1(&cs.coords[0], &target)?;
        let (gx, gy) = smooth_l1_grad(&cs.coords[0], &target)?;
        let valid = &cs.losses[0].valid;
        let count = valid.iter().filter(|v| **v).count();
        let mut grad = OffsetField::zeros(off.n(), 1, off.h(), off.w());
        if count == 0 {
            return Ok((0.0, grad));
        }
        let coef = self.config.gamma / count as f64;
        let mut total = 0.0;
        for i in 0..valid.len() {
            if valid[i] {
                total += sl.values[i];
                grad.dx.data_mut()[i] = coef * gx[i];
                grad.dy.data_mut()[i] = coef * gy[i];
            }
        }
        Ok((coef * total, grad))
    }

    pub fn loss(&self, x: &Tensor4, labels: &LabelMap) -> Result<f64> {
        let fwd = self.forward(x)?;
        Ok(self.objective(&fwd, labels)?.loss)
    }

    /// Loss, forward values, and gradients for every parameter.
    pub fn loss_and_grads(&self, x: &Tensor4, labels: &LabelMap) -> Result<(f64, Forward, NetGrads)> {
        let fwd = self.forward(x)?;
        let obj = self.objective(&fwd, labels)?;
        let dlogits = cross_entropy_grad(&fwd.logits, labels, &obj.pixel_weights)?;
        let dstage1 = bilinear_backward(fwd.stage1.shape(), self.config.residual_ratio(), &dlogits)?;
        let k = self.config.lau_ratio;
        let mut grads = Vec::new();
        let (du, df_extra, branch) = match (&self.predictor, &fwd.offsets, &fwd.predictor_cache) {
            (Some(p), Some(off), Some(cache)) => {
                let (du, mut doff) = lau_backward(&fwd.low_logits, off, k, &dstage1)?;
                if let Some(extra) = &obj.offset_grad {
                    add_offsets(&mut doff, extra);
                }
                let (df, reduce, expand) = p.backward(&fwd.features, cache, &doff)?;
                (du, Some(df), Some((reduce, expand)))
            }
            _ => (bilinear_backward(fwd.low_logits.shape(), k, &dstage1)?, None, None),
        };
        let dec = self
            .decoder
            .backward(x, &fwd.features, &fwd.decoder_cache, &du, df_extra.as_ref())?;
        for g in dec {
            grads.push((g.dw, g.db));
        }
        if let Some((reduce, expand)) = branch {
            grads.push((reduce.dw, reduce.db));
            grads.push((expand.dw, expand.db));
        }
        Ok((obj.loss, fwd, NetGrads { layers: grads }))
    }

    /// Copies all parameters into one flat vector, layer by layer, weights
    /// before bias.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for (_, l) in self.layers() {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_flat_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(LauError::shape("flat parameter length mismatch"));
        }
        let mut at = 0;
        for l in self.layers_mut() {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&params[at..at + nw]);
            at += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&params[at..at + nb]);
            at += nb;
        }
        Ok(())
    }
}

impl NetGrads {
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in &self.layers {
            out.extend_from_slice(w);
            out.extend_from_slice(b);
        }
        out
    }
}

fn add_offsets(acc: &mut OffsetField, extra: &OffsetField) {
    let groups = acc.groups();
    for b in 0..acc.n() {
        for g in 0..groups {
            let src_g = if extra.groups() == 1 { 0 } else { g };
            for (a, e) in acc.dx.plane_mut(b, g).iter_mut().zip(extra.dx.plane(b, src_g)) {
                *a += e;
            }
            for (a, e) in acc.dy.plane_mut(b, g).iter_mut().zip(extra.dy.plane(b, src_g)) {
                *a += e;
            }
        }
    }
}

/// Mean over valid pixels in each `r × r` block; a block is valid if any
/// of its pixels is.
pub fn pool_loss_map(map: &LossMap, r: usize) -> Result<LossMap> {
    if r == 1 {
        return Ok(map.clone());
    }
    if !map.h.is_multiple_of(r) || !map.w.is_multiple_of(r) {
        return Err(LauError::shape(format!(
            "loss map {}x{} is not divisible by {r}",
            map.h, map.w
        )));
    }
    let (h, w) = (map.h / r, map.w / r);
    let mut values = vec![0.0; map.n * h * w];
    let mut valid = vec![false; map.n * h * w];
    for b in 0..map.n {
        for y in 0..h {
            for x in 0..w {
                let (mut sum, mut count) = (0.0, 0usize);
                for yy in y * r..(y + 1) * r {
                    for xx in x * r..(x + 1) * r {
                        let i = (b * map.h + yy) * map.w + xx;
                        if map.valid[i] {
                            sum += map.values[i];
                            count += 1;
                        }
                    }
                }
                let o = (b * h + y) * w + x;
                if count > 0 {
                    values[o] = sum / count as f64;
                    valid[o] = true;
                }
            }
        }
    }
    LossMap::new(map.n, h, w, values, valid)
}
