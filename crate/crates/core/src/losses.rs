//! Per-pixel segmentation losses and the location-aware loss terms.
//!
//! Auxiliary quantities (the bilinear loss `L'`, the candidate losses and the
//! selected target coordinates) are treated as constants when
//! differentiating. The gradient helpers here only ever differentiate through
//! the LaU loss `L` and the LaU sampling coordinates.

use crate::error::{LauError, Result};
use crate::samplers::{corner_upsample, lau_forward, lau_source_point, Corner, OffsetField};
use crate::tensor::{LabelMap, Tensor4};

/// SmoothL1 transition point.
pub const SMOOTH_L1_BETA: f64 = 1.0;

/// Number of members in the candidate loss/coordinate sets.
pub const CANDIDATES: usize = 5;

/// Per-pixel loss values with a validity mask; invalid pixels hold 0.
#[derive(Clone, Debug, PartialEq)]
pub struct LossMap {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub values: Vec<f64>,
    pub valid: Vec<bool>,
}

impl LossMap {
    pub fn new(n: usize, h: usize, w: usize, values: Vec<f64>, valid: Vec<bool>) -> Result<Self> {
        if values.len() != n * h * w || valid.len() != n * h * w {
            return Err(LauError::shape(format!(
                "loss map buffers do not match {n}x{h}x{w}"
            )));
        }
        let mut map = LossMap { n, h, w, values, valid };
        for (v, ok) in map.values.iter_mut().zip(&map.valid) {
            if !ok {
                *v = 0.0;
            }
        }
        Ok(map)
    }

    pub fn all_valid(n: usize, h: usize, w: usize, values: Vec<f64>) -> Result<Self> {
        let valid = vec![true; values.len()];
        Self::new(n, h, w, values, valid)
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.n, self.h, self.w)
    }

    fn check_same(&self, other: &LossMap) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(LauError::shape(format!(
                "loss maps differ: {:?} vs {:?}",
                self.dims(),
                other.dims()
            )));
        }
        Ok(())
    }
}

/// Source coordinates per output pixel, in input-grid units.
#[derive(Clone, Debug, PartialEq)]
pub struct CoordinateMap {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub px: Vec<f64>,
    pub py: Vec<f64>,
}

impl CoordinateMap {
    pub fn new(n: usize, h: usize, w: usize, px: Vec<f64>, py: Vec<f64>) -> Result<Self> {
        if px.len() != n * h * w || py.len() != n * h * w {
            return Err(LauError::shape(format!(
                "coordinate buffers do not match {n}x{h}x{w}"
            )));
        }
        Ok(CoordinateMap { n, h, w, px, py })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.n, self.h, self.w)
    }

    /// Raw LaU sampling points `(x/k + Δx, y/k + Δy)` for a shared offset field.
    pub fn from_offsets(off: &OffsetField, k: usize) -> Result<Self> {
        if off.groups() != 1 {
            return Err(LauError::shape(
                "coordinate maps need a channel-shared offset field (M = 1)",
            ));
        }
        let (n, h, w) = (off.n(), off.h(), off.w());
        let mut px = Vec::with_capacity(n * h * w);
        let mut py = Vec::with_capacity(n * h * w);
        for b in 0..n {
            for y in 0..h {
                for x in 0..w {
                    let (sx, sy) = lau_source_point(off, b, 0, y, x, k);
                    px.push(sx);
                    py.push(sy);
                }
            }
        }
        CoordinateMap::new(n, h, w, px, py)
    }

    /// Clipped integral coordinates read by a corner sampler.
    pub fn from_corner(corner: Corner, n: usize, k: usize, in_h: usize, in_w: usize) -> Self {
        let (h, w) = (k * in_h, k * in_w);
        let mut px = Vec::with_capacity(n * h * w);
        let mut py = Vec::with_capacity(n * h * w);
        for _ in 0..n {
            for y in 0..h {
                for x in 0..w {
                    let (sx, sy) = corner.source(y, x, k, in_h, in_w);
                    px.push(sx as f64);
                    py.push(sy as f64);
                }
            }
        }
        CoordinateMap { n, h, w, px, py }
    }
}

/// The aligned loss set and coordinate set: LaU first, then the four corner
/// samplers in [`Corner::ALL`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidateSet {
    pub losses: [LossMap; CANDIDATES],
    pub coords: [CoordinateMap; CANDIDATES],
}

impl CandidateSet {
    pub fn new(losses: [LossMap; CANDIDATES], coords: [CoordinateMap; CANDIDATES]) -> Result<Self> {
        let dims = losses[0].dims();
        if losses.iter().any(|l| l.dims() != dims) || coords.iter().any(|c| c.dims() != dims) {
            return Err(LauError::shape("candidate set members differ in dims"));
        }
        Ok(CandidateSet { losses, coords })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.losses[0].dims()
    }
}

fn check_logits(logits: &Tensor4, labels: &LabelMap) -> Result<()> {
    let [n, c, h, w] = logits.shape();
    if c != labels.num_classes || (n, h, w) != labels.dims() {
        return Err(LauError::shape(format!(
            "logits {:?} do not match labels {:?} with {} classes",
            logits.shape(),
            labels.dims(),
            labels.num_classes
        )));
    }
    Ok(())
}

/// `-log softmax(logits)[label]` per pixel, max-subtracted.
pub fn cross_entropy_map(logits: &Tensor4, labels: &LabelMap) -> Result<LossMap> {
    check_logits(logits, labels)?;
    let [n, c, h, w] = logits.shape();
    let plane = h * w;
    let mut values = vec![0.0; n * plane];
    let mut valid = vec![false; n * plane];
    for b in 0..n {
        let base = b * c * plane;
        for p in 0..plane {
            let label = labels.labels[b * plane + p];
            if label == labels.ignore_value {
                continue;
            }
            let at = |ch: usize| logits.data()[base + ch * plane + p];
            let max = (0..c).map(at).fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = (0..c).map(|ch| (at(ch) - max).exp()).sum();
            values[b * plane + p] = (max + sum.ln() - at(label as usize)).max(0.0);
            valid[b * plane + p] = true;
        }
    }
    LossMap::new(n, h, w, values, valid)
}

/// Gradient of `Σ_i weight_i · CE_i` with respect to the logits.
pub fn cross_entropy_grad(logits: &Tensor4, labels: &LabelMap, weights: &[f64]) -> Result<Tensor4> {
    check_logits(logits, labels)?;
    let [n, c, h, w] = logits.shape();
    let plane = h * w;
    if weights.len() != n * plane {
        return Err(LauError::shape("pixel weight count does not match logits"));
    }
    let mut grad = Tensor4::zeros(logits.shape());
    let mut probs = vec![0.0; c];
    for b in 0..n {
        let base = b * c * plane;
        for p in 0..plane {
            let label = labels.labels[b * plane + p];
            let wt = weights[b * plane + p];
            if label == labels.ignore_value || wt == 0.0 {
                continue;
            }
            let at = |ch: usize| logits.data()[base + ch * plane + p];
            let max = (0..c).map(at).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (ch, pr) in probs.iter_mut().enumerate() {
                *pr = (at(ch) - max).exp();
                sum += *pr;
            }
            let g = grad.data_mut();
            for (ch, pr) in probs.iter().enumerate() {
                let onehot = if ch == label as usize { 1.0 } else { 0.0 };
                g[base + ch * plane + p] = wt * (pr / sum - onehot);
            }
        }
    }
    Ok(grad)
}

#[inline]
fn smooth_l1_scalar(d: f64) -> f64 {
    let a = d.abs();
    if a < SMOOTH_L1_BETA {
        0.5 * d * d / SMOOTH_L1_BETA
    } else {
        a - 0.5 * SMOOTH_L1_BETA
    }
}

#[inline]
fn smooth_l1_slope(d: f64) -> f64 {
    if d.abs() < SMOOTH_L1_BETA {
        d / SMOOTH_L1_BETA
    } else {
        d.signum()
    }
}

/// SmoothL1 summed over the two coordinate components.
pub fn smooth_l1(pred: &CoordinateMap, target: &CoordinateMap) -> Result<LossMap> {
    if pred.dims() != target.dims() {
        return Err(LauError::shape("smooth_l1 coordinate maps differ in dims"));
    }
    let values = pred
        .px
        .iter()
        .zip(&pred.py)
        .zip(target.px.iter().zip(&target.py))
        .map(|((px, py), (tx, ty))| smooth_l1_scalar(px - tx) + smooth_l1_scalar(py - ty))
        .collect();
    LossMap::all_valid(pred.n, pred.h, pred.w, values)
}

/// Gradient of [`smooth_l1`] with respect to `pred`, as `(d/dpx, d/dpy)`.
pub fn smooth_l1_grad(pred: &CoordinateMap, target: &CoordinateMap) -> Result<(Vec<f64>, Vec<f64>)> {
    if pred.dims() != target.dims() {
        return Err(LauError::shape("smooth_l1 coordinate maps differ in dims"));
    }
    let gx = pred.px.iter().zip(&target.px).map(|(p, t)| smooth_l1_slope(p - t)).collect();
    let gy = pred.py.iter().zip(&target.py).map(|(p, t)| smooth_l1_slope(p - t)).collect();
    Ok((gx, gy))
}

/// Per-pixel weight Λ: 1 where the LaU loss is strictly below the bilinear
/// loss, `1 + λ` otherwise (ties included).
pub fn offset_guided_weights(loss: &LossMap, aux: &LossMap, lambda: f64) -> Result<Vec<f64>> {
    loss.check_same(aux)?;
    Ok(loss
        .values
        .iter()
        .zip(&aux.values)
        .zip(&loss.valid)
        .map(|((l, a), ok)| match (ok, l < a) {
            (false, _) => 0.0,
            (true, true) => 1.0,
            (true, false) => 1.0 + lambda,
        })
        .collect())
}

pub fn offset_guided_loss(loss: &LossMap, aux: &LossMap, lambda: f64) -> Result<LossMap> {
    let weights = offset_guided_weights(loss, aux, lambda)?;
    let values = loss.values.iter().zip(&weights).map(|(l, w)| l * w).collect();
    LossMap::new(loss.n, loss.h, loss.w, values, loss.valid.clone())
}

/// Builds the five candidate losses and coordinates for one upsampling stage.
///
/// `logits_fn` maps each upsampled map to the logits scored against `labels`;
/// the identity when the upsampler output is scored directly.
pub fn build_candidate_set<F>(
    u: &Tensor4,
    off: &OffsetField,
    k: usize,
    logits_fn: F,
    labels: &LabelMap,
) -> Result<CandidateSet>
where
    F: Fn(&Tensor4) -> Result<Tensor4>,
{
    let lau = cross_entropy_map(&logits_fn(&lau_forward(u, off, k)?)?, labels)?;
    let mut losses = vec![lau];
    for corner in Corner::ALL {
        let up = corner_upsample(u, k, corner)?;
        losses.push(cross_entropy_map(&logits_fn(&up)?, labels)?);
    }
    let mut coords = vec![CoordinateMap::from_offsets(off, k)?];
    for corner in Corner::ALL {
        coords.push(CoordinateMap::from_corner(corner, u.n(), k, u.h(), u.w()));
    }
    CandidateSet::new(
        losses.try_into().expect("five losses"),
        coords.try_into().expect("five coordinate maps"),
    )
}

/// Index of the minimum-loss candidate per pixel; the first index wins ties.
pub fn select_candidate(cs: &CandidateSet) -> Vec<usize> {
    let len = cs.losses[0].values.len();
    (0..len)
        .map(|i| {
            let mut best = 0;
            for j in 1..CANDIDATES {
                if cs.losses[j].values[i] < cs.losses[best].values[i] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Per-pixel coordinates of the minimum-loss candidate.
pub fn select_theta_opt(cs: &CandidateSet) -> CoordinateMap {
    let pick = select_candidate(cs);
    let (n, h, w) = cs.dims();
    let px = pick.iter().enumerate().map(|(i, &j)| cs.coords[j].px[i]).collect();
    let py = pick.iter().enumerate().map(|(i, &j)| cs.coords[j].py[i]).collect();
    CoordinateMap { n, h, w, px, py }
}

/// Per-pixel weight Λ: 1 where the LaU loss is `≤` every candidate loss,
/// `1 + λ` otherwise.
pub fn regression_weights(cs: &CandidateSet, lambda: f64) -> Vec<f64> {
    candidate_weights(&cs.losses, lambda)
}

/// [`regression_weights`] from the loss maps alone; `losses[0]` is the LaU loss.
pub fn candidate_weights(losses: &[LossMap], lambda: f64) -> Vec<f64> {
    let lau = &losses[0];
    (0..lau.values.len())
        .map(|i| {
            if !lau.valid[i] {
                0.0
            } else if losses[1..].iter().all(|m| lau.values[i] <= m.values[i]) {
                1.0
            } else {
                1.0 + lambda
            }
        })
        .collect()
}

/// `γ · SmoothL1(Θ^opt, LaU coords) + L · Λ` per pixel.
pub fn regression_loss(cs: &CandidateSet, gamma: f64, lambda: f64) -> Result<LossMap> {
    let target = select_theta_opt(cs);
    let reg = smooth_l1(&cs.coords[0], &target)?;
    let weights = regression_weights(cs, lambda);
    let lau = &cs.losses[0];
    let values = (0..lau.values.len())
        .map(|i| gamma * reg.values[i] + lau.values[i] * weights[i])
        .collect();
    LossMap::new(lau.n, lau.h, lau.w, values, lau.valid.clone())
}

/// Mean over valid pixels.
pub fn reduce_loss(map: &LossMap) -> Result<f64> {
    let (sum, count) = map
        .values
        .iter()
        .zip(&map.valid)
        .filter(|(_, ok)| **ok)
        .fold((0.0, 0usize), |(s, c), (v, _)| (s + v, c + 1));
    if count == 0 {
        return Err(LauError::EmptyReduction);
    }
    Ok(sum / count as f64)
}
