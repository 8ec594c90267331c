//! Central-difference gradient checking.
//!
//! Each subject draws random configurations, rejects those whose evaluation
//! point lies within `margin` of a non-differentiable set (lattice
//! coordinates and clamp borders of the interpolation kernel, activation
//! kinks, loss-weight switches), and compares the analytic gradient against
//! `(f(x+h) − f(x−h)) / 2h` component by component.

use crate::error::{LauError, Result};
use crate::losses::{
    build_candidate_set, candidate_weights, cross_entropy_grad, cross_entropy_map,
    offset_guided_loss, offset_guided_weights, reduce_loss, regression_loss, select_candidate,
    select_theta_opt, smooth_l1_grad, LossMap, CANDIDATES,
};
use crate::net::{pool_loss_map, LauNet, LossKind, NetConfig, UpsamplerKind};
use crate::nn::{leaky_relu, leaky_relu_backward, ConvLayer};
use crate::rng::Rng;
use crate::samplers::{bilinear_upsample, lau_backward, lau_forward, lau_source_point, OffsetField};
use crate::tensor::{LabelMap, Tensor4};

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub subject: String,
    /// Random configurations evaluated.
    pub cases: usize,
    /// Gradient components compared.
    pub checked: usize,
    pub max_rel_err: f64,
    pub failures: usize,
    pub tolerance: f64,
    /// Analytic and numeric values at the worst component.
    pub worst: (f64, f64),
}

impl GradcheckReport {
    pub fn new(subject: &str, tolerance: f64) -> Self {
        GradcheckReport {
            subject: subject.to_string(),
            cases: 0,
            checked: 0,
            max_rel_err: 0.0,
            failures: 0,
            tolerance,
            worst: (0.0, 0.0),
        }
    }

    pub fn passed(&self) -> bool {
        self.failures == 0 && self.cases > 0
    }

    fn record(&mut self, analytic: f64, numeric: f64) {
        let err = rel_err(analytic, numeric);
        self.checked += 1;
        if err > self.max_rel_err || err.is_nan() {
            self.max_rel_err = err;
            self.worst = (analytic, numeric);
        }
        if !(err <= self.tolerance) {
            self.failures += 1;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradcheckOptions {
    pub seed: u64,
    pub cases: usize,
    pub h: f64,
    pub margin: f64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            seed: 0,
            cases: 100,
            h: 1e-6,
            margin: 1e-3,
        }
    }
}

/// `|a − n| / max(1e-8, |a| + |n|)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compares `analytic` against central differences of `f` at `x`, adding one
/// case to `report`.
pub fn gradcheck<F>(report: &mut GradcheckReport, mut f: F, x: &[f64], analytic: &[f64], h: f64)
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(x.len(), analytic.len());
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let plus = f(&probe);
        probe[i] = x[i] - h;
        let minus = f(&probe);
        probe[i] = x[i];
        report.record(analytic[i], (plus - minus) / (2.0 * h));
    }
    report.cases += 1;
}

/// Like [`gradcheck`] with the fourth-order stencil
/// `(8(f(x+h) − f(x−h)) − (f(x+2h) − f(x−2h))) / 12h`, which tolerates a
/// larger `h` and so resolves much smaller gradients above roundoff.
pub fn gradcheck_five_point<F>(
    report: &mut GradcheckReport,
    mut f: F,
    x: &[f64],
    analytic: &[f64],
    h: f64,
) where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(x.len(), analytic.len());
    let mut probe = x.to_vec();
    let mut at = |probe: &mut Vec<f64>, i: usize, d: f64| {
        probe[i] = x[i] + d;
        let v = f(probe);
        probe[i] = x[i];
        v
    };
    for i in 0..x.len() {
        let near = at(&mut probe, i, h) - at(&mut probe, i, -h);
        let far = at(&mut probe, i, 2.0 * h) - at(&mut probe, i, -2.0 * h);
        report.record(analytic[i], (8.0 * near - far) / (12.0 * h));
    }
    report.cases += 1;
}

/// Distance from `v` to the nearest integer.
fn lattice_gap(v: f64) -> f64 {
    (v - v.round()).abs()
}

fn dot(a: &Tensor4, b: &Tensor4) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Draws offsets whose sampling points all stay `margin` away from lattice
/// coordinates (which include the clamp borders).
fn safe_offsets(rng: &mut Rng, shape: [usize; 4], k: usize, range: f64, margin: f64) -> OffsetField {
    let mut field = OffsetField::zeros(shape[0], shape[1], shape[2], shape[3]);
    for b in 0..shape[0] {
        for g in 0..shape[1] {
            for y in 0..shape[2] {
                for x in 0..shape[3] {
                    for (comp, pos) in [(&mut field.dx, x), (&mut field.dy, y)] {
                        let base = pos as f64 / k as f64;
                        let v = loop {
                            let v = rng.uniform_range(-range, range);
                            if lattice_gap(base + v) >= margin {
                                break v;
                            }
                        };
                        *comp.at_mut(b, g, y, x) = v;
                    }
                }
            }
        }
    }
    field
}

fn split_offsets(flat: &[f64], shape: [usize; 4]) -> OffsetField {
    let half = flat.len() / 2;
    OffsetField {
        dx: Tensor4::from_vec(shape, flat[..half].to_vec()).unwrap(),
        dy: Tensor4::from_vec(shape, flat[half..].to_vec()).unwrap(),
    }
}

fn join_offsets(off: &OffsetField) -> Vec<f64> {
    off.dx.data().iter().chain(off.dy.data()).copied().collect()
}

/// `lau_backward` against differences of `⟨dV, lau_forward(U, off)⟩` in both
/// `U` and the offsets.
pub fn check_lau_backward(opts: GradcheckOptions) -> Result<GradcheckReport> {
    let mut report = GradcheckReport::new("lau_backward", 1e-5);
    let mut rng = Rng::new(opts.seed);
    for _ in 0..opts.cases {
        let n = rng.below(1, 3);
        let c = rng.below(1, 4);
        let h = rng.below(2, 5);
        let w = rng.below(2, 5);
        let k = rng.below(1, 4);
        let m = if rng.uniform() < 0.5 { 1 } else { c };
        let u = Tensor4::uniform([n, c, h, w], -1.0, 1.0, &mut rng);
        let oshape = [n, m, k * h, k * w];
        let off = safe_offsets(&mut rng, oshape, k, 1.5, opts.margin);
        let dv = Tensor4::uniform([n, c, k * h, k * w], -1.0, 1.0, &mut rng);
        let (du, doff) = lau_backward(&u, &off, k, &dv)?;

        let f_u = |p: &[f64]| {
            let u = Tensor4::from_vec(u.shape(), p.to_vec()).unwrap();
            dot(&dv, &lau_forward(&u, &off, k).unwrap())
        };
        gradcheck(&mut report, f_u, u.data(), du.data(), opts.h);
        report.cases -= 1;

        let f_off = |p: &[f64]| dot(&dv, &lau_forward(&u, &split_offsets(p, oshape), k).unwrap());
        gradcheck(&mut report, f_off, &join_offsets(&off), &join_offsets(&doff), opts.h);
    }
    Ok(report)
}

pub fn check_conv_backward(opts: GradcheckOptions) -> Result<GradcheckReport> {
    let mut report = GradcheckReport::new("conv2d_backward", 1e-5);
    let mut rng = Rng::new(opts.seed ^ 0xC0);
    let cases = opts.cases.div_ceil(5).max(1);
    for case in 0..cases {
        let kernel = if case % 2 == 0 { 3 } else { 1 };
        let (cin, cout) = (rng.below(1, 4), rng.below(1, 4));
        let [h, w] = [rng.below(1, 5), rng.below(1, 5)];
        let layer = ConvLayer::uniform(cin, cout, kernel, &mut rng)?;
        let x = Tensor4::uniform([2, cin, h, w], -1.0, 1.0, &mut rng);
        let proj = Tensor4::uniform([2, cout, h, w], -1.0, 1.0, &mut rng);
        let g = layer.backward(&x, &proj)?;
        let mut params = layer.weights.clone();
        params.extend_from_slice(&layer.bias);
        let mut analytic = g.dw.clone();
        analytic.extend_from_slice(&g.db);
        let nw = layer.weights.len();
        let f_p = |p: &[f64]| {
            let mut l = layer.clone();
            l.weights.copy_from_slice(&p[..nw]);
            l.bias.copy_from_slice(&p[nw..]);
            dot(&proj, &l.forward(&x).unwrap())
        };
        gradcheck(&mut report, f_p, &params, &analytic, opts.h);
        report.cases -= 1;
        let f_x = |p: &[f64]| {
            let x = Tensor4::from_vec(x.shape(), p.to_vec()).unwrap();
            dot(&proj, &layer.forward(&x).unwrap())
        };
        gradcheck(&mut report, f_x, x.data(), g.dx.data(), opts.h);
    }
    Ok(report)
}

pub fn check_leaky_relu(opts: GradcheckOptions) -> Result<GradcheckReport> {
    let mut report = GradcheckReport::new("leaky_relu", 1e-6);
    let mut rng = Rng::new(opts.seed ^ 0x1E);
    for _ in 0..opts.cases.div_ceil(10).max(1) {
        let alpha = rng.uniform_range(0.0, 0.5);
        let mut x = Tensor4::uniform([1, 2, 3, 3], -1.0, 1.0, &mut rng);
        for v in x.data_mut() {
            if v.abs() < opts.margin {
                *v += 2.0 * opts.margin;
            }
        }
        let proj = Tensor4::uniform(x.shape(), -1.0, 1.0, &mut rng);
        let g = leaky_relu_backward(&x, alpha, &proj)?;
        let f = |p: &[f64]| dot(&proj, &leaky_relu(&Tensor4::from_vec(x.shape(), p.to_vec()).unwrap(), alpha));
        gradcheck(&mut report, f, x.data(), g.data(), opts.h);
    }
    Ok(report)
}

fn random_labels(rng: &mut Rng, n: usize, h: usize, w: usize, classes: usize) -> LabelMap {
    let labels = (0..n * h * w)
        .map(|_| {
            if rng.uniform() < 0.1 {
                LabelMap::DEFAULT_IGNORE
            } else {
                rng.below(0, classes) as i32
            }
        })
        .collect();
    let mut map = LabelMap::new(n, h, w, labels, classes).unwrap();
    map.labels[0] = 0;
    map
}

/// Mean cross-entropy and the offset-guided loss, both against the logits.
/// The offset-guided case also asserts the gradient is `Λ ×` the plain
/// cross-entropy gradient.
pub fn check_losses(opts: GradcheckOptions) -> Result<GradcheckReport> {
    let mut report = GradcheckReport::new("losses", 1e-5);
    let mut rng = Rng::new(opts.seed ^ 0x105);
    for _ in 0..opts.cases.div_ceil(5).max(1) {
        let classes = rng.below(2, 5);
        let (h, w) = (rng.below(1, 4), rng.below(1, 4));
        let logits = Tensor4::uniform([1, classes, h, w], -2.0, 2.0, &mut rng);
        let labels = random_labels(&mut rng, 1, h, w, classes);
        let ce = cross_entropy_map(&logits, &labels)?;
        let valid = ce.valid.iter().filter(|v| **v).count() as f64;

        let unit: Vec<f64> = ce.valid.iter().map(|&v| if v { 1.0 / valid } else { 0.0 }).collect();
        let g = cross_entropy_grad(&logits, &labels, &unit)?;
        let f = |p: &[f64]| {
            let t = Tensor4::from_vec(logits.shape(), p.to_vec()).unwrap();
            reduce_loss(&cross_entropy_map(&t, &labels).unwrap()).unwrap()
        };
        gradcheck(&mut report, f, logits.data(), g.data(), opts.h);
        report.cases -= 1;

        // Auxiliary loss held fixed; keep every pixel away from the switch.
        let lambda = rng.uniform_range(0.0, 0.5);
        let aux_values = ce
            .values
            .iter()
            .map(|&l| {
                let shift = rng.uniform_range(10.0 * opts.margin, 0.5);
                if rng.uniform() < 0.5 { l + shift } else { (l - shift).max(0.0) }
            })
            .collect();
        let aux = LossMap::new(1, h, w, aux_values, ce.valid.clone())?;
        let weights = offset_guided_weights(&ce, &aux, lambda)?;
        let scaled: Vec<f64> = weights.iter().map(|w| w / valid).collect();
        let g_off = cross_entropy_grad(&logits, &labels, &scaled)?;
        for (i, (go, gc)) in g_off.data().iter().zip(g.data()).enumerate() {
            let wt = weights[i % (h * w)];
            report.record(*go, wt * gc);
        }
        let f_off = |p: &[f64]| {
            let t = Tensor4::from_vec(logits.shape(), p.to_vec()).unwrap();
            let l = cross_entropy_map(&t, &labels).unwrap();
            reduce_loss(&offset_guided_loss(&l, &aux, lambda).unwrap()).unwrap()
        };
        gradcheck(&mut report, f_off, logits.data(), g_off.data(), opts.h);
    }
    Ok(report)
}

/// Gap between two losses, or infinity for an exact tie. Exact ties come
/// from sampling points clamped onto the same border pixel; they persist
/// under small perturbations and so do not switch anything.
fn switch_gap(a: f64, b: f64) -> f64 {
    if a == b {
        f64::INFINITY
    } else {
        (a - b).abs()
    }
}

/// Smallest gap between the minimum and the runner-up of a candidate set,
/// and between the LaU loss and the best corner loss.
fn candidate_margin(losses: &[LossMap]) -> f64 {
    let mut gap = f64::INFINITY;
    for i in 0..losses[0].values.len() {
        if !losses[0].valid[i] {
            continue;
        }
        let mut vals: Vec<f64> = losses.iter().map(|m| m.values[i]).collect();
        let best_corner = vals[1..].iter().copied().fold(f64::INFINITY, f64::min);
        gap = gap.min(switch_gap(vals[0], best_corner));
        vals.sort_by(f64::total_cmp);
        vals.dedup();
        if vals.len() > 1 {
            gap = gap.min(vals[1] - vals[0]);
        }
    }
    gap
}

/// The regression loss against the input logits and the offsets, through
/// `lau_forward` and the LaU coordinates.
pub fn check_regression(opts: GradcheckOptions) -> Result<GradcheckReport> {
    let mut report = GradcheckReport::new("regression_loss", 1e-5);
    let mut rng = Rng::new(opts.seed ^ 0x4E6);
    let mut done = 0;
    while done < opts.cases.div_ceil(5).max(1) {
        let classes = rng.below(2, 4);
        let k = rng.below(1, 4);
        let (h, w) = (rng.below(2, 4), rng.below(2, 4));
        let (gamma, lambda) = (rng.uniform_range(0.0, 0.5), rng.uniform_range(0.0, 0.5));
        let u = Tensor4::uniform([1, classes, h, w], -2.0, 2.0, &mut rng);
        let oshape = [1, 1, k * h, k * w];
        let off = safe_offsets(&mut rng, oshape, k, 2.5, opts.margin);
        let labels = random_labels(&mut rng, 1, k * h, k * w, classes);
        let cs = build_candidate_set(&u, &off, k, |t| Ok(t.clone()), &labels)?;
        if candidate_margin(&cs.losses) < opts.margin {
            continue;
        }
        done += 1;

        let valid = cs.losses[0].valid.iter().filter(|v| **v).count() as f64;
        let weights: Vec<f64> = candidate_weights(&cs.losses, lambda).iter().map(|w| w / valid).collect();
        let v = lau_forward(&u, &off, k)?;
        let dv = cross_entropy_grad(&v, &labels, &weights)?;
        let (du, mut doff) = lau_backward(&u, &off, k, &dv)?;
        let target = select_theta_opt(&cs);
        let (gx, gy) = smooth_l1_grad(&cs.coords[0], &target)?;
        for i in 0..gx.len() {
            if cs.losses[0].valid[i] {
                doff.dx.data_mut()[i] += gamma * gx[i] / valid;
                doff.dy.data_mut()[i] += gamma * gy[i] / valid;
            }
        }
        let objective = |u: &Tensor4, off: &OffsetField| {
            let cs = build_candidate_set(u, off, k, |t| Ok(t.clone()), &labels).unwrap();
            reduce_loss(&regression_loss(&cs, gamma, lambda).unwrap()).unwrap()
        };
        let f_u = |p: &[f64]| objective(&Tensor4::from_vec(u.shape(), p.to_vec()).unwrap(), &off);
        gradcheck(&mut report, f_u, u.data(), du.data(), opts.h);
        report.cases -= 1;
        let f_off = |p: &[f64]| objective(&u, &split_offsets(p, oshape));
        gradcheck(&mut report, f_off, &join_offsets(&off), &join_offsets(&doff), opts.h);
    }
    Ok(report)
}

const MAX_ATTEMPTS: usize = 10_000;
const INIT_GAIN: f64 = 3.0;

/// Step of the network check. Parameters such as the expand-layer bias reach
/// gradients near 1e-8, which a 1e-6 central difference cannot resolve.
pub const NETWORK_STEP: f64 = 1e-4;

/// Network used by the end-to-end check: 4×4 input, LaU 2× then bilinear 2×.
pub fn gradcheck_net_config(loss: LossKind) -> NetConfig {
    NetConfig {
        in_channels: 3,
        classes: 3,
        decoder_channels: 4,
        hidden_channels: 4,
        groups: 1,
        lau_ratio: 2,
        total_upsample: 4,
        leaky_slope: 0.1,
        upsampler: UpsamplerKind::Lau,
        loss,
        lambda: 0.3,
        gamma: 0.1,
        weight_decay: 1e-4,
    }
}

/// Whether every non-smooth quantity of the forward pass sits at least
/// `margin` away from its switching set.
fn network_point_is_smooth(net: &LauNet, x: &Tensor4, labels: &LabelMap, margin: f64) -> Result<bool> {
    let fwd = net.forward(x)?;
    let k = net.config.lau_ratio;
    let r = net.config.residual_ratio();
    // Pre-activations of every LeakyReLU.
    let a1 = net.decoder.conv1.forward(x)?;
    let a2 = net.decoder.conv2.forward(&leaky_relu(&a1, net.decoder.alpha))?;
    let mut pre = vec![a1, a2];
    if let Some(p) = &net.predictor {
        pre.push(p.reduce.forward(&fwd.features)?);
    }
    if pre.iter().flat_map(|t| t.data()).any(|v| v.abs() < margin) {
        return Ok(false);
    }
    if let Some(off) = &fwd.offsets {
        let [n, m, ho, wo] = off.dx.shape();
        for b in 0..n {
            for g in 0..m {
                for y in 0..ho {
                    for x in 0..wo {
                        let (px, py) = lau_source_point(off, b, g, y, x, k);
                        if lattice_gap(px) < margin || lattice_gap(py) < margin {
                            return Ok(false);
                        }
                    }
                }
            }
        }
    }
    let switch = margin;
    let lau = cross_entropy_map(&fwd.logits, labels)?;
    match net.config.loss {
        LossKind::Ce => {}
        LossKind::Off => {
            let reference = bilinear_upsample(&bilinear_upsample(&fwd.low_logits, k)?, r)?;
            let aux = cross_entropy_map(&reference, labels)?;
            if lau.values.iter().zip(&aux.values).any(|(a, b)| switch_gap(*a, *b) < switch) {
                return Ok(false);
            }
        }
        LossKind::Reg => {
            let mut losses = vec![lau];
            for corner in crate::samplers::Corner::ALL {
                let up = crate::samplers::corner_upsample(&fwd.low_logits, k, corner)?;
                losses.push(cross_entropy_map(&bilinear_upsample(&up, r)?, labels)?);
            }
            // Λ switch at full resolution.
            for i in 0..losses[0].values.len() {
                if !losses[0].valid[i] {
                    continue;
                }
                let best = (1..CANDIDATES).map(|j| losses[j].values[i]).fold(f64::INFINITY, f64::min);
                if switch_gap(losses[0].values[i], best) < switch {
                    return Ok(false);
                }
            }
            // Θ^opt switch on the pooled grid.
            let pooled: Vec<LossMap> = losses.iter().map(|m| pool_loss_map(m, r)).collect::<Result<_>>()?;
            if candidate_margin(&pooled) < switch {
                return Ok(false);
            }
            let _ = select_candidate;
        }
    }
    Ok(true)
}

/// Full pipeline (decoder, offset branch, LaU, bilinear, loss) against every
/// parameter.
pub fn check_network(opts: GradcheckOptions, loss: LossKind) -> Result<GradcheckReport> {
    let mut report = GradcheckReport::new(&format!("network_{}", loss.name()), 1e-4);
    let mut rng = Rng::new(opts.seed ^ 0x4E7 ^ (loss as u64) << 8);
    let cfg = gradcheck_net_config(loss);
    let cases = opts.cases.div_ceil(50).max(1);
    let mut done = 0;
    let mut attempts = 0;
    while done < cases {
        attempts += 1;
        if attempts > MAX_ATTEMPTS {
            return Err(LauError::config("margin", "no smooth evaluation point found"));
        }
        let mut net = LauNet::new(cfg.clone(), &mut rng)?;
        let p = net.predictor.as_mut().expect("LaU network has an offset branch");
        for v in p.expand.weights.iter_mut().chain(p.expand.bias.iter_mut()) {
            *v = rng.uniform_range(-0.1, 0.1);
        }
        // Default init leaves the logits nearly flat, which pushes some
        // gradients below what any difference quotient can resolve.
        let scaled: Vec<f64> = net.flat_params().iter().map(|v| v * INIT_GAIN).collect();
        net.set_flat_params(&scaled)?;
        let x = Tensor4::uniform([1, 3, 4, 4], -1.0, 1.0, &mut rng);
        let labels = random_labels(&mut rng, 1, 16, 16, 3);
        if !network_point_is_smooth(&net, &x, &labels, opts.margin)? {
            continue;
        }
        done += 1;
        let (_, _, grads) = net.loss_and_grads(&x, &labels)?;
        let mut probe = net.clone();
        let f = |p: &[f64]| {
            probe.set_flat_params(p).unwrap();
            probe.loss(&x, &labels).unwrap()
        };
        gradcheck_five_point(&mut report, f, &net.flat_params(), &grads.flat(), NETWORK_STEP);
    }
    Ok(report)
}

/// Every subject, in report order.
pub fn run_suite(opts: GradcheckOptions) -> Result<Vec<GradcheckReport>> {
    Ok(vec![
        check_lau_backward(opts)?,
        check_conv_backward(opts)?,
        check_leaky_relu(opts)?,
        check_losses(opts)?,
        check_regression(opts)?,
        check_network(opts, LossKind::Ce)?,
        check_network(opts, LossKind::Off)?,
        check_network(opts, LossKind::Reg)?,
    ])
}

pub const REPORT_HEADER: &str = "subject,cases,max_rel_err,failures";

pub fn report_csv(reports: &[GradcheckReport]) -> String {
    let mut out = String::from(REPORT_HEADER);
    out.push('\n');
    for r in reports {
        out.push_str(&format!("{},{},{:.6e},{}\n", r.subject, r.cases, r.max_rel_err, r.failures));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_subject_is_exact() {
        let mut report = GradcheckReport::new("linear", 1e-8);
        let coef = [0.5, -2.0, 3.25];
        let f = |p: &[f64]| p.iter().zip(&coef).map(|(a, b)| a * b).sum::<f64>();
        gradcheck(&mut report, f, &[1.0, 2.0, -1.0], &coef, 1e-6);
        assert!(report.max_rel_err <= 1e-8, "{}", report.max_rel_err);
        assert!(report.passed());
    }

    #[test]
    fn wrong_gradient_is_reported_not_panicked() {
        let mut report = GradcheckReport::new("wrong", 1e-6);
        gradcheck(&mut report, |p| p[0] * p[0], &[1.0], &[5.0], 1e-6);
        assert_eq!(report.failures, 1);
        assert!(!report.passed());
    }

    #[test]
    fn reports_are_deterministic() {
        let opts = GradcheckOptions { cases: 10, ..Default::default() };
        assert_eq!(check_lau_backward(opts).unwrap(), check_lau_backward(opts).unwrap());
    }

    #[test]
    fn small_suites_pass() {
        let opts = GradcheckOptions { cases: 10, seed: 3, ..Default::default() };
        for r in [
            check_lau_backward(opts).unwrap(),
            check_conv_backward(opts).unwrap(),
            check_leaky_relu(opts).unwrap(),
            check_losses(opts).unwrap(),
            check_regression(opts).unwrap(),
        ] {
            assert!(r.passed(), "{r:?}");
        }
    }

    #[test]
    fn csv_schema() {
        let csv = report_csv(&[GradcheckReport::new("x", 1e-5)]);
        assert!(csv.starts_with("subject,cases,max_rel_err,failures\nx,0,"));
    }
}
