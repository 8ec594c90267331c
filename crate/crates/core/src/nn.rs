//! Convolution and activation layers with hand-written backward passes.

use crate::error::{LauError, Result};
use crate::rng::Rng;
use crate::tensor::Tensor4;

/// A same-padded 2-D convolution (cross-correlation) with bias.
///
/// Kernel 3 uses zero padding 1, kernel 1 uses none, so spatial dims are
/// preserved. Weights are laid out `out_ch × in_ch × kernel × kernel`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub weight_decay: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvGrads {
    pub dx: Tensor4,
    pub dw: Vec<f64>,
    pub db: Vec<f64>,
}

impl ConvLayer {
    pub fn zeros(in_ch: usize, out_ch: usize, kernel: usize) -> Result<Self> {
        if kernel != 1 && kernel != 3 {
            return Err(LauError::shape(format!("unsupported kernel size {kernel}")));
        }
        if in_ch == 0 || out_ch == 0 {
            return Err(LauError::shape("convolution needs at least one channel"));
        }
        Ok(ConvLayer {
            in_ch,
            out_ch,
            kernel,
            weights: vec![0.0; out_ch * in_ch * kernel * kernel],
            bias: vec![0.0; out_ch],
            weight_decay: 0.0,
        })
    }

    /// Uniform init in `±1/√fan_in` for weights and bias.
    pub fn uniform(in_ch: usize, out_ch: usize, kernel: usize, rng: &mut Rng) -> Result<Self> {
        let mut layer = Self::zeros(in_ch, out_ch, kernel)?;
        let bound = 1.0 / ((in_ch * kernel * kernel) as f64).sqrt();
        for v in layer.weights.iter_mut().chain(layer.bias.iter_mut()) {
            *v = rng.uniform_range(-bound, bound);
        }
        Ok(layer)
    }

    pub fn with_weight_decay(mut self, wd: f64) -> Self {
        self.weight_decay = wd;
        self
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    fn pad(&self) -> isize {
        (self.kernel / 2) as isize
    }

    #[inline]
    fn w_index(&self, oc: usize, ic: usize, ky: usize, kx: usize) -> usize {
        ((oc * self.in_ch + ic) * self.kernel + ky) * self.kernel + kx
    }

    fn check_input(&self, x: &Tensor4) -> Result<()> {
        if x.c() != self.in_ch {
            return Err(LauError::shape(format!(
                "convolution expects {} input channels, got {}",
                self.in_ch,
                x.c()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor4) -> Result<Tensor4> {
        self.check_input(x)?;
        let [n, _, h, w] = x.shape();
        let mut y = Tensor4::zeros([n, self.out_ch, h, w]);
        let pad = self.pad();
        for b in 0..n {
            for oc in 0..self.out_ch {
                let out = y.plane_mut(b, oc);
                out.fill(self.bias[oc]);
                for ic in 0..self.in_ch {
                    let src = x.plane(b, ic);
                    for ky in 0..self.kernel {
                        let dy = ky as isize - pad;
                        for kx in 0..self.kernel {
                            let dx = kx as isize - pad;
                            let wv = self.weights[self.w_index(oc, ic, ky, kx)];
                            if wv == 0.0 {
                                continue;
                            }
                            let (x0, x1) = valid_range(dx, w);
                            for yy in valid_range_iter(dy, h) {
                                let sy = (yy as isize + dy) as usize;
                                let o = &mut out[yy * w + x0..yy * w + x1];
                                let start = sy * w + (x0 as isize + dx) as usize;
                                let s = &src[start..start + (x1 - x0)];
                                for (ov, sv) in o.iter_mut().zip(s) {
                                    *ov += wv * sv;
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(y)
    }

    /// Gradients with respect to the input, weights and bias.
    pub fn backward(&self, x: &Tensor4, dy: &Tensor4) -> Result<ConvGrads> {
        self.check_input(x)?;
        let [n, _, h, w] = x.shape();
        if dy.shape() != [n, self.out_ch, h, w] {
            return Err(LauError::shape(format!(
                "output gradient {:?} does not match {:?}",
                dy.shape(),
                [n, self.out_ch, h, w]
            )));
        }
        let pad = self.pad();
        let mut dx = Tensor4::zeros(x.shape());
        let mut dw = vec![0.0; self.weights.len()];
        let mut db = vec![0.0; self.out_ch];
        for b in 0..n {
            for oc in 0..self.out_ch {
                let g = dy.plane(b, oc);
                db[oc] += g.iter().sum::<f64>();
                for ic in 0..self.in_ch {
                    let src = x.plane(b, ic);
                    for ky in 0..self.kernel {
                        let sdy = ky as isize - pad;
                        for kx in 0..self.kernel {
                            let sdx = kx as isize - pad;
                            let wi = self.w_index(oc, ic, ky, kx);
                            let wv = self.weights[wi];
                            let (x0, x1) = valid_range(sdx, w);
                            let mut acc = 0.0;
                            for yy in valid_range_iter(sdy, h) {
                                let sy = (yy as isize + sdy) as usize;
                                let go = &g[yy * w + x0..yy * w + x1];
                                let start = sy * w + (x0 as isize + sdx) as usize;
                                let s = &src[start..start + (x1 - x0)];
                                acc += go.iter().zip(s).map(|(a, b)| a * b).sum::<f64>();
                                if wv != 0.0 {
                                    let d = &mut dx.plane_mut(b, ic)[start..start + (x1 - x0)];
                                    for (dv, gv) in d.iter_mut().zip(go) {
                                        *dv += wv * gv;
                                    }
                                }
                            }
                            dw[wi] += acc;
                        }
                    }
                }
            }
        }
        Ok(ConvGrads { dx, dw, db })
    }
}

/// Output columns `[lo, hi)` whose source `x + shift` lies inside `[0, len)`.
#[inline]
fn valid_range(shift: isize, len: usize) -> (usize, usize) {
    let lo = (-shift).max(0) as usize;
    let hi = (len as isize - shift.max(0)).max(0) as usize;
    (lo.min(hi), hi)
}

#[inline]
fn valid_range_iter(shift: isize, len: usize) -> std::ops::Range<usize> {
    let (lo, hi) = valid_range(shift, len);
    lo..hi
}

pub fn leaky_relu(x: &Tensor4, alpha: f64) -> Tensor4 {
    let mut y = x.clone();
    for v in y.data_mut() {
        if *v < 0.0 {
            *v *= alpha;
        }
    }
    y
}

/// Multiplies `dy` by 1 where the forward input was `≥ 0`, else by `alpha`.
pub fn leaky_relu_backward(x: &Tensor4, alpha: f64, dy: &Tensor4) -> Result<Tensor4> {
    if x.shape() != dy.shape() {
        return Err(LauError::shape("leaky_relu gradient shape mismatch"));
    }
    let mut dx = dy.clone();
    for (d, &xv) in dx.data_mut().iter_mut().zip(x.data()) {
        if xv < 0.0 {
            *d *= alpha;
        }
    }
    Ok(dx)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct sliding-window evaluation with explicit zero padding.
    fn naive_conv(layer: &ConvLayer, x: &Tensor4) -> Tensor4 {
        let [n, _, h, w] = x.shape();
        let pad = (layer.kernel / 2) as isize;
        let mut y = Tensor4::zeros([n, layer.out_ch, h, w]);
        for b in 0..n {
            for oc in 0..layer.out_ch {
                for yy in 0..h {
                    for xx in 0..w {
                        let mut acc = layer.bias[oc];
                        for ic in 0..layer.in_ch {
                            for ky in 0..layer.kernel {
                                for kx in 0..layer.kernel {
                                    let sy = yy as isize + ky as isize - pad;
                                    let sx = xx as isize + kx as isize - pad;
                                    if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                        continue;
                                    }
                                    let wi = ((oc * layer.in_ch + ic) * layer.kernel + ky) * layer.kernel + kx;
                                    acc += layer.weights[wi] * x.at(b, ic, sy as usize, sx as usize);
                                }
                            }
                        }
                        *y.at_mut(b, oc, yy, xx) = acc;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn identity_1x1() {
        let mut layer = ConvLayer::zeros(3, 3, 1).unwrap();
        for c in 0..3 {
            layer.weights[c * 3 + c] = 1.0;
        }
        let mut rng = Rng::new(1);
        let x = Tensor4::uniform([2, 3, 4, 5], -1.0, 1.0, &mut rng);
        assert_eq!(layer.forward(&x).unwrap(), x);
    }

    #[test]
    fn zero_kernel_gives_bias() {
        let mut layer = ConvLayer::zeros(2, 1, 3).unwrap();
        layer.bias[0] = 0.75;
        let x = Tensor4::filled([1, 2, 3, 3], 4.0);
        assert!(layer.forward(&x).unwrap().data().iter().all(|&v| v == 0.75));
    }

    #[test]
    fn matches_sliding_window() {
        let mut rng = Rng::new(2);
        let x = Tensor4::uniform([1, 2, 3, 3], -1.0, 1.0, &mut rng);
        for kernel in [1, 3] {
            let layer = ConvLayer::uniform(2, 3, kernel, &mut rng).unwrap();
            let got = layer.forward(&x).unwrap();
            assert!(got.max_abs_diff(&naive_conv(&layer, &x)) < 1e-14);
        }
        let wide = Tensor4::uniform([2, 2, 4, 6], -1.0, 1.0, &mut rng);
        let layer = ConvLayer::uniform(2, 2, 3, &mut rng).unwrap();
        assert!(layer.forward(&wide).unwrap().max_abs_diff(&naive_conv(&layer, &wide)) < 1e-14);
    }

    #[test]
    fn channel_mismatch() {
        let layer = ConvLayer::zeros(2, 1, 1).unwrap();
        assert!(layer.forward(&Tensor4::zeros([1, 3, 2, 2])).is_err());
        assert!(ConvLayer::zeros(2, 1, 5).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = Rng::new(3);
        let x = Tensor4::uniform([2, 2, 3, 4], -1.0, 1.0, &mut rng);
        for kernel in [1, 3] {
            let layer = ConvLayer::uniform(2, 3, kernel, &mut rng).unwrap();
            let proj = Tensor4::uniform([2, 3, 3, 4], -1.0, 1.0, &mut rng);
            let f = |l: &ConvLayer, x: &Tensor4| -> f64 {
                l.forward(x).unwrap().data().iter().zip(proj.data()).map(|(a, b)| a * b).sum()
            };
            let g = layer.backward(&x, &proj).unwrap();
            let h = 1e-6;
            let rel = |a: f64, n: f64| (a - n).abs() / (a.abs() + n.abs()).max(1e-8);
            for i in 0..layer.weights.len() {
                let (mut p, mut m) = (layer.clone(), layer.clone());
                p.weights[i] += h;
                m.weights[i] -= h;
                let num = (f(&p, &x) - f(&m, &x)) / (2.0 * h);
                assert!(rel(g.dw[i], num) < 1e-5);
            }
            for i in 0..layer.bias.len() {
                let (mut p, mut m) = (layer.clone(), layer.clone());
                p.bias[i] += h;
                m.bias[i] -= h;
                let num = (f(&p, &x) - f(&m, &x)) / (2.0 * h);
                assert!(rel(g.db[i], num) < 1e-5);
            }
            for i in 0..x.data().len() {
                let (mut p, mut m) = (x.clone(), x.clone());
                p.data_mut()[i] += h;
                m.data_mut()[i] -= h;
                let num = (f(&layer, &p) - f(&layer, &m)) / (2.0 * h);
                assert!(rel(g.dx.data()[i], num) < 1e-5);
            }
        }
    }

    #[test]
    fn backward_is_linear_in_upstream() {
        let mut rng = Rng::new(4);
        let x = Tensor4::uniform([1, 2, 3, 3], -1.0, 1.0, &mut rng);
        let layer = ConvLayer::uniform(2, 2, 3, &mut rng).unwrap();
        let zero = layer.backward(&x, &Tensor4::zeros([1, 2, 3, 3])).unwrap();
        assert!(zero.dx.data().iter().chain(&zero.dw).chain(&zero.db).all(|&v| v == 0.0));
        let a = Tensor4::uniform([1, 2, 3, 3], -1.0, 1.0, &mut rng);
        let mut twice = a.clone();
        twice.data_mut().iter_mut().for_each(|v| *v *= 2.0);
        let ga = layer.backward(&x, &a).unwrap();
        let g2 = layer.backward(&x, &twice).unwrap();
        for (p, q) in ga.dw.iter().zip(&g2.dw) {
            assert!((2.0 * p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn leaky_relu_values_and_gradient() {
        let x = Tensor4::from_vec([1, 1, 1, 3], vec![-2.0, 0.0, 1.5]).unwrap();
        assert_eq!(leaky_relu(&x, 0.01).data(), &[-0.02, 0.0, 1.5]);
        assert_eq!(leaky_relu(&x, 0.0).data(), &[-0.0, 0.0, 1.5]);
        let g = leaky_relu_backward(&x, 0.01, &Tensor4::filled([1, 1, 1, 3], 2.0)).unwrap();
        assert_eq!(g.data(), &[0.02, 2.0, 2.0]);
    }

    #[test]
    fn leaky_relu_gradcheck_away_from_zero() {
        let mut rng = Rng::new(5);
        let x = Tensor4::uniform([1, 1, 4, 4], -1.0, 1.0, &mut rng);
        let ones = Tensor4::filled(x.shape(), 1.0);
        let g = leaky_relu_backward(&x, 0.1, &ones).unwrap();
        let h = 1e-6;
        for i in 0..16 {
            if x.data()[i].abs() < 1e-3 {
                continue;
            }
            let (mut p, mut m) = (x.clone(), x.clone());
            p.data_mut()[i] += h;
            m.data_mut()[i] -= h;
            let num = (leaky_relu(&p, 0.1).data()[i] - leaky_relu(&m, 0.1).data()[i]) / (2.0 * h);
            let a = g.data()[i];
            assert!((a - num).abs() / (a.abs() + num.abs()) < 1e-6);
        }
    }
}
