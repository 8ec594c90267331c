//! Sampling kernels for spatial upsampling.
//!
//! Every upsampler here maps an `h × w` map to `k·h × k·w`. Output pixel
//! `(y, x)` reads from the candidate source point `(x/k, y/k)` in input-grid
//! units; there is no half-pixel shift. The location-aware upsampler adds a
//! learned per-pixel displacement to that point before interpolating.
//!
//! Source points outside `[0, w-1] × [0, h-1]` are clamped onto the border,
//! and the displacement gradient is zero while clamped.

use crate::error::{LauError, Result};
use crate::tensor::Tensor4;

/// Per-output-pixel displacement `(Δx, Δy)` in input-grid pixels.
///
/// `dx` and `dy` are laid out like a tensor with `c = m` offset groups. With
/// `m = 1` one displacement is shared by all channels; with `m = C` each
/// channel has its own.
#[derive(Clone, Debug, PartialEq)]
pub struct OffsetField {
    pub dx: Tensor4,
    pub dy: Tensor4,
}

impl OffsetField {
    pub fn zeros(n: usize, m: usize, h: usize, w: usize) -> Self {
        OffsetField {
            dx: Tensor4::zeros([n, m, h, w]),
            dy: Tensor4::zeros([n, m, h, w]),
        }
    }

    pub fn new(dx: Tensor4, dy: Tensor4) -> Result<Self> {
        if dx.shape() != dy.shape() {
            return Err(LauError::shape(format!(
                "offset components differ: {:?} vs {:?}",
                dx.shape(),
                dy.shape()
            )));
        }
        Ok(OffsetField { dx, dy })
    }

    pub fn n(&self) -> usize {
        self.dx.n()
    }
    pub fn groups(&self) -> usize {
        self.dx.c()
    }
    pub fn h(&self) -> usize {
        self.dx.h()
    }
    pub fn w(&self) -> usize {
        self.dx.w()
    }

    /// Splits an interleaved `2M`-channel tensor: channel `2g` is Δx of group
    /// `g`, channel `2g+1` is Δy.
    pub fn from_interleaved(t: &Tensor4) -> Result<Self> {
        let [n, c2, h, w] = t.shape();
        if c2 % 2 != 0 {
            return Err(LauError::shape(format!("offset tensor has odd channel count {c2}")));
        }
        let m = c2 / 2;
        let mut field = OffsetField::zeros(n, m, h, w);
        for b in 0..n {
            for g in 0..m {
                field.dx.plane_mut(b, g).copy_from_slice(t.plane(b, 2 * g));
                field.dy.plane_mut(b, g).copy_from_slice(t.plane(b, 2 * g + 1));
            }
        }
        Ok(field)
    }

    pub fn to_interleaved(&self) -> Tensor4 {
        let [n, m, h, w] = self.dx.shape();
        let mut t = Tensor4::zeros([n, 2 * m, h, w]);
        for b in 0..n {
            for g in 0..m {
                t.plane_mut(b, 2 * g).copy_from_slice(self.dx.plane(b, g));
                t.plane_mut(b, 2 * g + 1).copy_from_slice(self.dy.plane(b, g));
            }
        }
        t
    }
}

/// Two-tap linear interpolation along one axis.
#[derive(Clone, Copy, Debug)]
pub(crate) struct AxisTap {
    pub lo: usize,
    pub hi: usize,
    pub w_lo: f64,
    pub w_hi: f64,
    /// Whether d(sample)/d(point) is `value[hi] - value[lo]`. False when the
    /// point is clamped or sits exactly on a lattice coordinate.
    pub sloped: bool,
}

impl AxisTap {
    #[inline]
    pub(crate) fn new(raw: f64, len: usize) -> Self {
        let max = (len - 1) as f64;
        if raw <= 0.0 || raw >= max {
            let at = if raw <= 0.0 { 0 } else { len - 1 };
            return AxisTap {
                lo: at,
                hi: at,
                w_lo: 1.0,
                w_hi: 0.0,
                sloped: false,
            };
        }
        let lo = raw.floor();
        let frac = raw - lo;
        let lo = lo as usize;
        if frac == 0.0 {
            return AxisTap {
                lo,
                hi: lo,
                w_lo: 1.0,
                w_hi: 0.0,
                sloped: false,
            };
        }
        AxisTap {
            lo,
            hi: lo + 1,
            w_lo: 1.0 - frac,
            w_hi: frac,
            sloped: true,
        }
    }
}

fn check_ratio(k: usize) -> Result<()> {
    if k == 0 {
        return Err(LauError::shape("upsampling ratio must be at least 1"));
    }
    Ok(())
}

fn check_offsets(u: &Tensor4, off: &OffsetField, k: usize) -> Result<()> {
    check_ratio(k)?;
    let [n, c, h, w] = u.shape();
    if off.n() != n || off.h() != k * h || off.w() != k * w {
        return Err(LauError::shape(format!(
            "offset field {:?} does not match output {:?}",
            off.dx.shape(),
            [n, c, k * h, k * w]
        )));
    }
    if off.groups() != 1 && off.groups() != c {
        return Err(LauError::shape(format!(
            "offset groups {} must be 1 or the channel count {c}",
            off.groups()
        )));
    }
    Ok(())
}

/// Bilinear upsampling by integer ratio `k`.
pub fn bilinear_upsample(u: &Tensor4, k: usize) -> Result<Tensor4> {
    check_ratio(k)?;
    let [n, c, h, w] = u.shape();
    let (ho, wo) = (k * h, k * w);
    let xs: Vec<AxisTap> = (0..wo).map(|x| AxisTap::new(x as f64 / k as f64, w)).collect();
    let ys: Vec<AxisTap> = (0..ho).map(|y| AxisTap::new(y as f64 / k as f64, h)).collect();
    let mut v = Tensor4::zeros([n, c, ho, wo]);
    for b in 0..n {
        for ch in 0..c {
            let src = u.plane(b, ch);
            let dst = v.plane_mut(b, ch);
            for (y, ty) in ys.iter().enumerate() {
                let r0 = &src[ty.lo * w..ty.lo * w + w];
                let r1 = &src[ty.hi * w..ty.hi * w + w];
                for (x, tx) in xs.iter().enumerate() {
                    let top = tx.w_lo * r0[tx.lo] + tx.w_hi * r0[tx.hi];
                    let bottom = tx.w_lo * r1[tx.lo] + tx.w_hi * r1[tx.hi];
                    dst[y * wo + x] = ty.w_lo * top + ty.w_hi * bottom;
                }
            }
        }
    }
    Ok(v)
}

/// Adjoint of [`bilinear_upsample`] with respect to its input.
pub fn bilinear_backward(input_shape: [usize; 4], k: usize, dv: &Tensor4) -> Result<Tensor4> {
    check_ratio(k)?;
    let [n, c, h, w] = input_shape;
    let (ho, wo) = (k * h, k * w);
    if dv.shape() != [n, c, ho, wo] {
        return Err(LauError::shape(format!(
            "gradient {:?} does not match upsampled shape {:?}",
            dv.shape(),
            [n, c, ho, wo]
        )));
    }
    let xs: Vec<AxisTap> = (0..wo).map(|x| AxisTap::new(x as f64 / k as f64, w)).collect();
    let ys: Vec<AxisTap> = (0..ho).map(|y| AxisTap::new(y as f64 / k as f64, h)).collect();
    let mut du = Tensor4::zeros(input_shape);
    for b in 0..n {
        for ch in 0..c {
            let g = dv.plane(b, ch);
            let dst = du.plane_mut(b, ch);
            for (y, ty) in ys.iter().enumerate() {
                for (x, tx) in xs.iter().enumerate() {
                    let gv = g[y * wo + x];
                    dst[ty.lo * w + tx.lo] += ty.w_lo * tx.w_lo * gv;
                    dst[ty.lo * w + tx.hi] += ty.w_lo * tx.w_hi * gv;
                    dst[ty.hi * w + tx.lo] += ty.w_hi * tx.w_lo * gv;
                    dst[ty.hi * w + tx.hi] += ty.w_hi * tx.w_hi * gv;
                }
            }
        }
    }
    Ok(du)
}

/// Raw (unclamped) LaU source point for output pixel `(y, x)` of group `g`.
#[inline]
pub fn lau_source_point(off: &OffsetField, b: usize, g: usize, y: usize, x: usize, k: usize) -> (f64, f64) {
    (
        x as f64 / k as f64 + off.dx.at(b, g, y, x),
        y as f64 / k as f64 + off.dy.at(b, g, y, x),
    )
}

/// Location-aware upsampling: bilinear interpolation at `(x/k + Δx, y/k + Δy)`.
pub fn lau_forward(u: &Tensor4, off: &OffsetField, k: usize) -> Result<Tensor4> {
    check_offsets(u, off, k)?;
    let [n, c, h, w] = u.shape();
    let (ho, wo) = (k * h, k * w);
    let groups = off.groups();
    let mut v = Tensor4::zeros([n, c, ho, wo]);
    let plane = h * w;
    let out_plane = ho * wo;
    for b in 0..n {
        let src = &u.data()[b * c * plane..(b + 1) * c * plane];
        let dst = &mut v.data_mut()[b * c * out_plane..(b + 1) * c * out_plane];
        for y in 0..ho {
            for x in 0..wo {
                for g in 0..groups {
                    let (px, py) = lau_source_point(off, b, g, y, x, k);
                    let tx = AxisTap::new(px, w);
                    let ty = AxisTap::new(py, h);
                    let channels = if groups == 1 { 0..c } else { g..g + 1 };
                    for ch in channels {
                        let s = &src[ch * plane..(ch + 1) * plane];
                        let top = tx.w_lo * s[ty.lo * w + tx.lo] + tx.w_hi * s[ty.lo * w + tx.hi];
                        let bottom = tx.w_lo * s[ty.hi * w + tx.lo] + tx.w_hi * s[ty.hi * w + tx.hi];
                        dst[ch * out_plane + y * wo + x] = ty.w_lo * top + ty.w_hi * bottom;
                    }
                }
            }
        }
    }
    Ok(v)
}

/// Gradients of [`lau_forward`] with respect to the input map and the offsets.
pub fn lau_backward(
    u: &Tensor4,
    off: &OffsetField,
    k: usize,
    dv: &Tensor4,
) -> Result<(Tensor4, OffsetField)> {
    check_offsets(u, off, k)?;
    let [n, c, h, w] = u.shape();
    let (ho, wo) = (k * h, k * w);
    if dv.shape() != [n, c, ho, wo] {
        return Err(LauError::shape(format!(
            "gradient {:?} does not match output {:?}",
            dv.shape(),
            [n, c, ho, wo]
        )));
    }
    let groups = off.groups();
    let mut du = Tensor4::zeros(u.shape());
    let mut doff = OffsetField::zeros(n, groups, ho, wo);
    let plane = h * w;
    let out_plane = ho * wo;
    for b in 0..n {
        for y in 0..ho {
            for x in 0..wo {
                for g in 0..groups {
                    let (px, py) = lau_source_point(off, b, g, y, x, k);
                    let tx = AxisTap::new(px, w);
                    let ty = AxisTap::new(py, h);
                    let (mut gx, mut gy) = (0.0, 0.0);
                    let channels = if groups == 1 { 0..c } else { g..g + 1 };
                    for ch in channels {
                        let gv = dv.data()[(b * c + ch) * out_plane + y * wo + x];
                        if gv == 0.0 {
                            continue;
                        }
                        let base = (b * c + ch) * plane;
                        let s = &u.data()[base..base + plane];
                        let (i00, i01) = (ty.lo * w + tx.lo, ty.lo * w + tx.hi);
                        let (i10, i11) = (ty.hi * w + tx.lo, ty.hi * w + tx.hi);
                        let d = &mut du.data_mut()[base..base + plane];
                        d[i00] += ty.w_lo * tx.w_lo * gv;
                        d[i01] += ty.w_lo * tx.w_hi * gv;
                        d[i10] += ty.w_hi * tx.w_lo * gv;
                        d[i11] += ty.w_hi * tx.w_hi * gv;
                        if tx.sloped {
                            gx += gv * (ty.w_lo * (s[i01] - s[i00]) + ty.w_hi * (s[i11] - s[i10]));
                        }
                        if ty.sloped {
                            gy += gv * (tx.w_lo * (s[i10] - s[i00]) + tx.w_hi * (s[i11] - s[i01]));
                        }
                    }
                    *doff.dx.at_mut(b, g, y, x) = gx;
                    *doff.dy.at_mut(b, g, y, x) = gy;
                }
            }
        }
    }
    Ok((du, doff))
}

/// Periodic shuffle of `k²` channel groups into `k × k` spatial cells.
pub fn pixel_shuffle(u: &Tensor4, k: usize) -> Result<Tensor4> {
    check_ratio(k)?;
    let [n, c, h, w] = u.shape();
    let kk = k * k;
    if c % kk != 0 {
        return Err(LauError::shape(format!(
            "channel count {c} is not divisible by k² = {kk}"
        )));
    }
    let groups = c / kk;
    let mut v = Tensor4::zeros([n, groups, k * h, k * w]);
    for b in 0..n {
        for g in 0..groups {
            for y in 0..k * h {
                for x in 0..k * w {
                    let src_c = g * kk + k * (y % k) + (x % k);
                    *v.at_mut(b, g, y, x) = u.at(b, src_c, y / k, x / k);
                }
            }
        }
    }
    Ok(v)
}

/// Exact inverse of [`pixel_shuffle`].
pub fn pixel_unshuffle(v: &Tensor4, k: usize) -> Result<Tensor4> {
    check_ratio(k)?;
    let [n, c, h, w] = v.shape();
    if h % k != 0 || w % k != 0 {
        return Err(LauError::shape(format!(
            "spatial dims {h}x{w} are not divisible by {k}"
        )));
    }
    let kk = k * k;
    let mut u = Tensor4::zeros([n, c * kk, h / k, w / k]);
    for b in 0..n {
        for g in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let dst_c = g * kk + k * (y % k) + (x % k);
                    *u.at_mut(b, dst_c, y / k, x / k) = v.at(b, g, y, x);
                }
            }
        }
    }
    Ok(u)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Rounding {
    Floor,
    Ceil,
}

impl Rounding {
    /// `mode(pos / k)` clipped into `[0, len-1]`.
    #[inline]
    pub fn source(self, pos: usize, k: usize, len: usize) -> usize {
        let r = match self {
            Rounding::Floor => pos / k,
            Rounding::Ceil => pos.div_ceil(k),
        };
        r.min(len - 1)
    }
}

/// Integral-coordinate sampler: reads the single source pixel at the
/// floor/ceil of the candidate point along each axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Corner {
    pub x_mode: Rounding,
    pub y_mode: Rounding,
}

impl Corner {
    pub const FLOOR_FLOOR: Corner = Corner::new(Rounding::Floor, Rounding::Floor);
    pub const CEIL_FLOOR: Corner = Corner::new(Rounding::Ceil, Rounding::Floor);
    pub const FLOOR_CEIL: Corner = Corner::new(Rounding::Floor, Rounding::Ceil);
    pub const CEIL_CEIL: Corner = Corner::new(Rounding::Ceil, Rounding::Ceil);

    /// Candidate order used by the regression loss:
    /// `(⌊x⌋,⌊y⌋), (⌈x⌉,⌊y⌋), (⌊x⌋,⌈y⌉), (⌈x⌉,⌈y⌉)`.
    pub const ALL: [Corner; 4] = [
        Corner::FLOOR_FLOOR,
        Corner::CEIL_FLOOR,
        Corner::FLOOR_CEIL,
        Corner::CEIL_CEIL,
    ];

    pub const fn new(x_mode: Rounding, y_mode: Rounding) -> Self {
        Corner { x_mode, y_mode }
    }

    /// Two-letter tag, x mode first: `ff`, `cf`, `fc`, `cc`.
    pub fn tag(self) -> &'static str {
        match (self.x_mode, self.y_mode) {
            (Rounding::Floor, Rounding::Floor) => "ff",
            (Rounding::Ceil, Rounding::Floor) => "cf",
            (Rounding::Floor, Rounding::Ceil) => "fc",
            (Rounding::Ceil, Rounding::Ceil) => "cc",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Corner> {
        Corner::ALL.into_iter().find(|c| c.tag() == tag)
    }

    /// Clipped integral source coordinate `(x, y)` for output pixel `(y, x)`.
    #[inline]
    pub fn source(self, y: usize, x: usize, k: usize, h: usize, w: usize) -> (usize, usize) {
        (self.x_mode.source(x, k, w), self.y_mode.source(y, k, h))
    }
}

pub fn corner_upsample(u: &Tensor4, k: usize, corner: Corner) -> Result<Tensor4> {
    check_ratio(k)?;
    let [n, c, h, w] = u.shape();
    let (ho, wo) = (k * h, k * w);
    let mut v = Tensor4::zeros([n, c, ho, wo]);
    for b in 0..n {
        for ch in 0..c {
            let src = u.plane(b, ch);
            let dst = v.plane_mut(b, ch);
            for y in 0..ho {
                for x in 0..wo {
                    let (sx, sy) = corner.source(y, x, k, h, w);
                    dst[y * wo + x] = src[sy * w + sx];
                }
            }
        }
    }
    Ok(v)
}
