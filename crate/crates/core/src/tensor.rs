//! Dense NCHW storage for feature maps, gradients and label maps.

use std::io::{Read, Write};

use crate::error::{LauError, Result};
use crate::rng::Rng;

pub type Shape = [usize; 4];

/// Flat offset of `(n, c, h, w)` in a row-major NCHW buffer.
pub fn nchw_index(index: [usize; 4], shape: Shape) -> Result<usize> {
    if index.iter().zip(shape.iter()).any(|(i, d)| i >= d) {
        return Err(LauError::Index { index, shape });
    }
    let [n, c, h, w] = index;
    Ok(((n * shape[1] + c) * shape[2] + h) * shape[3] + w)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor4 {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor4 {
    pub fn zeros(shape: Shape) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: Shape, value: f64) -> Self {
        assert!(shape.iter().all(|&d| d >= 1), "empty dimension in {shape:?}");
        Tensor4 {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(LauError::shape(format!("empty dimension in {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(LauError::shape(format!(
                "data length {} does not match shape {shape:?} ({expected})",
                data.len()
            )));
        }
        Ok(Tensor4 { shape, data })
    }

    pub fn uniform(shape: Shape, lo: f64, hi: f64, rng: &mut Rng) -> Self {
        let mut t = Self::zeros(shape);
        t.data.iter_mut().for_each(|v| *v = rng.uniform_range(lo, hi));
        t
    }

    pub fn normal(shape: Shape, mean: f64, std: f64, rng: &mut Rng) -> Self {
        let mut t = Self::zeros(shape);
        t.data.iter_mut().for_each(|v| *v = rng.normal(mean, std));
        t
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }
    pub fn n(&self) -> usize {
        self.shape[0]
    }
    pub fn c(&self) -> usize {
        self.shape[1]
    }
    pub fn h(&self) -> usize {
        self.shape[2]
    }
    pub fn w(&self) -> usize {
        self.shape[3]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// Unchecked-by-`Result` offset; panics on out-of-bounds in debug builds.
    #[inline]
    pub fn offset(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        debug_assert!(n < self.shape[0] && c < self.shape[1] && h < self.shape[2] && w < self.shape[3]);
        ((n * self.shape[1] + c) * self.shape[2] + h) * self.shape[3] + w
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.offset(n, c, h, w)]
    }

    #[inline]
    pub fn at_mut(&mut self, n: usize, c: usize, h: usize, w: usize) -> &mut f64 {
        let i = self.offset(n, c, h, w);
        &mut self.data[i]
    }

    pub fn get(&self, index: [usize; 4]) -> Result<f64> {
        Ok(self.data[nchw_index(index, self.shape)?])
    }

    /// Contiguous `h·w` plane for one `(n, c)` pair.
    pub fn plane(&self, n: usize, c: usize) -> &[f64] {
        let len = self.shape[2] * self.shape[3];
        let start = self.offset(n, c, 0, 0);
        &self.data[start..start + len]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [f64] {
        let len = self.shape[2] * self.shape[3];
        let start = self.offset(n, c, 0, 0);
        &mut self.data[start..start + len]
    }

    pub fn max_abs_diff(&self, other: &Tensor4) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Stacks single-sample tensors of equal shape along the batch axis.
    pub fn stack(items: &[&Tensor4]) -> Result<Tensor4> {
        let first = items
            .first()
            .ok_or_else(|| LauError::shape("cannot stack zero tensors"))?;
        let [_, c, h, w] = first.shape;
        let mut data = Vec::with_capacity(items.len() * first.data.len());
        for t in items {
            if t.shape[1..] != first.shape[1..] {
                return Err(LauError::shape("stacked tensors differ in shape"));
            }
            data.extend_from_slice(&t.data);
        }
        let n = items.iter().map(|t| t.shape[0]).sum();
        Tensor4::from_vec([n, c, h, w], data)
    }

    /// Per-pixel argmax over channels; ties go to the lowest channel.
    pub fn argmax_channels(&self) -> LabelMap {
        let [n, c, h, w] = self.shape;
        let mut labels = vec![0i32; n * h * w];
        for b in 0..n {
            for y in 0..h {
                for x in 0..w {
                    let mut best = 0;
                    let mut best_v = self.at(b, 0, y, x);
                    for ch in 1..c {
                        let v = self.at(b, ch, y, x);
                        if v > best_v {
                            best = ch;
                            best_v = v;
                        }
                    }
                    labels[(b * h + y) * w + x] = best as i32;
                }
            }
        }
        LabelMap {
            n,
            h,
            w,
            labels,
            num_classes: c.max(2),
            ignore_value: LabelMap::DEFAULT_IGNORE,
        }
    }

    pub fn write_to(&self, out: &mut impl Write) -> Result<()> {
        write_header(out, self.shape)?;
        for v in &self.data {
            out.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(input: &mut impl Read) -> Result<Tensor4> {
        let shape = read_header(input)?;
        let len: usize = shape.iter().product();
        let mut bytes = vec![0u8; len * 8];
        input.read_exact(&mut bytes)?;
        let data = bytes
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        Tensor4::from_vec(shape, data)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(16 + 8 * self.data.len());
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }
}

fn write_header(out: &mut impl Write, shape: Shape) -> Result<()> {
    for d in shape {
        let d = u32::try_from(d).map_err(|_| LauError::Format(format!("dim {d} exceeds u32")))?;
        out.write_all(&d.to_le_bytes())?;
    }
    Ok(())
}

fn read_header(input: &mut impl Read) -> Result<Shape> {
    let mut header = [0u8; 16];
    input.read_exact(&mut header)?;
    let mut shape = [0usize; 4];
    for (i, chunk) in header.chunks_exact(4).enumerate() {
        shape[i] = u32::from_le_bytes(chunk.try_into().unwrap()) as usize;
    }
    if shape.contains(&0) {
        return Err(LauError::Format(format!("zero dimension in header {shape:?}")));
    }
    Ok(shape)
}

/// Per-pixel class assignments, `n × h × w`, with a reserved ignore value.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub labels: Vec<i32>,
    pub num_classes: usize,
    pub ignore_value: i32,
}

impl LabelMap {
    pub const DEFAULT_IGNORE: i32 = -1;

    pub fn new(n: usize, h: usize, w: usize, labels: Vec<i32>, num_classes: usize) -> Result<Self> {
        if n * h * w == 0 || labels.len() != n * h * w {
            return Err(LauError::shape(format!(
                "label count {} does not match {n}x{h}x{w}",
                labels.len()
            )));
        }
        if num_classes < 2 {
            return Err(LauError::shape("label map needs at least 2 classes"));
        }
        let map = LabelMap {
            n,
            h,
            w,
            labels,
            num_classes,
            ignore_value: Self::DEFAULT_IGNORE,
        };
        if let Some(bad) = map.labels.iter().find(|&&l| !map.is_valid_label(l)) {
            return Err(LauError::shape(format!(
                "label {bad} outside [0, {num_classes})"
            )));
        }
        Ok(map)
    }

    pub fn filled(n: usize, h: usize, w: usize, label: i32, num_classes: usize) -> Result<Self> {
        Self::new(n, h, w, vec![label; n * h * w], num_classes)
    }

    fn is_valid_label(&self, l: i32) -> bool {
        l == self.ignore_value || (l >= 0 && (l as usize) < self.num_classes)
    }

    #[inline]
    pub fn at(&self, n: usize, y: usize, x: usize) -> i32 {
        self.labels[(n * self.h + y) * self.w + x]
    }

    #[inline]
    pub fn is_ignored(&self, n: usize, y: usize, x: usize) -> bool {
        self.at(n, y, x) == self.ignore_value
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.n, self.h, self.w)
    }

    pub fn stack(items: &[&LabelMap]) -> Result<LabelMap> {
        let first = items
            .first()
            .ok_or_else(|| LauError::shape("cannot stack zero label maps"))?;
        let mut labels = Vec::new();
        for m in items {
            if (m.h, m.w, m.num_classes) != (first.h, first.w, first.num_classes) {
                return Err(LauError::shape("stacked label maps differ"));
            }
            labels.extend_from_slice(&m.labels);
        }
        let n = items.iter().map(|m| m.n).sum();
        Ok(LabelMap {
            n,
            h: first.h,
            w: first.w,
            labels,
            num_classes: first.num_classes,
            ignore_value: first.ignore_value,
        })
    }

    /// Binary dump: dims `(n, 1, h, w)` header then little-endian i32 labels.
    pub fn write_to(&self, out: &mut impl Write) -> Result<()> {
        write_header(out, [self.n, 1, self.h, self.w])?;
        for l in &self.labels {
            out.write_all(&l.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(input: &mut impl Read, num_classes: usize) -> Result<LabelMap> {
        let [n, c, h, w] = read_header(input)?;
        if c != 1 {
            return Err(LauError::Format(format!("label dump has {c} channels")));
        }
        let mut bytes = vec![0u8; n * h * w * 4];
        input.read_exact(&mut bytes)?;
        let labels = bytes
            .chunks_exact(4)
            .map(|b| i32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        LabelMap::new(n, h, w, labels, num_classes)
    }
}
