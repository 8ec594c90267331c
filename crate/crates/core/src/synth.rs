//! Synthetic segmentation benchmark and evaluation metrics.
//!
//! Each sample is a full-resolution label map of rectangles and discs on a
//! background class, paired with a low-resolution feature map obtained by
//! majority-pooling the labels over `K × K` cells, one-hot encoding, and
//! adding Gaussian noise. Cells straddling a boundary lose the minority
//! class, so the upsampler has to recover edges the features cannot see.

use std::fs;
use std::path::Path;

use crate::error::{LauError, Result};
use crate::rng::Rng;
use crate::tensor::{LabelMap, Tensor4};

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSample {
    /// `1 × C × H/K × W/K`.
    pub features: Tensor4,
    /// `1 × H × W`.
    pub labels: LabelMap,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthSpec {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub stride: usize,
    pub noise_std: f64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(LauError::config("classes", "need at least 2 classes"));
        }
        if self.stride == 0 || !self.height.is_multiple_of(self.stride) || !self.width.is_multiple_of(self.stride) {
            return Err(LauError::config(
                "output_stride",
                format!(
                    "stride {} must divide the image size {}x{}",
                    self.stride, self.height, self.width
                ),
            ));
        }
        if self.height < 2 || self.width < 2 {
            return Err(LauError::config("image_size", "images must be at least 2x2"));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(LauError::config("noise_std", "must be finite and non-negative"));
        }
        Ok(())
    }
}

pub fn gen_dataset(seed: u64, count: usize, spec: SynthSpec) -> Result<Vec<SynthSample>> {
    spec.validate()?;
    (0..count).map(|i| gen_sample(seed, i, spec)).collect()
}

/// Sample `index` of the dataset seeded by `seed`; independent of the others.
pub fn gen_sample(seed: u64, index: usize, spec: SynthSpec) -> Result<SynthSample> {
    spec.validate()?;
    let mut rng = Rng::for_index(seed, index as u64);
    let labels = loop {
        let labels = paint_labels(&mut rng, spec);
        if has_boundary(&labels, spec.width) {
            break labels;
        }
    };
    let labels = LabelMap::new(1, spec.height, spec.width, labels, spec.classes)?;
    let features = pooled_features(&labels, spec, &mut rng);
    Ok(SynthSample { features, labels })
}

fn paint_labels(rng: &mut Rng, spec: SynthSpec) -> Vec<i32> {
    let (h, w, c) = (spec.height, spec.width, spec.classes);
    let side = h.min(w);
    let background = rng.below(0, c);
    let mut labels = vec![background as i32; h * w];
    let shapes = rng.below(2, 6);
    for _ in 0..shapes {
        let class = ((background + 1 + rng.below(0, c - 1)) % c) as i32;
        if rng.uniform() < 0.5 {
            let lo = (side / 8).max(1);
            let hi = (side / 2).max(lo);
            let rh = rng.below(lo, hi + 1);
            let rw = rng.below(lo, hi + 1);
            let top = rng.below(0, h - rh + 1);
            let left = rng.below(0, w - rw + 1);
            for y in top..top + rh {
                labels[y * w + left..y * w + left + rw].fill(class);
            }
        } else {
            let lo = (side as f64 / 16.0).max(1.0);
            let hi = (side as f64 / 4.0).max(lo);
            let radius = rng.uniform_range(lo, hi);
            let cy = rng.uniform_range(0.0, h as f64);
            let cx = rng.uniform_range(0.0, w as f64);
            for y in 0..h {
                for x in 0..w {
                    let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                    if dx * dx + dy * dy <= radius * radius {
                        labels[y * w + x] = class;
                    }
                }
            }
        }
    }
    labels
}

fn has_boundary(labels: &[i32], w: usize) -> bool {
    labels.iter().enumerate().any(|(i, &l)| {
        let right = (i % w + 1 < w) && labels[i + 1] != l;
        let down = i + w < labels.len() && labels[i + w] != l;
        right || down
    })
}

/// Mode of each `K × K` cell; ties go to the lowest class.
pub fn majority_pool(labels: &LabelMap, stride: usize) -> Vec<usize> {
    let (h, w) = (labels.h / stride, labels.w / stride);
    let mut counts = vec![0usize; labels.num_classes];
    let mut out = Vec::with_capacity(h * w);
    for cy in 0..h {
        for cx in 0..w {
            counts.fill(0);
            for y in cy * stride..(cy + 1) * stride {
                for x in cx * stride..(cx + 1) * stride {
                    let l = labels.at(0, y, x);
                    if l >= 0 {
                        counts[l as usize] += 1;
                    }
                }
            }
            let mut best = 0;
            for (class, &n) in counts.iter().enumerate() {
                if n > counts[best] {
                    best = class;
                }
            }
            out.push(best);
        }
    }
    out
}

fn pooled_features(labels: &LabelMap, spec: SynthSpec, rng: &mut Rng) -> Tensor4 {
    let (h, w) = (spec.height / spec.stride, spec.width / spec.stride);
    let pooled = majority_pool(labels, spec.stride);
    let mut features = Tensor4::zeros([1, spec.classes, h, w]);
    for class in 0..spec.classes {
        let plane = features.plane_mut(0, class);
        for (v, &p) in plane.iter_mut().zip(&pooled) {
            *v = if p == class { 1.0 } else { 0.0 };
        }
    }
    if spec.noise_std > 0.0 {
        for v in features.data_mut() {
            *v += rng.normal(0.0, spec.noise_std);
        }
    }
    features
}

/// Writes `sample_NNNNN_features.bin` and `sample_NNNNN_labels.bin` per sample.
pub fn write_dataset(dir: &Path, samples: &[SynthSample]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (i, s) in samples.iter().enumerate() {
        fs::write(dir.join(format!("sample_{i:05}_features.bin")), s.features.to_bytes())?;
        let mut buf = Vec::new();
        s.labels.write_to(&mut buf)?;
        fs::write(dir.join(format!("sample_{i:05}_labels.bin")), buf)?;
    }
    Ok(())
}

fn check_pair(pred: &LabelMap, gt: &LabelMap) -> Result<()> {
    if pred.dims() != gt.dims() {
        return Err(LauError::shape(format!(
            "prediction {:?} and ground truth {:?} differ",
            pred.dims(),
            gt.dims()
        )));
    }
    Ok(())
}

/// Fraction of non-ignored ground-truth pixels predicted correctly.
pub fn pix_acc(pred: &LabelMap, gt: &LabelMap) -> Result<f64> {
    check_pair(pred, gt)?;
    let (mut hit, mut total) = (0usize, 0usize);
    for (&p, &g) in pred.labels.iter().zip(&gt.labels) {
        if g == gt.ignore_value {
            continue;
        }
        total += 1;
        if p == g {
            hit += 1;
        }
    }
    if total == 0 {
        return Err(LauError::EmptyReduction);
    }
    Ok(hit as f64 / total as f64)
}

/// Per-class intersection and union counts over non-ignored pixels.
pub fn confusion_counts(pred: &LabelMap, gt: &LabelMap, classes: usize) -> Result<(Vec<u64>, Vec<u64>)> {
    check_pair(pred, gt)?;
    let mut inter = vec![0u64; classes];
    let mut union = vec![0u64; classes];
    for (&p, &g) in pred.labels.iter().zip(&gt.labels) {
        if g == gt.ignore_value {
            continue;
        }
        let in_range = |l: i32| l >= 0 && (l as usize) < classes;
        if p == g && in_range(g) {
            inter[g as usize] += 1;
            union[g as usize] += 1;
        } else {
            if in_range(p) {
                union[p as usize] += 1;
            }
            if in_range(g) {
                union[g as usize] += 1;
            }
        }
    }
    Ok((inter, union))
}

/// Mean IoU over classes present in the prediction or the ground truth.
pub fn miou(pred: &LabelMap, gt: &LabelMap, classes: usize) -> Result<f64> {
    let (inter, union) = confusion_counts(pred, gt, classes)?;
    miou_from_counts(&inter, &union)
}

pub fn miou_from_counts(inter: &[u64], union: &[u64]) -> Result<f64> {
    let ious: Vec<f64> = inter
        .iter()
        .zip(union)
        .filter(|(_, &u)| u > 0)
        .map(|(&i, &u)| i as f64 / u as f64)
        .collect();
    if ious.is_empty() {
        return Err(LauError::EmptyReduction);
    }
    Ok(ious.iter().sum::<f64>() / ious.len() as f64)
}

/// Fraction of interior pixels whose label differs from all four cardinal
/// neighbours; a checkerboard-artifact detector.
pub fn speckle_rate(pred: &LabelMap) -> Result<f64> {
    let (n, h, w) = pred.dims();
    if h < 3 || w < 3 {
        return Err(LauError::shape(format!(
            "speckle rate needs at least 3x3 maps, got {h}x{w}"
        )));
    }
    let mut isolated = 0usize;
    for b in 0..n {
        for y in 1..h - 1 {
            for x in 1..w - 1 {
                let l = pred.at(b, y, x);
                if pred.at(b, y - 1, x) != l
                    && pred.at(b, y + 1, x) != l
                    && pred.at(b, y, x - 1) != l
                    && pred.at(b, y, x + 1) != l
                {
                    isolated += 1;
                }
            }
        }
    }
    Ok(isolated as f64 / (n * (h - 2) * (w - 2)) as f64)
}
