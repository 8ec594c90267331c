//! SGD with momentum, the poly learning-rate schedule, and the training loop.

use std::io::{BufRead, Read, Write};

use crate::error::{LauError, Result};
use crate::net::{LauNet, NetConfig, NetGrads};
use crate::nn::ConvLayer;
use crate::rng::Rng;
use crate::synth::{confusion_counts, miou_from_counts, speckle_rate, SynthSample};
use crate::tensor::{LabelMap, Tensor4};

/// `base · (1 − iter/total)^power`.
pub fn poly_lr(base: f64, iter: usize, total: usize, power: f64) -> f64 {
    if total == 0 {
        return base;
    }
    let frac = 1.0 - (iter.min(total) as f64 / total as f64);
    base * frac.powf(power)
}

/// Momentum SGD with per-layer weight decay:
/// `v ← μ·v + (g + wd·w)`, `w ← w − lr·v`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    velocity: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Sgd {
    pub fn new(momentum: f64, layers: &[&ConvLayer]) -> Self {
        Sgd {
            momentum,
            velocity: layers
                .iter()
                .map(|l| (vec![0.0; l.weights.len()], vec![0.0; l.bias.len()]))
                .collect(),
        }
    }

    pub fn step(&mut self, layers: &mut [&mut ConvLayer], grads: &NetGrads, lr: f64) -> Result<()> {
        if layers.len() != self.velocity.len() || grads.layers.len() != layers.len() {
            return Err(LauError::shape("optimizer state does not match the layers"));
        }
        for ((layer, (vw, vb)), (gw, gb)) in layers.iter_mut().zip(&mut self.velocity).zip(&grads.layers) {
            if gw.len() != layer.weights.len() || gb.len() != layer.bias.len() {
                return Err(LauError::shape("gradient does not match layer parameters"));
            }
            let wd = layer.weight_decay;
            for ((w, v), g) in layer.weights.iter_mut().zip(vw.iter_mut()).zip(gw) {
                *v = self.momentum * *v + (g + wd * *w);
                *w -= lr * *v;
            }
            for ((w, v), g) in layer.bias.iter_mut().zip(vb.iter_mut()).zip(gb) {
                *v = self.momentum * *v + (g + wd * *w);
                *w -= lr * *v;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub net: NetConfig,
    pub base_lr: f64,
    pub power: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        let err = LauError::config;
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(err("lr", "must be positive and finite"));
        }
        if !(self.power > 0.0 && self.power.is_finite()) {
            return Err(err("power", "must be positive and finite"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(err("momentum", "must lie in [0, 1)"));
        }
        if self.epochs == 0 {
            return Err(err("epochs", "must be at least 1"));
        }
        if self.batch == 0 {
            return Err(err("batch", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub split: Split,
    pub loss: f64,
    pub pixacc: f64,
    pub miou: f64,
    pub speckle: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub net: LauNet,
    pub metrics: Vec<EpochMetrics>,
}

impl TrainOutcome {
    pub fn final_val(&self) -> Option<&EpochMetrics> {
        self.metrics.iter().rev().find(|m| m.split == Split::Val)
    }
}

/// Running segmentation statistics over a split.
struct Tally {
    classes: usize,
    loss_sum: f64,
    batches: usize,
    hits: u64,
    total: u64,
    inter: Vec<u64>,
    union: Vec<u64>,
    speckle_sum: f64,
    images: usize,
}

impl Tally {
    fn new(classes: usize) -> Self {
        Tally {
            classes,
            loss_sum: 0.0,
            batches: 0,
            hits: 0,
            total: 0,
            inter: vec![0; classes],
            union: vec![0; classes],
            speckle_sum: 0.0,
            images: 0,
        }
    }

    fn add(&mut self, loss: f64, logits: &Tensor4, gt: &LabelMap) -> Result<()> {
        self.loss_sum += loss;
        self.batches += 1;
        let pred = logits.argmax_channels();
        for (&p, &g) in pred.labels.iter().zip(&gt.labels) {
            if g != gt.ignore_value {
                self.total += 1;
                if p == g {
                    self.hits += 1;
                }
            }
        }
        let (inter, union) = confusion_counts(&pred, gt, self.classes)?;
        for c in 0..self.classes {
            self.inter[c] += inter[c];
            self.union[c] += union[c];
        }
        if pred.h >= 3 && pred.w >= 3 {
            self.speckle_sum += speckle_rate(&pred)? * pred.n as f64;
        }
        self.images += pred.n;
        Ok(())
    }

    fn finish(&self, epoch: usize, split: Split) -> Result<EpochMetrics> {
        Ok(EpochMetrics {
            epoch,
            split,
            loss: self.loss_sum / self.batches.max(1) as f64,
            pixacc: self.hits as f64 / self.total.max(1) as f64,
            miou: miou_from_counts(&self.inter, &self.union)?,
            speckle: self.speckle_sum / self.images.max(1) as f64,
        })
    }
}

fn batch_of(samples: &[SynthSample], order: &[usize]) -> Result<(Tensor4, LabelMap)> {
    let feats: Vec<&Tensor4> = order.iter().map(|&i| &samples[i].features).collect();
    let labels: Vec<&LabelMap> = order.iter().map(|&i| &samples[i].labels).collect();
    Ok((Tensor4::stack(&feats)?, LabelMap::stack(&labels)?))
}

fn shuffled(count: usize, rng: &mut Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..count).collect();
    for i in (1..count).rev() {
        let j = rng.below(0, i + 1);
        idx.swap(i, j);
    }
    idx
}

/// Loss and segmentation metrics of `net` over `samples`.
pub fn evaluate(net: &LauNet, samples: &[SynthSample], batch: usize, epoch: usize) -> Result<EpochMetrics> {
    let mut tally = Tally::new(net.config.classes);
    let order: Vec<usize> = (0..samples.len()).collect();
    for chunk in order.chunks(batch.max(1)) {
        let (x, y) = batch_of(samples, chunk)?;
        let fwd = net.forward(&x)?;
        let loss = net.objective(&fwd, &y)?.loss;
        tally.add(loss, &fwd.logits, &y)?;
    }
    tally.finish(epoch, Split::Val)
}

/// Trains from scratch; deterministic given `config.seed`.
///
/// Each epoch visits the training set in a seeded random order; the
/// learning rate follows the poly schedule over all iterations. One train
/// and one val row are emitted per epoch; train statistics come from the
/// forward passes made during the epoch.
pub fn train(config: &TrainConfig, train_set: &[SynthSample], val_set: &[SynthSample]) -> Result<TrainOutcome> {
    config.validate()?;
    train_with(config, train_set, val_set, |_| {})
}

pub fn train_with(
    config: &TrainConfig,
    train_set: &[SynthSample],
    val_set: &[SynthSample],
    mut on_epoch: impl FnMut(&[EpochMetrics]),
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(LauError::config("train_count", "training set is empty"));
    }
    let mut rng = Rng::new(config.seed);
    let mut net = LauNet::new(config.net.clone(), &mut rng)?;
    let mut opt = Sgd::new(
        config.momentum,
        &net.layers().into_iter().map(|(_, l)| l).collect::<Vec<_>>(),
    );
    let per_epoch = train_set.len().div_ceil(config.batch);
    let total = per_epoch * config.epochs;
    let mut iter = 0;
    let mut metrics = Vec::with_capacity(2 * config.epochs);
    for epoch in 1..=config.epochs {
        let mut order_rng = Rng::for_index(config.seed ^ 0x5EED, epoch as u64);
        let order = shuffled(train_set.len(), &mut order_rng);
        let mut tally = Tally::new(config.net.classes);
        for chunk in order.chunks(config.batch) {
            let (x, y) = batch_of(train_set, chunk)?;
            let (loss, fwd, grads) = net.loss_and_grads(&x, &y)?;
            tally.add(loss, &fwd.logits, &y)?;
            let lr = poly_lr(config.base_lr, iter, total, config.power);
            opt.step(&mut net.layers_mut(), &grads, lr)?;
            iter += 1;
        }
        metrics.push(tally.finish(epoch, Split::Train)?);
        if !val_set.is_empty() {
            metrics.push(evaluate(&net, val_set, config.batch, epoch)?);
        }
        on_epoch(&metrics);
    }
    Ok(TrainOutcome { net, metrics })
}

pub const METRICS_HEADER: &str = "epoch,split,loss,pixacc,miou,speckle";

pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for m in rows {
        out.push_str(&format!(
            "{},{},{:.10},{:.10},{:.10},{:.10}\n",
            m.epoch,
            m.split.name(),
            m.loss,
            m.pixacc,
            m.miou,
            m.speckle
        ));
    }
    out
}

/// Checkpoint: one manifest line `lau-checkpoint name:out,in,k,k ...`, then per
/// layer a weight dump `(out, in, k, k)` followed by a bias dump `(out, 1, 1, 1)`.
pub fn write_checkpoint(net: &LauNet, out: &mut impl Write) -> Result<()> {
    let layers = net.layers();
    let manifest: Vec<String> = layers
        .iter()
        .map(|(name, l)| format!("{name}:{},{},{},{}", l.out_ch, l.in_ch, l.kernel, l.kernel))
        .collect();
    writeln!(out, "lau-checkpoint {}", manifest.join(" "))?;
    for (_, l) in layers {
        Tensor4::from_vec([l.out_ch, l.in_ch, l.kernel, l.kernel], l.weights.clone())?.write_to(out)?;
        Tensor4::from_vec([l.out_ch, 1, 1, 1], l.bias.clone())?.write_to(out)?;
    }
    Ok(())
}

/// Loads parameters into a network built with a matching configuration.
pub fn read_checkpoint(net: &mut LauNet, input: &mut impl BufRead) -> Result<()> {
    let mut line = String::new();
    input.read_line(&mut line)?;
    let expected: Vec<String> = net
        .layers()
        .iter()
        .map(|(name, l)| format!("{name}:{},{},{},{}", l.out_ch, l.in_ch, l.kernel, l.kernel))
        .collect();
    let got: Vec<&str> = line
        .trim_end()
        .strip_prefix("lau-checkpoint ")
        .ok_or_else(|| LauError::Format("missing checkpoint manifest".into()))?
        .split(' ')
        .collect();
    if got != expected {
        return Err(LauError::Format(format!(
            "checkpoint layers {got:?} do not match network {expected:?}"
        )));
    }
    for layer in net.layers_mut() {
        let w = read_tensor(input)?;
        let b = read_tensor(input)?;
        if w.data().len() != layer.weights.len() || b.data().len() != layer.bias.len() {
            return Err(LauError::Format("checkpoint tensor size mismatch".into()));
        }
        layer.weights.copy_from_slice(w.data());
        layer.bias.copy_from_slice(b.data());
    }
    Ok(())
}

fn read_tensor(input: &mut impl Read) -> Result<Tensor4> {
    Tensor4::read_from(input)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{LossKind, UpsamplerKind};
    use crate::synth::{gen_dataset, SynthSpec};

    #[test]
    fn poly_examples() {
        assert_eq!(poly_lr(0.001, 0, 100, 0.9), 0.001);
        assert_eq!(poly_lr(0.001, 100, 100, 0.9), 0.0);
        assert!((poly_lr(0.001, 50, 100, 0.9) - 5.3589e-4).abs() < 1e-8);
    }

    #[test]
    fn poly_is_nonincreasing() {
        let mut prev = f64::INFINITY;
        for i in 0..=200 {
            let lr = poly_lr(0.01, i, 200, 0.9);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    fn layer(values: &[f64], wd: f64) -> ConvLayer {
        let mut l = ConvLayer::zeros(1, values.len() - 1, 1).unwrap();
        l.weights.copy_from_slice(&values[..values.len() - 1]);
        l.bias = vec![0.0; values.len() - 1];
        l.weight_decay = wd;
        l
    }

    #[test]
    fn plain_descent_without_momentum() {
        let mut l = layer(&[1.0, -2.0, 0.0], 0.0);
        let mut opt = Sgd::new(0.0, &[&l]);
        let grads = NetGrads {
            layers: vec![(vec![0.5, 1.0], vec![0.0, 0.0])],
        };
        opt.step(&mut [&mut l], &grads, 0.1).unwrap();
        assert_eq!(l.weights, vec![1.0 - 0.05, -2.0 - 0.1]);
    }

    #[test]
    fn velocity_decays_geometrically() {
        let mut l = layer(&[0.0, 0.0], 0.0);
        let mut opt = Sgd::new(0.5, &[&l]);
        let kick = NetGrads {
            layers: vec![(vec![1.0], vec![0.0])],
        };
        let zero = NetGrads {
            layers: vec![(vec![0.0], vec![0.0])],
        };
        opt.step(&mut [&mut l], &kick, 1.0).unwrap();
        let mut expected_v = 1.0;
        for _ in 0..4 {
            let before = l.weights[0];
            opt.step(&mut [&mut l], &zero, 1.0).unwrap();
            expected_v *= 0.5;
            assert!((before - l.weights[0] - expected_v).abs() < 1e-15);
        }
    }

    #[test]
    fn two_momentum_steps_unrolled() {
        let (w0, g1, g2, lr, mu, wd) = (0.8, 0.3, -0.2, 0.05, 0.9, 0.01);
        let mut l = layer(&[w0, 0.0], wd);
        let mut opt = Sgd::new(mu, &[&l]);
        for g in [g1, g2] {
            let grads = NetGrads {
                layers: vec![(vec![g], vec![0.0])],
            };
            opt.step(&mut [&mut l], &grads, lr).unwrap();
        }
        let v1 = g1 + wd * w0;
        let w1 = w0 - lr * v1;
        let v2 = mu * v1 + (g2 + wd * w1);
        let w2 = w1 - lr * v2;
        assert!((l.weights[0] - w2).abs() < 1e-15);
    }

    #[test]
    fn zero_decay_leaves_parameters_untouched() {
        let mut l = layer(&[0.7, -0.4, 0.0], 0.0);
        let before = l.weights.clone();
        let mut opt = Sgd::new(0.0, &[&l]);
        let zero = NetGrads {
            layers: vec![(vec![0.0, 0.0], vec![0.0, 0.0])],
        };
        opt.step(&mut [&mut l], &zero, 0.1).unwrap();
        opt.step(&mut [&mut l], &zero, 0.1).unwrap();
        assert_eq!(l.weights, before);
    }

    fn tiny_config(loss: LossKind, upsampler: UpsamplerKind) -> TrainConfig {
        TrainConfig {
            net: NetConfig {
                in_channels: 3,
                classes: 3,
                decoder_channels: 4,
                hidden_channels: 4,
                groups: 1,
                lau_ratio: 2,
                total_upsample: 4,
                leaky_slope: 0.01,
                upsampler,
                loss,
                lambda: 0.3,
                gamma: 0.1,
                weight_decay: 1e-4,
            },
            base_lr: 0.05,
            power: 0.9,
            momentum: 0.9,
            epochs: 2,
            batch: 4,
            seed: 17,
        }
    }

    fn tiny_data() -> (Vec<SynthSample>, Vec<SynthSample>) {
        let spec = SynthSpec {
            height: 16,
            width: 16,
            classes: 3,
            stride: 4,
            noise_std: 0.2,
        };
        (gen_dataset(1, 8, spec).unwrap(), gen_dataset(2, 4, spec).unwrap())
    }

    #[test]
    fn training_is_deterministic() {
        let (tr, va) = tiny_data();
        let cfg = tiny_config(LossKind::Reg, UpsamplerKind::Lau);
        let a = train(&cfg, &tr, &va).unwrap();
        let b = train(&cfg, &tr, &va).unwrap();
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(a.net, b.net);
        assert_eq!(a.metrics.len(), 4);
    }

    #[test]
    fn zero_lambda_offset_loss_equals_cross_entropy() {
        let (tr, va) = tiny_data();
        let ce = train(&tiny_config(LossKind::Ce, UpsamplerKind::Lau), &tr, &va).unwrap();
        let mut cfg = tiny_config(LossKind::Off, UpsamplerKind::Lau);
        cfg.net.lambda = 0.0;
        let off = train(&cfg, &tr, &va).unwrap();
        assert_eq!(ce.metrics, off.metrics);
    }

    #[test]
    fn checkpoint_round_trip() {
        let (tr, va) = tiny_data();
        let cfg = tiny_config(LossKind::Off, UpsamplerKind::Lau);
        let trained = train(&cfg, &tr, &va).unwrap().net;
        let mut buf = Vec::new();
        write_checkpoint(&trained, &mut buf).unwrap();
        assert!(buf.starts_with(b"lau-checkpoint dec_conv1:4,3,3,3 "));
        let mut fresh = LauNet::new(cfg.net.clone(), &mut Rng::new(99)).unwrap();
        read_checkpoint(&mut fresh, &mut buf.as_slice()).unwrap();
        assert_eq!(fresh, trained);
        let mut other = LauNet::new(
            tiny_config(LossKind::Ce, UpsamplerKind::Bilinear).net,
            &mut Rng::new(1),
        )
        .unwrap();
        assert!(read_checkpoint(&mut other, &mut buf.as_slice()).is_err());
    }

    #[test]
    fn metrics_csv_schema() {
        let rows = [EpochMetrics {
            epoch: 1,
            split: Split::Val,
            loss: 0.5,
            pixacc: 0.9,
            miou: 0.8,
            speckle: 0.0,
        }];
        let csv = metrics_csv(&rows);
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some(METRICS_HEADER));
        assert!(lines.next().unwrap().starts_with("1,val,0.5"));
    }
}
