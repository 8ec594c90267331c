//! JSON experiment configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{LauError, Result};
use crate::net::{LossKind, NetConfig, UpsamplerKind};
use crate::synth::{gen_sample, SynthSample, SynthSpec};
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub classes: usize,
    pub image_size: usize,
    /// Total upsampling factor `K`.
    pub output_stride: usize,
    pub lau_ratio: usize,
    pub lambda: f64,
    pub gamma: f64,
    pub loss: LossKind,
    pub lr: f64,
    pub power: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch: usize,
    pub m_channels: usize,
    #[serde(alias = "hidden_channels")]
    pub c_prime: usize,
    pub leaky_slope: f64,
    pub noise_std: f64,
    pub train_count: usize,
    pub val_count: usize,
    /// `bilinear` trains the plain baseline without an offset branch.
    pub upsampler: UpsamplerKind,
    pub decoder_channels: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            classes: 4,
            image_size: 64,
            output_stride: 8,
            lau_ratio: 4,
            lambda: 0.3,
            gamma: 0.1,
            loss: LossKind::Off,
            lr: 0.001,
            power: 0.9,
            momentum: 0.9,
            weight_decay: 1e-4,
            epochs: 30,
            batch: 8,
            m_channels: 1,
            c_prime: 64,
            leaky_slope: 0.01,
            noise_std: 0.25,
            train_count: 256,
            val_count: 64,
            upsampler: UpsamplerKind::Lau,
            decoder_channels: 16,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(json_error)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn net_config(&self) -> NetConfig {
        NetConfig {
            in_channels: self.classes,
            classes: self.classes,
            decoder_channels: self.decoder_channels,
            hidden_channels: self.c_prime,
            groups: self.m_channels,
            lau_ratio: self.lau_ratio,
            total_upsample: self.output_stride,
            leaky_slope: self.leaky_slope,
            upsampler: self.upsampler,
            loss: self.loss,
            lambda: self.lambda,
            gamma: self.gamma,
            weight_decay: self.weight_decay,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            net: self.net_config(),
            base_lr: self.lr,
            power: self.power,
            momentum: self.momentum,
            epochs: self.epochs,
            batch: self.batch,
            seed: self.seed,
        }
    }

    pub fn synth_spec(&self) -> SynthSpec {
        SynthSpec {
            height: self.image_size,
            width: self.image_size,
            classes: self.classes,
            stride: self.output_stride,
            noise_std: self.noise_std,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 {
            return Err(LauError::config("image_size", "must be positive"));
        }
        if self.output_stride == 0 || !self.image_size.is_multiple_of(self.output_stride) {
            return Err(LauError::config(
                "output_stride",
                format!("must divide image_size {}", self.image_size),
            ));
        }
        if self.train_count == 0 {
            return Err(LauError::config("train_count", "must be at least 1"));
        }
        if self.val_count == 0 {
            return Err(LauError::config("val_count", "must be at least 1"));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(LauError::config("noise_std", "must be finite and non-negative"));
        }
        self.train_config().validate()?;
        self.synth_spec().validate()
    }

    /// Training and validation samples. Validation draws the indices after
    /// the training ones, so the two sets never overlap.
    pub fn datasets(&self) -> Result<(Vec<SynthSample>, Vec<SynthSample>)> {
        let spec = self.synth_spec();
        let train = (0..self.train_count)
            .map(|i| gen_sample(self.seed, i, spec))
            .collect::<Result<_>>()?;
        let val = (self.train_count..self.train_count + self.val_count)
            .map(|i| gen_sample(self.seed, i, spec))
            .collect::<Result<_>>()?;
        Ok((train, val))
    }

    /// Overrides one sweepable parameter from its textual value.
    pub fn set_param(&mut self, param: &str, value: &str) -> Result<()> {
        match param {
            "lambda" => {
                self.lambda = value
                    .trim()
                    .parse()
                    .map_err(|_| LauError::config("lambda", format!("`{value}` is not a number")))?;
            }
            "ratio" => {
                self.lau_ratio = value
                    .trim()
                    .parse()
                    .map_err(|_| LauError::config("lau_ratio", format!("`{value}` is not a positive integer")))?;
            }
            other => return Err(LauError::config("param", format!("unknown sweep parameter `{other}`"))),
        }
        self.validate()
    }
}

fn json_error(e: serde_json::Error) -> LauError {
    let msg = e.to_string();
    // serde names the offending key inside backticks.
    let field = msg
        .split('`')
        .nth(1)
        .filter(|_| msg.starts_with("unknown field") || msg.starts_with("missing field"))
        .unwrap_or("config");
    LauError::config(field, msg.clone())
}
