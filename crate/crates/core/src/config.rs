//! Plain-text `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored. Unknown or repeated keys are
//! errors. [`RunConfig::render`] writes every key, defaults included, in a
//! fixed order, and parsing the rendered text gives back the same config.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::arch::{ArchSpec, Variant};
use crate::data::SyntheticSpec;
use crate::error::{Error, Result};
use crate::losses::{LossConfig, SegLoss, WindowKind};
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub arch: ArchSpec,
    pub arch_seed: u64,
    pub loss: LossConfig,
    pub train: TrainConfig,
    /// Training set. Its channel count follows `arch.input_channels`.
    pub data: SyntheticSpec,
    pub heldout_count: usize,
    pub heldout_seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            arch: ArchSpec::default(),
            arch_seed: 1,
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            data: SyntheticSpec::default(),
            heldout_count: 16,
            heldout_seed: 2,
        }
    }
}

pub const KEYS: &[&str] = &[
    "variant",
    "depth",
    "base_channels",
    "skip_channels",
    "kernel",
    "input_channels",
    "deep_supervision",
    "cgm",
    "dropout_rate",
    "unetpp_level_heads",
    "arch_seed",
    "seg_loss",
    "focal_gamma",
    "msssim_scales",
    "msssim_weights",
    "c1",
    "c2",
    "msssim_window",
    "msssim_window_kind",
    "msssim_sigma",
    "learning_rate",
    "momentum",
    "epochs",
    "batch_size",
    "train_seed",
    "cls_loss_weight",
    "stop_at_dice",
    "stop_at_cls_accuracy",
    "image_size",
    "count",
    "organ_fraction",
    "noise_sigma",
    "data_seed",
    "heldout_count",
    "heldout_seed",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("invalid value {value:?} for key {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("invalid value {value:?} for key {key} (expected true or false)"))),
    }
}

fn parse_opt(key: &str, value: &str) -> Result<Option<f64>> {
    if value == "none" {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

fn show_opt(v: Option<f64>) -> String {
    v.map_or("none".into(), |v| v.to_string())
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value;
        match key {
            "variant" => self.arch.variant = v.parse::<Variant>()?,
            "depth" => self.arch.depth = parse(key, v)?,
            "base_channels" => self.arch.base_channels = parse(key, v)?,
            "skip_channels" => self.arch.skip_channels = parse(key, v)?,
            "kernel" => self.arch.kernel = parse(key, v)?,
            "input_channels" => self.arch.input_channels = parse(key, v)?,
            "deep_supervision" => self.arch.deep_supervision = parse_bool(key, v)?,
            "cgm" => self.arch.cgm = parse_bool(key, v)?,
            "dropout_rate" => self.arch.dropout_rate = parse(key, v)?,
            "unetpp_level_heads" => self.arch.unetpp_level_heads = parse_bool(key, v)?,
            "arch_seed" => self.arch_seed = parse(key, v)?,
            "seg_loss" => {
                self.loss.seg_loss = match v {
                    "hybrid" => SegLoss::Hybrid,
                    "focal" => SegLoss::FocalOnly,
                    _ => {
                        return Err(Error::Config(format!(
                            "invalid value {v:?} for key {key} (expected hybrid or focal)"
                        )))
                    }
                }
            }
            "focal_gamma" => self.loss.focal_gamma = parse(key, v)?,
            "msssim_scales" => self.loss.msssim_scales = parse(key, v)?,
            "msssim_weights" => {
                self.loss.msssim_weights = v.split(',').map(|w| parse(key, w.trim())).collect::<Result<_>>()?
            }
            "c1" => self.loss.c1 = parse(key, v)?,
            "c2" => self.loss.c2 = parse(key, v)?,
            "msssim_window" => self.loss.window = parse(key, v)?,
            "msssim_window_kind" => {
                self.loss.window_kind = match v {
                    "gaussian" => WindowKind::Gaussian,
                    "patch" => WindowKind::Patch,
                    _ => {
                        return Err(Error::Config(format!(
                            "invalid value {v:?} for key {key} (expected gaussian or patch)"
                        )))
                    }
                }
            }
            "msssim_sigma" => self.loss.sigma = parse(key, v)?,
            "learning_rate" => self.train.learning_rate = parse(key, v)?,
            "momentum" => self.train.momentum = parse(key, v)?,
            "epochs" => self.train.epochs = parse(key, v)?,
            "batch_size" => self.train.batch_size = parse(key, v)?,
            "train_seed" => self.train.seed = parse(key, v)?,
            "cls_loss_weight" => self.train.cls_loss_weight = parse(key, v)?,
            "stop_at_dice" => self.train.stop_at_dice = parse_opt(key, v)?,
            "stop_at_cls_accuracy" => self.train.stop_at_cls_accuracy = parse_opt(key, v)?,
            "image_size" => self.data.image_size = parse(key, v)?,
            "count" => self.data.count = parse(key, v)?,
            "organ_fraction" => self.data.organ_fraction = parse(key, v)?,
            "noise_sigma" => self.data.noise_sigma = parse(key, v)?,
            "data_seed" => self.data.seed = parse(key, v)?,
            "heldout_count" => self.heldout_count = parse(key, v)?,
            "heldout_seed" => self.heldout_seed = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    fn get(&self, key: &str) -> String {
        let on = |b: bool| if b { "true" } else { "false" }.to_string();
        match key {
            "variant" => self.arch.variant.to_string(),
            "depth" => self.arch.depth.to_string(),
            "base_channels" => self.arch.base_channels.to_string(),
            "skip_channels" => self.arch.skip_channels.to_string(),
            "kernel" => self.arch.kernel.to_string(),
            "input_channels" => self.arch.input_channels.to_string(),
            "deep_supervision" => on(self.arch.deep_supervision),
            "cgm" => on(self.arch.cgm),
            "dropout_rate" => self.arch.dropout_rate.to_string(),
            "unetpp_level_heads" => on(self.arch.unetpp_level_heads),
            "arch_seed" => self.arch_seed.to_string(),
            "seg_loss" => match self.loss.seg_loss {
                SegLoss::Hybrid => "hybrid".into(),
                SegLoss::FocalOnly => "focal".into(),
            },
            "focal_gamma" => self.loss.focal_gamma.to_string(),
            "msssim_scales" => self.loss.msssim_scales.to_string(),
            "msssim_weights" => self.loss.msssim_weights.iter().map(f64::to_string).collect::<Vec<_>>().join(","),
            "c1" => self.loss.c1.to_string(),
            "c2" => self.loss.c2.to_string(),
            "msssim_window" => self.loss.window.to_string(),
            "msssim_window_kind" => match self.loss.window_kind {
                WindowKind::Gaussian => "gaussian".into(),
                WindowKind::Patch => "patch".into(),
            },
            "msssim_sigma" => self.loss.sigma.to_string(),
            "learning_rate" => self.train.learning_rate.to_string(),
            "momentum" => self.train.momentum.to_string(),
            "epochs" => self.train.epochs.to_string(),
            "batch_size" => self.train.batch_size.to_string(),
            "train_seed" => self.train.seed.to_string(),
            "cls_loss_weight" => self.train.cls_loss_weight.to_string(),
            "stop_at_dice" => show_opt(self.train.stop_at_dice),
            "stop_at_cls_accuracy" => show_opt(self.train.stop_at_cls_accuracy),
            "image_size" => self.data.image_size.to_string(),
            "count" => self.data.count.to_string(),
            "organ_fraction" => self.data.organ_fraction.to_string(),
            "noise_sigma" => self.data.noise_sigma.to_string(),
            "data_seed" => self.data.seed.to_string(),
            "heldout_count" => self.heldout_count.to_string(),
            "heldout_seed" => self.heldout_seed.to_string(),
            _ => unreachable!("KEYS and get() cover the same keys"),
        }
    }

    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {line:?}", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: key {key} given twice", lineno + 1)));
            }
            cfg.set(key, value).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("line {}: {m}", lineno + 1)),
                other => other,
            })?;
        }
        cfg.data.channels = cfg.arch.input_channels;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        self.data.validate()?;
        self.heldout().validate()?;
        let m = 1usize << (self.arch.depth - 1);
        if !self.data.image_size.is_multiple_of(m) {
            return Err(Error::Config(format!(
                "image_size {} not divisible by 2^(depth-1) = {m}",
                self.data.image_size
            )));
        }
        if self.data.channels != self.arch.input_channels {
            return Err(Error::Config("data channels must equal input_channels".into()));
        }
        Ok(())
    }

    /// Held-out set: same generator settings, its own seed and size.
    pub fn heldout(&self) -> SyntheticSpec {
        SyntheticSpec { count: self.heldout_count, seed: self.heldout_seed, ..self.data.clone() }
    }

    /// Every key with its resolved value.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let _ = writeln!(out, "{key} = {}", self.get(key));
        }
        out
    }
}
