//! Training configuration and its `key = value` text format.
//!
//! One assignment per line, `#` starts a comment, blank lines are skipped.
//! Lists are comma separated. Unknown keys, duplicate keys and malformed
//! values are errors. Keys that are absent keep their defaults.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::data::{AugmentConfig, SceneConfig};
use crate::error::{Error, Result};
use crate::network::{LossWeights, NetworkConfig};
use crate::optim::SgdConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub num_classes: usize,
    pub scene_size: usize,
    pub shapes_per_image: usize,
    pub noise_std: f64,
    pub shadow_prob: f64,
    pub shape_grid: usize,
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub data_seed: u64,

    pub crop: usize,
    pub flip_prob: f64,
    pub aug_scales: Vec<f64>,

    pub batch_size: usize,
    pub iterations: usize,
    pub base_lr: f64,
    pub power: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lambda_seg: f64,
    pub lambda_aux: f64,
    pub lambda_prior: f64,
    pub lambda_unary: f64,
    pub lambda_global: f64,

    pub k: usize,
    pub widths: [usize; 5],
    pub agg_channels: usize,
    pub context_prior: bool,

    pub seed: u64,
    pub eval_scales: Vec<f64>,
    pub eval_flip: bool,
    /// 0 disables periodic evaluation / checkpoints.
    pub eval_every: usize,
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let net = NetworkConfig::default();
        let w = LossWeights::default();
        let sgd = SgdConfig::default();
        let scene = SceneConfig::default();
        TrainConfig {
            num_classes: net.num_classes,
            scene_size: scene.height,
            shapes_per_image: scene.shapes_per_image,
            noise_std: scene.noise_std,
            shadow_prob: scene.shadow_prob,
            shape_grid: scene.grid,
            train_scenes: 1000,
            val_scenes: 100,
            data_seed: 1,
            crop: 32,
            flip_prob: 0.5,
            aug_scales: AugmentConfig::default().scales,
            batch_size: 8,
            iterations: 2000,
            base_lr: 0.02,
            power: 0.9,
            momentum: sgd.momentum,
            weight_decay: sgd.weight_decay,
            lambda_seg: w.seg,
            lambda_aux: w.aux,
            lambda_prior: w.prior,
            lambda_unary: w.unary,
            lambda_global: w.global,
            k: net.k,
            widths: net.widths,
            agg_channels: net.agg_channels,
            context_prior: net.context_prior,
            seed: 0,
            eval_scales: vec![0.5, 0.75, 1.0, 1.5, 1.75],
            eval_flip: false,
            eval_every: 0,
            checkpoint_every: 0,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value for `{key}`: `{value}`")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

macro_rules! config_keys {
    ($mac:ident) => {
        $mac! {
            num_classes, scene_size, shapes_per_image, noise_std, shadow_prob,
            shape_grid, train_scenes, val_scenes, data_seed, crop, flip_prob, batch_size,
            iterations, base_lr, power, momentum, weight_decay, lambda_seg,
            lambda_aux, lambda_prior, lambda_unary, lambda_global, k,
            agg_channels, context_prior, seed, eval_flip, eval_every,
            checkpoint_every;
            lists: aug_scales, eval_scales
        }
    };
}

impl TrainConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key `{key}`", lineno + 1)));
            }
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        macro_rules! assign {
            ($($scalar:ident),*; lists: $($list:ident),*) => {
                match key {
                    $(stringify!($scalar) => self.$scalar = parse(key, value)?,)*
                    $(stringify!($list) => self.$list = parse_list(key, value)?,)*
                    "widths" => {
                        let w: Vec<usize> = parse_list(key, value)?;
                        self.widths = w.try_into().map_err(|_| {
                            Error::Config("`widths` needs exactly five entries".into())
                        })?;
                    }
                    _ => return Err(Error::Config(format!("unknown key `{key}`"))),
                }
            };
        }
        config_keys!(assign);
        Ok(())
    }

    /// Canonical text form; `parse(to_text())` reproduces `self` exactly.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        macro_rules! emit {
            ($($scalar:ident),*; lists: $($list:ident),*) => {
                $(writeln!(out, "{} = {}", stringify!($scalar), self.$scalar).unwrap();)*
                $(writeln!(out, "{} = {}", stringify!($list), join(&self.$list)).unwrap();)*
            };
        }
        config_keys!(emit);
        writeln!(out, "widths = {}", join(&self.widths)).unwrap();
        out
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.crop == 0 || !self.crop.is_multiple_of(8) {
            return bad(format!("crop {} must be a positive multiple of 8", self.crop));
        }
        if self.scene_size == 0 || !self.scene_size.is_multiple_of(8) {
            return bad(format!("scene_size {} must be a positive multiple of 8", self.scene_size));
        }
        for (name, v) in [
            ("base_lr", self.base_lr),
            ("power", self.power),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("`{name}` must be positive"));
            }
        }
        for (name, v) in [
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
            ("noise_std", self.noise_std),
            ("lambda_seg", self.lambda_seg),
            ("lambda_aux", self.lambda_aux),
            ("lambda_prior", self.lambda_prior),
            ("lambda_unary", self.lambda_unary),
            ("lambda_global", self.lambda_global),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("`{name}` must be non-negative"));
            }
        }
        for (name, v) in [("flip_prob", self.flip_prob), ("shadow_prob", self.shadow_prob)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("`{name}` must lie in [0, 1]"));
            }
        }
        if self.batch_size == 0 || self.train_scenes == 0 {
            return bad("batch_size and train_scenes must be positive".into());
        }
        for (name, s) in [("aug_scales", &self.aug_scales), ("eval_scales", &self.eval_scales)] {
            if s.is_empty() || s.iter().any(|&x| !(x > 0.0 && x.is_finite())) {
                return bad(format!("`{name}` must be a non-empty list of positive numbers"));
            }
        }
        self.network().validate().map_err(|e| Error::Config(e.to_string()))
    }

    pub fn network(&self) -> NetworkConfig {
        NetworkConfig {
            num_classes: self.num_classes,
            widths: self.widths,
            agg_channels: self.agg_channels,
            k: self.k,
            input_size: (self.crop, self.crop),
            context_prior: self.context_prior,
        }
    }

    pub fn scene(&self) -> SceneConfig {
        SceneConfig {
            height: self.scene_size,
            width: self.scene_size,
            num_classes: self.num_classes,
            shapes_per_image: self.shapes_per_image,
            noise_std: self.noise_std,
            shadow_prob: self.shadow_prob,
            grid: self.shape_grid,
        }
    }

    pub fn augment(&self) -> AugmentConfig {
        AugmentConfig {
            flip_prob: self.flip_prob,
            scales: self.aug_scales.clone(),
            crop: self.crop,
        }
    }

    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            seg: self.lambda_seg,
            aux: self.lambda_aux,
            prior: self.lambda_prior,
            unary: self.lambda_unary,
            global: self.lambda_global,
        }
    }

    /// Seed of validation scenes; disjoint from the training stream.
    pub fn val_seed(&self) -> u64 {
        self.data_seed.wrapping_add(0x5eed_0000_0000)
    }
}
