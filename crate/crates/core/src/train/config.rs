use std::path::Path;

use crate::error::{ensure, Error, Result};
use crate::kv::{format_extents, parse_extents, KeyValues};
use crate::model::{ModelKind, ScaledConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub iterations: usize,
    pub crop_extents: [usize; 3],
    /// Upper bound on zero padding per side; each axis gets
    /// `min(pad, extent / 4)`.
    pub pad: usize,
    pub normalization_dose: f64,
    pub swap_input_target: bool,
    pub seed: u64,
    pub model: ModelKind,
    pub base_features: usize,
    pub num_down: usize,
}

const KEYS: [&str; 13] = [
    "lr",
    "beta1",
    "beta2",
    "adam_eps",
    "iterations",
    "crop_extents",
    "pad",
    "normalization_dose",
    "swap_input_target",
    "seed",
    "model",
    "base_features",
    "num_down",
];

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    /// 2000 iterations of an 8-feature, 3-module network on 32×32×16 crops.
    pub fn desk() -> Self {
        TrainConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            iterations: 2000,
            crop_extents: [32, 32, 16],
            pad: 16,
            normalization_dose: 80.0,
            swap_input_target: true,
            seed: 0,
            model: ModelKind::Proposed,
            base_features: 8,
            num_down: 3,
        }
    }

    /// Full-size recipe: 2×10⁵ iterations, 256×256×64 crops, 64 features.
    pub fn clinical() -> Self {
        TrainConfig {
            iterations: 200_000,
            crop_extents: [256, 256, 64],
            base_features: 64,
            num_down: 5,
            ..Self::desk()
        }
    }

    pub fn scaled(&self) -> ScaledConfig {
        ScaledConfig::new(self.base_features, self.num_down, self.crop_extents)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.lr > 0.0 && self.lr.is_finite(), InvalidConfig, "lr must be positive");
        ensure!(
            self.beta1 > 0.0 && self.beta1 < 1.0 && self.beta2 > 0.0 && self.beta2 < 1.0,
            InvalidConfig,
            "beta1 and beta2 must lie in (0, 1)"
        );
        ensure!(self.adam_eps > 0.0, InvalidConfig, "adam_eps must be positive");
        ensure!(self.normalization_dose > 0.0, InvalidConfig, "normalization_dose must be positive");
        self.scaled().validate(self.model)
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("lr", self.lr)
            .set("beta1", self.beta1)
            .set("beta2", self.beta2)
            .set("adam_eps", self.adam_eps)
            .set("iterations", self.iterations)
            .set("crop_extents", format_extents(self.crop_extents))
            .set("pad", self.pad)
            .set("normalization_dose", self.normalization_dose)
            .set("swap_input_target", self.swap_input_target)
            .set("seed", self.seed)
            .set("model", self.model)
            .set("base_features", self.base_features)
            .set("num_down", self.num_down);
        kv
    }

    /// Overrides fields of `self` with the keys present in `kv`.
    pub fn apply(&mut self, kv: &KeyValues) -> Result<()> {
        if let Some(k) = kv.keys().find(|k| !KEYS.contains(k)) {
            return Err(Error::InvalidConfig(format!("unknown training config key '{k}'")));
        }
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::InvalidConfig(format!("{key}: cannot parse '{v}'")))
        }
        for (k, v) in kv.iter() {
            match k {
                "lr" => self.lr = num(k, v)?,
                "beta1" => self.beta1 = num(k, v)?,
                "beta2" => self.beta2 = num(k, v)?,
                "adam_eps" => self.adam_eps = num(k, v)?,
                "iterations" => self.iterations = num(k, v)?,
                "crop_extents" => self.crop_extents = parse_extents(v)?,
                "pad" => self.pad = num(k, v)?,
                "normalization_dose" => self.normalization_dose = num(k, v)?,
                "swap_input_target" => self.swap_input_target = num(k, v)?,
                "seed" => self.seed = num(k, v)?,
                "model" => self.model = v.parse()?,
                "base_features" => self.base_features = num(k, v)?,
                "num_down" => self.num_down = num(k, v)?,
                _ => unreachable!("keys checked above"),
            }
        }
        Ok(())
    }

    /// Desk defaults overridden by the file at `path`.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let kv = KeyValues::parse(&text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        let mut cfg = Self::desk();
        cfg.apply(&kv)?;
        Ok(cfg)
    }
}
