use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::SceneConfig;
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::model::{ModelConfig, ProviderKind};

/// Name of the only supported pseudo-random generator.
pub const RNG_NAME: &str = "chacha8";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

/// Every model, training and scene setting as one flat table.
///
/// Unknown keys are rejected. Defaults are the 128×128 desk preset with
/// the full training recipe.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub rng: String,
    pub precision: Precision,

    pub num_classes: usize,
    pub input_height: usize,
    pub input_width: usize,
    pub embed_dim: usize,
    pub global_stride: usize,
    pub backbone_width: f64,
    pub decoder_groups: [usize; 3],
    pub dropout: f64,
    pub reduction: usize,
    pub provider: ProviderKind,
    pub feature_dir: Option<PathBuf>,
    pub model_seed: u64,
    pub provider_seed: u64,

    pub epochs: usize,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub backbone_lr_mult: f64,
    pub head_lr_mult: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    /// Seeds shuffling and dropout.
    pub seed: u64,

    pub scene_seed: u64,
    pub val_count: u64,
    pub horizon: (f64, f64),
    pub road_bottom: (f64, f64),
    pub road_top: (f64, f64),
    pub buildings: (usize, usize),
    pub building_height: (f64, f64),
    pub vegetation: (usize, usize),
    pub vegetation_radius: (f64, f64),
    pub vehicles: (usize, usize),
    pub noise: f64,
    pub jitter: f64,
    pub palette_shift: f64,
    pub ignore_border: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::desk();
        let t = TrainConfig::default();
        let s = SceneConfig::default();
        RunConfig {
            rng: RNG_NAME.into(),
            precision: Precision::F32,
            num_classes: m.num_classes,
            input_height: m.input_height,
            input_width: m.input_width,
            embed_dim: m.embed_dim,
            global_stride: m.global_stride,
            backbone_width: m.backbone_width,
            decoder_groups: m.decoder_groups,
            dropout: m.dropout,
            reduction: m.reduction,
            provider: m.provider,
            feature_dir: m.feature_dir,
            model_seed: m.model_seed,
            provider_seed: m.provider_seed,
            epochs: t.epochs,
            batch_size: t.batch_size,
            eval_batch_size: t.eval_batch_size,
            lr: t.lr,
            weight_decay: t.weight_decay,
            beta1: t.betas.0,
            beta2: t.betas.1,
            adam_eps: t.eps,
            backbone_lr_mult: t.backbone_lr_mult,
            head_lr_mult: t.head_lr_mult,
            focal_alpha: t.loss.alpha,
            focal_gamma: t.loss.gamma,
            seed: t.seed,
            scene_seed: s.seed,
            val_count: 50,
            horizon: s.horizon,
            road_bottom: s.road_bottom,
            road_top: s.road_top,
            buildings: s.buildings,
            building_height: s.building_height,
            vegetation: s.vegetation,
            vegetation_radius: s.vegetation_radius,
            vehicles: s.vehicles,
            noise: s.noise,
            jitter: s.jitter,
            palette_shift: s.palette_shift,
            ignore_border: s.ignore_border,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub backbone_lr_mult: f64,
    pub head_lr_mult: f64,
    pub loss: LossConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 2,
            eval_batch_size: 4,
            lr: 2e-4,
            weight_decay: 5e-4,
            betas: (0.9, 0.999),
            eps: 1e-8,
            backbone_lr_mult: 0.1,
            head_lr_mult: 1.0,
            loss: LossConfig::default(),
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run configuration serialises")
    }

    pub fn validate(&self) -> Result<()> {
        if self.rng != RNG_NAME {
            return Err(Error::config(format!("unsupported rng {:?}; only {RNG_NAME:?} is available", self.rng)));
        }
        self.model().validate()?;
        self.scene().validate()?;
        if self.epochs == 0 || self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(Error::config("epochs, batch_size and eval_batch_size must be positive"));
        }
        let positive = [self.lr, self.adam_eps, self.backbone_lr_mult, self.head_lr_mult];
        if positive.iter().any(|v| !(*v > 0.0)) || self.weight_decay < 0.0 {
            return Err(Error::config("learning rates, multipliers and adam_eps must be positive, weight_decay non-negative"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("beta1 and beta2 must lie in [0, 1)"));
        }
        if !(self.focal_alpha > 0.0) || self.focal_gamma < 0.0 {
            return Err(Error::config("focal_alpha must be positive and focal_gamma non-negative"));
        }
        Ok(())
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            num_classes: self.num_classes,
            embed_dim: self.embed_dim,
            global_stride: self.global_stride,
            backbone_width: self.backbone_width,
            decoder_groups: self.decoder_groups,
            dropout: self.dropout,
            input_height: self.input_height,
            input_width: self.input_width,
            reduction: self.reduction,
            provider: self.provider,
            feature_dir: self.feature_dir.clone(),
            model_seed: self.model_seed,
            provider_seed: self.provider_seed,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            eval_batch_size: self.eval_batch_size,
            lr: self.lr,
            weight_decay: self.weight_decay,
            betas: (self.beta1, self.beta2),
            eps: self.adam_eps,
            backbone_lr_mult: self.backbone_lr_mult,
            head_lr_mult: self.head_lr_mult,
            loss: LossConfig {
                alpha: self.focal_alpha,
                gamma: self.focal_gamma,
                ..LossConfig::default()
            },
            seed: self.seed,
        }
    }

    pub fn scene(&self) -> SceneConfig {
        SceneConfig {
            num_classes: self.num_classes,
            height: self.input_height,
            width: self.input_width,
            seed: self.scene_seed,
            horizon: self.horizon,
            road_bottom: self.road_bottom,
            road_top: self.road_top,
            buildings: self.buildings,
            building_height: self.building_height,
            vegetation: self.vegetation,
            vegetation_radius: self.vegetation_radius,
            vehicles: self.vehicles,
            noise: self.noise,
            jitter: self.jitter,
            palette_shift: self.palette_shift,
            ignore_border: self.ignore_border,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_carry_the_training_recipe() {
        let t = RunConfig::default().train();
        assert_eq!(t.lr, 2e-4);
        assert_eq!(t.weight_decay, 5e-4);
        assert_eq!(t.batch_size, 2);
        assert_eq!(t.epochs, 100);
        assert_eq!((t.backbone_lr_mult, t.head_lr_mult), (0.1, 1.0));
        assert_eq!((t.loss.alpha, t.loss.gamma), (0.25, 2.0));
    }

    #[test]
    fn toml_round_trip() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn partial_files_fill_defaults() {
        let c = RunConfig::from_toml("epochs = 3\nhorizon = [0.4, 0.45]\n").unwrap();
        assert_eq!(c.epochs, 3);
        assert_eq!(c.horizon, (0.4, 0.45));
        assert_eq!(c.embed_dim, 32);
    }

    #[test]
    fn bad_files_are_config_errors() {
        for text in ["epohcs = 3", "epochs = \"x\"", "rng = \"pcg\"", "input_height = 100", "lr = -1.0", "num_classes = 4"] {
            assert!(matches!(RunConfig::from_toml(text), Err(Error::Config(_))), "{text}");
        }
    }
}
