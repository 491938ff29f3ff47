//! Flat run configuration.
//!
//! Keys carry their units. Unknown keys are rejected so a typo never silently
//! falls back to a default.
//!
//! ```toml
//! seed = 7
//! scene_kind = "motion-dense"
//! anchor_count = 32
//! lambda_layer0 = 0.04
//! tau_scene_units = 0.1
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::asset::MASK_THRESHOLD;
use crate::bitstream::{ContainerQuant, EncodeConfig, DEFAULT_PRESET};
use crate::entropy::{QuantSteps, DEFAULT_QUANT_STEP};
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::rollout::{validate_distribution, Distribution, RolloutConfig, PI_AGGRESSIVE, PI_UNIFORM};
use crate::toyscene::{SceneKind, SceneParams, TrainSettings, DEFAULT_IMAGE_SIZE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub scene_kind: SceneKind,
    pub anchor_count: usize,
    pub timestep_count: usize,
    pub image_width_px: usize,
    pub image_height_px: usize,

    pub train_steps: usize,
    pub learning_rate: f64,
    pub progressive_start_step: usize,
    pub fd_step_mask_units: f64,

    pub lambda_layer0: f64,
    pub lambda_layer1: f64,
    pub lambda_layer2: f64,
    pub lambda_temporal: f64,
    pub tau_scene_units: f64,
    pub pairs_per_anchor: usize,
    pub binary_loss_enabled: bool,
    pub smoothness_loss_enabled: bool,

    pub ema_alpha: f64,
    pub rho_sample_period_steps: usize,
    pub warmup_steps: usize,
    pub pi_uniform: Distribution,
    pub pi_aggressive: Distribution,
    pub mask_threshold: f64,

    pub quant_feature: f64,
    pub quant_log_scale: f64,
    pub quant_offset: f64,

    pub container_quant_position_scene_units: f64,
    pub container_quant_feature: f64,
    pub container_quant_log_scale: f64,
    pub container_quant_offset: f64,
    pub container_quant_opacity: f64,
    pub container_quant_color: f64,
    pub container_quant_displacement_scene_units: f64,
    pub container_quant_feature_residual: f64,
    pub container_quant_local_residual: f64,
    pub compressor_preset: u8,

    pub out_dir: String,
    pub base_url: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        let r = RolloutConfig::default();
        let t = TrainSettings::default();
        let c = ContainerQuant::default();
        Self {
            seed: 0,
            scene_kind: SceneKind::MotionDense,
            anchor_count: 32,
            timestep_count: 8,
            image_width_px: DEFAULT_IMAGE_SIZE,
            image_height_px: DEFAULT_IMAGE_SIZE,
            train_steps: t.steps,
            learning_rate: t.learning_rate,
            progressive_start_step: t.progressive_start,
            fd_step_mask_units: t.fd_step,
            lambda_layer0: w.lambda_layer[0],
            lambda_layer1: w.lambda_layer[1],
            lambda_layer2: w.lambda_layer[2],
            lambda_temporal: w.lambda_temporal,
            tau_scene_units: w.tau,
            pairs_per_anchor: w.pairs_per_anchor,
            binary_loss_enabled: true,
            smoothness_loss_enabled: true,
            ema_alpha: r.ema_alpha,
            rho_sample_period_steps: r.sample_period,
            warmup_steps: r.warmup,
            pi_uniform: PI_UNIFORM,
            pi_aggressive: PI_AGGRESSIVE,
            mask_threshold: MASK_THRESHOLD,
            quant_feature: DEFAULT_QUANT_STEP,
            quant_log_scale: DEFAULT_QUANT_STEP,
            quant_offset: DEFAULT_QUANT_STEP,
            container_quant_position_scene_units: c.position,
            container_quant_feature: c.feature,
            container_quant_log_scale: c.scale,
            container_quant_offset: c.offset,
            container_quant_opacity: c.opacity,
            container_quant_color: c.color,
            container_quant_displacement_scene_units: c.displacement,
            container_quant_feature_residual: c.feature_residual,
            container_quant_local_residual: c.local,
            compressor_preset: DEFAULT_PRESET,
            out_dir: "out".into(),
            base_url: "scene.pd4g".into(),
        }
    }
}

fn positive(key: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("`{key}` must be positive and finite, got {v}")))
    }
}

fn non_negative(key: &str, v: f64) -> Result<()> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("`{key}` must be non-negative and finite, got {v}")))
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if !(4..=1024).contains(&self.anchor_count) {
            return Err(Error::Config(format!("`anchor_count` must lie in [4, 1024], got {}", self.anchor_count)));
        }
        if !(1..=32).contains(&self.timestep_count) {
            return Err(Error::Config(format!("`timestep_count` must lie in [1, 32], got {}", self.timestep_count)));
        }
        if self.image_width_px == 0 || self.image_height_px == 0 {
            return Err(Error::Config("`image_width_px` and `image_height_px` must be positive".into()));
        }
        positive("learning_rate", self.learning_rate)?;
        positive("fd_step_mask_units", self.fd_step_mask_units)?;
        non_negative("lambda_layer0", self.lambda_layer0)?;
        non_negative("lambda_layer1", self.lambda_layer1)?;
        non_negative("lambda_layer2", self.lambda_layer2)?;
        non_negative("lambda_temporal", self.lambda_temporal)?;
        positive("tau_scene_units", self.tau_scene_units)?;
        if self.pairs_per_anchor == 0 {
            return Err(Error::Config("`pairs_per_anchor` must be at least 1".into()));
        }
        if !(self.ema_alpha > 0.0 && self.ema_alpha <= 1.0) {
            return Err(Error::Config(format!("`ema_alpha` must lie in (0, 1], got {}", self.ema_alpha)));
        }
        if self.rho_sample_period_steps == 0 {
            return Err(Error::Config("`rho_sample_period_steps` must be at least 1".into()));
        }
        validate_distribution(&self.pi_uniform).map_err(|e| Error::Config(format!("`pi_uniform`: {e}")))?;
        validate_distribution(&self.pi_aggressive).map_err(|e| Error::Config(format!("`pi_aggressive`: {e}")))?;
        if !(self.mask_threshold > 0.0 && self.mask_threshold < 1.0) {
            return Err(Error::Config(format!("`mask_threshold` must lie in (0, 1), got {}", self.mask_threshold)));
        }
        for (key, v) in [
            ("quant_feature", self.quant_feature),
            ("quant_log_scale", self.quant_log_scale),
            ("quant_offset", self.quant_offset),
            ("container_quant_position_scene_units", self.container_quant_position_scene_units),
            ("container_quant_feature", self.container_quant_feature),
            ("container_quant_log_scale", self.container_quant_log_scale),
            ("container_quant_offset", self.container_quant_offset),
            ("container_quant_opacity", self.container_quant_opacity),
            ("container_quant_color", self.container_quant_color),
            ("container_quant_displacement_scene_units", self.container_quant_displacement_scene_units),
            ("container_quant_feature_residual", self.container_quant_feature_residual),
            ("container_quant_local_residual", self.container_quant_local_residual),
        ] {
            positive(key, v)?;
        }
        if self.compressor_preset > 9 {
            return Err(Error::Config(format!("`compressor_preset` must lie in [0, 9], got {}", self.compressor_preset)));
        }
        Ok(())
    }

    pub fn scene_params(&self) -> SceneParams {
        SceneParams { width: self.image_width_px, height: self.image_height_px, ..SceneParams::default() }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda_layer: [self.lambda_layer0, self.lambda_layer1, self.lambda_layer2],
            lambda_temporal: self.lambda_temporal,
            tau: self.tau_scene_units,
            pairs_per_anchor: self.pairs_per_anchor,
            binary_enabled: self.binary_loss_enabled,
            smooth_enabled: self.smoothness_loss_enabled,
        }
    }

    pub fn rollout(&self) -> RolloutConfig {
        RolloutConfig {
            pi_uniform: self.pi_uniform,
            pi_aggressive: self.pi_aggressive,
            ema_alpha: self.ema_alpha,
            sample_period: self.rho_sample_period_steps,
            warmup: self.warmup_steps,
        }
    }

    pub fn train_settings(&self) -> TrainSettings {
        TrainSettings {
            steps: self.train_steps,
            learning_rate: self.learning_rate,
            progressive_start: self.progressive_start_step,
            fd_step: self.fd_step_mask_units,
            quant: QuantSteps { feature: self.quant_feature, scale: self.quant_log_scale, offset: self.quant_offset },
            threshold: self.mask_threshold,
        }
    }

    pub fn encode_config(&self) -> EncodeConfig {
        EncodeConfig {
            quant: ContainerQuant {
                position: self.container_quant_position_scene_units,
                feature: self.container_quant_feature,
                scale: self.container_quant_log_scale,
                offset: self.container_quant_offset,
                opacity: self.container_quant_opacity,
                color: self.container_quant_color,
                displacement: self.container_quant_displacement_scene_units,
                feature_residual: self.container_quant_feature_residual,
                local: self.container_quant_local_residual,
            },
            preset: self.compressor_preset,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_the_reference_constants() {
        let c = RunConfig::default();
        c.validate().unwrap();
        assert_eq!(c.loss_weights().lambda_layer, [0.04, 0.01, 0.00025]);
        assert_eq!(c.lambda_temporal, 0.01);
        assert_eq!(c.rho_sample_period_steps, 200);
        assert_eq!(c.ema_alpha, 0.05);
        assert_eq!(c.warmup_steps, 2000);
        assert_eq!(c.pi_uniform, PI_UNIFORM);
        assert_eq!(c.pi_aggressive, [0.15, 0.30, 0.55]);
        assert_eq!(c.mask_threshold, 0.01);
    }

    #[test]
    fn empty_file_is_default_and_round_trips() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
        let c = RunConfig { seed: 9, scene_kind: SceneKind::Static, ..RunConfig::default() };
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn unknown_key_is_named() {
        let e = RunConfig::from_toml("seed = 1\ntau = 0.2\n").unwrap_err();
        assert!(e.to_string().contains("tau"), "{e}");
        assert!(matches!(e, Error::Config(_)));
    }

    #[test]
    fn bad_values_name_their_key() {
        let e = RunConfig::from_toml("tau_scene_units = -1.0").unwrap_err();
        assert!(e.to_string().contains("tau_scene_units"));
        let e = RunConfig::from_toml("pi_uniform = [0.5, 0.5, 0.5]").unwrap_err();
        assert!(e.to_string().contains("pi_uniform"));
        let e = RunConfig::from_toml("scene_kind = \"windy\"").unwrap_err();
        assert!(matches!(e, Error::Config(_)));
    }
}
