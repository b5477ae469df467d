use serde::{Deserialize, Serialize};

use crate::decoder::DecoderConfig;
use crate::error::{contract, Result};
use crate::latent::{GlobalEncoderConfig, HashGridConfig};
use crate::ode::OdeConfig;
use crate::render::RasterMode;
use crate::scene::SplitRule;

/// Pipeline components that can be switched off for ablation runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    pub latent_space: bool,
    pub neural_ode: bool,
    pub affine: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            latent_space: true,
            neural_ode: true,
            affine: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    LatentSpace,
    NeuralOde,
    Affine,
}

impl AblationAxis {
    pub fn name(self) -> &'static str {
        match self {
            Self::LatentSpace => "latent_space",
            Self::NeuralOde => "neural_ode",
            Self::Affine => "affine",
        }
    }
}

impl std::str::FromStr for AblationAxis {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "latent_space" => Ok(Self::LatentSpace),
            "neural_ode" => Ok(Self::NeuralOde),
            "affine" => Ok(Self::Affine),
            other => Err(contract(format!("unknown ablation axis {other:?}"))),
        }
    }
}

impl Ablation {
    pub fn with(mut self, axis: AblationAxis, on: bool) -> Self {
        match axis {
            AblationAxis::LatentSpace => self.latent_space = on,
            AblationAxis::NeuralOde => self.neural_ode = on,
            AblationAxis::Affine => self.affine = on,
        }
        self
    }
}

/// Adam learning rates per parameter group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearningRates {
    /// Position rate at step 0, multiplied by the scene extent.
    pub position_init: f64,
    /// Position rate at the last step, multiplied by the scene extent.
    pub position_final: f64,
    pub rotation: f64,
    pub scale: f64,
    pub opacity: f64,
    pub color: f64,
    /// Hash table, global encoder and decoder.
    pub network: f64,
    pub ode: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            position_init: 1.6e-4,
            position_final: 1.6e-6,
            rotation: 1e-3,
            scale: 5e-3,
            opacity: 2.5e-2,
            color: 2.5e-3,
            network: 1e-3,
            ode: 1e-4,
        }
    }
}

impl LearningRates {
    /// Exponentially decayed position rate.
    pub fn position_at(&self, step: usize, total: usize, extent: f64) -> f64 {
        let frac = (step as f64 / total.max(1) as f64).clamp(0.0, 1.0);
        let ln = self.position_init.ln() * (1.0 - frac) + self.position_final.ln() * frac;
        ln.exp() * extent
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DensifyConfig {
    pub start: usize,
    pub interval: usize,
    /// Last densification step; `None` means half of `total_steps`.
    pub until: Option<usize>,
    /// Mean world-space position-gradient norm that triggers clone/split.
    pub grad_threshold: f64,
    pub min_opacity: f64,
    /// Kernels larger than this fraction of the scene extent split, smaller ones clone.
    pub dense_fraction: f64,
    pub split_factor: f64,
    pub max_particles: usize,
}

impl Default for DensifyConfig {
    fn default() -> Self {
        Self {
            start: 500,
            interval: 100,
            until: None,
            grad_threshold: 2e-3,
            min_opacity: 5e-3,
            dense_fraction: 0.01,
            split_factor: 1.6,
            max_particles: 2000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    pub lambda: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub lr: LearningRates,
    pub densify: DensifyConfig,
    pub ablation: Ablation,
    pub hash: HashGridConfig,
    pub encoder: GlobalEncoderConfig,
    pub ode: OdeConfig,
    pub decoder: DecoderConfig,
    /// Maximum number of initial kernels carved from the first views.
    pub init_points: usize,
    pub init_opacity: f64,
    /// Overrides the dataset's split threshold.
    pub split_threshold: Option<f64>,
    pub split_rule: Option<SplitRule>,
    pub raster: RasterMode,
    /// Steps between checkpoints; 0 disables periodic checkpoints.
    pub checkpoint_every: usize,
    /// Steps between training-log rows.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            lambda: 0.2,
            warmup_steps: 3000,
            total_steps: 8000,
            lr: LearningRates::default(),
            densify: DensifyConfig::default(),
            ablation: Ablation::default(),
            hash: HashGridConfig {
                table_size: 1 << 14,
                ..Default::default()
            },
            encoder: GlobalEncoderConfig::default(),
            ode: OdeConfig::default(),
            decoder: DecoderConfig::default(),
            init_points: 400,
            init_opacity: 0.1,
            split_threshold: None,
            split_rule: None,
            raster: RasterMode::Tiled,
            checkpoint_every: 0,
            log_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(contract(format!("lambda must lie in [0, 1], got {}", self.lambda)));
        }
        if self.warmup_steps >= self.total_steps {
            return Err(contract(format!(
                "warmup_steps ({}) must be below total_steps ({})",
                self.warmup_steps, self.total_steps
            )));
        }
        if self.densify.interval == 0 || self.log_every == 0 {
            return Err(contract("densify interval and log interval must be positive"));
        }
        if !(self.init_opacity > 0.0 && self.init_opacity < 1.0) {
            return Err(contract("init_opacity must lie in (0, 1)"));
        }
        self.hash.validate()?;
        self.encoder.validate()?;
        if self.ode.steps_per_unit == 0 {
            return Err(contract("ode.steps_per_unit must be at least 1"));
        }
        Ok(())
    }

    pub fn densify_until(&self) -> usize {
        self.densify.until.unwrap_or(self.total_steps / 2)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
