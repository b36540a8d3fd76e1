use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adjoint::{GradMethod, WatermarkMode};
use crate::attacks::{default_suite, AttackSpec};
use crate::codec::ExtractorOptions;
use crate::diffusion::{NoiseSchedule, PriorSpec, SamplerConfig, ScheduleKind};
use crate::error::{Error, Result};
use crate::grid::Shape;
use crate::losses::LossWeights;
use crate::optimize::{AdamConfig, OptimizeConfig};
use crate::watermark::{EmbedConfig, DEFAULT_INIT_VARIANCE, DEFAULT_SIGMA_TD};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSection {
    pub total_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    #[serde(default)]
    pub kind: ScheduleKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerSection {
    pub steps: usize,
    /// 0-based index of the detail injection step on the grid.
    pub detail_index: usize,
    #[serde(default)]
    pub guidance_scale: f64,
    #[serde(default)]
    pub condition: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodecSection {
    pub bits: usize,
    pub features: usize,
    pub hidden: usize,
    pub extractor_seed: u64,
    pub carrier_seed: u64,
    pub corpus_size: usize,
    #[serde(default = "default_margin")]
    pub margin: f64,
    #[serde(default = "default_true")]
    pub flip_invariant: bool,
    #[serde(default = "default_true")]
    pub standardize: bool,
    pub fpr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WatermarkSection {
    #[serde(default = "default_init_variance")]
    pub init_variance: f64,
    #[serde(default = "default_sigma_td")]
    pub sigma_td: f64,
    #[serde(default)]
    pub mode: WatermarkMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSection {
    pub iterations: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default = "default_gradient")]
    pub gradient: GradMethod,
}

fn default_margin() -> f64 {
    1.0
}
fn default_true() -> bool {
    true
}
fn default_init_variance() -> f64 {
    DEFAULT_INIT_VARIANCE
}
fn default_sigma_td() -> f64 {
    DEFAULT_SIGMA_TD
}
fn default_lr() -> f64 {
    AdamConfig::default().lr
}
fn default_patience() -> usize {
    50
}
fn default_gradient() -> GradMethod {
    GradMethod::Adjoint
}

/// The whole experiment, parsed from a TOML document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub images: usize,
    pub output_dir: PathBuf,
    pub grid: GridSection,
    pub schedule: ScheduleSection,
    pub prior: PriorSpec,
    pub sampler: SamplerSection,
    pub codec: CodecSection,
    pub watermark: WatermarkSection,
    pub loss: LossWeights,
    pub optimizer: OptimizerSection,
    /// Empty means the default suite for the grid.
    #[serde(default)]
    pub attacks: Vec<AttackSpec>,
}

impl ExperimentConfig {
    /// The 8x8, 4-component, 20-step, 16-bit setup.
    pub fn desk() -> Self {
        toml::from_str(DESK_TOML).expect("built-in desk config parses")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        ExperimentConfig::from_toml(&text).map_err(|e| match e {
            Error::Config(reason) => Error::Format {
                path: path.to_path_buf(),
                reason,
            },
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical TOML rendering.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        let shape = self.shape()?;
        self.build_schedule()?;
        let sampler = self.sampler_config()?;
        self.embed_config(&sampler)?;
        if self.codec.bits == 0 || self.codec.bits > self.codec.features {
            return Err(Error::Config(format!(
                "need 1 <= k <= D, got k={} D={}",
                self.codec.bits, self.codec.features
            )));
        }
        if self.codec.corpus_size < self.codec.features {
            return Err(Error::Config("corpus must hold at least D embeddings".into()));
        }
        if !(self.codec.fpr > 0.0 && self.codec.fpr < 1.0) {
            return Err(Error::Config(format!("fpr {} outside (0, 1)", self.codec.fpr)));
        }
        self.loss.validate()?;
        for attack in &self.attacks {
            attack.validate(shape)?;
            if let AttackSpec::Regenerate { t_a, .. } = attack {
                if *t_a > sampler.timesteps()[0] {
                    return Err(Error::Config(format!("regeneration t_a={t_a} above the grid")));
                }
            }
        }
        Ok(())
    }

    pub fn shape(&self) -> Result<Shape> {
        Shape::new(self.grid.channels, self.grid.height, self.grid.width)
    }

    pub fn build_schedule(&self) -> Result<NoiseSchedule> {
        let s = &self.schedule;
        NoiseSchedule::build(s.total_steps, s.beta_start, s.beta_end, s.kind)
    }

    pub fn sampler_config(&self) -> Result<SamplerConfig> {
        let base = SamplerConfig::uniform(self.schedule.total_steps, self.sampler.steps)?;
        match &self.sampler.condition {
            Some(label) => base.with_guidance(label.clone(), self.sampler.guidance_scale),
            None => Ok(base),
        }
    }

    /// Unconditional sampler used for the whitening corpus and regeneration.
    pub fn unconditional_sampler(&self) -> Result<SamplerConfig> {
        SamplerConfig::uniform(self.schedule.total_steps, self.sampler.steps)
    }

    pub fn embed_config(&self, sampler: &SamplerConfig) -> Result<EmbedConfig> {
        EmbedConfig::on_grid(sampler, self.sampler.detail_index)
    }

    pub fn extractor_options(&self) -> ExtractorOptions {
        ExtractorOptions {
            flip_invariant: self.codec.flip_invariant,
            standardize: self.codec.standardize,
        }
    }

    pub fn optimize_config(&self) -> OptimizeConfig {
        OptimizeConfig {
            iterations: self.optimizer.iterations,
            adam: AdamConfig {
                lr: self.optimizer.lr,
                ..AdamConfig::default()
            },
            patience: self.optimizer.patience,
            gradient: self.optimizer.gradient,
        }
    }

    pub fn attack_list(&self) -> Result<Vec<AttackSpec>> {
        if self.attacks.is_empty() {
            Ok(default_suite(self.shape()?))
        } else {
            Ok(self.attacks.clone())
        }
    }
}

pub const DESK_TOML: &str = include_str!("../../../../docs/desk.toml");
