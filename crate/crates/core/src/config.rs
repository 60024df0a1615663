//! One JSON document configuring every pipeline, a section per module.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datakit::GenConfig;
use crate::env::EnvConfig;
use crate::error::{Result, SonoError};
use crate::explain::IgConfig;
use crate::generative::VaeGanConfig;
use crate::phantom::PhantomConfig;
use crate::ppo::PpoConfig;
use crate::quality::QualityConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub phantom: PhantomConfig,
    pub dataset: GenConfig,
    pub quality: QualityConfig,
    pub env: EnvConfig,
    pub ppo: PpoConfig,
    pub vaegan: VaeGanConfig,
    pub attribution: IgConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            phantom: PhantomConfig::default(),
            dataset: GenConfig::default(),
            quality: QualityConfig::default(),
            env: EnvConfig::default(),
            ppo: PpoConfig::desk(),
            vaegan: VaeGanConfig::default(),
            attribution: IgConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = serde_json::from_str(&text)
            .map_err(|e| SonoError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.phantom.validate()?;
        self.ppo.validate()?;
        self.vaegan.validate()?;
        if self.ppo.max_episode_length != self.env.max_episode_length {
            return Err(SonoError::Config(format!(
                "ppo.max_episode_length ({}) and env.max_episode_length ({}) differ",
                self.ppo.max_episode_length, self.env.max_episode_length
            )));
        }
        Ok(())
    }

    /// Replaces every section's seed with one derived from `seed`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        let mix = |k: u64| seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(k);
        self.dataset.seed = mix(1);
        self.quality.seed = mix(2);
        self.ppo.seed = mix(3);
        self.ppo.validation_seed = mix(4);
        self.vaegan.seed = mix(5);
        self
    }
}
