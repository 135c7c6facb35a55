//! Run configuration: a TOML file plus `section.key=value` overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::drm::OutputBounds;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::rasterizer::RasterSettings;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub total_iters: usize,
    pub warmup_iters: usize,
    pub alternation_block: usize,
    pub densify_from: usize,
    pub densify_until: usize,
    pub densify_interval: usize,
    pub parent_update_every: usize,
    /// Threshold on the mean NDC-space norm of 2D mean gradients.
    pub grad_threshold: f64,
    pub prune_opacity: f64,
    /// Split/clone boundary as a fraction of the scene extent.
    pub percent_dense: f64,
    /// Prune Gaussians whose largest world scale exceeds this fraction of the extent.
    pub max_world_scale: f64,
    pub checkpoint_every: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            total_iters: 100_000,
            warmup_iters: 10_000,
            alternation_block: 5_000,
            densify_from: 500,
            densify_until: 50_000,
            densify_interval: 100,
            parent_update_every: 1_000,
            grad_threshold: 0.0002,
            prune_opacity: 0.005,
            percent_dense: 0.01,
            max_world_scale: 0.1,
            checkpoint_every: 10_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearningRates {
    /// Initial position rate, multiplied by the scene extent.
    pub position: f64,
    pub position_final: f64,
    pub rotation: f64,
    pub scale: f64,
    pub opacity: f64,
    pub sh_dc: f64,
    pub sh_rest: f64,
    pub drm: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            position: 1.6e-4,
            position_final: 1.6e-6,
            rotation: 1e-3,
            scale: 5e-3,
            opacity: 5e-2,
            sh_dc: 2.5e-3,
            sh_rest: 2.5e-3 / 20.0,
            drm: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub sh_degree: usize,
    /// Initial human Gaussian scale in meters; 0 uses the mean edge length.
    pub init_scale: f64,
    pub background_count: usize,
    /// Background sphere radius; 0 uses twice the camera rig radius.
    pub background_radius: f64,
    /// Parent reassignment distance threshold in meters.
    pub tau: f64,
    pub drm_hidden: usize,
    pub drm_bounds: OutputBounds,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            sh_degree: 3,
            init_scale: 0.0,
            background_count: 20_000,
            background_radius: 0.0,
            tau: 0.10,
            drm_hidden: 256,
            drm_bounds: OutputBounds::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Keep frames with `frame % stride == 0` for training.
    pub stride: usize,
    /// Held-out frames satisfy `frame % stride == test_offset`.
    pub test_offset: usize,
    /// Empty means every camera.
    pub train_cameras: Vec<String>,
    pub test_cameras: Vec<String>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            stride: 1,
            test_offset: 0,
            train_cameras: Vec::new(),
            test_cameras: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub loss: LossWeights,
    pub schedule: ScheduleConfig,
    pub lr: LearningRates,
    pub model: ModelConfig,
    pub render: RasterSettings,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            loss: LossWeights::default(),
            schedule: ScheduleConfig::default(),
            lr: LearningRates::default(),
            model: ModelConfig::default(),
            render: RasterSettings::default(),
            data: DataConfig::default(),
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&s).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Applies `a.b.c=value` overrides; unknown keys and ill-typed values are
    /// rejected.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut root = toml::Value::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        for ov in overrides {
            let (key, raw) = ov
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{ov}` is not key=value")))?;
            let key = key.trim();
            let parts: Vec<&str> = key.split('.').collect();
            let mut node = &mut root;
            for (i, p) in parts.iter().enumerate() {
                let table = node
                    .as_table_mut()
                    .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
                let entry = table
                    .get_mut(*p)
                    .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
                if i + 1 == parts.len() {
                    *entry = parse_value(raw.trim());
                    break;
                }
                node = entry;
            }
        }
        let cfg: Self = root
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("invalid override: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.schedule;
        if s.total_iters == 0 || s.alternation_block == 0 || s.parent_update_every == 0 || s.densify_interval == 0 {
            return Err(Error::Config("schedule counts must be positive".into()));
        }
        if s.warmup_iters > s.total_iters || s.densify_until > s.total_iters {
            return Err(Error::Config("warmup and densify_until must not exceed total_iters".into()));
        }
        if self.data.stride == 0 {
            return Err(Error::Config("data.stride must be positive".into()));
        }
        if self.model.sh_degree > crate::rasterizer::sh::MAX_SH_DEGREE {
            return Err(Error::Config("model.sh_degree must be <= 3".into()));
        }
        if self.model.drm_hidden == 0 {
            return Err(Error::Config("model.drm_hidden must be positive".into()));
        }
        if !(self.model.tau > 0.0) {
            return Err(Error::Config("model.tau must be positive".into()));
        }
        if self.render.tile_size == 0 {
            return Err(Error::Config("render.tile_size must be positive".into()));
        }
        self.model.drm_bounds.validate()?;
        self.loss.validate()
    }

    /// Hex SHA-256 of the canonical TOML serialization.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_roundtrips_through_toml() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_toml_str(&c.to_toml_string()).unwrap(), c);
    }

    #[test]
    fn overrides_are_typed_and_checked() {
        let c = RunConfig::default()
            .with_overrides(&["schedule.total_iters=200000".into(), "model.tau=0.2".into()])
            .unwrap();
        assert_eq!(c.schedule.total_iters, 200_000);
        assert_eq!(c.model.tau, 0.2);
        assert!(RunConfig::default().with_overrides(&["schedule.nope=1".into()]).is_err());
        assert!(RunConfig::default().with_overrides(&["schedule.total_iters=abc".into()]).is_err());
        assert!(RunConfig::default().with_overrides(&["seed".into()]).is_err());
    }

    #[test]
    fn unknown_file_keys_are_rejected() {
        assert!(RunConfig::from_toml_str("[schedule]\nwarmup = 3\n").is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }
}
