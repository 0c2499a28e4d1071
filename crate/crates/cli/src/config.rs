//! The run configuration: every knob of the workbench in one TOML record.
//!
//! Flat sections, unknown keys rejected. CLI flags override file values and
//! the merged config is re-emitted into the run directory together with its
//! hash, which every artifact embeds.

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;
use vmms_core::heapgen::GeneratorConfig;
use vmms_core::observe::ObserveConfig;
use vmms_core::rl::{Ablations, TrainConfig};
use vmms_core::teachers::TeacherParams;
use vmms_core::world::WorldParams;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub heaps: Option<String>,
    pub out: Option<String>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub ablations: Ablations,
    pub world: WorldParams,
    pub observe: ObserveConfig,
    pub teachers: TeacherParams,
    pub heapgen: GeneratorConfig,
    pub paths: Paths,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// Hash of the canonical serialized config; embedded in every artifact.
    /// File locations are excluded: the hash identifies the experiment, not
    /// where a particular run stores its outputs.
    pub fn hash(&self) -> Result<String> {
        let mut semantic = self.clone();
        semantic.paths = Paths::default();
        let text = semantic.to_toml()?;
        let digest = Sha256::digest(text.as_bytes());
        Ok(hex_string(&digest[..16]))
    }

    /// Writes the merged config and its hash into a run directory.
    pub fn emit(&self, dir: &Path) -> Result<String> {
        std::fs::create_dir_all(dir)?;
        let text = self.to_toml()?;
        std::fs::write(dir.join("config.toml"), &text)?;
        let hash = self.hash()?;
        std::fs::write(dir.join("config.hash"), format!("{hash}\n"))?;
        Ok(hash)
    }
}

fn hex_string(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(2 * bytes.len());
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_hash_stability() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml().unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back.to_toml().unwrap(), text);
        assert_eq!(cfg.hash().unwrap(), back.hash().unwrap());
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = toml::from_str::<RunConfig>("[train]\nlearning_speed = 3\n");
        assert!(err.is_err());
        let err = toml::from_str::<RunConfig>("[warp]\nfactor = 9\n");
        assert!(err.is_err());
    }

    #[test]
    fn partial_config_fills_defaults() {
        let cfg: RunConfig = toml::from_str("[train]\nseed = 7\nbatch = 32\n").unwrap();
        assert_eq!(cfg.train.seed, 7);
        assert_eq!(cfg.train.batch, 32);
        assert_eq!(cfg.train.gamma, 0.99);
        assert_eq!(cfg.observe.grid, 32);
    }
}
