//! Config files: defaults, overridden by `--config` JSON, overridden by flags.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use marsnav_core::dataset::{DatasetConfig, GoalMode};
use marsnav_core::terrain::TerrainParams;
use marsnav_core::train::TrainConfig;

fn load_or_default<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))
        }
    }
}

/// Corpus generation settings as written to the dataset's `config.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub maps: usize,
    pub traj: usize,
    pub size: usize,
    pub seed: u64,
    pub goal_mode: GoalMode,
    /// Full terrain parameters; derived from `size` when absent.
    pub terrain: Option<TerrainParams>,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            maps: 700,
            traj: 7,
            size: 64,
            seed: 0,
            goal_mode: GoalMode::PerMap,
            terrain: None,
        }
    }
}

impl GenConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        load_or_default(path)
    }

    pub fn paper_scale(&mut self) {
        self.size = 128;
        self.maps = 10_000;
    }

    pub fn resolve(&self) -> DatasetConfig {
        let terrain = match &self.terrain {
            Some(t) if t.image_size == self.size => t.clone(),
            _ => TerrainParams::for_size(self.size),
        };
        let mut c = DatasetConfig::new(terrain, self.maps, self.traj, self.seed);
        c.goal_mode = self.goal_mode;
        c
    }

    pub fn with_terrain(&self, terrain: TerrainParams) -> Self {
        GenConfig {
            terrain: Some(terrain),
            ..self.clone()
        }
    }
}

/// Training run settings as written to the run directory's `config.json`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        load_or_default(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_config_keeps_defaults() {
        let c: GenConfig = serde_json::from_str(r#"{"maps": 14}"#).unwrap();
        assert_eq!(c.maps, 14);
        assert_eq!(c.traj, 7);
        let r: RunConfig = serde_json::from_str(r#"{"train": {"arch": "vin", "epochs": 2}}"#).unwrap();
        assert_eq!(r.train.epochs, 2);
        assert_eq!(r.train.batch_size, 128);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(serde_json::from_str::<GenConfig>(r#"{"mapz": 14}"#).is_err());
    }

    #[test]
    fn explicit_terrain_wins_when_sizes_agree() {
        let mut t = TerrainParams::for_size(32);
        t.risk_fraction = 0.5;
        let c = GenConfig { size: 32, terrain: Some(t.clone()), ..GenConfig::default() };
        assert_eq!(c.resolve().terrain, t);
        let c = GenConfig { size: 64, ..c };
        assert_eq!(c.resolve().terrain, TerrainParams::for_size(64));
    }
}
