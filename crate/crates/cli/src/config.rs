//! TOML run configuration.

use diffrank_core::synthworld::{Regime, WorldConfig};
use diffrank_core::trainer::TrainConfig;
use serde::Deserialize;
use std::path::Path;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub n_train: usize,
    pub n_eval: usize,
    /// World preset the `[world]` table is applied on top of.
    pub regime: Regime,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            n_train: 20_000,
            n_eval: 5_000,
            regime: Regime::Default,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateSection {
    pub seeds: Vec<u64>,
    pub axes: Vec<String>,
}

impl Default for AblateSection {
    fn default() -> Self {
        Self {
            seeds: vec![],
            axes: vec![],
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct FileConfig {
    seed: Option<u64>,
    data: DataSection,
    world: toml::Table,
    train: TrainConfig,
    ablate: AblateSection,
}

/// Fully resolved configuration.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataSection,
    pub world: WorldConfig,
    pub train: TrainConfig,
    pub ablate: AblateSection,
}

fn merge(base: &mut toml::Table, over: &toml::Table) {
    for (k, v) in over {
        match (base.get_mut(k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            _ => {
                base.insert(k.clone(), v.clone());
            }
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str, seed_override: Option<u64>) -> Result<Self, String> {
        let file: FileConfig = toml::from_str(text).map_err(|e| e.to_string())?;
        let preset = WorldConfig::regime(file.data.regime);
        let mut table = toml::Table::try_from(&preset).map_err(|e| e.to_string())?;
        merge(&mut table, &file.world);
        let world: WorldConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| format!("in [world]: {e}"))?;
        world.validate().map_err(|e| format!("in [world]: {e}"))?;
        let seed = seed_override.or(file.seed).unwrap_or(file.train.seed);
        let train = TrainConfig { seed, ..file.train };
        train.validate().map_err(|e| format!("in [train]: {e}"))?;
        for a in &file.ablate.axes {
            diffrank_core::trainer::Axis::parse(a).map_err(|e| format!("in [ablate]: {e}"))?;
        }
        Ok(Self {
            seed,
            data: file.data,
            world,
            train,
            ablate: file.ablate,
        })
    }

    pub fn load(path: Option<&Path>, seed_override: Option<u64>) -> Result<Self, String> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?,
            None => String::new(),
        };
        Self::parse(&text, seed_override)
    }
}
