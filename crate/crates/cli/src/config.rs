//! Run configuration: built-in defaults, then an optional TOML file, then
//! explicit command-line flags.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use stein_encoder::experiments::SimConfig;
use stein_encoder::{MlpSpec, PipelineConfig};

use crate::UsageError;

/// Contents of a `--config` file. Every table is optional and partial.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub pipeline: Option<PipelineConfig>,
    pub mlp: Option<MlpSpec>,
    pub sim: Option<SimConfig>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<FileConfig, UsageError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| UsageError(format!("invalid config {}: {e}", path.display())))
    }
}

/// Fully resolved settings of one invocation, embedded in every report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub command: String,
    pub seed: u64,
    pub threads: usize,
    /// Input files by role; output locations are left out so that reports
    /// written to different directories compare equal.
    pub inputs: BTreeMap<String, String>,
    pub pipeline: PipelineConfig,
    pub mlp: MlpSpec,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub sim: Option<SimConfig>,
}

pub const DEFAULT_SEED: u64 = 2024;

impl RunConfig {
    /// `seed` applies to the pipeline, the network and the simulation.
    pub fn resolve(command: &str, file: &FileConfig, seed_flag: Option<u64>, threads: usize) -> RunConfig {
        let seed = seed_flag.or(file.seed).unwrap_or(DEFAULT_SEED);
        let mut pipeline = file.pipeline.clone().unwrap_or_default();
        pipeline.seed = seed;
        let mut mlp = file.mlp.clone().unwrap_or_default();
        mlp.seed = seed;
        RunConfig {
            command: command.to_string(),
            seed,
            threads,
            inputs: BTreeMap::new(),
            pipeline,
            mlp,
            sim: None,
        }
    }

    pub fn input(&mut self, role: &str, path: &Path) {
        self.inputs.insert(role.to_string(), path.display().to_string());
    }

    pub fn validate(&self) -> stein_encoder::Result<()> {
        self.pipeline.validate()?;
        self.mlp.validate()?;
        if let Some(s) = &self.sim {
            s.validate()?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flag_beats_file_beats_default() {
        let none = FileConfig::default();
        assert_eq!(RunConfig::resolve("x", &none, None, 1).seed, DEFAULT_SEED);
        let file: FileConfig = toml::from_str("seed = 5\n[mlp]\nepochs = 7\n").unwrap();
        let r = RunConfig::resolve("x", &file, None, 1);
        assert_eq!((r.seed, r.pipeline.seed, r.mlp.seed, r.mlp.epochs), (5, 5, 5, 7));
        assert_eq!(r.mlp.hidden, vec![128, 128, 128]);
        assert_eq!(RunConfig::resolve("x", &file, Some(9), 1).mlp.seed, 9);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(toml::from_str::<FileConfig>("sed = 5\n").is_err());
        assert!(toml::from_str::<FileConfig>("[mlp]\nepoch = 5\n").is_err());
    }
}
