use std::fs;
use std::path::{Path, PathBuf};

use decouple_core::evaluation::EvalSettings;
use decouple_core::experiment::ExperimentConfig;
use decouple_core::nets::EmbedderConfig;
use decouple_core::synth::SynthConfig;
use decouple_core::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Environment variable that relative output directories are resolved against.
pub const OUT_ROOT_VAR: &str = "DECOUPLE_OUT_ROOT";
pub const CONFIG_ECHO_NAME: &str = "resolved_config.toml";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataPaths {
    pub train_manifest: Option<PathBuf>,
    pub test_manifest: Option<PathBuf>,
    pub comparison_manifest: Option<PathBuf>,
    /// Directory of a saved mask bank.
    pub bank: Option<PathBuf>,
}

/// Everything a command can be configured with. Flags override file values.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub data: DataPaths,
    pub synth: SynthConfig,
    pub train: TrainConfig,
    pub eval: EvalSettings,
    pub embedder: EmbedderConfig,
    /// Used by `ablate` only; carries its own scene, training and evaluation settings.
    pub experiment: ExperimentConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("bad config {}: {e}", path.display())))
    }

    pub fn require_seed(&self) -> Result<u64, CliError> {
        self.seed
            .ok_or_else(|| CliError::Usage("a seed is required (--seed or `seed` in the config file)".into()))
    }

    /// Writes the fully resolved config into `dir`.
    pub fn echo(&self, dir: &Path) -> Result<(), CliError> {
        fs::create_dir_all(dir).map_err(|e| CliError::Io(dir.to_path_buf(), e))?;
        let text = toml::to_string_pretty(self).map_err(|e| CliError::Usage(format!("cannot serialise config: {e}")))?;
        let path = dir.join(CONFIG_ECHO_NAME);
        fs::write(&path, text).map_err(|e| CliError::Io(path, e))
    }
}

/// Resolves relative output paths against the output-root variable, if set.
pub fn resolve_out(path: &Path) -> PathBuf {
    match std::env::var_os(OUT_ROOT_VAR) {
        Some(root) if path.is_relative() => PathBuf::from(root).join(path),
        _ => path.to_path_buf(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips_through_toml() {
        let mut cfg = RunConfig {
            seed: Some(7),
            ..RunConfig::default()
        };
        cfg.data.bank = Some("bank".into());
        let text = toml::to_string_pretty(&cfg).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let cfg: RunConfig = toml::from_str("seed = 3\n[train]\nbatch_size = 2\n").unwrap();
        assert_eq!(cfg.seed, Some(3));
        assert_eq!(cfg.train.batch_size, 2);
        assert_eq!(cfg.train.lr_generator, TrainConfig::default().lr_generator);
        assert!(toml::from_str::<RunConfig>("bogus = 1").is_err());
    }
}
