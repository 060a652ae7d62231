//! Run configuration file (TOML). Every key has a default; unknown keys
//! are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::data::DatasetSpec;
use crate::error::{Error, Result};
use crate::inference::InferenceConfig;
use crate::rawio;
use crate::training::TrainConfig;

/// Environment variable overriding the default dataset directory.
pub const DATA_ROOT_ENV: &str = "CLOUDBRIDGE_DATA_ROOT";

fn default_data_dir() -> PathBuf {
    std::env::var_os(DATA_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("data"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// Dataset directory written by `make-data` and read by the other commands.
    pub data_dir: PathBuf,
    /// Checkpoints, loss log and reports.
    pub run_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            data_dir: default_data_dir(),
            run_dir: PathBuf::from("runs/default"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportConfig {
    /// Bands shown as red, green, blue in image grids.
    pub rgb_bands: [usize; 3],
    /// NFE values compared by the evaluation sweep.
    pub nfe_sweep: Vec<usize>,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self {
            rgb_bands: [3, 2, 1],
            nfe_sweep: vec![1, 5, 10],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub paths: PathsConfig,
    pub data: DatasetSpec,
    pub model: BackboneConfig,
    pub train: TrainConfig,
    pub infer: InferenceConfig,
    pub report: ReportConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&rawio::read_text(path)?)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// SHA-256 of the canonical TOML serialization with `paths` reset, so
    /// the same experiment hashes alike wherever it runs.
    pub fn hash(&self) -> Result<String> {
        let anchored = Self {
            paths: PathsConfig {
                data_dir: PathBuf::new(),
                run_dir: PathBuf::new(),
            },
            ..self.clone()
        };
        Ok(rawio::sha256_hex(anchored.to_toml()?.as_bytes()))
    }

    /// Checks every section and their mutual consistency.
    pub fn validate(&self) -> Result<()> {
        let cfg_err = |e: Error| match e {
            Error::Config(m) | Error::InvalidArgument(m) => Error::Config(m),
            other => other,
        };
        self.data.validate().map_err(cfg_err)?;
        self.model.validate().map_err(cfg_err)?;
        self.train.validate()?;
        if self.model.opt_channels != self.data.opt_channels {
            return Err(Error::Config(format!(
                "model expects {} optical bands, data has {}",
                self.model.opt_channels, self.data.opt_channels
            )));
        }
        let m = self.model.size_multiple();
        if !self.data.height.is_multiple_of(m) || !self.data.width.is_multiple_of(m) {
            return Err(Error::Config(format!(
                "scene size {}x{} must be a multiple of {m}",
                self.data.height, self.data.width
            )));
        }
        let nfes = std::iter::once(self.infer.nfe).chain(self.report.nfe_sweep.iter().copied());
        for nfe in nfes {
            if nfe == 0 || !self.train.steps.is_multiple_of(nfe) {
                return Err(Error::Config(format!(
                    "NFE {nfe} must be positive and divide T = {}",
                    self.train.steps
                )));
            }
        }
        if let Some(&b) = self.report.rgb_bands.iter().find(|&&b| b >= self.data.opt_channels) {
            return Err(Error::Config(format!(
                "rgb band {b} out of range for {} bands",
                self.data.opt_channels
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let back = RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash().unwrap(), cfg.hash().unwrap());
    }

    #[test]
    fn hash_ignores_paths() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.paths.run_dir = PathBuf::from("elsewhere");
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
        b.train.seed += 1;
        assert_ne!(a.hash().unwrap(), b.hash().unwrap());
    }

    #[test]
    fn partial_file_fills_defaults() {
        let cfg = RunConfig::from_toml("[train]\nepochs = 3\n[model]\nwidths = [8, 16, 32]\n").unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.batch_size, TrainConfig::default().batch_size);
        assert_eq!(cfg.model.widths, vec![8, 16, 32]);
        assert_eq!(cfg.model.opt_channels, 13);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(RunConfig::from_toml("[train]\nepochz = 3\n"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_toml("[nope]\n"), Err(Error::Config(_))));
    }

    #[test]
    fn out_of_range_values_rejected() {
        let bad = |text: &str| RunConfig::from_toml(text).unwrap().validate().unwrap_err();
        assert!(matches!(bad("[infer]\nnfe = 3\n"), Error::Config(_)));
        assert!(matches!(bad("[data]\ncount = 0\n"), Error::Config(_)));
        assert!(matches!(bad("[data]\nopt_channels = 4\n"), Error::Config(_)));
        assert!(matches!(bad("[train]\nlearning_rate = 0.0\n"), Error::Config(_)));
        assert!(matches!(bad("[report]\nnfe_sweep = [1, 7]\n"), Error::Config(_)));
    }
}
