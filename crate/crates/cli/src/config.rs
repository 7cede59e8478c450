use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};
use splatterlab::synthgen::DatasetConfig;
use splatterlab::training::FitConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Dataset root.
    pub data: Option<PathBuf>,
    /// Output directory for fits, renders and reports.
    pub out: Option<PathBuf>,
}

/// Everything a run needs, loadable from one JSON file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub fit: FitConfig,
    pub paths: Paths,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let cfg: Self = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.dataset.validate()?;
        self.fit.validate()?;
        Ok(())
    }
}

/// What `fit` records next to each fitted grid so later commands can find
/// the sample and configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitRecord {
    pub data: PathBuf,
    pub sample: usize,
    pub config: FitConfig,
    pub final_loss: f64,
    pub scale: f64,
}

pub const GRID_FILE: &str = "grid.bin";
pub const DECODE_FILE: &str = "decode.json";
pub const RECORD_FILE: &str = "fit.json";
pub const TRACE_FILE: &str = "trace.jsonl";

impl FitRecord {
    /// Reads the record stored beside `grid`.
    pub fn beside(grid: &Path) -> anyhow::Result<Self> {
        let path = grid.parent().unwrap_or(Path::new(".")).join(RECORD_FILE);
        let text = std::fs::read_to_string(&path).with_context(|| format!("reading fit record {}", path.display()))?;
        Ok(serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_config_fills_defaults() {
        let cfg: RunConfig = serde_json::from_str(r#"{"fit": {"iterations": 5}, "paths": {"data": "d"}}"#).unwrap();
        assert_eq!(cfg.fit.iterations, 5);
        assert_eq!(cfg.dataset, DatasetConfig::default());
        assert_eq!(cfg.paths.data, Some(PathBuf::from("d")));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"fitt": {}}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"fit": {"weights": {"lambda_q": 1}}}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"fit": {"decode": {"z_far": 1}}}"#).is_err());
    }
}
