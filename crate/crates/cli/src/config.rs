//! Run configuration read by `train` and `eval`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use xdomain_core::eval::EvalSettings;
use xdomain_core::objective::TrainConfig;

use crate::failure::{Failure, EXIT_IO};

/// Relative paths are resolved against the directory holding the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalSettings,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, Failure> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Failure::config(format!("config: {e}")))?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = fs::read_to_string(path).map_err(|e| Failure::new(EXIT_IO, format!("{}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.data_dir = base.join(&cfg.data_dir);
        cfg.out_dir = base.join(&cfg.out_dir);
        Ok(cfg)
    }

    /// Every field with defaults filled in, as written to `config_resolved.json`.
    pub fn resolved_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::parse(r#"{"data_dir":"d","out_dir":"o","train":{"lamda1":3}}"#).unwrap_err();
        assert_eq!(err.code, 2);
        assert!(err.message.contains("lamda1"), "{}", err.message);
        assert!(RunConfig::parse(r#"{"data_dir":"d","out_dir":"o","extra":1}"#).is_err());
        assert!(RunConfig::parse(r#"{"data_dir":"d","out_dir":"o","train":{"arch":{"depth":2}}}"#).is_err());
    }

    #[test]
    fn absent_keys_take_defaults() {
        let cfg = RunConfig::parse(r#"{"data_dir":"d","out_dir":"o","train":{"steps":7}}"#).unwrap();
        assert_eq!(cfg.train.steps, 7);
        assert_eq!(cfg.train.lambda1, TrainConfig::default().lambda1);
        assert_eq!(cfg.eval, EvalSettings::default());
        let again = RunConfig::parse(&cfg.resolved_json()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn invalid_values_are_config_errors() {
        let err = RunConfig::parse(r#"{"data_dir":"d","out_dir":"o","train":{"batch_size":0}}"#).unwrap_err();
        assert_eq!(err.code, 2);
    }
}
