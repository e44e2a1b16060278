//! Run configuration files.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::audit::AuditConfig;
use crate::error::{Error, Result};
use crate::taskgen::ProtocolSpec;
use crate::trainer::{RunOptions, TrainConfig};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Json,
    Csv,
    #[default]
    Both,
}

impl ReportFormat {
    pub fn json(self) -> bool {
        matches!(self, ReportFormat::Json | ReportFormat::Both)
    }

    pub fn csv(self) -> bool {
        matches!(self, ReportFormat::Csv | ReportFormat::Both)
    }
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            "both" => Ok(ReportFormat::Both),
            other => Err(Error::Config {
                key: "output.format".into(),
                message: format!("unknown format {other:?}"),
            }),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: Option<PathBuf>,
    pub format: ReportFormat,
    /// Write `features_task{t}.csv` after every task.
    pub dump_features: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seeds both the task stream and training.
    pub seed: u64,
    pub protocol: ProtocolSpec,
    pub train: TrainConfig,
    #[serde(skip_serializing_if = "is_default_output")]
    pub output: OutputConfig,
    /// Strategies and seeds for `replay-audit`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub audit: Option<AuditConfig>,
}

fn is_default_output(o: &OutputConfig) -> bool {
    *o == OutputConfig::default()
}

/// Pull the offending key out of a deserializer message.
fn offending_key(msg: &str) -> Option<String> {
    for marker in ["unknown field `", "missing field `", "unknown variant `"] {
        if let Some(start) = msg.find(marker) {
            let rest = &msg[start + marker.len()..];
            if let Some(end) = rest.find('`') {
                return Some(rest[..end].to_string());
            }
        }
    }
    None
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let message = e.message().to_string();
            Error::Config {
                key: offending_key(&message).unwrap_or_else(|| "<document>".into()),
                message: e.to_string().trim().to_string(),
            }
        })?;
        cfg.resolved()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config {
            key: "<file>".into(),
            message: format!("{}: {e}", path.display()),
        })?;
        Self::from_toml_str(&text)
    }

    /// Propagate the top-level seed and validate every section.
    pub fn resolved(mut self) -> Result<Self> {
        self.protocol.seed = self.seed;
        self.train.seed = self.seed;
        self.protocol.validate().map_err(|e| as_config("protocol", e))?;
        self.train.validate()?;
        Ok(self)
    }

    pub fn with_seed(mut self, seed: u64) -> Result<Self> {
        self.seed = seed;
        self.resolved()
    }

    /// Two-dimensional features with per-task feature dumps.
    pub fn toy2d(mut self) -> Result<Self> {
        self.train.backbone.feature_dim = 2;
        self.output.dump_features = true;
        self.resolved()
    }

    pub fn run_options(&self) -> RunOptions {
        RunOptions {
            dump_features: self.output.dump_features,
        }
    }

    /// The configuration as embedded in reports: everything that affects
    /// results, nothing about where they are written.
    pub fn echo(&self) -> RunConfig {
        RunConfig {
            output: OutputConfig::default(),
            audit: None,
            ..self.clone()
        }
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

fn as_config(section: &str, e: Error) -> Error {
    match e {
        Error::Config { .. } => e,
        other => Error::Config {
            key: section.to_string(),
            message: other.to_string(),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let cfg = RunConfig::from_toml_str("").unwrap();
        assert_eq!(cfg.train.epochs, 10);
        assert_eq!(cfg.protocol.tasks, 4);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::from_toml_str("[train]\nreplaysize = 3\n").unwrap_err();
        match err {
            Error::Config { key, .. } => assert_eq!(key, "replaysize"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn seed_reaches_every_section() {
        let cfg = RunConfig::from_toml_str("seed = 9\n").unwrap();
        assert_eq!(cfg.protocol.seed, 9);
        assert_eq!(cfg.train.seed, 9);
    }

    #[test]
    fn invalid_gamma_names_key() {
        let err = RunConfig::from_toml_str("[train]\ngamma = 1.5\n").unwrap_err();
        assert!(matches!(err, Error::Config { ref key, .. } if key == "train.gamma"));
    }

    #[test]
    fn echo_round_trips() {
        let cfg = RunConfig::from_toml_str("seed = 3\n[train.loss]\ntemperature = 0.5\n").unwrap();
        let back = RunConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(back, cfg);
    }
}
