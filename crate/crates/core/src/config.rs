//! Engine configuration file: JSON with `gateway`, `vad`, `scheduler`,
//! `backend` and `trace` sections. Every field has a default.

use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::LabelMap;
use crate::clock::ClockMode;
use crate::scheduler::SchedulerConfig;
use crate::vad::VadConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot parse {path}: {source}")]
    Parse {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GatewayConfig {
    pub bind: String,
    pub sample_rate: u32,
    /// Clock for live sessions unless a client's `hello` asks otherwise.
    pub clock: ClockMode,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1:7860".into(),
            sample_rate: 16_000,
            clock: ClockMode::Real,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendMode {
    #[default]
    Mock,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    pub mode: BackendMode,
    /// `host:port` of the model server (remote mode).
    pub endpoint: Option<String>,
    pub timeout_ms: u64,
    /// Scripted outcomes (mock mode); clients may add their own in `hello`.
    pub labels: LabelMap,
    pub classify_latency_ms: u64,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            mode: BackendMode::Mock,
            endpoint: None,
            timeout_ms: 5_000,
            labels: LabelMap::new(),
            classify_latency_ms: 50,
        }
    }
}

impl BackendConfig {
    pub fn timeout(&self) -> Duration {
        Duration::from_millis(self.timeout_ms)
    }

    pub fn classify_latency(&self) -> Duration {
        Duration::from_millis(self.classify_latency_ms)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TraceConfig {
    pub enabled: bool,
    pub dir: PathBuf,
}

impl Default for TraceConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            dir: PathBuf::from("traces"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    pub gateway: GatewayConfig,
    pub vad: VadConfig,
    pub scheduler: SchedulerConfig,
    pub backend: BackendConfig,
    pub trace: TraceConfig,
}

impl EngineConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let config: EngineConfig =
            serde_json::from_str(&text).map_err(|source| ConfigError::Parse {
                path: path.to_path_buf(),
                source,
            })?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        if self.gateway.sample_rate == 0 {
            return invalid("gateway.sample_rate must be positive".into());
        }
        if let Err(e) = self.vad.validate() {
            return invalid(format!("vad: {e}"));
        }
        if self.scheduler.queue_cap == 0 {
            return invalid("scheduler.queue_cap must be positive".into());
        }
        if self.backend.mode == BackendMode::Remote && self.backend.endpoint.is_none() {
            return invalid("backend.endpoint is required in remote mode".into());
        }
        if self.backend.timeout_ms == 0 {
            return invalid("backend.timeout_ms must be positive".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_gives_defaults() {
        let config: EngineConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(config, EngineConfig::default());
        assert_eq!(config.scheduler.queue_cap, 4);
        assert_eq!(config.vad.hangover_frames, 10);
        config.validate().unwrap();
    }

    #[test]
    fn sections_override_defaults() {
        let config: EngineConfig = serde_json::from_str(
            r#"{"gateway":{"bind":"0.0.0.0:9000"},"scheduler":{"queue_cap":2},
                "backend":{"mode":"remote","endpoint":"tcp://127.0.0.1:1"},
                "trace":{"enabled":true,"dir":"/tmp/t"}}"#,
        )
        .unwrap();
        assert_eq!(config.gateway.bind, "0.0.0.0:9000");
        assert_eq!(config.gateway.sample_rate, 16_000);
        assert_eq!(config.scheduler.queue_cap, 2);
        assert_eq!(config.backend.mode, BackendMode::Remote);
        assert!(config.trace.enabled);
        config.validate().unwrap();
    }

    #[test]
    fn remote_without_endpoint_is_invalid() {
        let config: EngineConfig =
            serde_json::from_str(r#"{"backend":{"mode":"remote"}}"#).unwrap();
        assert!(matches!(config.validate(), Err(ConfigError::Invalid(_))));
    }

    #[test]
    fn load_reports_parse_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, "{not json").unwrap();
        assert!(matches!(
            EngineConfig::load(&path),
            Err(ConfigError::Parse { .. })
        ));
        assert!(matches!(
            EngineConfig::load(&dir.path().join("missing.json")),
            Err(ConfigError::Io { .. })
        ));
    }
}
