//! Service configuration: a JSON file plus environment overrides.

use std::path::{Path, PathBuf};
use std::time::Duration;

use matir_core::backend::FanOut;
use matir_core::{OutagePolicy, PipelineConfig, SearchParams};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const ENV_INDEX: &str = "MATIR_INDEX";
pub const ENV_LISTEN: &str = "MATIR_LISTEN";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub index_path: Option<PathBuf>,
    pub text_embedder_url: Option<String>,
    pub scorer_url: Option<String>,
    pub grounder_url: Option<String>,
    pub n_c: usize,
    pub n_k: usize,
    pub max_in_flight: usize,
    pub call_timeout_s: f64,
    pub retries: u32,
    pub listen_address: String,
    pub outage_policy: OutagePolicy,
    /// Prompt templates with a `{}` placeholder; empty sends the raw text.
    pub prompt_templates: Vec<String>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            index_path: None,
            text_embedder_url: None,
            scorer_url: None,
            grounder_url: None,
            n_c: 100,
            n_k: 50,
            max_in_flight: 8,
            call_timeout_s: 30.0,
            retries: 2,
            listen_address: "127.0.0.1:8080".into(),
            outage_policy: OutagePolicy::Degrade,
            prompt_templates: Vec::new(),
        }
    }
}

impl ServiceConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let config: Self = serde_json::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_owned(),
            source,
        })?;
        Self::from_json(&text)
    }

    /// Applies `MATIR_INDEX` and `MATIR_LISTEN` from `lookup`.
    pub fn apply_env(&mut self, lookup: impl Fn(&str) -> Option<String>) {
        if let Some(v) = lookup(ENV_INDEX).filter(|v| !v.is_empty()) {
            self.index_path = Some(v.into());
        }
        if let Some(v) = lookup(ENV_LISTEN).filter(|v| !v.is_empty()) {
            self.listen_address = v;
        }
    }

    pub fn with_process_env(mut self) -> Self {
        self.apply_env(|k| std::env::var(k).ok());
        self
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        SearchParams {
            n_c: self.n_c,
            n_k: self.n_k,
        }
        .validate()
        .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.max_in_flight == 0 {
            return Err(ConfigError::Invalid(
                "max_in_flight must be at least 1".into(),
            ));
        }
        if !(self.call_timeout_s.is_finite() && self.call_timeout_s > 0.0) {
            return Err(ConfigError::Invalid(
                "call_timeout_s must be positive".into(),
            ));
        }
        for (name, url) in [
            ("text_embedder_url", &self.text_embedder_url),
            ("scorer_url", &self.scorer_url),
            ("grounder_url", &self.grounder_url),
        ] {
            if let Some(url) = url {
                check_url(url).map_err(|e| ConfigError::Invalid(format!("{name}: {e}")))?;
            }
        }
        Ok(())
    }

    pub fn fan_out(&self) -> FanOut {
        FanOut::new(
            self.max_in_flight,
            Duration::from_secs_f64(self.call_timeout_s),
            self.retries,
        )
    }

    pub fn pipeline_config(&self) -> PipelineConfig {
        PipelineConfig {
            params: SearchParams {
                n_c: self.n_c,
                n_k: self.n_k,
            },
            fan_out: self.fan_out(),
            outage: self.outage_policy,
            prompt_templates: self.prompt_templates.clone(),
        }
    }
}

/// Accepts absolute http(s) URLs.
pub fn check_url(url: &str) -> Result<reqwest::Url, String> {
    let parsed = reqwest::Url::parse(url).map_err(|e| format!("{url:?}: {e}"))?;
    if !matches!(parsed.scheme(), "http" | "https") {
        return Err(format!("{url:?}: scheme must be http or https"));
    }
    Ok(parsed)
}
