//! JSON run configuration.
//!
//! Relative paths are kept as written and resolved against the directory of
//! the config file when the run starts (see [`RunConfig::resolve`]).

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::AgentOptions;
use crate::backend::{WireDialect, DEFAULT_API_KEY_ENV};
use crate::memory::DEFAULT_CONTEXT_K;
use crate::prompt::{PromptStrategy, TaskKind};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading config {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendModeSetting {
    Live,
    Replay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendConfig {
    pub mode: BackendModeSetting,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    pub model_id: String,
    #[serde(default = "default_api_key_env")]
    pub api_key_env: String,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default = "default_backoff_base_ms")]
    pub backoff_base_ms: u64,
    #[serde(default = "default_max_concurrent")]
    pub max_concurrent: usize,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_max_output_tokens")]
    pub max_output_tokens: u32,
    #[serde(default = "default_max_attachment_bytes")]
    pub max_attachment_bytes: usize,
    #[serde(default)]
    pub dialect: WireDialect,
}

fn default_api_key_env() -> String {
    DEFAULT_API_KEY_ENV.into()
}
fn default_timeout_ms() -> u64 {
    60_000
}
fn default_max_retries() -> u32 {
    3
}
fn default_backoff_base_ms() -> u64 {
    500
}
fn default_max_concurrent() -> usize {
    4
}
fn default_max_output_tokens() -> u32 {
    1024
}
fn default_max_attachment_bytes() -> usize {
    20 << 20
}
fn default_memory_k() -> usize {
    DEFAULT_CONTEXT_K
}
fn default_true() -> bool {
    true
}

impl BackendConfig {
    pub fn timeout(&self) -> Duration {
        Duration::from_millis(self.timeout_ms)
    }

    pub fn backoff_base(&self) -> Duration {
        Duration::from_millis(self.backoff_base_ms)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskSetting {
    Perception,
    Knowledge,
    Math,
    Decision,
    Ablation,
}

impl TaskSetting {
    pub fn slug(self) -> &'static str {
        match self {
            TaskSetting::Perception => "perception",
            TaskSetting::Knowledge => "knowledge",
            TaskSetting::Math => "math",
            TaskSetting::Decision => "decision",
            TaskSetting::Ablation => "ablation",
        }
    }

    /// The per-step task; the ablation runs the decision task.
    pub fn step_task(self) -> TaskKind {
        match self {
            TaskSetting::Perception => TaskKind::Perception,
            TaskSetting::Knowledge => TaskKind::Knowledge,
            TaskSetting::Math => TaskKind::MathDistance,
            TaskSetting::Decision | TaskSetting::Ablation => TaskKind::Decision,
        }
    }
}

impl std::str::FromStr for TaskSetting {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        serde_json::from_value(serde_json::Value::String(s.to_ascii_lowercase()))
            .map_err(|_| ConfigError::Invalid(format!("unknown task {s:?}")))
    }
}

/// One strategy or a list of them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StrategySetting {
    One(PromptStrategy),
    Many(Vec<PromptStrategy>),
}

impl StrategySetting {
    pub fn list(&self) -> Vec<PromptStrategy> {
        match self {
            StrategySetting::One(s) => vec![*s],
            StrategySetting::Many(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub kind: TaskSetting,
    pub strategy: StrategySetting,
    #[serde(default = "default_memory_k")]
    pub memory_k: usize,
    /// Run the manifest in order as one episode sharing a memory log.
    #[serde(default)]
    pub episode: bool,
    /// Name for episode artifacts; defaults to the manifest file stem.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub episode_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    pub manifest: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transcripts: Option<PathBuf>,
    pub out_dir: PathBuf,
    /// Human perception verdicts; when set they replace the presence judge.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verdicts: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RenderConfig {
    #[serde(default = "default_true")]
    pub markdown: bool,
    #[serde(default = "default_true")]
    pub csv: bool,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self { markdown: true, csv: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub backend: BackendConfig,
    pub task: TaskConfig,
    pub paths: PathsConfig,
    #[serde(default)]
    pub render: RenderConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let config: RunConfig = serde_json::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialization is infallible")
    }

    /// Reads and validates `path`, resolving relative paths against its
    /// directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.to_path_buf(), source })?;
        let config = Self::from_json(&text)?;
        Ok(config.resolve(path.parent().unwrap_or(Path::new(""))))
    }

    /// Joins every relative path onto `base`.
    pub fn resolve(mut self, base: &Path) -> Self {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        join(&mut self.paths.manifest);
        join(&mut self.paths.out_dir);
        if let Some(p) = &mut self.paths.transcripts {
            join(p);
        }
        if let Some(p) = &mut self.paths.verdicts {
            join(p);
        }
        self
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        match self.backend.mode {
            BackendModeSetting::Replay if self.paths.transcripts.is_none() => {
                return invalid("replay mode needs paths.transcripts");
            }
            BackendModeSetting::Live => {
                if self.backend.endpoint.as_deref().is_none_or(|e| e.trim().is_empty()) {
                    return invalid("live mode needs backend.endpoint");
                }
                if self.backend.api_key_env.trim().is_empty() {
                    return invalid("live mode needs backend.api_key_env");
                }
            }
            _ => {}
        }
        if self.backend.model_id.trim().is_empty() {
            return invalid("backend.model_id is empty");
        }
        if !(self.backend.temperature.is_finite() && self.backend.temperature >= 0.0) {
            return invalid("backend.temperature must be a nonnegative number");
        }
        if self.backend.max_concurrent == 0 {
            return invalid("backend.max_concurrent must be at least 1");
        }
        if self.task.memory_k == 0 {
            return invalid("task.memory_k must be at least 1");
        }
        let strategies = self.task.strategy.list();
        if strategies.is_empty() {
            return invalid("task.strategy lists no strategies");
        }
        for (i, s) in strategies.iter().enumerate() {
            if strategies[..i].contains(s) {
                return Err(ConfigError::Invalid(format!("task.strategy lists {s} twice")));
            }
        }
        if let Some(id) = &self.task.episode_id {
            if id.is_empty() || id.contains(['/', '\\']) {
                return Err(ConfigError::Invalid(format!("task.episode_id {id:?} is not a file name")));
            }
        }
        if self.task.kind == TaskSetting::Ablation && self.task.episode {
            return invalid("the ablation scores independent samples; task.episode must be false");
        }
        if self.task.kind != TaskSetting::Ablation && strategies.len() > 1 {
            return Err(ConfigError::Invalid(format!("task {} takes a single strategy", self.task.kind.slug())));
        }
        Ok(())
    }

    pub fn agent_options(&self) -> AgentOptions {
        AgentOptions {
            model_id: self.backend.model_id.clone(),
            temperature: self.backend.temperature,
            max_output_tokens: self.backend.max_output_tokens,
            memory_k: self.task.memory_k,
        }
    }
}
