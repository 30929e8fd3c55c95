//! Model backends.
//!
//! Every call goes through [`ModelBackend::send`] with a transcript key, so
//! live, recording and replay backends are interchangeable for callers.

mod live;
mod transcript;

use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::prompt::{PromptBundle, PromptStrategy, TaskKind};

pub use live::{LiveBackend, LiveSettings, WireDialect};
pub use transcript::{DriftWarning, RecordingBackend, ReplayBackend, Transcript, TranscriptStore};

pub const DEFAULT_API_KEY_ENV: &str = "MLLM_API_KEY";

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("backend configuration error: {0}")]
    Config(String),
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("provider returned HTTP {status}: {body_excerpt}")]
    Provider { status: u16, body_excerpt: String },
    #[error("provider response could not be decoded: {0}")]
    Malformed(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("invalid transcript key component {0:?}: must not contain '/'")]
    InvalidKey(String),
    #[error("no recorded transcript for key {0}")]
    MissingTranscript(String),
    #[error("transcript key {0} already recorded (use overwrite to replace)")]
    DuplicateTranscript(String),
    #[error("transcript store {path}: {message}")]
    Store { path: String, message: String },
}

impl BackendError {
    /// Errors that mean the run itself is misconfigured, as opposed to one
    /// request failing.
    pub fn is_fatal(&self) -> bool {
        matches!(
            self,
            BackendError::Config(_)
                | BackendError::InvalidKey(_)
                | BackendError::MissingTranscript(_)
                | BackendError::DuplicateTranscript(_)
                | BackendError::Store { .. }
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImagePayload {
    /// Free-form role of the image, e.g. "front".
    pub label: String,
    pub media_type: String,
    pub bytes: Vec<u8>,
}

impl ImagePayload {
    pub fn png(label: impl Into<String>, bytes: Vec<u8>) -> Self {
        Self { label: label.into(), media_type: "image/png".into(), bytes }
    }

    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(&self.bytes))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub model_id: String,
    pub system_text: String,
    pub user_text: String,
    pub attachments: Vec<ImagePayload>,
    pub temperature: f64,
    pub max_output_tokens: u32,
}

impl ChatRequest {
    pub fn from_bundle(bundle: &PromptBundle, model_id: &str, temperature: f64, max_output_tokens: u32) -> Self {
        Self {
            model_id: model_id.to_string(),
            system_text: bundle.system_text.clone(),
            user_text: bundle.user_text.clone(),
            attachments: bundle.attachments.clone(),
            temperature,
            max_output_tokens,
        }
    }

    pub fn validate(&self, max_attachment_bytes: usize) -> Result<(), BackendError> {
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(BackendError::InvalidRequest(format!("temperature {} outside [0, 2]", self.temperature)));
        }
        if self.max_output_tokens == 0 {
            return Err(BackendError::InvalidRequest("max_output_tokens must be positive".into()));
        }
        if let Some(a) = self.attachments.iter().find(|a| a.bytes.len() > max_attachment_bytes) {
            return Err(BackendError::InvalidRequest(format!(
                "attachment {} is {} bytes, limit {max_attachment_bytes}",
                a.label,
                a.bytes.len()
            )));
        }
        Ok(())
    }

    /// Content digest of the prompt: system text, user text, and each
    /// attachment's media type and byte digest. Model parameters are excluded.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        let mut field = |bytes: &[u8]| {
            h.update((bytes.len() as u64).to_le_bytes());
            h.update(bytes);
        };
        field(self.system_text.as_bytes());
        field(self.user_text.as_bytes());
        for a in &self.attachments {
            field(a.media_type.as_bytes());
            field(a.digest().as_bytes());
        }
        format!("sha256:{}", hex::encode(h.finalize()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenUsage {
    pub input: u64,
    pub output: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    pub model_id: String,
    pub latency_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_usage: Option<TokenUsage>,
    #[serde(default)]
    pub retry_count: u32,
}

impl ChatResponse {
    pub fn text_only(model_id: impl Into<String>, text: impl Into<String>) -> Self {
        Self { text: text.into(), model_id: model_id.into(), latency_ms: 0, token_usage: None, retry_count: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendMode {
    Live,
    Replay,
}

impl fmt::Display for BackendMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackendMode::Live => "live",
            BackendMode::Replay => "replay",
        })
    }
}

pub trait ModelBackend: Send + Sync {
    fn send(&self, key: &str, request: &ChatRequest) -> Result<ChatResponse, BackendError>;

    fn mode(&self) -> BackendMode;

    /// Prompt-drift warnings collected since the last call.
    fn drain_warnings(&self) -> Vec<DriftWarning> {
        Vec::new()
    }
}

impl<B: ModelBackend + ?Sized> ModelBackend for &B {
    fn send(&self, key: &str, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        (**self).send(key, request)
    }
    fn mode(&self) -> BackendMode {
        (**self).mode()
    }
    fn drain_warnings(&self) -> Vec<DriftWarning> {
        (**self).drain_warnings()
    }
}

impl<B: ModelBackend + ?Sized> ModelBackend for Box<B> {
    fn send(&self, key: &str, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        (**self).send(key, request)
    }
    fn mode(&self) -> BackendMode {
        (**self).mode()
    }
    fn drain_warnings(&self) -> Vec<DriftWarning> {
        (**self).drain_warnings()
    }
}

/// `"{sample_id}/{strategy}/{task}/{step_index}"`.
pub fn derive_key(
    sample_id: &str,
    strategy: PromptStrategy,
    task: TaskKind,
    step_index: u64,
) -> Result<String, BackendError> {
    if sample_id.contains('/') {
        return Err(BackendError::InvalidKey(sample_id.to_string()));
    }
    Ok(format!("{sample_id}/{}/{}/{step_index}", strategy.slug(), task.slug()))
}
