use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use base64::Engine as _;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{BackendError, BackendMode, ChatRequest, ChatResponse, ModelBackend, TokenUsage};

const MAX_BACKOFF: Duration = Duration::from_secs(30);
const BODY_EXCERPT_CHARS: usize = 300;

/// Request/response mapping for a provider.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WireDialect {
    /// `messages` with text and `image_url` data-URL parts; reply in
    /// `choices[0].message.content`.
    #[default]
    ChatCompletions,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LiveSettings {
    pub endpoint: String,
    pub api_key: String,
    pub timeout: Duration,
    pub max_retries: u32,
    pub backoff_base: Duration,
    pub max_concurrent: usize,
    pub max_attachment_bytes: usize,
    pub dialect: WireDialect,
}

impl LiveSettings {
    /// Reads the credential from `api_key_env`; a missing or empty variable is
    /// a configuration error.
    pub fn api_key_from_env(api_key_env: &str) -> Result<String, BackendError> {
        match std::env::var(api_key_env) {
            Ok(v) if !v.trim().is_empty() => Ok(v),
            _ => Err(BackendError::Config(format!("credential environment variable {api_key_env} is not set"))),
        }
    }
}

struct Semaphore {
    in_flight: Mutex<usize>,
    freed: Condvar,
    limit: usize,
}

struct Permit<'a>(&'a Semaphore);

impl Semaphore {
    fn new(limit: usize) -> Self {
        Self { in_flight: Mutex::new(0), freed: Condvar::new(), limit: limit.max(1) }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut n = self.in_flight.lock().unwrap_or_else(|e| e.into_inner());
        while *n >= self.limit {
            n = self.freed.wait(n).unwrap_or_else(|e| e.into_inner());
        }
        *n += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut n = self.0.in_flight.lock().unwrap_or_else(|e| e.into_inner());
        *n -= 1;
        self.0.freed.notify_one();
    }
}

/// HTTP chat backend with bounded retries and a cap on in-flight requests.
pub struct LiveBackend {
    settings: LiveSettings,
    client: reqwest::blocking::Client,
    permits: Semaphore,
}

enum Attempt {
    Done(ChatResponse),
    Retry(String),
    Fail(BackendError),
}

impl LiveBackend {
    pub fn new(settings: LiveSettings) -> Result<Self, BackendError> {
        if settings.endpoint.trim().is_empty() {
            return Err(BackendError::Config("live backend needs an endpoint".into()));
        }
        if settings.api_key.trim().is_empty() {
            return Err(BackendError::Config("live backend needs a credential".into()));
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(settings.timeout)
            .build()
            .map_err(|e| BackendError::Config(format!("http client: {e}")))?;
        let permits = Semaphore::new(settings.max_concurrent);
        Ok(Self { settings, client, permits })
    }

    pub fn settings(&self) -> &LiveSettings {
        &self.settings
    }

    fn body(&self, request: &ChatRequest) -> Value {
        match self.settings.dialect {
            WireDialect::ChatCompletions => {
                let mut parts = vec![json!({"type": "text", "text": request.user_text})];
                for a in &request.attachments {
                    let data = base64::engine::general_purpose::STANDARD.encode(&a.bytes);
                    parts.push(json!({
                        "type": "image_url",
                        "image_url": {"url": format!("data:{};base64,{data}", a.media_type)}
                    }));
                }
                let mut messages = Vec::new();
                if !request.system_text.is_empty() {
                    messages.push(json!({"role": "system", "content": request.system_text}));
                }
                messages.push(json!({"role": "user", "content": parts}));
                json!({
                    "model": request.model_id,
                    "messages": messages,
                    "temperature": request.temperature,
                    "max_tokens": request.max_output_tokens,
                })
            }
        }
    }

    fn decode(&self, body: &str, request: &ChatRequest) -> Result<(String, String, Option<TokenUsage>), BackendError> {
        let v: Value = serde_json::from_str(body).map_err(|e| BackendError::Malformed(e.to_string()))?;
        let content = &v["choices"][0]["message"]["content"];
        let text = match content {
            Value::String(s) => s.clone(),
            Value::Array(parts) => parts.iter().filter_map(|p| p["text"].as_str()).collect::<Vec<_>>().join(""),
            _ => return Err(BackendError::Malformed("missing choices[0].message.content".into())),
        };
        let model = v["model"].as_str().unwrap_or(&request.model_id).to_string();
        let usage = match (v["usage"]["prompt_tokens"].as_u64(), v["usage"]["completion_tokens"].as_u64()) {
            (Some(input), Some(output)) => Some(TokenUsage { input, output }),
            _ => None,
        };
        Ok((text, model, usage))
    }

    fn attempt(&self, payload: &str, request: &ChatRequest, started: Instant, retries: u32) -> Attempt {
        let result = self
            .client
            .post(&self.settings.endpoint)
            .bearer_auth(&self.settings.api_key)
            .header("content-type", "application/json")
            .body(payload.to_string())
            .send();
        let resp = match result {
            Ok(r) => r,
            Err(e) => return Attempt::Retry(e.to_string()),
        };
        let status = resp.status().as_u16();
        let body = match resp.text() {
            Ok(b) => b,
            Err(e) => return Attempt::Retry(e.to_string()),
        };
        match status {
            200..=299 => match self.decode(&body, request) {
                Ok((text, model_id, token_usage)) => Attempt::Done(ChatResponse {
                    text,
                    model_id,
                    latency_ms: started.elapsed().as_millis() as u64,
                    token_usage,
                    retry_count: retries,
                }),
                Err(e) => Attempt::Fail(e),
            },
            429 | 500..=599 => Attempt::Retry(format!("HTTP {status}: {}", excerpt(&body))),
            _ => Attempt::Fail(BackendError::Provider { status, body_excerpt: excerpt(&body) }),
        }
    }

    fn backoff(&self, retry: u32) -> Duration {
        let factor = 1u32.checked_shl(retry.min(16)).unwrap_or(u32::MAX);
        self.settings.backoff_base.saturating_mul(factor).min(MAX_BACKOFF)
    }
}

fn excerpt(body: &str) -> String {
    let mut s: String = body.chars().take(BODY_EXCERPT_CHARS).collect();
    if body.chars().count() > BODY_EXCERPT_CHARS {
        s.push('…');
    }
    s
}

impl ModelBackend for LiveBackend {
    fn send(&self, _key: &str, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        request.validate(self.settings.max_attachment_bytes)?;
        let payload = self.body(request).to_string();
        let _permit = self.permits.acquire();
        let started = Instant::now();
        let mut retries = 0;
        loop {
            match self.attempt(&payload, request, started, retries) {
                Attempt::Done(resp) => return Ok(resp),
                Attempt::Fail(e) => return Err(e),
                Attempt::Retry(message) => {
                    if retries >= self.settings.max_retries {
                        return Err(BackendError::Transport { attempts: retries + 1, message });
                    }
                    log::warn!("transient failure ({message}); retry {} of {}", retries + 1, self.settings.max_retries);
                    std::thread::sleep(self.backoff(retries));
                    retries += 1;
                }
            }
        }
    }

    fn mode(&self) -> BackendMode {
        BackendMode::Live
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn settings() -> LiveSettings {
        LiveSettings {
            endpoint: "http://127.0.0.1:9/v1/chat/completions".into(),
            api_key: "k".into(),
            timeout: Duration::from_secs(1),
            max_retries: 3,
            backoff_base: Duration::from_millis(100),
            max_concurrent: 2,
            max_attachment_bytes: 1 << 20,
            dialect: WireDialect::ChatCompletions,
        }
    }

    #[test]
    fn backoff_doubles_and_caps() {
        let b = LiveBackend::new(settings()).unwrap();
        assert_eq!(b.backoff(0), Duration::from_millis(100));
        assert_eq!(b.backoff(1), Duration::from_millis(200));
        assert_eq!(b.backoff(3), Duration::from_millis(800));
        assert_eq!(b.backoff(40), MAX_BACKOFF);
    }

    #[test]
    fn missing_credential_is_config_error() {
        let mut s = settings();
        s.api_key = String::new();
        assert!(matches!(LiveBackend::new(s), Err(BackendError::Config(_))));
        let err = LiveSettings::api_key_from_env("DRIVECOT_TEST_SURELY_UNSET_VAR").unwrap_err();
        assert!(err.is_fatal());
        assert!(err.to_string().contains("DRIVECOT_TEST_SURELY_UNSET_VAR"));
    }

    #[test]
    fn wire_body_has_text_and_image_parts() {
        let b = LiveBackend::new(settings()).unwrap();
        let req = ChatRequest {
            model_id: "vlm-test".into(),
            system_text: String::new(),
            user_text: "hi".into(),
            attachments: vec![super::super::ImagePayload::png("front", vec![0xff])],
            temperature: 0.0,
            max_output_tokens: 8,
        };
        let body = b.body(&req);
        assert_eq!(body["messages"].as_array().unwrap().len(), 1);
        assert_eq!(body["messages"][0]["content"][0]["text"], "hi");
        assert_eq!(body["messages"][0]["content"][1]["image_url"]["url"], "data:image/png;base64,/w==");
        assert_eq!(body["max_tokens"], 8);
    }

    #[test]
    fn decodes_string_and_part_content() {
        let b = LiveBackend::new(settings()).unwrap();
        let req = ChatRequest {
            model_id: "vlm-test".into(),
            system_text: String::new(),
            user_text: String::new(),
            attachments: vec![],
            temperature: 0.0,
            max_output_tokens: 8,
        };
        let (t, m, u) = b
            .decode(r#"{"model":"x","choices":[{"message":{"content":"Stop"}}],"usage":{"prompt_tokens":3,"completion_tokens":1}}"#, &req)
            .unwrap();
        assert_eq!((t.as_str(), m.as_str()), ("Stop", "x"));
        assert_eq!(u, Some(TokenUsage { input: 3, output: 1 }));
        let (t, m, u) = b
            .decode(r#"{"choices":[{"message":{"content":[{"type":"text","text":"a"},{"text":"b"}]}}]}"#, &req)
            .unwrap();
        assert_eq!((t.as_str(), m.as_str(), u), ("ab", "vlm-test", None));
        assert!(matches!(b.decode("{}", &req), Err(BackendError::Malformed(_))));
    }
}
