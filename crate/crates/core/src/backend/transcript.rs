use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{BackendError, BackendMode, ChatRequest, ChatResponse, ModelBackend};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub key: String,
    /// Empty for hand-scripted entries, which skip drift detection.
    pub request_digest: String,
    pub response: ChatResponse,
}

/// The prompt sent during replay differs from the one that was recorded.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DriftWarning {
    pub key: String,
    pub recorded_digest: String,
    pub current_digest: String,
}

impl std::fmt::Display for DriftWarning {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "prompt drift for {}: recorded {} but sent {}", self.key, self.recorded_digest, self.current_digest)
    }
}

/// Keyed transcripts in insertion order, persisted as JSON lines.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TranscriptStore {
    entries: Vec<Transcript>,
    index: HashMap<String, usize>,
}

impl TranscriptStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, key: &str) -> Option<&Transcript> {
        self.index.get(key).map(|&i| &self.entries[i])
    }

    pub fn contains(&self, key: &str) -> bool {
        self.index.contains_key(key)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transcript> {
        self.entries.iter()
    }

    pub fn insert(&mut self, transcript: Transcript, overwrite: bool) -> Result<(), BackendError> {
        match self.index.get(&transcript.key) {
            Some(_) if !overwrite => Err(BackendError::DuplicateTranscript(transcript.key)),
            Some(&i) => {
                self.entries[i] = transcript;
                Ok(())
            }
            None => {
                self.index.insert(transcript.key.clone(), self.entries.len());
                self.entries.push(transcript);
                Ok(())
            }
        }
    }

    /// Stores `response` under `key` with the digest of `request`.
    pub fn record(
        &mut self,
        key: &str,
        request: &ChatRequest,
        response: ChatResponse,
        overwrite: bool,
    ) -> Result<(), BackendError> {
        self.insert(Transcript { key: key.to_string(), request_digest: request.digest(), response }, overwrite)
    }

    pub fn load(path: &Path) -> Result<Self, BackendError> {
        let err = |message: String| BackendError::Store { path: path.display().to_string(), message };
        let text = fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let mut store = Self::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let t: Transcript = serde_json::from_str(line).map_err(|e| err(format!("line {}: {e}", i + 1)))?;
            store.insert(t, false).map_err(|e| err(format!("line {}: {e}", i + 1)))?;
        }
        Ok(store)
    }

    /// Loads `path` if it exists, otherwise starts empty.
    pub fn load_or_default(path: &Path) -> Result<Self, BackendError> {
        if path.exists() {
            Self::load(path)
        } else {
            Ok(Self::new())
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), BackendError> {
        let err = |e: std::io::Error| BackendError::Store { path: path.display().to_string(), message: e.to_string() };
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(err)?;
        }
        let tmp = path.with_extension("jsonl.tmp");
        let mut file = fs::File::create(&tmp).map_err(err)?;
        for t in &self.entries {
            let line = serde_json::to_string(t).expect("transcript serialization is infallible");
            writeln!(file, "{line}").map_err(err)?;
        }
        file.sync_all().map_err(err)?;
        fs::rename(&tmp, path).map_err(err)
    }
}

/// Serves recorded responses; never touches the network.
pub struct ReplayBackend {
    store: TranscriptStore,
    warnings: Mutex<Vec<DriftWarning>>,
}

impl ReplayBackend {
    pub fn new(store: TranscriptStore) -> Self {
        Self { store, warnings: Mutex::new(Vec::new()) }
    }

    pub fn from_file(path: &Path) -> Result<Self, BackendError> {
        Ok(Self::new(TranscriptStore::load(path)?))
    }

    pub fn store(&self) -> &TranscriptStore {
        &self.store
    }
}

impl ModelBackend for ReplayBackend {
    fn send(&self, key: &str, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let t = self.store.get(key).ok_or_else(|| BackendError::MissingTranscript(key.to_string()))?;
        if !t.request_digest.is_empty() {
            let current = request.digest();
            if current != t.request_digest {
                log::warn!("prompt drift for {key}");
                self.warnings.lock().unwrap_or_else(|e| e.into_inner()).push(DriftWarning {
                    key: key.to_string(),
                    recorded_digest: t.request_digest.clone(),
                    current_digest: current,
                });
            }
        }
        Ok(t.response.clone())
    }

    fn mode(&self) -> BackendMode {
        BackendMode::Replay
    }

    fn drain_warnings(&self) -> Vec<DriftWarning> {
        std::mem::take(&mut *self.warnings.lock().unwrap_or_else(|e| e.into_inner()))
    }
}

/// Wraps a backend and persists every exchange to a transcript file.
pub struct RecordingBackend<B> {
    inner: B,
    store: Mutex<TranscriptStore>,
    path: PathBuf,
    overwrite: bool,
}

impl<B: ModelBackend> RecordingBackend<B> {
    /// Appends to the transcript file at `path` if it already exists.
    pub fn new(inner: B, path: impl Into<PathBuf>, overwrite: bool) -> Result<Self, BackendError> {
        let path = path.into();
        let store = TranscriptStore::load_or_default(&path)?;
        Ok(Self { inner, store: Mutex::new(store), path, overwrite })
    }

    pub fn snapshot(&self) -> TranscriptStore {
        self.store.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }
}

impl<B: ModelBackend> ModelBackend for RecordingBackend<B> {
    fn send(&self, key: &str, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        if !self.overwrite && self.store.lock().unwrap_or_else(|e| e.into_inner()).contains(key) {
            return Err(BackendError::DuplicateTranscript(key.to_string()));
        }
        let response = self.inner.send(key, request)?;
        let mut store = self.store.lock().unwrap_or_else(|e| e.into_inner());
        store.record(key, request, response.clone(), self.overwrite)?;
        store.save(&self.path)?;
        Ok(response)
    }

    fn mode(&self) -> BackendMode {
        self.inner.mode()
    }

    fn drain_warnings(&self) -> Vec<DriftWarning> {
        self.inner.drain_warnings()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn req(text: &str) -> ChatRequest {
        ChatRequest {
            model_id: "m".into(),
            system_text: String::new(),
            user_text: text.into(),
            attachments: vec![],
            temperature: 0.0,
            max_output_tokens: 8,
        }
    }

    #[test]
    fn record_duplicate_and_overwrite() {
        let mut store = TranscriptStore::new();
        store.record("k", &req("a"), ChatResponse::text_only("m", "one"), false).unwrap();
        let err = store.record("k", &req("a"), ChatResponse::text_only("m", "two"), false).unwrap_err();
        assert!(matches!(err, BackendError::DuplicateTranscript(k) if k == "k"));
        assert_eq!(store.get("k").unwrap().response.text, "one");
        store.record("k", &req("b"), ChatResponse::text_only("m", "two"), true).unwrap();
        assert_eq!(store.len(), 1);
        assert_eq!(store.get("k").unwrap().response.text, "two");
        assert_eq!(store.get("k").unwrap().request_digest, req("b").digest());
    }

    #[test]
    fn replay_hit_miss_and_drift() {
        let mut store = TranscriptStore::new();
        store.record("k", &req("a"), ChatResponse::text_only("m", "Stop"), false).unwrap();
        let replay = ReplayBackend::new(store);
        assert_eq!(replay.send("k", &req("a")).unwrap().text, "Stop");
        assert!(replay.drain_warnings().is_empty());

        let err = replay.send("missing", &req("a")).unwrap_err();
        assert!(err.to_string().contains("missing"));
        assert!(err.is_fatal());

        assert_eq!(replay.send("k", &req("edited prompt")).unwrap().text, "Stop");
        let warnings = replay.drain_warnings();
        assert_eq!(warnings.len(), 1);
        assert_eq!(warnings[0].key, "k");
        assert!(replay.drain_warnings().is_empty());
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        let mut store = TranscriptStore::new();
        for i in 0..3 {
            store
                .record(&format!("s{i}/zero-shot/decision/0"), &req("x"), ChatResponse::text_only("m", "Stop"), false)
                .unwrap();
        }
        store.save(&path).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap().lines().count(), 3);
        assert_eq!(TranscriptStore::load(&path).unwrap(), store);
    }

    #[test]
    fn duplicate_lines_in_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        let line = serde_json::to_string(&Transcript {
            key: "k".into(),
            request_digest: String::new(),
            response: ChatResponse::text_only("m", "x"),
        })
        .unwrap();
        fs::write(&path, format!("{line}\n{line}\n")).unwrap();
        assert!(TranscriptStore::load(&path).unwrap_err().to_string().contains("line 2"));
    }
}
