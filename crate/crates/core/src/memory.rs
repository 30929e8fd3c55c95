//! Per-episode memory of structured scene snapshots.
//!
//! A snapshot is one frame's understanding of the scene in the canonical JSON
//! template. Key order on output is fixed:
//!
//! ```text
//! {"frame_id": .., "step_index": .., "scene": {"description": .., "time_of_day": .., "weather": ..},
//!  "objects": [..], "decision": .., "rationale": ..}
//! ```
//!
//! Logs are append-only and persisted as `<episode_id>.memory.jsonl`.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::action::DrivingAction;
use crate::object::{ObjectCategory, ObjectRecord};

/// Snapshots injected into the next prompt unless configured otherwise.
pub const DEFAULT_CONTEXT_K: usize = 3;

#[derive(Debug, Error)]
pub enum MemoryError {
    #[error("memory snapshot is not valid JSON: {0}")]
    NotJson(String),
    #[error("memory snapshot is missing required key `{0}`")]
    MissingKey(String),
    #[error("memory snapshot key `{key}` must be {expected}")]
    WrongType { key: String, expected: &'static str },
    #[error("memory snapshot key `{key}` is invalid: {reason}")]
    Invalid { key: String, reason: String },
    #[error("duplicate object id {0} in snapshot")]
    DuplicateObjectId(u32),
    #[error("step_index {got} does not follow last stored step {last}")]
    NonIncreasingStep { last: u64, got: u64 },
    #[error("{path}:{line}: {source}")]
    File {
        path: PathBuf,
        line: usize,
        #[source]
        source: Box<MemoryError>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeOfDay {
    Day,
    Night,
    Unknown,
}

impl TimeOfDay {
    fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "day" => Some(TimeOfDay::Day),
            "night" => Some(TimeOfDay::Night),
            "unknown" => Some(TimeOfDay::Unknown),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSummary {
    pub description: String,
    pub time_of_day: TimeOfDay,
    pub weather: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemorySnapshot {
    pub frame_id: String,
    pub step_index: u64,
    pub scene: SceneSummary,
    pub objects: Vec<ObjectRecord>,
    pub decision: Option<DrivingAction>,
    pub rationale: Option<String>,
}

impl MemorySnapshot {
    pub fn validate(&self) -> Result<(), MemoryError> {
        let mut seen = HashSet::new();
        for obj in &self.objects {
            if obj.id == 0 {
                return Err(MemoryError::Invalid { key: "objects.id".into(), reason: "ids must be positive".into() });
            }
            if !seen.insert(obj.id) {
                return Err(MemoryError::DuplicateObjectId(obj.id));
            }
        }
        Ok(())
    }

    /// Canonical single-line JSON.
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("snapshot serialization is infallible")
    }

    /// Parses and validates one snapshot, naming the offending key on failure.
    pub fn from_json(text: &str) -> Result<Self, MemoryError> {
        let value: Value = serde_json::from_str(text.trim()).map_err(|e| MemoryError::NotJson(e.to_string()))?;
        let root = value.as_object().ok_or(MemoryError::WrongType { key: "<root>".into(), expected: "an object" })?;

        let frame_id = req_str(root, "frame_id", "frame_id")?;
        let step_index = req(root, "step_index", "step_index")?
            .as_u64()
            .ok_or(MemoryError::WrongType { key: "step_index".into(), expected: "a nonnegative integer" })?;

        let scene_v = req(root, "scene", "scene")?
            .as_object()
            .ok_or(MemoryError::WrongType { key: "scene".into(), expected: "an object" })?;
        let description = req_str(scene_v, "description", "scene.description")?;
        let tod_raw = req_str(scene_v, "time_of_day", "scene.time_of_day")?;
        let time_of_day = TimeOfDay::parse(&tod_raw).ok_or_else(|| MemoryError::Invalid {
            key: "scene.time_of_day".into(),
            reason: format!("expected day, night or unknown, got {tod_raw:?}"),
        })?;
        let weather = req_str(scene_v, "weather", "scene.weather")?;

        let objects_v = req(root, "objects", "objects")?
            .as_array()
            .ok_or(MemoryError::WrongType { key: "objects".into(), expected: "an array" })?;
        let objects =
            objects_v.iter().enumerate().map(|(i, v)| object_from_value(v, i)).collect::<Result<Vec<_>, _>>()?;

        let decision = match root.get("decision") {
            None | Some(Value::Null) => None,
            Some(Value::String(s)) => Some(
                DrivingAction::from_label(s)
                    .map_err(|e| MemoryError::Invalid { key: "decision".into(), reason: e.to_string() })?,
            ),
            Some(_) => return Err(MemoryError::WrongType { key: "decision".into(), expected: "a string or null" }),
        };
        let rationale = opt_str(root, "rationale", "rationale")?;

        let snap = MemorySnapshot {
            frame_id,
            step_index,
            scene: SceneSummary { description, time_of_day, weather },
            objects,
            decision,
            rationale,
        };
        snap.validate()?;
        Ok(snap)
    }
}

fn req<'a>(map: &'a Map<String, Value>, key: &str, path: &str) -> Result<&'a Value, MemoryError> {
    match map.get(key) {
        None | Some(Value::Null) => Err(MemoryError::MissingKey(path.to_string())),
        Some(v) => Ok(v),
    }
}

fn req_str(map: &Map<String, Value>, key: &str, path: &str) -> Result<String, MemoryError> {
    req(map, key, path)?
        .as_str()
        .map(str::to_string)
        .ok_or(MemoryError::WrongType { key: path.to_string(), expected: "a string" })
}

fn opt_str(map: &Map<String, Value>, key: &str, path: &str) -> Result<Option<String>, MemoryError> {
    match map.get(key) {
        None | Some(Value::Null) => Ok(None),
        Some(Value::String(s)) => Ok(Some(s.clone())),
        Some(_) => Err(MemoryError::WrongType { key: path.to_string(), expected: "a string or null" }),
    }
}

fn object_from_value(v: &Value, index: usize) -> Result<ObjectRecord, MemoryError> {
    let prefix = format!("objects[{index}]");
    let map = v.as_object().ok_or(MemoryError::WrongType { key: prefix.clone(), expected: "an object" })?;
    let id_path = format!("{prefix}.id");
    let id = req(map, "id", &id_path)?
        .as_u64()
        .filter(|&id| id > 0 && id <= u32::MAX as u64)
        .ok_or(MemoryError::WrongType { key: id_path, expected: "a positive integer" })? as u32;
    let cat_path = format!("{prefix}.category");
    let cat_raw = req_str(map, "category", &cat_path)?;
    let category = ObjectCategory::parse_loose(&cat_raw)
        .ok_or_else(|| MemoryError::Invalid { key: cat_path, reason: format!("unknown category {cat_raw:?}") })?;
    let position = req_str(map, "position", &format!("{prefix}.position"))?;
    let px_path = format!("{prefix}.pixel_coordinates");
    let pixel_coordinates = match map.get("pixel_coordinates") {
        None | Some(Value::Null) => None,
        Some(Value::Array(xs)) if xs.len() == 2 => {
            let coord = |v: &Value| v.as_u64().filter(|&c| c <= u32::MAX as u64).map(|c| c as u32);
            match (coord(&xs[0]), coord(&xs[1])) {
                (Some(x), Some(y)) => Some((x, y)),
                _ => return Err(MemoryError::WrongType { key: px_path, expected: "a pair of nonnegative integers" }),
            }
        }
        Some(_) => {
            return Err(MemoryError::WrongType { key: px_path, expected: "a pair of nonnegative integers or null" })
        }
    };
    let state = req_str(map, "state", &format!("{prefix}.state"))?;
    Ok(ObjectRecord { id, category, position, pixel_coordinates, state })
}

/// Append-only, step-ordered list of snapshots for one episode.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MemoryLog {
    pub episode_id: String,
    snapshots: Vec<MemorySnapshot>,
}

impl MemoryLog {
    pub fn new(episode_id: impl Into<String>) -> Self {
        Self { episode_id: episode_id.into(), snapshots: Vec::new() }
    }

    pub fn snapshots(&self) -> &[MemorySnapshot] {
        &self.snapshots
    }

    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    pub fn last_step_index(&self) -> Option<u64> {
        self.snapshots.last().map(|s| s.step_index)
    }

    pub fn store(&mut self, snapshot: MemorySnapshot) -> Result<(), MemoryError> {
        if let Some(last) = self.last_step_index() {
            if snapshot.step_index <= last {
                return Err(MemoryError::NonIncreasingStep { last, got: snapshot.step_index });
            }
        }
        snapshot.validate()?;
        self.snapshots.push(snapshot);
        Ok(())
    }

    /// The last `min(k, len)` snapshots, oldest first.
    pub fn recent(&self, k: usize) -> &[MemorySnapshot] {
        let start = self.snapshots.len().saturating_sub(k);
        &self.snapshots[start..]
    }

    pub fn file_name(&self) -> String {
        format!("{}.memory.jsonl", self.episode_id)
    }

    /// Writes the log to `dir/<episode_id>.memory.jsonl`, one snapshot per line.
    pub fn save(&self, dir: &Path) -> Result<PathBuf, MemoryError> {
        fs::create_dir_all(dir)?;
        let path = dir.join(self.file_name());
        let mut file = fs::File::create(&path)?;
        for snap in &self.snapshots {
            writeln!(file, "{}", snap.to_json())?;
        }
        Ok(path)
    }

    pub fn load(path: &Path) -> Result<Self, MemoryError> {
        let episode_id = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_suffix(".memory.jsonl"))
            .unwrap_or_default()
            .to_string();
        let text = fs::read_to_string(path)?;
        let mut log = MemoryLog::new(episode_id);
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let wrap = |e| MemoryError::File { path: path.to_path_buf(), line: i + 1, source: Box::new(e) };
            let snap = MemorySnapshot::from_json(line).map_err(wrap)?;
            log.store(snap).map_err(wrap)?;
        }
        Ok(log)
    }
}
