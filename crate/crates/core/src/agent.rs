//! One prompt → model → parse → memory cycle per step, and sequential episodes.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action::DrivingAction;
use crate::backend::{derive_key, BackendError, ChatRequest, ModelBackend};
use crate::memory::{MemoryError, MemoryLog, MemorySnapshot, SceneSummary, TimeOfDay, DEFAULT_CONTEXT_K};
use crate::object::ObjectRecord;
use crate::parse::{
    parse_decision, parse_distance, parse_objects, DecisionError, DistanceError, ObjectSource, ParseDiagnostics,
};
use crate::prompt::{build_prompt, PromptError, PromptStrategy, TaskKind};
use crate::scene::SceneSample;

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("step {step_index} of {sample_id}: {source}")]
    Prompt {
        sample_id: String,
        step_index: u64,
        #[source]
        source: PromptError,
    },
    #[error("step {step_index} of {sample_id}: {source}")]
    Backend {
        sample_id: String,
        step_index: u64,
        #[source]
        source: BackendError,
    },
    #[error("step {step_index} of {sample_id}: {source}")]
    Memory {
        sample_id: String,
        step_index: u64,
        #[source]
        source: MemoryError,
    },
    #[error("an episode needs at least one sample")]
    EmptyEpisode,
    #[error("writing episode artifacts: {0}")]
    Io(#[from] std::io::Error),
}

impl AgentError {
    pub fn backend_error(&self) -> Option<&BackendError> {
        match self {
            AgentError::Backend { source, .. } => Some(source),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentOptions {
    pub model_id: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
    /// Stored snapshots injected into each staged prompt.
    pub memory_k: usize,
}

impl Default for AgentOptions {
    fn default() -> Self {
        Self { model_id: "unspecified".into(), temperature: 0.0, max_output_tokens: 1024, memory_k: DEFAULT_CONTEXT_K }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    #[serde(flatten)]
    pub parse: ParseDiagnostics,
    /// The model gave no usable memory block; the stored snapshot was built
    /// from the parsed objects instead.
    pub memory_synthesized: bool,
    /// The model's memory block carried a different frame_id or step_index.
    pub memory_ids_normalized: bool,
    /// Pixel coordinates outside the panorama bounds, dropped.
    pub out_of_bounds_coordinates: usize,
    pub decision_error: Option<DecisionError>,
    pub distance_error: Option<DistanceError>,
}

impl StepDiagnostics {
    /// True when the response could not be scored for its task.
    pub fn is_parse_failure(&self, task: TaskKind, objects_found: bool) -> bool {
        match task {
            TaskKind::Decision => self.decision_error.is_some(),
            TaskKind::MathDistance => self.distance_error.is_some(),
            TaskKind::Perception => !objects_found || self.parse.malformed_records > 0,
            TaskKind::Knowledge => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepResult {
    pub sample_id: String,
    pub strategy: PromptStrategy,
    pub task: TaskKind,
    pub step_index: u64,
    pub transcript_key: String,
    pub prompt_digest: String,
    pub raw_text: String,
    pub objects: Vec<ObjectRecord>,
    pub snapshot: Option<MemorySnapshot>,
    pub decision: Option<DrivingAction>,
    pub claimed_distance_m: Option<f64>,
    pub diagnostics: StepDiagnostics,
}

impl StepResult {
    pub fn is_parse_failure(&self) -> bool {
        self.diagnostics.is_parse_failure(self.task, !self.objects.is_empty())
    }
}

/// Runs one step. On any error the log is left exactly as it was.
///
/// For the staged strategy the prompt carries `log.recent(k)`, and the parsed
/// (or synthesized) snapshot is appended to `log` as the final action.
pub fn run_step(
    sample: &SceneSample,
    strategy: PromptStrategy,
    task: TaskKind,
    step_index: u64,
    log: &mut MemoryLog,
    backend: &dyn ModelBackend,
    opts: &AgentOptions,
) -> Result<StepResult, AgentError> {
    let sample_id = sample.sample_id.clone();
    let context: &[MemorySnapshot] =
        if strategy == PromptStrategy::PkrdCot { log.recent(opts.memory_k.max(1)) } else { &[] };
    let bundle = build_prompt(strategy, sample, context, task).map_err(|source| AgentError::Prompt {
        sample_id: sample_id.clone(),
        step_index,
        source,
    })?;
    let request = ChatRequest::from_bundle(&bundle, &opts.model_id, opts.temperature, opts.max_output_tokens);
    let backend_err = |source| AgentError::Backend { sample_id: sample_id.clone(), step_index, source };
    let key = derive_key(&sample.sample_id, strategy, task, step_index).map_err(backend_err)?;
    let response = backend.send(&key, &request).map_err(backend_err)?;

    let parsed = parse_objects(&response.text);
    let mut diagnostics = StepDiagnostics { parse: parsed.diagnostics.clone(), ..Default::default() };
    let mut objects = parsed.records;
    if let Some(images) = &sample.images {
        let (w, h) = images
            .panoramas()
            .map_err(|e| AgentError::Prompt { sample_id: sample_id.clone(), step_index, source: e.into() })?
            .bounds();
        for obj in &mut objects {
            if !obj.within_bounds(w, h) {
                obj.pixel_coordinates = None;
                diagnostics.out_of_bounds_coordinates += 1;
            }
        }
    }

    let decision = if task == TaskKind::Decision {
        match parse_decision(&response.text) {
            Ok(a) => Some(a),
            Err(e) => {
                diagnostics.decision_error = Some(e);
                None
            }
        }
    } else {
        None
    };
    let claimed_distance_m = if task == TaskKind::MathDistance {
        match parse_distance(&response.text) {
            Ok(d) => Some(d),
            Err(e) => {
                diagnostics.distance_error = Some(e);
                None
            }
        }
    } else {
        None
    };

    let snapshot = if strategy == PromptStrategy::PkrdCot {
        let snap = match (parsed.source, parsed.snapshot) {
            (ObjectSource::MemoryBlock, Some(mut snap)) => {
                if snap.frame_id != sample.sample_id || snap.step_index != step_index {
                    diagnostics.memory_ids_normalized = true;
                    snap.frame_id = sample.sample_id.clone();
                    snap.step_index = step_index;
                }
                snap.objects = objects.clone();
                if snap.decision.is_none() {
                    snap.decision = decision;
                }
                snap
            }
            _ => {
                diagnostics.memory_synthesized = true;
                synthesize_snapshot(sample, step_index, &objects, decision)
            }
        };
        Some(snap)
    } else {
        None
    };

    if let Some(snap) = &snapshot {
        log.store(snap.clone()).map_err(|source| AgentError::Memory {
            sample_id: sample_id.clone(),
            step_index,
            source,
        })?;
    }

    Ok(StepResult {
        sample_id,
        strategy,
        task,
        step_index,
        transcript_key: key,
        prompt_digest: request.digest(),
        raw_text: response.text,
        objects,
        snapshot,
        decision,
        claimed_distance_m,
        diagnostics,
    })
}

fn synthesize_snapshot(
    sample: &SceneSample,
    step_index: u64,
    objects: &[ObjectRecord],
    decision: Option<DrivingAction>,
) -> MemorySnapshot {
    let time_of_day =
        if sample.scene_tags.iter().any(|t| t.eq_ignore_ascii_case("nighttime") || t.eq_ignore_ascii_case("night")) {
            TimeOfDay::Night
        } else if sample.scene_tags.iter().any(|t| t.eq_ignore_ascii_case("daytime") || t.eq_ignore_ascii_case("day")) {
            TimeOfDay::Day
        } else {
            TimeOfDay::Unknown
        };
    MemorySnapshot {
        frame_id: sample.sample_id.clone(),
        step_index,
        scene: SceneSummary {
            description: "synthesized from an unstructured response".into(),
            time_of_day,
            weather: "unknown".into(),
        },
        objects: objects.to_vec(),
        decision,
        rationale: None,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRun {
    pub episode_id: String,
    pub strategy: PromptStrategy,
    pub task: TaskKind,
    pub steps: Vec<StepResult>,
    pub memory: MemoryLog,
    pub memory_path: Option<PathBuf>,
    pub steps_path: Option<PathBuf>,
    pub complete: bool,
    /// The error that stopped an incomplete episode.
    pub error: Option<String>,
    /// Whether that error was fatal for the whole run (see `BackendError::is_fatal`).
    pub fatal: bool,
}

pub fn steps_file_name(episode_id: &str) -> String {
    format!("{episode_id}.steps.jsonl")
}

pub fn write_steps(path: &Path, steps: &[StepResult]) -> std::io::Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut file = fs::File::create(path)?;
    for step in steps {
        writeln!(file, "{}", serde_json::to_string(step).expect("step serialization is infallible"))?;
    }
    Ok(())
}

pub fn read_steps(path: &Path) -> std::io::Result<Vec<StepResult>> {
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(std::io::Error::other))
        .collect()
}

/// Runs `samples` in order as one episode sharing a memory log. The first
/// failing step stops the episode; whatever completed is still persisted when
/// `out_dir` is given.
pub fn run_episode(
    episode_id: &str,
    samples: &[SceneSample],
    strategy: PromptStrategy,
    task: TaskKind,
    backend: &dyn ModelBackend,
    opts: &AgentOptions,
    out_dir: Option<&Path>,
) -> Result<EpisodeRun, AgentError> {
    if samples.is_empty() {
        return Err(AgentError::EmptyEpisode);
    }
    let mut log = MemoryLog::new(episode_id);
    let mut steps = Vec::with_capacity(samples.len());
    let mut error = None;
    let mut fatal = false;
    for (i, sample) in samples.iter().enumerate() {
        match run_step(sample, strategy, task, i as u64, &mut log, backend, opts) {
            Ok(step) => steps.push(step),
            Err(e) => {
                log::warn!("episode {episode_id} stopped: {e}");
                fatal = e.backend_error().is_none_or(BackendError::is_fatal);
                error = Some(e.to_string());
                break;
            }
        }
    }
    let (mut memory_path, mut steps_path) = (None, None);
    if let Some(dir) = out_dir {
        if strategy == PromptStrategy::PkrdCot {
            memory_path = Some(log.save(dir).map_err(|e| match e {
                MemoryError::Io(io) => AgentError::Io(io),
                other => AgentError::Io(std::io::Error::other(other)),
            })?);
        }
        let path = dir.join(steps_file_name(episode_id));
        write_steps(&path, &steps)?;
        steps_path = Some(path);
    }
    Ok(EpisodeRun {
        episode_id: episode_id.to_string(),
        strategy,
        task,
        complete: error.is_none(),
        steps,
        memory: log,
        memory_path,
        steps_path,
        error,
        fatal,
    })
}
