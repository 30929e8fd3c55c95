//! Prompt construction for the three strategies.
//!
//! Wording lives in `templates/*.txt`, compiled into the crate. The staged
//! strategy asks for all four stages in a single response; stage three asks
//! for the memory snapshot inside a fenced ```json block.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::action::action_menu;
use crate::backend::ImagePayload;
use crate::memory::MemorySnapshot;
use crate::scene::{scenario_to_text, SceneError, SceneSample};
use crate::template::{self, TemplateError};

pub const PERSONA: &str = "You are an intelligent driver of a self-driving car.";
pub const COT_TRIGGER: &str = "Let's think step by step";
pub const STAGE_HEADERS: [&str; 4] = ["Step 1 - Observe", "Step 2 - Identify", "Step 3 - Memory", "Step 4 - Decide"];

const ZERO_SHOT: &str = include_str!("../templates/zero_shot.txt");
const ROLE_PLAYING: &str = include_str!("../templates/role_playing.txt");
const PKRD_COT: &str = include_str!("../templates/pkrd_cot.txt");
const PKRD_STAGES: &str = include_str!("../templates/pkrd_stages.txt");
const TASK_PERCEPTION: &str = include_str!("../templates/task_perception.txt");
const TASK_KNOWLEDGE: &str = include_str!("../templates/task_knowledge.txt");
const TASK_MATH: &str = include_str!("../templates/task_math.txt");
const TASK_DECISION: &str = include_str!("../templates/task_decision.txt");

const PANORAMA_INPUT: &str = "The two attached images are the front and back panoramic views around the ego vehicle.";

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("memory context can only be injected with the pkrd-cot strategy, not {0}")]
    MemoryWithoutCot(PromptStrategy),
    #[error("sample {sample_id} cannot be used for the {task} task: {reason}")]
    MissingInput { sample_id: String, task: TaskKind, reason: String },
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Scene(#[from] SceneError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PromptStrategy {
    ZeroShot,
    RolePlaying,
    PkrdCot,
}

impl PromptStrategy {
    pub const ALL: [PromptStrategy; 3] =
        [PromptStrategy::ZeroShot, PromptStrategy::RolePlaying, PromptStrategy::PkrdCot];

    pub fn slug(self) -> &'static str {
        match self {
            PromptStrategy::ZeroShot => "zero-shot",
            PromptStrategy::RolePlaying => "role-playing",
            PromptStrategy::PkrdCot => "pkrd-cot",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TaskKind {
    Perception,
    Knowledge,
    MathDistance,
    Decision,
}

impl TaskKind {
    pub const ALL: [TaskKind; 4] =
        [TaskKind::Perception, TaskKind::Knowledge, TaskKind::MathDistance, TaskKind::Decision];

    pub fn slug(self) -> &'static str {
        match self {
            TaskKind::Perception => "perception",
            TaskKind::Knowledge => "knowledge",
            TaskKind::MathDistance => "math",
            TaskKind::Decision => "decision",
        }
    }
}

macro_rules! slug_enum_impls {
    ($ty:ident, $what:literal) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.slug())
            }
        }

        impl FromStr for $ty {
            type Err = String;
            fn from_str(s: &str) -> Result<Self, Self::Err> {
                let norm = s.trim().to_ascii_lowercase().replace('_', "-");
                Self::ALL
                    .into_iter()
                    .find(|v| v.slug() == norm)
                    .ok_or_else(|| format!(concat!("unknown ", $what, " {:?}"), s))
            }
        }

        impl Serialize for $ty {
            fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
                serializer.serialize_str(self.slug())
            }
        }

        impl<'de> Deserialize<'de> for $ty {
            fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
                let s = String::deserialize(deserializer)?;
                s.parse().map_err(serde::de::Error::custom)
            }
        }
    };
}

slug_enum_impls!(PromptStrategy, "prompt strategy");
slug_enum_impls!(TaskKind, "task kind");

#[derive(Debug, Clone, PartialEq)]
pub struct PromptBundle {
    pub system_text: String,
    pub user_text: String,
    pub attachments: Vec<ImagePayload>,
    pub strategy: PromptStrategy,
}

pub fn action_menu_text() -> String {
    format!("Available driving actions: {}. Choose exactly one of them.", action_menu().join(", "))
}

fn memory_context_text(memory: &[MemorySnapshot]) -> String {
    if memory.is_empty() {
        return "Stored memory: none yet, this is the first frame.".to_string();
    }
    let mut out = String::from("Stored memory from previous frames, oldest first, one JSON object per line:");
    for snap in memory {
        out.push('\n');
        out.push_str(&snap.to_json());
    }
    out
}

fn task_text(sample: &SceneSample, task: TaskKind) -> Result<String, PromptError> {
    let missing = |reason: &str| PromptError::MissingInput {
        sample_id: sample.sample_id.clone(),
        task,
        reason: reason.to_string(),
    };
    let text = match task {
        TaskKind::Perception => TASK_PERCEPTION.trim_end().to_string(),
        TaskKind::Knowledge => TASK_KNOWLEDGE.trim_end().to_string(),
        TaskKind::MathDistance => {
            let (ego, target) = distance_pair(sample).ok_or_else(|| missing("needs ego and neighbor coordinates"))?;
            let (ex, ey) = (ego.x.to_string(), ego.y.to_string());
            let (tx, ty) = (target.1.x.to_string(), target.1.y.to_string());
            template::render(
                TASK_MATH.trim_end(),
                &[("ego_x", &ex), ("ego_y", &ey), ("target_id", &target.0), ("target_x", &tx), ("target_y", &ty)],
            )?
        }
        TaskKind::Decision => {
            let mut inputs = Vec::new();
            if sample.images.is_some() {
                inputs.push(PANORAMA_INPUT.to_string());
            }
            if let Some(scenario) = &sample.scenario {
                inputs.push(scenario_to_text(scenario).trim_end().to_string());
            }
            if inputs.is_empty() {
                return Err(missing("needs images or a highway scenario"));
            }
            let scene_input = inputs.join("\n");
            template::render(TASK_DECISION.trim_end(), &[("scene_input", &scene_input)])?
        }
    };
    Ok(text)
}

/// The ego position and the first neighbor with coordinates, for the distance task.
pub fn distance_pair(sample: &SceneSample) -> Option<(crate::geometry::Point2D, (String, crate::geometry::Point2D))> {
    let scenario = sample.scenario.as_ref()?;
    let ego = scenario.ego.coords?;
    let target = scenario.neighbors.iter().find_map(|v| v.coords.map(|c| (v.vehicle_id.clone(), c)))?;
    Some((ego, target))
}

/// Collapses runs of blank lines left by empty placeholders and trims the end.
fn tidy(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut blank_run = 0;
    for line in text.trim().lines() {
        let line = line.trim_end();
        if line.is_empty() {
            blank_run += 1;
            if blank_run > 1 {
                continue;
            }
        } else {
            blank_run = 0;
        }
        out.push_str(line);
        out.push('\n');
    }
    out.truncate(out.trim_end().len());
    out
}

/// Builds the prompt for one sample. `memory_context` must be empty unless the
/// strategy is `PkrdCot`; snapshots are injected verbatim, most recent last.
pub fn build_prompt(
    strategy: PromptStrategy,
    sample: &SceneSample,
    memory_context: &[MemorySnapshot],
    task: TaskKind,
) -> Result<PromptBundle, PromptError> {
    if strategy != PromptStrategy::PkrdCot && !memory_context.is_empty() {
        return Err(PromptError::MemoryWithoutCot(strategy));
    }
    let task_body = task_text(sample, task)?;
    let menu = if task == TaskKind::Decision || strategy == PromptStrategy::PkrdCot {
        action_menu_text()
    } else {
        String::new()
    };
    let user_text = match strategy {
        PromptStrategy::ZeroShot => template::render(ZERO_SHOT, &[("task", &task_body), ("action_menu", &menu)])?,
        PromptStrategy::RolePlaying => {
            template::render(ROLE_PLAYING, &[("persona", PERSONA), ("task", &task_body), ("action_menu", &menu)])?
        }
        PromptStrategy::PkrdCot => {
            let next_step = memory_context.last().map_or(0, |s| s.step_index + 1).to_string();
            let stages = template::render(
                PKRD_STAGES.trim_end(),
                &[("frame_id", &sample.sample_id), ("step_index", &next_step)],
            )?;
            let memory = memory_context_text(memory_context);
            template::render(
                PKRD_COT,
                &[
                    ("persona", PERSONA),
                    ("task", &task_body),
                    ("stages", &stages),
                    ("memory_context", &memory),
                    ("action_menu", &menu),
                ],
            )?
        }
    };
    let attachments = match &sample.images {
        Some(images) => images.panoramas()?.to_attachments(),
        None => Vec::new(),
    };
    Ok(PromptBundle { system_text: String::new(), user_text: tidy(&user_text), attachments, strategy })
}
