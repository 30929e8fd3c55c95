//! Staged chain-of-thought prompting for multimodal driving agents, with a
//! record/replay model backend and the scoring protocols used to evaluate it.
//!
//! The pipeline for one step is: build a prompt for a [`scene::SceneSample`]
//! ([`prompt`]), send it through a [`backend::ModelBackend`], parse the reply
//! ([`parse`]), and store a [`memory::MemorySnapshot`]. [`agent`] runs steps
//! and episodes, [`eval`] scores them, and [`run`] wires a JSON run config to
//! report files.

pub mod action;
pub mod agent;
pub mod backend;
pub mod config;
pub mod eval;
pub mod geometry;
pub mod memory;
pub mod object;
pub mod parse;
pub mod prompt;
pub mod run;
pub mod scene;
pub mod template;

pub use action::{action_menu, DrivingAction};
pub use agent::{run_episode, run_step, AgentOptions, EpisodeRun, StepResult};
pub use backend::{derive_key, ChatRequest, ChatResponse, ModelBackend, ReplayBackend, TranscriptStore};
pub use config::RunConfig;
pub use eval::{EvalReport, Percent};
pub use geometry::{pythagorean_distance, within_tolerance, Point2D};
pub use memory::{MemoryLog, MemorySnapshot};
pub use object::{ObjectCategory, ObjectRecord};
pub use prompt::{build_prompt, PromptBundle, PromptStrategy, TaskKind};
pub use run::{execute, run_config, RunOutcome, RunStatus};
pub use scene::{load_manifest, merge_panorama, scenario_to_text, SceneSample};
