//! Executes a [`RunConfig`]: loads the manifest, builds the backend, runs the
//! task and writes reports and step artifacts to the output directory.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::agent::{run_episode, write_steps, AgentError, StepResult};
use crate::backend::{BackendError, LiveBackend, LiveSettings, ModelBackend, RecordingBackend, ReplayBackend};
use crate::config::{BackendModeSetting, ConfigError, RunConfig, TaskSetting};
use crate::eval::{
    decision_pairs, load_verdicts, math_cases, perception_verdicts, run_ablation, run_samples, score_decisions,
    score_math, score_perception, EvalError, EvalReport, ReportTask, SampleOutcome, PARTIAL_FLAG,
};
use crate::prompt::PromptStrategy;
use crate::scene::{load_manifest, SceneError, SceneSample};

pub const RUN_LOG: &str = "run.log";

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error("episode stopped: {0}")]
    Episode(String),
    #[error("writing {path}: {source}")]
    Write {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunStatus {
    Complete,
    /// Some responses were unscored or some requests failed.
    Partial,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub status: RunStatus,
    pub report: EvalReport,
    pub files: Vec<PathBuf>,
}

/// How `run_config` treats the transcript file in live mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecordPolicy {
    /// Replace entries that already exist under the same key.
    Overwrite,
    /// Refuse to record a key that is already present.
    Refuse,
}

/// Appends one line to `<out_dir>/run.log`. Failures to log are ignored.
pub fn append_run_log(out_dir: &Path, line: &str) {
    let _ = fs::create_dir_all(out_dir);
    if let Ok(mut f) = OpenOptions::new().create(true).append(true).open(out_dir.join(RUN_LOG)) {
        let _ = writeln!(f, "{line}");
    }
}

pub fn build_backend(config: &RunConfig, policy: RecordPolicy) -> Result<Box<dyn ModelBackend>, RunError> {
    config.validate()?;
    let b = &config.backend;
    match b.mode {
        BackendModeSetting::Replay => {
            let path = config.paths.transcripts.as_deref().expect("validated");
            Ok(Box::new(ReplayBackend::from_file(path)?))
        }
        BackendModeSetting::Live => {
            let live = LiveBackend::new(LiveSettings {
                endpoint: b.endpoint.clone().unwrap_or_default(),
                api_key: LiveSettings::api_key_from_env(&b.api_key_env)?,
                timeout: b.timeout(),
                max_retries: b.max_retries,
                backoff_base: b.backoff_base(),
                max_concurrent: b.max_concurrent,
                max_attachment_bytes: b.max_attachment_bytes,
                dialect: b.dialect,
            })?;
            match &config.paths.transcripts {
                Some(path) => {
                    let overwrite = policy == RecordPolicy::Overwrite;
                    Ok(Box::new(RecordingBackend::new(live, path.clone(), overwrite)?))
                }
                None => Ok(Box::new(live)),
            }
        }
    }
}

/// Builds the backend from `config` and runs it, logging the result.
pub fn run_config(config: &RunConfig, policy: RecordPolicy) -> Result<RunOutcome, RunError> {
    let out_dir = &config.paths.out_dir;
    append_run_log(
        out_dir,
        &format!(
            "start task={} strategy={} mode={:?} manifest={}",
            config.task.kind.slug(),
            config.task.strategy.list().iter().map(|s| s.slug()).collect::<Vec<_>>().join(","),
            config.backend.mode,
            config.paths.manifest.display()
        ),
    );
    let result = build_backend(config, policy).and_then(|backend| execute(config, backend.as_ref()));
    match &result {
        Ok(outcome) => {
            for w in &outcome.report.warnings {
                append_run_log(out_dir, &format!("warning: {w}"));
            }
            append_run_log(
                out_dir,
                &format!("finished status={:?} overall={}", outcome.status, display_overall(&outcome.report)),
            );
        }
        Err(e) => append_run_log(out_dir, &format!("error: {e}")),
    }
    result
}

fn display_overall(report: &EvalReport) -> String {
    report.overall.map_or("-".into(), |p| p.to_string())
}

fn write_file(path: PathBuf, contents: &str, files: &mut Vec<PathBuf>) -> Result<(), RunError> {
    fs::write(&path, contents).map_err(|source| RunError::Write { path: path.clone(), source })?;
    files.push(path);
    Ok(())
}

fn episode_id(config: &RunConfig) -> String {
    if let Some(id) = &config.task.episode_id {
        return id.clone();
    }
    config.paths.manifest.file_stem().and_then(|s| s.to_str()).unwrap_or("episode").to_string()
}

/// Runs the configured task against `backend` and writes the report files.
pub fn execute(config: &RunConfig, backend: &dyn ModelBackend) -> Result<RunOutcome, RunError> {
    config.validate()?;
    let samples = load_manifest(&config.paths.manifest)?;
    if samples.is_empty() {
        return Err(EvalError::Empty.into());
    }
    let out_dir = &config.paths.out_dir;
    fs::create_dir_all(out_dir).map_err(|source| RunError::Write { path: out_dir.clone(), source })?;
    let opts = config.agent_options();
    let max_concurrent = config.backend.max_concurrent;
    let task = config.task.kind;
    let strategies = config.task.strategy.list();
    let mut files = Vec::new();

    let mut report = if task == TaskSetting::Ablation {
        let (report, runs) = run_ablation(&samples, &strategies, backend, &opts, max_concurrent)?;
        for (strategy, outcomes) in &runs {
            write_outcome_steps(out_dir, task, *strategy, outcomes, &mut files)?;
        }
        report
    } else {
        let strategy = strategies[0];
        let outcomes = if config.task.episode {
            run_as_episode(config, &samples, strategy, backend, out_dir, &mut files)?
        } else {
            let outcomes = run_samples(&samples, strategy, task.step_task(), backend, &opts, max_concurrent)?;
            write_outcome_steps(out_dir, task, strategy, &outcomes, &mut files)?;
            outcomes
        };
        let mut report = score_task(config, &samples, &outcomes)?;
        report.diagnostics = crate::eval::diagnostic_totals(&outcomes);
        if outcomes.iter().any(SampleOutcome::is_unscored) {
            for row in &mut report.rows {
                row.flags.push(PARTIAL_FLAG.into());
            }
        }
        if task == TaskSetting::Knowledge {
            write_file(out_dir.join("knowledge.responses.md"), &knowledge_responses(&outcomes), &mut files)?;
        }
        report.with_meta("strategy", strategy.slug())
    };
    report = report
        .with_meta("model", config.backend.model_id.clone())
        .with_meta("backend", format!("{}", backend.mode()))
        .with_meta("samples", samples.len().to_string());
    let mut warnings: Vec<String> = backend.drain_warnings().iter().map(ToString::to_string).collect();
    warnings.extend(std::mem::take(&mut report.warnings));
    warnings.sort();
    report.warnings = warnings;

    if config.render.csv {
        write_file(out_dir.join(format!("{}.report.csv", task.slug())), &report.to_csv(), &mut files)?;
        write_file(out_dir.join(format!("{}.verdicts.csv", task.slug())), &report.verdicts_csv(), &mut files)?;
    }
    if config.render.markdown {
        write_file(out_dir.join(format!("{}.report.md", task.slug())), &report.to_markdown(), &mut files)?;
    }
    let status = if report.is_partial() { RunStatus::Partial } else { RunStatus::Complete };
    Ok(RunOutcome { status, report, files })
}

fn score_task(config: &RunConfig, samples: &[SceneSample], outcomes: &[SampleOutcome]) -> Result<EvalReport, RunError> {
    let label = config.backend.model_id.as_str();
    Ok(match config.task.kind {
        TaskSetting::Perception => match &config.paths.verdicts {
            Some(path) => score_perception(&load_verdicts(path)?)?,
            None => score_perception(&perception_verdicts(samples, outcomes))?,
        },
        TaskSetting::Math => score_math(label, &math_cases(samples, outcomes)?)?,
        TaskSetting::Decision => score_decisions(label, &decision_pairs(samples, outcomes)?)?,
        TaskSetting::Knowledge => EvalReport::unscored(ReportTask::Knowledge),
        TaskSetting::Ablation => unreachable!("handled by run_ablation"),
    })
}

fn write_outcome_steps(
    out_dir: &Path,
    task: TaskSetting,
    strategy: PromptStrategy,
    outcomes: &[SampleOutcome],
    files: &mut Vec<PathBuf>,
) -> Result<(), RunError> {
    let steps: Vec<StepResult> = outcomes.iter().filter_map(|o| o.step.clone()).collect();
    let path = out_dir.join(format!("{}.{}.steps.jsonl", task.slug(), strategy.slug()));
    write_steps(&path, &steps).map_err(|source| RunError::Write { path: path.clone(), source })?;
    files.push(path);
    Ok(())
}

/// Runs the manifest as one episode. A non-fatal failure stops the episode;
/// the samples it never reached count as failed.
fn run_as_episode(
    config: &RunConfig,
    samples: &[SceneSample],
    strategy: PromptStrategy,
    backend: &dyn ModelBackend,
    out_dir: &Path,
    files: &mut Vec<PathBuf>,
) -> Result<Vec<SampleOutcome>, RunError> {
    let id = episode_id(config);
    let run = run_episode(
        &id,
        samples,
        strategy,
        config.task.kind.step_task(),
        backend,
        &config.agent_options(),
        Some(out_dir),
    )?;
    files.extend(run.memory_path.iter().cloned());
    files.extend(run.steps_path.iter().cloned());
    if run.fatal {
        return Err(RunError::Episode(run.error.unwrap_or_default()));
    }
    let mut outcomes: Vec<SampleOutcome> = run
        .steps
        .into_iter()
        .map(|step| SampleOutcome { sample_id: step.sample_id.clone(), step: Some(step), error: None })
        .collect();
    for sample in &samples[outcomes.len()..] {
        outcomes.push(SampleOutcome {
            sample_id: sample.sample_id.clone(),
            step: None,
            error: Some(run.error.clone().unwrap_or_else(|| "episode stopped".into())),
        });
    }
    Ok(outcomes)
}

fn knowledge_responses(outcomes: &[SampleOutcome]) -> String {
    let mut out = String::from("# knowledge responses\n");
    for o in outcomes {
        out.push_str(&format!("\n## {}\n\n", o.sample_id));
        match (&o.step, &o.error) {
            (Some(step), _) => {
                out.push_str(step.raw_text.trim_end());
                out.push('\n');
            }
            (None, Some(e)) => out.push_str(&format!("(no response: {e})\n")),
            (None, None) => out.push_str("(no response)\n"),
        }
    }
    out
}
