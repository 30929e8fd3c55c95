use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::agent::{run_step, AgentError, AgentOptions, StepResult};
use crate::backend::{BackendError, ModelBackend};
use crate::geometry::pythagorean_distance;
use crate::memory::MemoryLog;
use crate::object::ObjectCategory;
use crate::prompt::{distance_pair, PromptStrategy, TaskKind};
use crate::scene::SceneSample;

use super::{
    judge_presence, score_decisions, DecisionPair, DiagnosticTotals, EvalError, EvalReport, MathCase,
    PerceptionVerdict, ReportTask, PARTIAL_FLAG,
};

/// One single-step sample run. `step` is `None` when the backend failed with a
/// non-fatal error, which is kept in `error`.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutcome {
    pub sample_id: String,
    pub step: Option<StepResult>,
    pub error: Option<String>,
}

impl SampleOutcome {
    pub fn is_unscored(&self) -> bool {
        self.step.as_ref().is_none_or(StepResult::is_parse_failure)
    }
}

/// Runs `task` once per sample, each with its own fresh memory log, using up
/// to `max_concurrent` worker threads. Outcomes keep manifest order.
///
/// Fatal errors (missing transcript, bad configuration) abort the whole batch.
pub fn run_samples(
    samples: &[SceneSample],
    strategy: PromptStrategy,
    task: TaskKind,
    backend: &dyn ModelBackend,
    opts: &AgentOptions,
    max_concurrent: usize,
) -> Result<Vec<SampleOutcome>, EvalError> {
    let slots: Vec<Mutex<Option<Result<SampleOutcome, AgentError>>>> =
        samples.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let workers = max_concurrent.clamp(1, samples.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(sample) = samples.get(i) else { break };
                let mut log = MemoryLog::new(sample.sample_id.clone());
                let outcome = match run_step(sample, strategy, task, 0, &mut log, backend, opts) {
                    Ok(step) => {
                        Ok(SampleOutcome { sample_id: sample.sample_id.clone(), step: Some(step), error: None })
                    }
                    Err(e) if e.backend_error().is_some_and(|b| !BackendError::is_fatal(b)) => {
                        log::warn!("{e}");
                        Ok(SampleOutcome {
                            sample_id: sample.sample_id.clone(),
                            step: None,
                            error: Some(e.to_string()),
                        })
                    }
                    Err(e) => Err(e),
                };
                *slots[i].lock().unwrap_or_else(|e| e.into_inner()) = Some(outcome);
            });
        }
    });
    slots
        .into_iter()
        .map(|slot| {
            let outcome = slot.into_inner().unwrap_or_else(|e| e.into_inner()).expect("every slot is filled");
            outcome.map_err(EvalError::from)
        })
        .collect()
}

pub fn diagnostic_totals(outcomes: &[SampleOutcome]) -> DiagnosticTotals {
    let mut t = DiagnosticTotals::default();
    for o in outcomes {
        match &o.step {
            Some(step) => {
                let d = &step.diagnostics;
                t.skipped_fragments += d.parse.skipped_fragments;
                t.malformed_records += d.parse.malformed_records;
                t.normalized_ids += d.parse.normalized_ids;
                t.memory_synthesized += d.memory_synthesized as usize;
                t.out_of_bounds_coordinates += d.out_of_bounds_coordinates;
                t.parse_failures += step.is_parse_failure() as usize;
            }
            None => t.backend_errors += 1,
        }
    }
    t
}

fn check_aligned(samples: &[SceneSample], outcomes: &[SampleOutcome]) {
    assert_eq!(samples.len(), outcomes.len(), "one outcome per sample");
}

/// Exact-presence verdicts for every category the reference labels. A sample
/// whose request failed is incorrect in each of its labeled categories.
pub fn perception_verdicts(samples: &[SceneSample], outcomes: &[SampleOutcome]) -> Vec<PerceptionVerdict> {
    check_aligned(samples, outcomes);
    let mut out = Vec::new();
    for (sample, outcome) in samples.iter().zip(outcomes) {
        for cat in ObjectCategory::ALL {
            let records = outcome.step.as_ref().map(|s| s.objects.as_slice()).unwrap_or(&[]);
            if let Some(mut v) = judge_presence(&sample.sample_id, records, &sample.ground_truth, cat) {
                if outcome.step.is_none() {
                    v.correct = false;
                }
                out.push(v);
            }
        }
    }
    out
}

/// Reference distance: the labeled value, or else the distance between the
/// ego and the first neighbor with coordinates.
fn reference_distance(sample: &SceneSample) -> Result<f64, EvalError> {
    if let Some(d) = sample.ground_truth.true_distance_m {
        return Ok(d);
    }
    let missing = || EvalError::MissingLabel { sample_id: sample.sample_id.clone(), label: "reference distance" };
    let (ego, (_, target)) = distance_pair(sample).ok_or_else(missing)?;
    pythagorean_distance(ego, target).map_err(|_| missing())
}

pub fn math_cases(samples: &[SceneSample], outcomes: &[SampleOutcome]) -> Result<Vec<MathCase>, EvalError> {
    check_aligned(samples, outcomes);
    samples
        .iter()
        .zip(outcomes)
        .map(|(sample, outcome)| {
            Ok(MathCase {
                sample_id: sample.sample_id.clone(),
                claimed: outcome.step.as_ref().and_then(|s| s.claimed_distance_m),
                truth: reference_distance(sample)?,
            })
        })
        .collect()
}

fn expected_decision(sample: &SceneSample) -> Result<crate::action::DrivingAction, EvalError> {
    sample
        .ground_truth
        .expected_decision
        .ok_or_else(|| EvalError::MissingLabel { sample_id: sample.sample_id.clone(), label: "expected_decision" })
}

pub fn decision_pairs(samples: &[SceneSample], outcomes: &[SampleOutcome]) -> Result<Vec<DecisionPair>, EvalError> {
    check_aligned(samples, outcomes);
    samples
        .iter()
        .zip(outcomes)
        .map(|(sample, outcome)| {
            Ok(DecisionPair {
                sample_id: sample.sample_id.clone(),
                predicted: outcome.step.as_ref().and_then(|s| s.decision),
                expected: expected_decision(sample)?,
            })
        })
        .collect()
}

pub type StrategyOutcomes = (PromptStrategy, Vec<SampleOutcome>);

/// Scores the decision task under each strategy over the same samples in the
/// same order. Rows are grouped by strategy; a strategy with any unscored
/// sample is flagged partial.
pub fn run_ablation(
    samples: &[SceneSample],
    strategies: &[PromptStrategy],
    backend: &dyn ModelBackend,
    opts: &AgentOptions,
    max_concurrent: usize,
) -> Result<(EvalReport, Vec<StrategyOutcomes>), EvalError> {
    if samples.is_empty() || strategies.is_empty() {
        return Err(EvalError::Empty);
    }
    for s in samples {
        expected_decision(s)?;
    }
    let mut report = EvalReport::new(ReportTask::Ablation);
    let mut runs = Vec::with_capacity(strategies.len());
    for &strategy in strategies {
        let outcomes = run_samples(samples, strategy, TaskKind::Decision, backend, opts, max_concurrent)?;
        let scored = score_decisions(strategy.slug(), &decision_pairs(samples, &outcomes)?)?;
        let mut row = scored.rows.into_iter().next().expect("one row per strategy");
        if outcomes.iter().any(SampleOutcome::is_unscored) {
            row.flags.push(PARTIAL_FLAG.into());
        }
        report.rows.push(row);
        report.verdicts.extend(scored.verdicts);
        report.diagnostics.add(&diagnostic_totals(&outcomes));
        runs.push((strategy, outcomes));
    }
    Ok((report, runs))
}
