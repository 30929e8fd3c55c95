//! Scoring protocols: perception presence, coordinate distance, decisions, and
//! the prompt-strategy ablation.
//!
//! Accuracies are kept as exact counts and rendered as percentages with two
//! decimals. The perception average is the mean of the five rendered category
//! percentages, not the pooled mean over all verdicts.

mod harness;
mod report;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action::DrivingAction;
use crate::geometry::{within_tolerance, DISTANCE_TOLERANCE_M};
use crate::object::{ObjectCategory, ObjectRecord};
use crate::scene::GroundTruth;

pub use harness::{
    decision_pairs, diagnostic_totals, math_cases, perception_verdicts, run_ablation, run_samples, SampleOutcome,
    StrategyOutcomes,
};

pub const NO_FORMULA_FLAG: &str = "no formula evaluation";
pub const PARTIAL_FLAG: &str = "partial";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("nothing to score")]
    Empty,
    #[error("sample {sample_id} gave more than one verdict for {category}")]
    DuplicateVerdict { sample_id: String, category: ObjectCategory },
    #[error("sample {sample_id} has no {label}")]
    MissingLabel { sample_id: String, label: &'static str },
    #[error("verdict file line {line}: {message}")]
    VerdictFile { line: usize, message: String },
    #[error("negative reference distance {truth} for sample {sample_id}")]
    InvalidTruth { sample_id: String, truth: f64 },
    #[error(transparent)]
    Agent(#[from] crate::agent::AgentError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A percentage in hundredths of a percent (`9600` is `96.00%`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Percent(pub u32);

impl Percent {
    /// `correct / total`, rounded half up to two decimals.
    pub fn from_counts(correct: usize, total: usize) -> Option<Self> {
        if total == 0 {
            return None;
        }
        let num = correct as u128 * 10_000 * 2 + total as u128;
        Some(Percent((num / (2 * total as u128)) as u32))
    }

    /// Mean of already-rounded percentages, rounded half up.
    pub fn mean(values: &[Percent]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let sum: u64 = values.iter().map(|p| p.0 as u64).sum();
        let n = values.len() as u64;
        Some(Percent(((sum * 2 + n) / (2 * n)) as u32))
    }

    pub fn as_f64(self) -> f64 {
        self.0 as f64 / 100.0
    }
}

impl fmt::Display for Percent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{:02}%", self.0 / 100, self.0 % 100)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum JudgeBasis {
    Human,
    ExactPresence,
}

impl fmt::Display for JudgeBasis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            JudgeBasis::Human => "human",
            JudgeBasis::ExactPresence => "exact-presence",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerceptionVerdict {
    pub sample_id: String,
    pub category: ObjectCategory,
    pub correct: bool,
    pub basis: JudgeBasis,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportTask {
    Perception,
    Knowledge,
    Math,
    Decision,
    Ablation,
}

impl ReportTask {
    pub fn slug(self) -> &'static str {
        match self {
            ReportTask::Perception => "perception",
            ReportTask::Knowledge => "knowledge",
            ReportTask::Math => "math",
            ReportTask::Decision => "decision",
            ReportTask::Ablation => "ablation",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupRow {
    pub group: String,
    pub correct: usize,
    pub total: usize,
    /// `None` when the group has no samples.
    pub accuracy: Option<Percent>,
    pub flags: Vec<String>,
}

impl GroupRow {
    fn new(group: impl Into<String>, correct: usize, total: usize) -> Self {
        Self { group: group.into(), correct, total, accuracy: Percent::from_counts(correct, total), flags: Vec::new() }
    }

    pub fn is_partial(&self) -> bool {
        self.flags.iter().any(|f| f == PARTIAL_FLAG)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleVerdict {
    pub sample_id: String,
    pub group: String,
    pub correct: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiagnosticTotals {
    pub skipped_fragments: usize,
    pub malformed_records: usize,
    pub normalized_ids: usize,
    pub memory_synthesized: usize,
    pub out_of_bounds_coordinates: usize,
    /// Responses that could not be scored for their task.
    pub parse_failures: usize,
    /// Requests that failed at the backend and were counted incorrect.
    pub backend_errors: usize,
}

impl DiagnosticTotals {
    pub fn add(&mut self, other: &DiagnosticTotals) {
        self.skipped_fragments += other.skipped_fragments;
        self.malformed_records += other.malformed_records;
        self.normalized_ids += other.normalized_ids;
        self.memory_synthesized += other.memory_synthesized;
        self.out_of_bounds_coordinates += other.out_of_bounds_coordinates;
        self.parse_failures += other.parse_failures;
        self.backend_errors += other.backend_errors;
    }

    pub fn is_clean(&self) -> bool {
        self.parse_failures == 0 && self.backend_errors == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: ReportTask,
    /// Ordered `(name, value)` pairs describing the run (model, strategy, basis).
    pub meta: Vec<(String, String)>,
    pub rows: Vec<GroupRow>,
    pub overall: Option<Percent>,
    pub verdicts: Vec<SampleVerdict>,
    pub diagnostics: DiagnosticTotals,
    pub warnings: Vec<String>,
}

impl EvalReport {
    fn new(task: ReportTask) -> Self {
        Self {
            task,
            meta: Vec::new(),
            rows: Vec::new(),
            overall: None,
            verdicts: Vec::new(),
            diagnostics: DiagnosticTotals::default(),
            warnings: Vec::new(),
        }
    }

    /// A report with no scored groups, for tasks exported for human review.
    pub fn unscored(task: ReportTask) -> Self {
        Self::new(task)
    }

    pub fn with_meta(mut self, key: &str, value: impl Into<String>) -> Self {
        self.meta.push((key.to_string(), value.into()));
        self
    }

    pub fn row(&self, group: &str) -> Option<&GroupRow> {
        self.rows.iter().find(|r| r.group == group)
    }

    /// A degraded run: unscored responses or backend failures.
    pub fn is_partial(&self) -> bool {
        !self.diagnostics.is_clean() || self.rows.iter().any(GroupRow::is_partial)
    }
}

/// Per-category accuracy over binary verdicts, plus the unweighted average of
/// the category percentages.
pub fn score_perception(verdicts: &[PerceptionVerdict]) -> Result<EvalReport, EvalError> {
    if verdicts.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut seen = BTreeSet::new();
    let mut counts: BTreeMap<ObjectCategory, (usize, usize)> = BTreeMap::new();
    for v in verdicts {
        if !seen.insert((v.sample_id.as_str(), v.category)) {
            return Err(EvalError::DuplicateVerdict { sample_id: v.sample_id.clone(), category: v.category });
        }
        let c = counts.entry(v.category).or_default();
        c.1 += 1;
        if v.correct {
            c.0 += 1;
        }
    }
    let mut report = EvalReport::new(ReportTask::Perception);
    let bases: BTreeSet<JudgeBasis> = verdicts.iter().map(|v| v.basis).collect();
    let basis = if bases.len() == 1 { bases.iter().next().unwrap().to_string() } else { "mixed".into() };
    report.meta.push(("basis".into(), basis));
    let mut category_pcts = Vec::new();
    for cat in ObjectCategory::ALL {
        let (correct, total) = counts.get(&cat).copied().unwrap_or((0, 0));
        let row = GroupRow::new(cat.display_name(), correct, total);
        if let Some(p) = row.accuracy {
            category_pcts.push(p);
        }
        report.rows.push(row);
    }
    report.overall = Percent::mean(&category_pcts);
    if category_pcts.len() < ObjectCategory::ALL.len() {
        report.warnings.push(format!(
            "average covers {} of {} categories; the rest have no verdicts",
            category_pcts.len(),
            ObjectCategory::ALL.len()
        ));
    }
    report.verdicts = verdicts
        .iter()
        .map(|v| SampleVerdict {
            sample_id: v.sample_id.clone(),
            group: v.category.display_name().into(),
            correct: v.correct,
            detail: v.basis.to_string(),
        })
        .collect();
    Ok(report)
}

/// Exact-presence judge: correct when the reference and the parsed records
/// agree on whether the category is present. `None` when the reference does
/// not label the category.
pub fn judge_presence(
    sample_id: &str,
    records: &[ObjectRecord],
    truth: &GroundTruth,
    category: ObjectCategory,
) -> Option<PerceptionVerdict> {
    let present = *truth.category_presence.get(&category)?;
    let reported = records.iter().any(|r| r.category == category);
    Some(PerceptionVerdict {
        sample_id: sample_id.to_string(),
        category,
        correct: present == reported,
        basis: JudgeBasis::ExactPresence,
    })
}

#[derive(Debug, Clone, Deserialize)]
struct VerdictLine {
    sample_id: String,
    category: ObjectCategory,
    correct: bool,
    basis: JudgeBasis,
}

/// Reads a JSON-lines verdict file of human judgments.
pub fn load_verdicts(path: &Path) -> Result<Vec<PerceptionVerdict>, EvalError> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let v: VerdictLine =
            serde_json::from_str(line).map_err(|e| EvalError::VerdictFile { line: i + 1, message: e.to_string() })?;
        if v.basis != JudgeBasis::Human {
            return Err(EvalError::VerdictFile { line: i + 1, message: "verdict files carry human judgments".into() });
        }
        out.push(PerceptionVerdict {
            sample_id: v.sample_id,
            category: v.category,
            correct: v.correct,
            basis: v.basis,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MathCase {
    pub sample_id: String,
    /// `None` when the response had no distance.
    pub claimed: Option<f64>,
    pub truth: f64,
}

/// Share of claims within 0.5 m of the reference. Missing claims are
/// incorrect; when every claim is missing the row is flagged.
pub fn score_math(label: &str, cases: &[MathCase]) -> Result<EvalReport, EvalError> {
    if cases.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut report = EvalReport::new(ReportTask::Math);
    let mut correct = 0;
    for case in cases {
        if !case.truth.is_finite() || case.truth < 0.0 {
            return Err(EvalError::InvalidTruth { sample_id: case.sample_id.clone(), truth: case.truth });
        }
        let ok = case.claimed.is_some_and(|c| within_tolerance(c, case.truth, DISTANCE_TOLERANCE_M).is_correct());
        correct += ok as usize;
        let detail = match case.claimed {
            Some(c) => format!("claimed {c} m, truth {} m", case.truth),
            None => format!("no distance, truth {} m", case.truth),
        };
        report.verdicts.push(SampleVerdict {
            sample_id: case.sample_id.clone(),
            group: label.into(),
            correct: ok,
            detail,
        });
    }
    let mut row = GroupRow::new(label, correct, cases.len());
    if cases.iter().all(|c| c.claimed.is_none()) {
        row.flags.push(NO_FORMULA_FLAG.into());
    }
    report.overall = row.accuracy;
    report.rows.push(row);
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionPair {
    pub sample_id: String,
    pub predicted: Option<DrivingAction>,
    pub expected: DrivingAction,
}

/// Correct decisions over all samples; a missing prediction is incorrect.
pub fn score_decisions(label: &str, pairs: &[DecisionPair]) -> Result<EvalReport, EvalError> {
    if pairs.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut report = EvalReport::new(ReportTask::Decision);
    let mut correct = 0;
    for p in pairs {
        let ok = p.predicted == Some(p.expected);
        correct += ok as usize;
        let predicted = p.predicted.map_or("none".to_string(), |a| a.to_string());
        report.verdicts.push(SampleVerdict {
            sample_id: p.sample_id.clone(),
            group: label.into(),
            correct: ok,
            detail: format!("predicted {predicted}, expected {}", p.expected),
        });
    }
    let row = GroupRow::new(label, correct, pairs.len());
    report.overall = row.accuracy;
    report.rows.push(row);
    Ok(report)
}
