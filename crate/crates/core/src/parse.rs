//! Turning free-form model text into objects, a decision, and a distance.
//!
//! Objects come from the fenced memory block when one parses, otherwise from
//! `Attribute: value` groups. Decisions and distances use last-match-wins,
//! since chain-of-thought answers often revise an earlier candidate.

use std::collections::{BTreeSet, HashSet};
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action::DrivingAction;
use crate::memory::MemorySnapshot;
use crate::object::{ObjectCategory, ObjectRecord};

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseDiagnostics {
    /// Non-blank lines outside fenced blocks that matched no attribute.
    pub skipped_fragments: usize,
    /// Attribute groups that could not form a record (no usable category).
    pub malformed_records: usize,
    /// Records whose ID was missing or duplicated and was reassigned.
    pub normalized_ids: usize,
    /// Fenced blocks that looked like JSON but failed the memory template.
    pub memory_block_errors: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectSource {
    MemoryBlock,
    Lines,
    Nothing,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectParse {
    pub records: Vec<ObjectRecord>,
    /// The memory snapshot the records came from, when the JSON path won.
    pub snapshot: Option<MemorySnapshot>,
    pub source: ObjectSource,
    pub diagnostics: ParseDiagnostics,
}

static FENCE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?s)```[ \t]*([A-Za-z0-9_-]*)[ \t]*\r?\n(.*?)```").unwrap());

static ATTRIBUTE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)\b(id|category|position|pixel[\s_-]*coordinates|state)\s*:").unwrap());

static COORD_PAIR: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(\d+(?:\.\d+)?)\s*[,;x]\s*(\d+(?:\.\d+)?)").unwrap());

static INTEGER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\d+").unwrap());

/// Byte ranges of fenced blocks and their contents.
fn fenced_blocks(text: &str) -> Vec<(std::ops::Range<usize>, &str, &str)> {
    FENCE
        .captures_iter(text)
        .map(|c| {
            let whole = c.get(0).unwrap();
            (whole.range(), c.get(1).map_or("", |m| m.as_str()), c.get(2).map_or("", |m| m.as_str()))
        })
        .collect()
}

/// The last fenced block that parses as a memory snapshot, plus errors for
/// JSON-looking blocks that did not.
pub fn parse_memory_block(text: &str) -> (Option<MemorySnapshot>, Vec<String>) {
    let mut found = None;
    let mut errors = Vec::new();
    for (_, lang, body) in fenced_blocks(text) {
        let looks_json = lang.eq_ignore_ascii_case("json") || body.trim_start().starts_with('{');
        if !looks_json {
            continue;
        }
        match MemorySnapshot::from_json(body) {
            Ok(snap) => found = Some(snap),
            Err(e) => errors.push(e.to_string()),
        }
    }
    (found, errors)
}

fn clean_line(line: &str) -> String {
    let s = line.replace("**", "").replace("__", "").replace('`', "");
    let s = s.trim_start_matches(|c: char| c.is_whitespace() || matches!(c, '-' | '*' | '•' | '>' | '#'));
    s.trim().to_string()
}

#[derive(Default)]
struct PendingRecord {
    id: Option<String>,
    category: Option<String>,
    position: Option<String>,
    pixel: Option<String>,
    state: Option<String>,
}

impl PendingRecord {
    fn is_empty(&self) -> bool {
        self.id.is_none()
            && self.category.is_none()
            && self.position.is_none()
            && self.pixel.is_none()
            && self.state.is_none()
    }

    fn slot(&mut self, attribute: &str) -> &mut Option<String> {
        let a = attribute.to_ascii_lowercase();
        if a == "id" {
            &mut self.id
        } else if a == "category" {
            &mut self.category
        } else if a == "position" {
            &mut self.position
        } else if a == "state" {
            &mut self.state
        } else {
            &mut self.pixel
        }
    }
}

fn parse_pixel(value: &str) -> Option<(u32, u32)> {
    let c = COORD_PAIR.captures(value)?;
    let x: f64 = c[1].parse().ok()?;
    let y: f64 = c[2].parse().ok()?;
    if x > u32::MAX as f64 || y > u32::MAX as f64 {
        return None;
    }
    Some((x.round() as u32, y.round() as u32))
}

fn parse_id(value: &str) -> Option<u32> {
    INTEGER.find(value)?.as_str().parse().ok().filter(|&id| id > 0)
}

struct LineGrammar {
    records: Vec<(Option<u32>, ObjectRecord)>,
    diagnostics: ParseDiagnostics,
    current: PendingRecord,
}

impl LineGrammar {
    fn close(&mut self) {
        let pending = std::mem::take(&mut self.current);
        if pending.is_empty() {
            return;
        }
        let Some(category) = pending.category.as_deref().and_then(ObjectCategory::parse_loose) else {
            self.diagnostics.malformed_records += 1;
            return;
        };
        let record = ObjectRecord {
            id: 0,
            category,
            position: pending.position.unwrap_or_default(),
            pixel_coordinates: pending.pixel.as_deref().and_then(parse_pixel),
            state: pending.state.unwrap_or_default(),
        };
        self.records.push((pending.id.as_deref().and_then(parse_id), record));
    }

    fn feed_line(&mut self, raw: &str) {
        let line = clean_line(raw);
        if line.is_empty() {
            return;
        }
        let matches: Vec<_> = ATTRIBUTE.captures_iter(&line).collect();
        if matches.is_empty() {
            self.close();
            self.diagnostics.skipped_fragments += 1;
            return;
        }
        // several attributes on one line form a record of their own
        let whole_record = matches.len() > 1;
        if whole_record {
            self.close();
        }
        for (i, cap) in matches.iter().enumerate() {
            let whole = cap.get(0).unwrap();
            let end = matches.get(i + 1).map_or(line.len(), |n| n.get(0).unwrap().start());
            let value = line[whole.end()..end]
                .trim()
                .trim_end_matches(|c: char| matches!(c, ',' | ';' | '|') || c.is_whitespace())
                .trim()
                .to_string();
            let attribute = cap[1].to_string();
            if self.current.slot(&attribute).is_some() {
                self.close();
            }
            *self.current.slot(&attribute) = Some(value);
        }
        if whole_record {
            self.close();
        }
    }

    fn finish(mut self) -> (Vec<ObjectRecord>, ParseDiagnostics) {
        self.close();
        let mut used: HashSet<u32> = HashSet::new();
        let mut next = self.records.iter().filter_map(|(id, _)| *id).max().unwrap_or(0);
        let mut out = Vec::with_capacity(self.records.len());
        for (id, mut record) in self.records {
            match id {
                Some(id) if used.insert(id) => record.id = id,
                _ => {
                    next += 1;
                    while used.contains(&next) {
                        next += 1;
                    }
                    used.insert(next);
                    record.id = next;
                    self.diagnostics.normalized_ids += 1;
                }
            }
            out.push(record);
        }
        (out, self.diagnostics)
    }
}

/// Extracts object records. Never fails: unparseable fragments are counted in
/// the diagnostics.
pub fn parse_objects(text: &str) -> ObjectParse {
    let (snapshot, memory_block_errors) = parse_memory_block(text);
    if let Some(snap) = snapshot {
        return ObjectParse {
            records: snap.objects.clone(),
            snapshot: Some(snap),
            source: ObjectSource::MemoryBlock,
            diagnostics: ParseDiagnostics { memory_block_errors, ..Default::default() },
        };
    }

    let mut outside = String::with_capacity(text.len());
    let mut last = 0;
    for (range, _, _) in fenced_blocks(text) {
        outside.push_str(&text[last..range.start]);
        outside.push('\n');
        last = range.end;
    }
    outside.push_str(&text[last..]);

    let mut grammar = LineGrammar {
        records: Vec::new(),
        diagnostics: ParseDiagnostics { memory_block_errors, ..Default::default() },
        current: PendingRecord::default(),
    };
    for line in outside.lines() {
        grammar.feed_line(line);
    }
    let (records, diagnostics) = grammar.finish();
    let source = if records.is_empty() { ObjectSource::Nothing } else { ObjectSource::Lines };
    ObjectParse { records, snapshot: None, source, diagnostics }
}

// --- decisions --------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
pub enum DecisionError {
    #[error("no driving action found in response")]
    NoDecision,
    #[error("decision line names more than one action: {0:?}")]
    Ambiguous(Vec<DrivingAction>),
}

struct Synonym {
    pattern: Regex,
    action: DrivingAction,
    /// "brake" reads as slowing down unless the same line also halts.
    is_brake: bool,
}

static SYNONYMS: LazyLock<Vec<Synonym>> = LazyLock::new(|| {
    use DrivingAction::*;
    let table: &[(&str, DrivingAction, bool)] = &[
        (r"\bspeed(?:s|ing)?\s+up\b", SpeedUp, false),
        (r"\baccelerat(?:e|es|ed|ing|ion)\b", SpeedUp, false),
        (r"\bspeed(?:s|ing)?\s+down\b", SpeedDown, false),
        (r"\bslow(?:s|ed|ing)?\s+down\b", SpeedDown, false),
        (r"\bdecelerat(?:e|es|ed|ing|ion)\b", SpeedDown, false),
        (r"\bbrak(?:e|es|ed|ing)\b", SpeedDown, true),
        (r"\bstop(?:s|ped|ping)?\b", Stop, false),
        (r"\bhalt(?:s|ed|ing)?\b", Stop, false),
        (r"\bkeep(?:s|ing)?\s+remain(?:s|ing)?\b", KeepRemain, false),
        (
            r"\bmaintain(?:s|ed|ing)?\s+(?:the\s+|a\s+|my\s+|our\s+|its\s+)?(?:current\s+|present\s+|same\s+|constant\s+)?speed\b",
            KeepRemain,
            false,
        ),
        (r"\bkeep(?:s|ing)?\s+(?:the\s+|its\s+|my\s+)?(?:current\s+)?lane\s+and\s+speed\b", KeepRemain, false),
        (r"\bremain(?:s|ing)?\b", KeepRemain, false),
        (r"\bchang(?:e|es|ed|ing)\s+(?:the\s+|a\s+)?lanes?\b", ChangeLane, false),
        (r"\blane\s+changes?\b", ChangeLane, false),
        (r"\bmerg(?:e|es|ed|ing)\s+(?:to\s+the\s+)?(?:left|right)\b", ChangeLane, false),
    ];
    table
        .iter()
        .map(|&(p, action, is_brake)| Synonym { pattern: Regex::new(&format!("(?i){p}")).unwrap(), action, is_brake })
        .collect()
});

/// Action mentions in one line as (start, action), non-overlapping, longest
/// match preferred at each position.
fn line_mentions(line: &str) -> Vec<(usize, DrivingAction)> {
    let mut hits: Vec<(usize, usize, DrivingAction, bool)> = Vec::new();
    for syn in SYNONYMS.iter() {
        for m in syn.pattern.find_iter(line) {
            hits.push((m.start(), m.end(), syn.action, syn.is_brake));
        }
    }
    let halts = hits.iter().any(|h| h.2 == DrivingAction::Stop);
    if halts {
        hits.retain(|h| !h.3);
    }
    hits.sort_by(|a, b| a.0.cmp(&b.0).then(b.1.cmp(&a.1)));
    let mut out = Vec::new();
    let mut covered = 0;
    for (start, end, action, _) in hits {
        if start < covered {
            continue;
        }
        out.push((start, action));
        covered = end;
    }
    out
}

fn text_mentions(text: &str) -> Vec<DrivingAction> {
    text.lines().flat_map(|l| line_mentions(l).into_iter().map(|(_, a)| a)).collect()
}

static DECISION_LINE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)^[^A-Za-z0-9]*(final\s+)?(?:driving\s+)?decision\s*[:：]\s*(.*)$").unwrap());

/// Picks one driving action from a response.
///
/// A `Decision:` or `Final Decision:` line wins (the last final one, else the
/// last plain one); its payload is mapped through the synonym table. Without
/// a usable line, the last action mentioned anywhere is taken.
pub fn parse_decision(text: &str) -> Result<DrivingAction, DecisionError> {
    let lines: Vec<String> = text.lines().map(clean_line).collect();
    let mut final_line = None;
    let mut plain_line = None;
    for (i, line) in lines.iter().enumerate() {
        if let Some(c) = DECISION_LINE.captures(line) {
            if c.get(1).is_some() {
                final_line = Some(i);
            } else {
                plain_line = Some(i);
            }
        }
    }
    if let Some(i) = final_line.or(plain_line) {
        let caps = DECISION_LINE.captures(&lines[i]).expect("matched above");
        let mut payload = caps[2].trim().to_string();
        if payload.is_empty() {
            if let Some(next) = lines[i + 1..].iter().find(|l| !l.trim().is_empty()) {
                payload = next.clone();
            }
        }
        let distinct: BTreeSet<DrivingAction> = text_mentions(&payload).into_iter().collect();
        match distinct.len() {
            0 => {}
            1 => return Ok(distinct.into_iter().next().unwrap()),
            _ => return Err(DecisionError::Ambiguous(distinct.into_iter().collect())),
        }
    }
    text_mentions(text).last().copied().ok_or(DecisionError::NoDecision)
}

// --- distances --------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
pub enum DistanceError {
    #[error("no distance with a length unit found in response")]
    NoDistance,
}

static DISTANCE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)(-?(?:\d{1,3}(?:,\d{3})+|\d+)(?:\.\d+)?)\s*(meters|meter|metres|metre|m)\b").unwrap()
});

static PER_TIME: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?i)^\s*(?:/|per\b|²|\^)").unwrap());

/// The last number annotated with a length unit, in meters.
pub fn parse_distance(text: &str) -> Result<f64, DistanceError> {
    DISTANCE
        .captures_iter(text)
        .filter(|c| !PER_TIME.is_match(&text[c.get(0).unwrap().end()..]))
        .filter_map(|c| c[1].replace(',', "").parse::<f64>().ok())
        .last()
        .ok_or(DistanceError::NoDistance)
}
