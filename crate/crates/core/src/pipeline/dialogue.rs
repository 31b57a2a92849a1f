//! Dataset ingestion: normalizes benchmark files into [`Dialogue`] records.
//!
//! The generic format is the canonical schema; the benchmark loaders map
//! their native shapes into it. Malformed records are skipped with counted
//! warnings rather than failing the whole file.

use std::fs;
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::PipelineError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub speaker: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub timestamp: NaiveDate,
    pub turns: Vec<Turn>,
}

impl Session {
    /// One `speaker: text` line per turn, the rendering all prompts use.
    pub fn render(&self) -> String {
        self.turns
            .iter()
            .map(|t| format!("{}: {}", t.speaker, t.text))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Question {
    pub question: String,
    pub gold_answer: String,
    pub question_date: NaiveDate,
    pub category: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dialogue {
    pub dialogue_id: String,
    pub sessions: Vec<Session>,
    pub questions: Vec<Question>,
}

impl Dialogue {
    pub fn last_session_date(&self) -> Option<NaiveDate> {
        self.sessions.last().map(|s| s.timestamp)
    }

    /// Checks ordering invariants: non-decreasing session timestamps and
    /// question dates at or after the last session.
    pub fn validate(&self) -> Result<(), String> {
        if self.sessions.is_empty() {
            return Err(format!("dialogue {}: no sessions", self.dialogue_id));
        }
        for pair in self.sessions.windows(2) {
            if pair[1].timestamp < pair[0].timestamp {
                return Err(format!(
                    "dialogue {}: session timestamps out of order ({} then {})",
                    self.dialogue_id, pair[0].timestamp, pair[1].timestamp
                ));
            }
        }
        let last = self.last_session_date().unwrap();
        for q in &self.questions {
            if q.question_date < last {
                return Err(format!(
                    "dialogue {}: question date {} precedes last session {}",
                    self.dialogue_id, q.question_date, last
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetFormat {
    Generic,
    Longmemeval,
    Locomo,
    Perltqa,
}

impl std::str::FromStr for DatasetFormat {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "generic" => Ok(DatasetFormat::Generic),
            "longmemeval" => Ok(DatasetFormat::Longmemeval),
            "locomo" => Ok(DatasetFormat::Locomo),
            "perltqa" => Ok(DatasetFormat::Perltqa),
            other => Err(PipelineError::UnknownFormat(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct IngestStats {
    pub loaded: usize,
    pub skipped_records: usize,
    pub skipped_questions: usize,
    pub warnings: Vec<String>,
}

/// Loads and normalizes a dataset file. Records that fail their invariants
/// are rejected with a counted warning; an entirely unusable file is an
/// error.
pub fn ingest(path: &Path, format: DatasetFormat) -> Result<(Vec<Dialogue>, IngestStats), PipelineError> {
    let text = fs::read_to_string(path)?;
    let records = parse_json_records(&text)?;
    let mut stats = IngestStats::default();
    let mut dialogues = Vec::new();
    for (index, record) in records.iter().enumerate() {
        let normalized = match format {
            DatasetFormat::Generic => from_generic(record),
            DatasetFormat::Longmemeval => from_longmemeval(record),
            DatasetFormat::Locomo => from_locomo(record),
            DatasetFormat::Perltqa => from_perltqa(record),
        };
        match normalized {
            Ok(mut dialogue) => {
                // Drop questions that violate the t_q >= t_n invariant, keep
                // the dialogue.
                if let Some(last) = dialogue.last_session_date() {
                    let before = dialogue.questions.len();
                    dialogue.questions.retain(|q| q.question_date >= last);
                    let dropped = before - dialogue.questions.len();
                    if dropped > 0 {
                        stats.skipped_questions += dropped;
                        stats.warnings.push(format!(
                            "dialogue {}: dropped {dropped} question(s) dated before the last session",
                            dialogue.dialogue_id
                        ));
                    }
                }
                match dialogue.validate() {
                    Ok(()) => {
                        stats.loaded += 1;
                        dialogues.push(dialogue);
                    }
                    Err(reason) => {
                        stats.skipped_records += 1;
                        stats.warnings.push(reason);
                    }
                }
            }
            Err(reason) => {
                stats.skipped_records += 1;
                stats.warnings.push(format!("record {index}: {reason}"));
            }
        }
    }
    for warning in &stats.warnings {
        log::warn!("ingest: {warning}");
    }
    if dialogues.is_empty() {
        return Err(PipelineError::EmptyDataset);
    }
    Ok((dialogues, stats))
}

/// Accepts a JSON array, a single JSON object, or JSONL.
fn parse_json_records(text: &str) -> Result<Vec<Value>, PipelineError> {
    let trimmed = text.trim_start();
    if trimmed.starts_with('[') {
        let values: Vec<Value> =
            serde_json::from_str(text).map_err(|e| PipelineError::Decode(e.to_string()))?;
        return Ok(values);
    }
    if trimmed.starts_with('{') && serde_json::from_str::<Value>(text).is_ok() {
        return Ok(vec![serde_json::from_str(text).unwrap()]);
    }
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(line)
            .map_err(|e| PipelineError::Decode(format!("line {}: {e}", lineno + 1)))?;
        out.push(value);
    }
    Ok(out)
}

/// Tolerant date extraction across benchmark timestamp styles, e.g.
/// `2023-05-20`, `2023/05/20 (Sat) 02:21`, `1:56 pm on 8 May, 2023`.
pub fn parse_flex_date(raw: &str) -> Option<NaiveDate> {
    let mut candidates: Vec<String> = vec![raw.trim().to_string()];
    if let Some((_, tail)) = raw.split_once(" on ") {
        candidates.push(tail.trim().to_string());
    }
    if let Some(first) = raw.split_whitespace().next() {
        candidates.push(first.to_string());
    }
    for candidate in &candidates {
        for format in ["%Y-%m-%d", "%Y/%m/%d", "%d %B, %Y", "%d %B %Y", "%B %d, %Y"] {
            if let Ok(d) = NaiveDate::parse_from_str(candidate, format) {
                return Some(d);
            }
        }
    }
    None
}

fn str_field(value: &Value, field: &str) -> Result<String, String> {
    value
        .get(field)
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| format!("missing field {field:?}"))
}

fn from_generic(record: &Value) -> Result<Dialogue, String> {
    let dialogue_id = str_field(record, "dialogue_id")?;
    let mut sessions = Vec::new();
    for (i, s) in record
        .get("sessions")
        .and_then(Value::as_array)
        .ok_or("missing field \"sessions\"")?
        .iter()
        .enumerate()
    {
        let date_raw = str_field(s, "timestamp")?;
        let timestamp =
            parse_flex_date(&date_raw).ok_or(format!("session {i}: bad timestamp {date_raw:?}"))?;
        let turns = s
            .get("turns")
            .and_then(Value::as_array)
            .ok_or(format!("session {i}: missing turns"))?
            .iter()
            .map(|t| {
                Ok(Turn {
                    speaker: str_field(t, "speaker")?,
                    text: str_field(t, "text")?,
                })
            })
            .collect::<Result<Vec<_>, String>>()?;
        sessions.push(Session { timestamp, turns });
    }
    let last = sessions.last().map(|s| s.timestamp);
    let mut questions = Vec::new();
    if let Some(list) = record.get("questions").and_then(Value::as_array) {
        for q in list {
            let question_date = q
                .get("question_date")
                .and_then(Value::as_str)
                .and_then(parse_flex_date)
                .or_else(|| last.map(|d| d + chrono::Days::new(1)))
                .ok_or("question without a resolvable date")?;
            questions.push(Question {
                question: str_field(q, "question")?,
                gold_answer: str_field(q, "gold_answer")?,
                question_date,
                category: q
                    .get("category")
                    .and_then(Value::as_str)
                    .unwrap_or("uncategorized")
                    .to_string(),
            });
        }
    }
    Ok(Dialogue {
        dialogue_id,
        sessions,
        questions,
    })
}

/// One record per question, each with its own haystack of sessions.
fn from_longmemeval(record: &Value) -> Result<Dialogue, String> {
    let dialogue_id = str_field(record, "question_id")?;
    let dates = record
        .get("haystack_dates")
        .and_then(Value::as_array)
        .ok_or("missing haystack_dates")?;
    let session_lists = record
        .get("haystack_sessions")
        .and_then(Value::as_array)
        .ok_or("missing haystack_sessions")?;
    if dates.len() != session_lists.len() {
        return Err("haystack_dates and haystack_sessions lengths differ".into());
    }
    let mut sessions = Vec::new();
    for (i, (date, turns)) in dates.iter().zip(session_lists).enumerate() {
        let raw = date.as_str().ok_or(format!("date {i} not a string"))?;
        let timestamp = parse_flex_date(raw).ok_or(format!("bad haystack date {raw:?}"))?;
        let turns = turns
            .as_array()
            .ok_or(format!("session {i} not an array"))?
            .iter()
            .map(|t| {
                Ok(Turn {
                    speaker: str_field(t, "role")?,
                    text: str_field(t, "content")?,
                })
            })
            .collect::<Result<Vec<_>, String>>()?;
        sessions.push(Session { timestamp, turns });
    }
    let last = sessions.last().map(|s| s.timestamp);
    let question_date = record
        .get("question_date")
        .and_then(Value::as_str)
        .and_then(parse_flex_date)
        .or_else(|| last.map(|d| d + chrono::Days::new(1)))
        .ok_or("no resolvable question date")?;
    let questions = vec![Question {
        question: str_field(record, "question")?,
        gold_answer: str_field(record, "answer")?,
        question_date,
        category: record
            .get("question_type")
            .and_then(Value::as_str)
            .unwrap_or("uncategorized")
            .to_string(),
    }];
    Ok(Dialogue {
        dialogue_id,
        sessions,
        questions,
    })
}

/// Numbered `session_N` keys inside a `conversation` object plus a `qa` list.
fn from_locomo(record: &Value) -> Result<Dialogue, String> {
    let dialogue_id = record
        .get("sample_id")
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or("missing field \"sample_id\"")?;
    let conversation = record
        .get("conversation")
        .and_then(Value::as_object)
        .ok_or("missing conversation object")?;
    let mut sessions = Vec::new();
    for n in 1.. {
        let Some(turns) = conversation.get(&format!("session_{n}")) else {
            break;
        };
        let date_raw = conversation
            .get(&format!("session_{n}_date_time"))
            .and_then(Value::as_str)
            .ok_or(format!("session_{n} missing date_time"))?;
        let timestamp =
            parse_flex_date(date_raw).ok_or(format!("bad session_{n} date {date_raw:?}"))?;
        let turns = turns
            .as_array()
            .ok_or(format!("session_{n} not an array"))?
            .iter()
            .map(|t| {
                Ok(Turn {
                    speaker: str_field(t, "speaker")?,
                    text: str_field(t, "text")?,
                })
            })
            .collect::<Result<Vec<_>, String>>()?;
        sessions.push(Session { timestamp, turns });
    }
    if sessions.is_empty() {
        return Err("conversation has no session_N keys".into());
    }
    let last = sessions.last().map(|s| s.timestamp);
    let mut questions = Vec::new();
    if let Some(list) = record.get("qa").and_then(Value::as_array) {
        for q in list {
            let category = match q.get("category") {
                Some(Value::String(s)) => s.clone(),
                Some(Value::Number(n)) => n.to_string(),
                _ => "uncategorized".to_string(),
            };
            let gold_answer = match q.get("answer") {
                Some(Value::String(s)) => s.clone(),
                Some(Value::Number(n)) => n.to_string(),
                _ => return Err("qa entry missing answer".into()),
            };
            questions.push(Question {
                question: str_field(q, "question")?,
                gold_answer,
                question_date: last.map(|d| d + chrono::Days::new(1)).unwrap(),
                category,
            });
        }
    }
    Ok(Dialogue {
        dialogue_id,
        sessions,
        questions,
    })
}

/// Character-centric export: `name`, dated `conversations`, and `qa_pairs`.
fn from_perltqa(record: &Value) -> Result<Dialogue, String> {
    let dialogue_id = str_field(record, "name")?;
    let mut sessions = Vec::new();
    for (i, s) in record
        .get("conversations")
        .and_then(Value::as_array)
        .ok_or("missing field \"conversations\"")?
        .iter()
        .enumerate()
    {
        let date_raw = str_field(s, "date")?;
        let timestamp =
            parse_flex_date(&date_raw).ok_or(format!("conversation {i}: bad date {date_raw:?}"))?;
        let turns = s
            .get("dialogue")
            .and_then(Value::as_array)
            .ok_or(format!("conversation {i}: missing dialogue"))?
            .iter()
            .map(|t| {
                let text = t
                    .get("text")
                    .or_else(|| t.get("content"))
                    .and_then(Value::as_str)
                    .ok_or("turn missing text")?
                    .to_string();
                Ok(Turn {
                    speaker: str_field(t, "speaker")?,
                    text,
                })
            })
            .collect::<Result<Vec<_>, String>>()?;
        sessions.push(Session { timestamp, turns });
    }
    let last = sessions.last().map(|s| s.timestamp);
    let mut questions = Vec::new();
    if let Some(list) = record.get("qa_pairs").and_then(Value::as_array) {
        for q in list {
            let question_date = q
                .get("date")
                .and_then(Value::as_str)
                .and_then(parse_flex_date)
                .or_else(|| last.map(|d| d + chrono::Days::new(1)))
                .ok_or("qa pair without resolvable date")?;
            questions.push(Question {
                question: str_field(q, "question")?,
                gold_answer: str_field(q, "answer")?,
                question_date,
                category: q
                    .get("type")
                    .and_then(Value::as_str)
                    .unwrap_or("uncategorized")
                    .to_string(),
            });
        }
    }
    Ok(Dialogue {
        dialogue_id,
        sessions,
        questions,
    })
}

/// Writes normalized dialogues as canonical JSON (pretty array).
pub fn write_normalized(path: &Path, dialogues: &[Dialogue]) -> Result<(), PipelineError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let text = serde_json::to_string_pretty(dialogues)
        .map_err(|e| PipelineError::Decode(e.to_string()))?;
    fs::write(path, text)?;
    Ok(())
}

/// Reads dialogues previously written by [`write_normalized`].
pub fn read_normalized(path: &Path) -> Result<Vec<Dialogue>, PipelineError> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| PipelineError::Decode(e.to_string()))
}
