//! Parses raw agent text into typed memory operations and enforces the four
//! validity criteria: well-formed JSON, a defined action for the agent, all
//! required fields present, and resolvable references for UPDATE/MERGE.
//!
//! Agents reference old entries by their text, not by id, so resolution maps
//! each `old_memory` string to an entry id — exact content match first, then
//! highest-cosine match above a threshold. There is no repair of malformed
//! output; anything that fails lands in the validity report and gates the
//! reward to zero.

use serde_json::Value;
use thiserror::Error;

use crate::gateway::{Embedder, GatewayError};
use crate::memory::{action_allowed, CoreOp, EntryId, EntryOp, EntrySection, MemType, MemoryBank};

/// Cosine threshold for fuzzy reference resolution.
pub const DEFAULT_RESOLVE_THRESHOLD: f64 = 0.95;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParseError {
    #[error("malformed json: {0}")]
    MalformedJson(String),
    #[error("unknown action {0:?}")]
    UnknownAction(String),
    #[error("missing required field {0:?}")]
    MissingField(&'static str),
    #[error("action {action:?} is not defined for {mem_type} memory")]
    IllegalActionForType { action: String, mem_type: MemType },
}

#[derive(Debug, Error)]
pub enum ResolutionError {
    #[error("referenced entry not found in bank: {0:?}")]
    Unresolved(String),
    #[error("merge resolved to fewer than 2 distinct targets")]
    InsufficientMergeTargets,
    #[error("embedding during resolution failed: {0}")]
    Embed(#[from] GatewayError),
}

/// Entry operation as written by the agent, before reference resolution.
#[derive(Debug, Clone, PartialEq)]
pub enum RawEntryOp {
    Add { memory: String },
    Update { memory: String, old_memory: String },
    Merge { memory: String, old_memories: Vec<String> },
    Skip { reason: String },
}

/// Finds the first balanced JSON object in free-form model output, tolerating
/// surrounding prose and code fences. Strictness is enforced afterwards by
/// the real parser.
pub fn extract_first_json_object(raw: &str) -> Option<String> {
    let bytes = raw.as_bytes();
    let mut attempts = 0;
    let mut search_from = 0;
    while attempts < 64 {
        let start = raw[search_from..].find('{')? + search_from;
        if let Some(candidate) = balanced_object(bytes, start) {
            let text = &raw[start..start + candidate];
            if serde_json::from_str::<Value>(text).is_ok() {
                return Some(text.to_string());
            }
        }
        search_from = start + 1;
        attempts += 1;
    }
    None
}

/// Length of a balanced `{...}` starting at `start`, respecting strings and
/// escapes, or None if the braces never close.
fn balanced_object(bytes: &[u8], start: usize) -> Option<usize> {
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, &b) in bytes[start..].iter().enumerate() {
        if in_string {
            if escaped {
                escaped = false;
            } else if b == b'\\' {
                escaped = true;
            } else if b == b'"' {
                in_string = false;
            }
            continue;
        }
        match b {
            b'"' => in_string = true,
            b'{' => depth += 1,
            b'}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(i + 1);
                }
            }
            _ => {}
        }
    }
    None
}

fn required_str(obj: &Value, field: &'static str) -> Result<String, ParseError> {
    obj.get(field)
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or(ParseError::MissingField(field))
}

/// Parses a core-agent response into a [`CoreOp`].
pub fn parse_core(raw: &str) -> Result<CoreOp, ParseError> {
    let text = extract_first_json_object(raw)
        .ok_or_else(|| ParseError::MalformedJson("no JSON object found".into()))?;
    let value: Value =
        serde_json::from_str(&text).map_err(|e| ParseError::MalformedJson(e.to_string()))?;
    let operation = required_str(&value, "operation")?.to_ascii_uppercase();
    match operation.as_str() {
        "APPEND" => Ok(CoreOp::Append {
            content: required_str(&value, "content")?,
        }),
        "REWRITE" => Ok(CoreOp::Rewrite {
            content: required_str(&value, "content")?,
        }),
        "REPLACE" => {
            let old_text = required_str(&value, "old_text")?;
            let new_text = required_str(&value, "new_text")?;
            if old_text.is_empty() {
                return Err(ParseError::MissingField("old_text"));
            }
            Ok(CoreOp::Replace { old_text, new_text })
        }
        other => Err(ParseError::UnknownAction(other.to_string())),
    }
}

/// Parses an entry-agent response into raw operations, rejecting actions
/// outside the memory type's action space.
pub fn parse_entry_ops(raw: &str, mem_type: MemType) -> Result<Vec<RawEntryOp>, ParseError> {
    let text = extract_first_json_object(raw)
        .ok_or_else(|| ParseError::MalformedJson("no JSON object found".into()))?;
    let value: Value =
        serde_json::from_str(&text).map_err(|e| ParseError::MalformedJson(e.to_string()))?;
    let operations = value
        .get("operations")
        .and_then(Value::as_array)
        .ok_or(ParseError::MissingField("operations"))?;
    let mut out = Vec::with_capacity(operations.len());
    for item in operations {
        let action = required_str(item, "action")?.to_ascii_uppercase();
        if !matches!(action.as_str(), "ADD" | "UPDATE" | "MERGE" | "SKIP") {
            return Err(ParseError::UnknownAction(action));
        }
        if !action_allowed(mem_type, &action) {
            return Err(ParseError::IllegalActionForType { action, mem_type });
        }
        let op = match action.as_str() {
            "ADD" => RawEntryOp::Add {
                memory: required_str(item, "memory")?,
            },
            "UPDATE" => RawEntryOp::Update {
                memory: required_str(item, "memory")?,
                old_memory: required_str(item, "old_memory")?,
            },
            "MERGE" => {
                let memory = required_str(item, "memory")?;
                let old_memories: Vec<String> = item
                    .get("old_memories")
                    .and_then(Value::as_array)
                    .map(|arr| {
                        arr.iter()
                            .filter_map(Value::as_str)
                            .map(str::to_string)
                            .collect()
                    })
                    .ok_or(ParseError::MissingField("old_memories"))?;
                if old_memories.len() < 2
                    || item["old_memories"].as_array().map(Vec::len) != Some(old_memories.len())
                {
                    return Err(ParseError::MissingField("old_memories"));
                }
                RawEntryOp::Merge {
                    memory,
                    old_memories,
                }
            }
            "SKIP" => RawEntryOp::Skip {
                reason: required_str(item, "reason")?,
            },
            _ => unreachable!(),
        };
        out.push(op);
    }
    Ok(out)
}

/// Maps each referenced `old_memory` text to an entry id in the section:
/// exact content match first, otherwise the highest-cosine entry at or above
/// `threshold`. Fails when nothing matches.
pub fn resolve_references(
    ops: &[RawEntryOp],
    section: &EntrySection,
    embedder: &dyn Embedder,
    threshold: f64,
) -> Result<Vec<EntryOp>, ResolutionError> {
    let mut resolved = Vec::with_capacity(ops.len());
    for op in ops {
        let out = match op {
            RawEntryOp::Add { memory } => EntryOp::Add {
                content: memory.clone(),
            },
            RawEntryOp::Skip { reason } => EntryOp::Skip {
                reason: reason.clone(),
            },
            RawEntryOp::Update { memory, old_memory } => EntryOp::Update {
                content: memory.clone(),
                target: resolve_one(old_memory, section, embedder, threshold)?,
            },
            RawEntryOp::Merge {
                memory,
                old_memories,
            } => {
                let mut targets: Vec<EntryId> = Vec::new();
                for old in old_memories {
                    let id = resolve_one(old, section, embedder, threshold)?;
                    if !targets.contains(&id) {
                        targets.push(id);
                    }
                }
                if targets.len() < 2 {
                    return Err(ResolutionError::InsufficientMergeTargets);
                }
                EntryOp::Merge {
                    content: memory.clone(),
                    targets,
                }
            }
        };
        resolved.push(out);
    }
    Ok(resolved)
}

fn resolve_one(
    old_memory: &str,
    section: &EntrySection,
    embedder: &dyn Embedder,
    threshold: f64,
) -> Result<EntryId, ResolutionError> {
    if let Some(entry) = section.find_by_content(old_memory) {
        return Ok(entry.id);
    }
    if section.is_empty() {
        return Err(ResolutionError::Unresolved(old_memory.to_string()));
    }
    let mut texts: Vec<String> = vec![old_memory.to_string()];
    texts.extend(section.iter().map(|e| e.content.clone()));
    let vectors = embedder.embed(&texts)?;
    let (query, rest) = vectors.split_first().expect("one vector per text");
    let mut best: Option<(f64, EntryId)> = None;
    for (entry, vector) in section.iter().zip(rest) {
        let score = cosine(query, vector);
        let better = match best {
            None => true,
            Some((s, id)) => score > s || (score == s && entry.id < id),
        };
        if better {
            best = Some((score, entry.id));
        }
    }
    match best {
        Some((score, id)) if score >= threshold => Ok(id),
        _ => Err(ResolutionError::Unresolved(old_memory.to_string())),
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Validity of one agent's output.
#[derive(Debug, Clone, Default)]
pub struct TypeValidity {
    pub valid: bool,
    pub diagnostics: Vec<String>,
}

impl TypeValidity {
    fn ok() -> TypeValidity {
        TypeValidity {
            valid: true,
            diagnostics: Vec::new(),
        }
    }

    fn fail(diagnostic: String) -> TypeValidity {
        TypeValidity {
            valid: false,
            diagnostics: vec![diagnostic],
        }
    }
}

/// How per-agent validity aggregates into the reward gate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GateMode {
    /// One gate bit for the whole rollout: every agent must be valid.
    #[default]
    Rollout,
    /// Each memory type gates on its own agent only.
    PerType,
}

/// Outcome of validating all four agent outputs for one session.
#[derive(Debug, Clone)]
pub struct ValidityReport {
    pub valid: bool,
    pub core: TypeValidity,
    pub episodic: TypeValidity,
    pub semantic: TypeValidity,
    pub procedural: TypeValidity,
}

impl ValidityReport {
    pub fn per_type(&self) -> [(&'static str, &TypeValidity); 4] {
        [
            ("core", &self.core),
            ("episodic", &self.episodic),
            ("semantic", &self.semantic),
            ("procedural", &self.procedural),
        ]
    }

    pub fn for_type(&self, mem_type: MemType) -> &TypeValidity {
        match mem_type {
            MemType::Episodic => &self.episodic,
            MemType::Semantic => &self.semantic,
            MemType::Procedural => &self.procedural,
        }
    }

    /// The gate bit a given memory type's reward sees under `mode`.
    pub fn gate(&self, mode: GateMode, mem_type: Option<MemType>) -> bool {
        match (mode, mem_type) {
            (GateMode::Rollout, _) => self.valid,
            (GateMode::PerType, None) => self.core.valid,
            (GateMode::PerType, Some(t)) => self.for_type(t).valid,
        }
    }
}

/// Fully decoded rollout: the validity report plus whatever operations were
/// recoverable. Invalid agents leave their slots empty.
#[derive(Debug, Clone)]
pub struct DecodedRollout {
    pub report: ValidityReport,
    pub core: Option<CoreOp>,
    pub episodic: Vec<EntryOp>,
    pub semantic: Vec<EntryOp>,
    pub procedural: Vec<EntryOp>,
}

impl DecodedRollout {
    pub fn entry_ops(&self, mem_type: MemType) -> &[EntryOp] {
        match mem_type {
            MemType::Episodic => &self.episodic,
            MemType::Semantic => &self.semantic,
            MemType::Procedural => &self.procedural,
        }
    }
}

/// Runs all four parses plus reference resolution against the bank the
/// agents saw. The rollout is valid iff all four agents are.
pub fn decode_rollout(
    core_raw: &str,
    episodic_raw: &str,
    semantic_raw: &str,
    procedural_raw: &str,
    bank: &MemoryBank,
    embedder: &dyn Embedder,
    threshold: f64,
) -> DecodedRollout {
    let (core_validity, core_op) = match parse_core(core_raw) {
        Ok(op) => {
            // Replace against text absent from the block is an invalid
            // action, same gate as a dangling entry reference.
            if let CoreOp::Replace { old_text, .. } = &op {
                if !bank.core.text.contains(old_text.as_str()) {
                    (
                        TypeValidity::fail(format!(
                            "replace target not found in core text: {old_text:?}"
                        )),
                        None,
                    )
                } else {
                    (TypeValidity::ok(), Some(op))
                }
            } else {
                (TypeValidity::ok(), Some(op))
            }
        }
        Err(e) => (TypeValidity::fail(e.to_string()), None),
    };

    let decode_entries = |raw: &str, mem_type: MemType| -> (TypeValidity, Vec<EntryOp>) {
        let raw_ops = match parse_entry_ops(raw, mem_type) {
            Ok(ops) => ops,
            Err(e) => return (TypeValidity::fail(e.to_string()), Vec::new()),
        };
        match resolve_references(&raw_ops, bank.section(mem_type), embedder, threshold) {
            Ok(ops) => (TypeValidity::ok(), ops),
            Err(e) => (TypeValidity::fail(e.to_string()), Vec::new()),
        }
    };

    let (episodic_validity, episodic) = decode_entries(episodic_raw, MemType::Episodic);
    let (semantic_validity, semantic) = decode_entries(semantic_raw, MemType::Semantic);
    let (procedural_validity, procedural) = decode_entries(procedural_raw, MemType::Procedural);

    let valid = core_validity.valid
        && episodic_validity.valid
        && semantic_validity.valid
        && procedural_validity.valid;
    DecodedRollout {
        report: ValidityReport {
            valid,
            core: core_validity,
            episodic: episodic_validity,
            semantic: semantic_validity,
            procedural: procedural_validity,
        },
        core: core_op,
        episodic,
        semantic,
        procedural,
    }
}

/// Validity of the four raw agent outputs as one report.
pub fn validate_rollout(
    core_raw: &str,
    episodic_raw: &str,
    semantic_raw: &str,
    procedural_raw: &str,
    bank: &MemoryBank,
    embedder: &dyn Embedder,
    threshold: f64,
) -> ValidityReport {
    decode_rollout(
        core_raw,
        episodic_raw,
        semantic_raw,
        procedural_raw,
        bank,
        embedder,
        threshold,
    )
    .report
}

/// Canonical JSON for a core operation, exactly the wire format agents emit.
pub fn core_op_to_json(op: &CoreOp) -> Value {
    match op {
        CoreOp::Append { content } => serde_json::json!({
            "operation": "APPEND",
            "content": content,
        }),
        CoreOp::Replace { old_text, new_text } => serde_json::json!({
            "operation": "REPLACE",
            "old_text": old_text,
            "new_text": new_text,
        }),
        CoreOp::Rewrite { content } => serde_json::json!({
            "operation": "REWRITE",
            "content": content,
        }),
    }
}

/// Canonical JSON for a list of raw entry operations.
pub fn entry_ops_to_json(ops: &[RawEntryOp]) -> Value {
    let operations: Vec<Value> = ops
        .iter()
        .map(|op| match op {
            RawEntryOp::Add { memory } => serde_json::json!({
                "action": "ADD",
                "memory": memory,
            }),
            RawEntryOp::Update { memory, old_memory } => serde_json::json!({
                "action": "UPDATE",
                "old_memory": old_memory,
                "memory": memory,
            }),
            RawEntryOp::Merge {
                memory,
                old_memories,
            } => serde_json::json!({
                "action": "MERGE",
                "old_memories": old_memories,
                "memory": memory,
            }),
            RawEntryOp::Skip { reason } => serde_json::json!({
                "action": "SKIP",
                "reason": reason,
            }),
        })
        .collect();
    serde_json::json!({ "operations": operations })
}
