//! Four-part memory bank: a fixed-capacity core text block plus episodic,
//! semantic, and procedural entry sections.
//!
//! Banks are value types. Every operation returns a fresh bank and leaves the
//! input untouched, so snapshots can be shared across threads freely. Entry
//! sections are append-only: `Update` and `Merge` create new entries that
//! reference their predecessors instead of overwriting them, preserving the
//! full temporal history of each fact.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Default character capacity of the core block.
pub const DEFAULT_CORE_CAPACITY: usize = 5000;

#[derive(Debug, Error)]
pub enum MemoryError {
    #[error("replace target not found in core text: {0:?}")]
    ReplaceTargetNotFound(String),
    #[error("dangling reference: entry {0} does not exist in the {1} section")]
    DanglingReference(EntryId, MemType),
    #[error("illegal action {action} for {mem_type} memory")]
    IllegalAction { action: String, mem_type: MemType },
    #[error("bank io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bank decode: {0}")]
    Decode(String),
}

/// The three retrievable memory types. Core is tracked separately because it
/// is a single always-in-context block, not a set of entries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MemType {
    Episodic,
    Semantic,
    Procedural,
}

impl MemType {
    pub const ALL: [MemType; 3] = [MemType::Episodic, MemType::Semantic, MemType::Procedural];

    pub fn as_str(&self) -> &'static str {
        match self {
            MemType::Episodic => "episodic",
            MemType::Semantic => "semantic",
            MemType::Procedural => "procedural",
        }
    }
}

impl fmt::Display for MemType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Stable entry identity. Assigned from a bank-wide monotone counter and never
/// reused, so references stay valid for the life of the bank.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default,
)]
#[serde(transparent)]
pub struct EntryId(pub u64);

impl fmt::Display for EntryId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "e{}", self.0)
    }
}

/// Calendar coverage of an entry: a single date or a closed date range.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EntryTimestamp {
    Date(NaiveDate),
    Range(NaiveDate, NaiveDate),
}

impl EntryTimestamp {
    pub fn earliest(&self) -> NaiveDate {
        match self {
            EntryTimestamp::Date(d) => *d,
            EntryTimestamp::Range(a, _) => *a,
        }
    }

    pub fn latest(&self) -> NaiveDate {
        match self {
            EntryTimestamp::Date(d) => *d,
            EntryTimestamp::Range(_, b) => *b,
        }
    }

    /// Renders as `YYYY-MM-DD` or `YYYY-MM-DD..YYYY-MM-DD`.
    pub fn render(&self) -> String {
        match self {
            EntryTimestamp::Date(d) => d.format("%Y-%m-%d").to_string(),
            EntryTimestamp::Range(a, b) => {
                format!("{}..{}", a.format("%Y-%m-%d"), b.format("%Y-%m-%d"))
            }
        }
    }

    pub fn parse(s: &str) -> Option<EntryTimestamp> {
        if let Some((a, b)) = s.split_once("..") {
            let a = NaiveDate::parse_from_str(a, "%Y-%m-%d").ok()?;
            let b = NaiveDate::parse_from_str(b, "%Y-%m-%d").ok()?;
            Some(EntryTimestamp::Range(a.min(b), a.max(b)))
        } else {
            NaiveDate::parse_from_str(s, "%Y-%m-%d")
                .ok()
                .map(EntryTimestamp::Date)
        }
    }
}

impl Serialize for EntryTimestamp {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.render())
    }
}

impl<'de> Deserialize<'de> for EntryTimestamp {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        EntryTimestamp::parse(&s)
            .ok_or_else(|| serde::de::Error::custom(format!("bad timestamp {s:?}")))
    }
}

/// How an entry came to exist.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Add,
    Update,
    Merge,
}

/// One retrievable memory unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryEntry {
    pub id: EntryId,
    pub mem_type: MemType,
    pub timestamp: EntryTimestamp,
    pub content: String,
    /// Entries this one updates or merges. Always strictly older than `id`.
    pub refs: Vec<EntryId>,
    pub origin: Origin,
}

/// Fixed-capacity always-in-context profile block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoreBlock {
    pub text: String,
    pub capacity_chars: usize,
}

impl Default for CoreBlock {
    fn default() -> Self {
        CoreBlock {
            text: String::new(),
            capacity_chars: DEFAULT_CORE_CAPACITY,
        }
    }
}

impl CoreBlock {
    /// Character count, the unit the capacity limit is expressed in.
    pub fn len_chars(&self) -> usize {
        self.text.chars().count()
    }

    pub fn over_capacity(&self) -> bool {
        self.len_chars() > self.capacity_chars
    }
}

/// Append-only collection of entries of one memory type.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EntrySection {
    entries: Vec<MemoryEntry>,
}

impl EntrySection {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &MemoryEntry> {
        self.entries.iter()
    }

    pub fn get(&self, id: EntryId) -> Option<&MemoryEntry> {
        // Ids are appended in increasing order, so a binary search works.
        self.entries
            .binary_search_by_key(&id, |e| e.id)
            .ok()
            .map(|i| &self.entries[i])
    }

    pub fn contains(&self, id: EntryId) -> bool {
        self.get(id).is_some()
    }

    pub fn ids(&self) -> impl Iterator<Item = EntryId> + '_ {
        self.entries.iter().map(|e| e.id)
    }

    /// Exact content lookup, used during reference resolution.
    pub fn find_by_content(&self, content: &str) -> Option<&MemoryEntry> {
        self.entries.iter().find(|e| e.content == content)
    }
}

/// Core-block operation, already parsed and validated.
#[derive(Debug, Clone, PartialEq)]
pub enum CoreOp {
    Append { content: String },
    Replace { old_text: String, new_text: String },
    Rewrite { content: String },
}

impl CoreOp {
    pub fn kind(&self) -> &'static str {
        match self {
            CoreOp::Append { .. } => "APPEND",
            CoreOp::Replace { .. } => "REPLACE",
            CoreOp::Rewrite { .. } => "REWRITE",
        }
    }
}

/// Entry-section operation with resolved target ids.
#[derive(Debug, Clone, PartialEq)]
pub enum EntryOp {
    Add { content: String },
    Update { content: String, target: EntryId },
    Merge { content: String, targets: Vec<EntryId> },
    Skip { reason: String },
}

impl EntryOp {
    pub fn kind(&self) -> &'static str {
        match self {
            EntryOp::Add { .. } => "ADD",
            EntryOp::Update { .. } => "UPDATE",
            EntryOp::Merge { .. } => "MERGE",
            EntryOp::Skip { .. } => "SKIP",
        }
    }

    /// Content stored by this op, if any. Skip stores nothing.
    pub fn content(&self) -> Option<&str> {
        match self {
            EntryOp::Add { content }
            | EntryOp::Update { content, .. }
            | EntryOp::Merge { content, .. } => Some(content),
            EntryOp::Skip { .. } => None,
        }
    }
}

/// Returns true when `kind` is in the action space of `mem_type`.
///
/// Episodic: Add/Update/Merge. Semantic: Add/Update/Skip. Procedural: Add/Update.
pub fn action_allowed(mem_type: MemType, kind: &str) -> bool {
    matches!(
        (mem_type, kind),
        (MemType::Episodic, "ADD" | "UPDATE" | "MERGE")
            | (MemType::Semantic, "ADD" | "UPDATE" | "SKIP")
            | (MemType::Procedural, "ADD" | "UPDATE")
    )
}

/// Token counter used for length accounting: the number of maximal
/// whitespace-delimited runs. Deterministic and monotone under concatenation.
pub fn token_count(text: &str) -> usize {
    text.split_whitespace().count()
}

/// The full memory state after some number of ingested sessions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryBank {
    pub core: CoreBlock,
    pub episodic: EntrySection,
    pub semantic: EntrySection,
    pub procedural: EntrySection,
    /// Index of the last ingested session (0 = nothing ingested).
    pub session_cursor: usize,
    next_entry_id: u64,
}

impl Default for MemoryBank {
    fn default() -> Self {
        MemoryBank::new(DEFAULT_CORE_CAPACITY)
    }
}

impl MemoryBank {
    pub fn new(core_capacity_chars: usize) -> Self {
        MemoryBank {
            core: CoreBlock {
                text: String::new(),
                capacity_chars: core_capacity_chars,
            },
            episodic: EntrySection::default(),
            semantic: EntrySection::default(),
            procedural: EntrySection::default(),
            session_cursor: 0,
            next_entry_id: 1,
        }
    }

    pub fn section(&self, mem_type: MemType) -> &EntrySection {
        match mem_type {
            MemType::Episodic => &self.episodic,
            MemType::Semantic => &self.semantic,
            MemType::Procedural => &self.procedural,
        }
    }

    fn section_mut(&mut self, mem_type: MemType) -> &mut EntrySection {
        match mem_type {
            MemType::Episodic => &mut self.episodic,
            MemType::Semantic => &mut self.semantic,
            MemType::Procedural => &mut self.procedural,
        }
    }

    pub fn entry_count(&self) -> usize {
        self.episodic.len() + self.semantic.len() + self.procedural.len()
    }

    pub fn all_entries(&self) -> impl Iterator<Item = &MemoryEntry> {
        self.episodic
            .iter()
            .chain(self.semantic.iter())
            .chain(self.procedural.iter())
    }

    /// Applies one core operation, returning the new bank and the token delta
    /// of the core block (`token_count(new) - token_count(old)`).
    ///
    /// Capacity is deliberately not enforced here; the construction pipeline
    /// runs compression after applying operations.
    pub fn apply_core_op(&self, op: &CoreOp) -> Result<(MemoryBank, i64), MemoryError> {
        let old_tokens = token_count(&self.core.text) as i64;
        let mut next = self.clone();
        match op {
            CoreOp::Append { content } => {
                if next.core.text.is_empty() {
                    next.core.text = content.clone();
                } else {
                    next.core.text.push('\n');
                    next.core.text.push_str(content);
                }
            }
            CoreOp::Replace { old_text, new_text } => {
                match next.core.text.find(old_text.as_str()) {
                    Some(pos) => {
                        next.core
                            .text
                            .replace_range(pos..pos + old_text.len(), new_text);
                    }
                    None => return Err(MemoryError::ReplaceTargetNotFound(old_text.clone())),
                }
            }
            CoreOp::Rewrite { content } => {
                next.core.text = content.clone();
            }
        }
        let delta = token_count(&next.core.text) as i64 - old_tokens;
        Ok((next, delta))
    }

    /// Applies a validated list of entry operations to one section.
    ///
    /// Add appends a fresh entry. Update appends a new entry referencing its
    /// target; the target remains. Merge appends a new entry whose timestamp
    /// spans the targets' dates; the targets remain. Skip is a no-op. Section
    /// cardinality never decreases.
    pub fn apply_entry_ops(
        &self,
        mem_type: MemType,
        ops: &[EntryOp],
        session_date: NaiveDate,
    ) -> Result<MemoryBank, MemoryError> {
        let mut next = self.clone();
        for op in ops {
            if !action_allowed(mem_type, op.kind()) {
                return Err(MemoryError::IllegalAction {
                    action: op.kind().to_string(),
                    mem_type,
                });
            }
            match op {
                EntryOp::Add { content } => {
                    let (timestamp, content) =
                        entry_timestamp(mem_type, content, session_date, None);
                    next.push_entry(mem_type, timestamp, content, Vec::new(), Origin::Add);
                }
                EntryOp::Update { content, target } => {
                    if !next.section(mem_type).contains(*target) {
                        return Err(MemoryError::DanglingReference(*target, mem_type));
                    }
                    let (timestamp, content) =
                        entry_timestamp(mem_type, content, session_date, None);
                    next.push_entry(mem_type, timestamp, content, vec![*target], Origin::Update);
                }
                EntryOp::Merge { content, targets } => {
                    let mut earliest: Option<NaiveDate> = None;
                    let mut latest: Option<NaiveDate> = None;
                    for t in targets {
                        let entry = next
                            .section(mem_type)
                            .get(*t)
                            .ok_or(MemoryError::DanglingReference(*t, mem_type))?;
                        let (a, b) = (entry.timestamp.earliest(), entry.timestamp.latest());
                        earliest = Some(earliest.map_or(a, |e| e.min(a)));
                        latest = Some(latest.map_or(b, |l| l.max(b)));
                    }
                    // Validation guarantees >= 2 targets, but stay defensive.
                    let span = match (earliest, latest) {
                        (Some(a), Some(b)) if a != b => EntryTimestamp::Range(a, b),
                        (Some(a), _) => EntryTimestamp::Date(a),
                        _ => EntryTimestamp::Date(session_date),
                    };
                    let (timestamp, content) =
                        entry_timestamp(mem_type, content, session_date, Some(span));
                    next.push_entry(
                        mem_type,
                        timestamp,
                        content,
                        targets.clone(),
                        Origin::Merge,
                    );
                }
                EntryOp::Skip { .. } => {}
            }
        }
        Ok(next)
    }

    fn push_entry(
        &mut self,
        mem_type: MemType,
        timestamp: EntryTimestamp,
        content: String,
        refs: Vec<EntryId>,
        origin: Origin,
    ) {
        let id = EntryId(self.next_entry_id);
        self.next_entry_id += 1;
        self.section_mut(mem_type).entries.push(MemoryEntry {
            id,
            mem_type,
            timestamp,
            content,
            refs,
            origin,
        });
    }

    pub fn with_session_cursor(mut self, cursor: usize) -> MemoryBank {
        self.session_cursor = cursor;
        self
    }

    /// Checks the structural invariants: unique ids, resolvable refs pointing
    /// strictly backwards, origin/ref-arity agreement, and episodic date
    /// prefixes matching their timestamp fields.
    pub fn check_integrity(&self) -> Result<(), String> {
        let mut seen = BTreeSet::new();
        for entry in self.all_entries() {
            if !seen.insert(entry.id) {
                return Err(format!("duplicate entry id {}", entry.id));
            }
            if entry.id.0 >= self.next_entry_id {
                return Err(format!("entry id {} at or past counter", entry.id));
            }
            let arity_ok = match entry.origin {
                Origin::Add => entry.refs.is_empty(),
                Origin::Update => entry.refs.len() == 1,
                Origin::Merge => entry.refs.len() >= 2,
            };
            if !arity_ok {
                return Err(format!(
                    "entry {} origin {:?} has {} refs",
                    entry.id,
                    entry.origin,
                    entry.refs.len()
                ));
            }
            for r in &entry.refs {
                if *r >= entry.id {
                    return Err(format!("entry {} references non-older {}", entry.id, r));
                }
                if !self.section(entry.mem_type).contains(*r) {
                    return Err(format!("entry {} has dangling ref {}", entry.id, r));
                }
            }
            if entry.mem_type == MemType::Episodic {
                match split_date_prefix(&entry.content) {
                    Some((ts, _)) if ts == entry.timestamp => {}
                    _ => {
                        return Err(format!(
                            "episodic entry {} content prefix disagrees with timestamp {}",
                            entry.id,
                            entry.timestamp.render()
                        ))
                    }
                }
            }
        }
        Ok(())
    }

    /// Writes the bank as a directory: `core.txt`, one JSONL file per entry
    /// section, and `meta.json` with the cursor and id counter.
    pub fn save_dir(&self, dir: &Path) -> Result<(), MemoryError> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("core.txt"), &self.core.text)?;
        for mem_type in MemType::ALL {
            let mut file = fs::File::create(dir.join(format!("{mem_type}.jsonl")))?;
            for entry in self.section(mem_type).iter() {
                let line = serde_json::to_string(entry)
                    .map_err(|e| MemoryError::Decode(e.to_string()))?;
                writeln!(file, "{line}")?;
            }
        }
        let meta = serde_json::json!({
            "session_cursor": self.session_cursor,
            "next_entry_id": self.next_entry_id,
            "core_capacity_chars": self.core.capacity_chars,
        });
        fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta).unwrap())?;
        Ok(())
    }

    pub fn load_dir(dir: &Path) -> Result<MemoryBank, MemoryError> {
        let meta: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.join("meta.json"))?)
                .map_err(|e| MemoryError::Decode(e.to_string()))?;
        let capacity = meta["core_capacity_chars"].as_u64().unwrap_or(DEFAULT_CORE_CAPACITY as u64)
            as usize;
        let mut bank = MemoryBank::new(capacity);
        bank.core.text = fs::read_to_string(dir.join("core.txt"))?;
        bank.session_cursor = meta["session_cursor"].as_u64().unwrap_or(0) as usize;
        bank.next_entry_id = meta["next_entry_id"].as_u64().unwrap_or(1);
        for mem_type in MemType::ALL {
            let file = fs::File::open(dir.join(format!("{mem_type}.jsonl")))?;
            for line in BufReader::new(file).lines() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let entry: MemoryEntry = serde_json::from_str(&line)
                    .map_err(|e| MemoryError::Decode(format!("{mem_type}.jsonl: {e}")))?;
                bank.section_mut(mem_type).entries.push(entry);
            }
        }
        bank.check_integrity().map_err(MemoryError::Decode)?;
        Ok(bank)
    }

    /// SHA-256 over the canonical persisted representation. Equal banks yield
    /// equal digests across runs and platforms.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.core.text.as_bytes());
        hasher.update([0x1f]);
        for mem_type in MemType::ALL {
            for entry in self.section(mem_type).iter() {
                hasher.update(serde_json::to_string(entry).unwrap().as_bytes());
                hasher.update([0x1e]);
            }
            hasher.update([0x1f]);
        }
        hasher.update(self.session_cursor.to_le_bytes());
        format!("{:x}", hasher.finalize())
    }
}

/// Splits a leading `YYYY-MM-DD:` or `YYYY-MM-DD..YYYY-MM-DD:` prefix off an
/// episodic content string.
pub fn split_date_prefix(content: &str) -> Option<(EntryTimestamp, &str)> {
    let colon = content.find(':')?;
    let (head, rest) = content.split_at(colon);
    let ts = EntryTimestamp::parse(head.trim())?;
    Some((ts, rest[1..].trim_start()))
}

/// Derives the stored timestamp and normalized content for a new entry.
///
/// Episodic content must carry a date prefix consistent with the timestamp
/// field, so the prefix is parsed when present and synthesized when absent.
/// Merge entries get the computed target span regardless of what the agent
/// wrote. Semantic and procedural entries use the session date and keep their
/// content untouched.
fn entry_timestamp(
    mem_type: MemType,
    content: &str,
    session_date: NaiveDate,
    merge_span: Option<EntryTimestamp>,
) -> (EntryTimestamp, String) {
    if mem_type != MemType::Episodic {
        return (EntryTimestamp::Date(session_date), content.to_string());
    }
    if let Some(span) = merge_span {
        let body = match split_date_prefix(content) {
            Some((_, rest)) => rest,
            None => content.trim_start(),
        };
        return (span, format!("{}: {}", span.render(), body));
    }
    match split_date_prefix(content) {
        Some((ts, _)) => (ts, content.to_string()),
        None => {
            let ts = EntryTimestamp::Date(session_date);
            (ts, format!("{}: {}", ts.render(), content.trim_start()))
        }
    }
}
