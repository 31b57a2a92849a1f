//! Prompt templates for every model role.
//!
//! Templates are plain text assets: a system part, a `=== USER ===` separator
//! line, and a user part with `{placeholder}` slots. The compiled-in defaults
//! can be overridden by pointing the run config at a directory containing
//! files with the same names.

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::memory::{MemType, MemoryEntry};

/// Section headers shared between templates and the deterministic mock
/// backend, which locates its inputs by these markers.
pub const SEC_CORE: &str = "### Core memory";
pub const SEC_MEMORIES: &str = "### Retrieved memories";
pub const SEC_SESSION: &str = "### Session";
pub const SEC_CONTEXT: &str = "### Memory context";
pub const SEC_QUESTION: &str = "### Question";
pub const SEC_GOLD: &str = "### Gold answer";
pub const SEC_CANDIDATE: &str = "### Candidate answer";

const SEPARATOR: &str = "=== USER ===";

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("prompt asset {0}: {1}")]
    Io(String, std::io::Error),
    #[error("prompt asset {0}: missing '=== USER ===' separator")]
    MissingSeparator(String),
}

#[derive(Debug, Clone)]
pub struct PromptTemplate {
    pub system: String,
    pub user: String,
}

impl PromptTemplate {
    fn parse(name: &str, raw: &str) -> Result<PromptTemplate, PromptError> {
        let Some((system, user)) = raw.split_once(SEPARATOR) else {
            return Err(PromptError::MissingSeparator(name.to_string()));
        };
        Ok(PromptTemplate {
            system: system.trim().to_string(),
            user: user.trim().to_string(),
        })
    }

    /// Substitutes `{key}` slots. Unknown slots are left in place.
    pub fn render(&self, vars: &[(&str, &str)]) -> (String, String) {
        let mut system = self.system.clone();
        let mut user = self.user.clone();
        for (key, value) in vars {
            let slot = format!("{{{key}}}");
            system = system.replace(&slot, value);
            user = user.replace(&slot, value);
        }
        (system, user)
    }
}

/// The full set of role prompts used by the pipeline.
#[derive(Debug, Clone)]
pub struct PromptSet {
    pub core_agent: PromptTemplate,
    pub episodic_agent: PromptTemplate,
    pub semantic_agent: PromptTemplate,
    pub procedural_agent: PromptTemplate,
    pub compression: PromptTemplate,
    pub compression_aggressive: PromptTemplate,
    pub answer: PromptTemplate,
    pub judge: PromptTemplate,
    pub qa_gen: PromptTemplate,
}

const ASSET_NAMES: [&str; 9] = [
    "core_agent",
    "episodic_agent",
    "semantic_agent",
    "procedural_agent",
    "compression",
    "compression_aggressive",
    "answer",
    "judge",
    "qa_gen",
];

impl Default for PromptSet {
    fn default() -> Self {
        PromptSet::embedded()
    }
}

impl PromptSet {
    /// The compiled-in templates.
    pub fn embedded() -> PromptSet {
        let parse = |name: &str, raw: &str| PromptTemplate::parse(name, raw).expect("embedded");
        PromptSet {
            core_agent: parse("core_agent", include_str!("../assets/prompts/core_agent.txt")),
            episodic_agent: parse(
                "episodic_agent",
                include_str!("../assets/prompts/episodic_agent.txt"),
            ),
            semantic_agent: parse(
                "semantic_agent",
                include_str!("../assets/prompts/semantic_agent.txt"),
            ),
            procedural_agent: parse(
                "procedural_agent",
                include_str!("../assets/prompts/procedural_agent.txt"),
            ),
            compression: parse("compression", include_str!("../assets/prompts/compression.txt")),
            compression_aggressive: parse(
                "compression_aggressive",
                include_str!("../assets/prompts/compression_aggressive.txt"),
            ),
            answer: parse("answer", include_str!("../assets/prompts/answer.txt")),
            judge: parse("judge", include_str!("../assets/prompts/judge.txt")),
            qa_gen: parse("qa_gen", include_str!("../assets/prompts/qa_gen.txt")),
        }
    }

    /// Loads `<name>.txt` for every role from a directory.
    pub fn load_dir(dir: &Path) -> Result<PromptSet, PromptError> {
        let mut loaded = Vec::with_capacity(ASSET_NAMES.len());
        for name in ASSET_NAMES {
            let path = dir.join(format!("{name}.txt"));
            let raw = fs::read_to_string(&path)
                .map_err(|e| PromptError::Io(path.display().to_string(), e))?;
            loaded.push(PromptTemplate::parse(name, &raw)?);
        }
        let mut it = loaded.into_iter();
        Ok(PromptSet {
            core_agent: it.next().unwrap(),
            episodic_agent: it.next().unwrap(),
            semantic_agent: it.next().unwrap(),
            procedural_agent: it.next().unwrap(),
            compression: it.next().unwrap(),
            compression_aggressive: it.next().unwrap(),
            answer: it.next().unwrap(),
            judge: it.next().unwrap(),
            qa_gen: it.next().unwrap(),
        })
    }

    pub fn agent_template(&self, role: AgentRole) -> &PromptTemplate {
        match role {
            AgentRole::Core => &self.core_agent,
            AgentRole::Entry(MemType::Episodic) => &self.episodic_agent,
            AgentRole::Entry(MemType::Semantic) => &self.semantic_agent,
            AgentRole::Entry(MemType::Procedural) => &self.procedural_agent,
        }
    }
}

/// The four memory agents sharing one construction-phase gateway.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AgentRole {
    Core,
    Entry(MemType),
}

impl AgentRole {
    pub const ALL: [AgentRole; 4] = [
        AgentRole::Core,
        AgentRole::Entry(MemType::Episodic),
        AgentRole::Entry(MemType::Semantic),
        AgentRole::Entry(MemType::Procedural),
    ];

    pub fn label(&self) -> &'static str {
        match self {
            AgentRole::Core => "core",
            AgentRole::Entry(t) => t.as_str(),
        }
    }
}

/// Renders retrieved entries as the bullet list the templates expect.
pub fn render_memories_block<'a>(entries: impl Iterator<Item = &'a MemoryEntry>) -> String {
    let lines: Vec<String> = entries
        .map(|e| format!("- [{}] {}", e.mem_type, e.content))
        .collect();
    if lines.is_empty() {
        "(none)".to_string()
    } else {
        lines.join("\n")
    }
}

/// Renders the answer-phase context: core text first, then retrieved entries.
pub fn render_answer_context<'a>(
    core_text: &str,
    entries: impl Iterator<Item = &'a MemoryEntry>,
) -> String {
    let core = if core_text.is_empty() { "(empty)" } else { core_text };
    format!(
        "Core profile:\n{core}\n\nRetrieved entries:\n{}",
        render_memories_block(entries)
    )
}
