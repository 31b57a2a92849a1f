//! Deterministic chat responses for the hash-mock backend.
//!
//! The responder recognizes which role a prompt belongs to from the default
//! template wording, parses the data sections out of the user content, and
//! synthesizes a plausible reply with a ChaCha generator seeded from the
//! backend seed, the prompt bytes, and the request seed. Identical inputs
//! always produce identical output, which is what makes the offline pipeline
//! bit-reproducible. Memory agents occasionally emit malformed output on
//! purpose so the validity gate sees real traffic.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::gateway::{ChatRequest, GatewayConfig};
use crate::prompts;

/// Entry point used by the gateway.
pub fn respond(cfg: &GatewayConfig, req: &ChatRequest) -> String {
    let mut rng = seeded_rng(cfg.mock_seed, req);
    let sections = parse_sections(&req.user_content);
    let system = req.system_prompt.to_ascii_lowercase();

    if system.contains("core memory agent") {
        core_agent(&mut rng, &sections)
    } else if system.contains("episodic memory agent") {
        episodic_agent(&mut rng, &sections)
    } else if system.contains("semantic memory agent") {
        semantic_agent(&mut rng, &sections)
    } else if system.contains("procedural memory agent") {
        procedural_agent(&mut rng, &sections)
    } else if system.contains("compress") {
        compressor(&req.system_prompt, &sections, system.contains("aggressive"))
    } else if system.contains("correct or incorrect") {
        judge(&sections)
    } else if system.contains("question-answer pairs") {
        qa_generator(&mut rng, &req.system_prompt, &sections)
    } else if system.contains("memory context") || sections.context.is_some() {
        answerer(&sections)
    } else {
        // Unknown role: echo something harmless but deterministic.
        format!("ack:{}", crate::gateway::prompt_fingerprint(&req.system_prompt, &req.user_content))
    }
}

fn seeded_rng(backend_seed: u64, req: &ChatRequest) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(backend_seed.to_le_bytes());
    hasher.update(req.system_prompt.as_bytes());
    hasher.update([0x1f]);
    hasher.update(req.user_content.as_bytes());
    hasher.update([0x1f]);
    hasher.update(req.seed.unwrap_or(0).to_le_bytes());
    let digest = hasher.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(seed)
}

#[derive(Debug, Default)]
struct Sections {
    core: Option<String>,
    memories: Option<String>,
    session: Option<String>,
    session_date: Option<String>,
    context: Option<String>,
    question: Option<String>,
    gold: Option<String>,
    candidate: Option<String>,
}

fn parse_sections(user: &str) -> Sections {
    let mut sections = Sections::default();
    let mut current: Option<(&str, Vec<&str>)> = None;
    let flush = |sec: &mut Sections, header: &str, body: Vec<&str>| {
        let text = body.join("\n").trim().to_string();
        if header.starts_with(prompts::SEC_CORE) {
            sec.core = Some(text);
        } else if header.starts_with(prompts::SEC_MEMORIES) {
            sec.memories = Some(text);
        } else if header.starts_with(prompts::SEC_SESSION) {
            sec.session = Some(text);
            sec.session_date = header
                .find('(')
                .and_then(|open| header[open + 1..].find(')').map(|close| {
                    header[open + 1..open + 1 + close].trim().to_string()
                }));
        } else if header.starts_with(prompts::SEC_CONTEXT) {
            sec.context = Some(text);
        } else if header.starts_with(prompts::SEC_QUESTION) {
            sec.question = Some(text);
        } else if header.starts_with(prompts::SEC_GOLD) {
            sec.gold = Some(text);
        } else if header.starts_with(prompts::SEC_CANDIDATE) {
            sec.candidate = Some(text);
        }
    };
    for line in user.lines() {
        if line.starts_with("### ") {
            if let Some((header, body)) = current.take() {
                flush(&mut sections, header, body);
            }
            current = Some((line, Vec::new()));
        } else if let Some((_, body)) = current.as_mut() {
            body.push(line);
        }
    }
    if let Some((header, body)) = current.take() {
        flush(&mut sections, header, body);
    }
    sections
}

/// Turns of a rendered session block: `speaker: text` per line.
fn parse_turns(session: &str) -> Vec<(String, String)> {
    session
        .lines()
        .filter_map(|line| {
            let (speaker, text) = line.split_once(':')?;
            let text = text.trim();
            if text.is_empty() {
                None
            } else {
                Some((speaker.trim().to_string(), text.to_string()))
            }
        })
        .collect()
}

/// Retrieved-memory bullet lines: `- [type] content`.
fn parse_memory_lines(memories: &str) -> Vec<(String, String)> {
    memories
        .lines()
        .filter_map(|line| {
            let rest = line.strip_prefix("- [")?;
            let (mem_type, content) = rest.split_once("] ")?;
            Some((mem_type.to_string(), content.to_string()))
        })
        .collect()
}

fn first_words(text: &str, n: usize) -> String {
    text.split_whitespace().take(n).collect::<Vec<_>>().join(" ")
}

fn pick<'a, T, R: Rng>(rng: &mut R, items: &'a [T]) -> Option<&'a T> {
    if items.is_empty() {
        None
    } else {
        Some(&items[rng.gen_range(0..items.len())])
    }
}

fn malformed<R: Rng>(rng: &mut R, p_numerator: u32) -> bool {
    rng.gen_range(0u32..100) < p_numerator
}

const GARBLED: &str = "Sure! Here is the operation I would take: {\"operation\": \"APPEND\" ...";

fn core_agent<R: Rng>(rng: &mut R, sections: &Sections) -> String {
    if malformed(rng, 8) {
        return GARBLED.to_string();
    }
    let date = sections.session_date.clone().unwrap_or_default();
    let turns = sections.session.as_deref().map(parse_turns).unwrap_or_default();
    let core_lines: Vec<&str> = sections
        .core
        .as_deref()
        .unwrap_or("")
        .lines()
        .filter(|l| !l.trim().is_empty() && !l.starts_with("(empty"))
        .collect();
    let snippet = pick(rng, &turns)
        .map(|(speaker, text)| format!("{speaker} {}", first_words(text, rng.gen_range(5..14))))
        .unwrap_or_else(|| "no new information".to_string());

    let roll = rng.gen_range(0u32..100);
    let value = if roll < 20 && !core_lines.is_empty() {
        let old = core_lines[rng.gen_range(0..core_lines.len())];
        serde_json::json!({
            "operation": "REPLACE",
            "old_text": old,
            "new_text": format!("{old} (reviewed {date})"),
        })
    } else if roll < 28 && !core_lines.is_empty() {
        serde_json::json!({
            "operation": "REWRITE",
            "content": format!("{}\nProfile note ({date}): {snippet}", core_lines.join("\n")),
        })
    } else {
        serde_json::json!({
            "operation": "APPEND",
            "content": format!("Profile note ({date}): {snippet}"),
        })
    };
    value.to_string()
}

fn episodic_agent<R: Rng>(rng: &mut R, sections: &Sections) -> String {
    if malformed(rng, 8) {
        return GARBLED.to_string();
    }
    let date = sections.session_date.clone().unwrap_or_else(|| "1970-01-01".into());
    let turns = sections.session.as_deref().map(parse_turns).unwrap_or_default();
    let memories = sections.memories.as_deref().map(parse_memory_lines).unwrap_or_default();
    let episodic: Vec<&(String, String)> =
        memories.iter().filter(|(t, _)| t == "episodic").collect();

    let mut operations = Vec::new();
    let summary = pick(rng, &turns)
        .map(|(_, text)| first_words(text, rng.gen_range(4..9)))
        .unwrap_or_else(|| "quiet session".to_string());
    let details = pick(rng, &turns)
        .map(|(speaker, text)| format!("{speaker} said {}", first_words(text, rng.gen_range(6..16))))
        .unwrap_or_else(|| "nothing further".to_string());
    operations.push(serde_json::json!({
        "action": "ADD",
        "memory": format!("{date}: {summary} | Details: {details}"),
    }));
    if !episodic.is_empty() && rng.gen_range(0u32..100) < 35 {
        let target = episodic[rng.gen_range(0..episodic.len())];
        operations.push(serde_json::json!({
            "action": "UPDATE",
            "old_memory": target.1,
            "memory": format!("{date}: follow-up on earlier event | Details: {details}"),
        }));
    }
    if episodic.len() >= 2 && rng.gen_range(0u32..100) < 12 {
        operations.push(serde_json::json!({
            "action": "MERGE",
            "old_memories": [episodic[0].1, episodic[1].1],
            "memory": format!("related events converged | Details: {summary}"),
        }));
    }
    serde_json::json!({ "operations": operations }).to_string()
}

fn semantic_agent<R: Rng>(rng: &mut R, sections: &Sections) -> String {
    if malformed(rng, 8) {
        return GARBLED.to_string();
    }
    let turns = sections.session.as_deref().map(parse_turns).unwrap_or_default();
    let memories = sections.memories.as_deref().map(parse_memory_lines).unwrap_or_default();
    let semantic: Vec<&(String, String)> =
        memories.iter().filter(|(t, _)| t == "semantic").collect();

    let mut operations = Vec::new();
    if rng.gen_range(0u32..100) < 30 {
        operations.push(serde_json::json!({
            "action": "SKIP",
            "reason": "common knowledge, nothing user-specific",
        }));
    }
    if let Some((speaker, text)) = pick(rng, &turns) {
        let keyword = keyword_of(text);
        operations.push(serde_json::json!({
            "action": "ADD",
            "memory": format!("{speaker} - {keyword}: {}", first_words(text, rng.gen_range(5..14))),
        }));
    }
    if !semantic.is_empty() && rng.gen_range(0u32..100) < 20 {
        let target = semantic[rng.gen_range(0..semantic.len())];
        operations.push(serde_json::json!({
            "action": "UPDATE",
            "old_memory": target.1,
            "memory": format!("{} — confirmed again", target.1),
        }));
    }
    serde_json::json!({ "operations": operations }).to_string()
}

fn procedural_agent<R: Rng>(rng: &mut R, sections: &Sections) -> String {
    if malformed(rng, 5) {
        return GARBLED.to_string();
    }
    let date = sections.session_date.clone().unwrap_or_default();
    let turns = sections.session.as_deref().map(parse_turns).unwrap_or_default();
    let mut operations = Vec::new();
    if let Some((_, text)) = pick(rng, &turns) {
        if rng.gen_range(0u32..100) < 70 {
            let keyword = keyword_of(text);
            let steps = first_words(text, rng.gen_range(4..10));
            operations.push(serde_json::json!({
                "action": "ADD",
                "memory": format!("{keyword} routine | Steps: 1. {steps} 2. review | Context: mentioned {date}"),
            }));
        }
    }
    serde_json::json!({ "operations": operations }).to_string()
}

/// Longest alphanumeric word, a crude stand-in for topic extraction.
fn keyword_of(text: &str) -> String {
    text.split_whitespace()
        .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()))
        .filter(|w| w.len() > 2)
        .max_by_key(|w| w.len())
        .unwrap_or("topic")
        .to_lowercase()
}

fn compressor(system_prompt: &str, sections: &Sections, aggressive: bool) -> String {
    let capacity = system_prompt
        .split("at most ")
        .nth(1)
        .and_then(|rest| rest.split_whitespace().next())
        .and_then(|n| n.parse::<usize>().ok())
        .unwrap_or(crate::memory::DEFAULT_CORE_CAPACITY);
    let text = sections.core.clone().unwrap_or_default();
    let keep = if aggressive { capacity * 2 / 5 } else { capacity * 3 / 5 };
    truncate_chars(&text, keep)
}

fn truncate_chars(text: &str, max_chars: usize) -> String {
    text.chars().take(max_chars).collect()
}

fn answerer(sections: &Sections) -> String {
    let question = sections.question.as_deref().unwrap_or("");
    let context = sections.context.as_deref().unwrap_or("");
    let question_words = word_set(question);
    let mut best: Option<(usize, &str)> = None;
    for line in context.lines() {
        let candidate = line
            .strip_prefix("- [")
            .and_then(|rest| rest.split_once("] ").map(|(_, c)| c))
            .unwrap_or(line.trim());
        if candidate.is_empty() || candidate.starts_with("Core profile")
            || candidate.starts_with("Retrieved entries") || candidate == "(none)" || candidate == "(empty)"
        {
            continue;
        }
        let score = word_set(candidate).intersection(&question_words).count();
        if best.map_or(true, |(s, _)| score > s) {
            best = Some((score, candidate));
        }
    }
    match best {
        Some((score, line)) if score > 0 => line.to_string(),
        _ => "I don't have that information in memory.".to_string(),
    }
}

fn judge(sections: &Sections) -> String {
    let gold = normalize(sections.gold.as_deref().unwrap_or(""));
    let candidate = normalize(sections.candidate.as_deref().unwrap_or(""));
    if gold.is_empty() || candidate.is_empty() {
        return "INCORRECT".to_string();
    }
    if candidate.contains(&gold) || gold.contains(&candidate) {
        return "CORRECT".to_string();
    }
    let gold_words: Vec<&str> = gold.split_whitespace().collect();
    let candidate_words = word_set(&candidate);
    let hit = gold_words.iter().filter(|w| candidate_words.contains(**w)).count();
    if !gold_words.is_empty() && hit * 10 >= gold_words.len() * 6 {
        "CORRECT".to_string()
    } else {
        "INCORRECT".to_string()
    }
}

fn qa_generator<R: Rng>(rng: &mut R, system_prompt: &str, sections: &Sections) -> String {
    if malformed(rng, 6) {
        return "Here are the questions you asked for: 1) ...".to_string();
    }
    let count = system_prompt
        .split("write ")
        .nth(1)
        .and_then(|rest| rest.split_whitespace().next())
        .and_then(|n| n.parse::<usize>().ok())
        .unwrap_or(5);
    let date = sections.session_date.clone().unwrap_or_default();
    let turns = sections.session.as_deref().map(parse_turns).unwrap_or_default();
    let qtypes = ["single_session", "multi_session", "temporal_reasoning"];
    let mut questions = Vec::new();
    for j in 0..count {
        let (speaker, text) = match pick(rng, &turns) {
            Some(t) => t.clone(),
            None => ("user".to_string(), "nothing".to_string()),
        };
        let keyword = keyword_of(&text);
        questions.push(serde_json::json!({
            "question": format!("On {date}, what did {speaker} mention about {keyword}?"),
            "answer": first_words(&text, 12),
            "type": qtypes[j % qtypes.len()],
        }));
    }
    serde_json::json!({ "questions": questions }).to_string()
}

fn normalize(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut last_space = true;
    for c in text.chars() {
        if c.is_alphanumeric() {
            out.extend(c.to_lowercase());
            last_space = false;
        } else if !last_space {
            out.push(' ');
            last_space = true;
        }
    }
    out.trim_end().to_string()
}

fn word_set(text: &str) -> std::collections::BTreeSet<String> {
    normalize(text).split_whitespace().map(str::to_string).collect()
}
