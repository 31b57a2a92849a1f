//! Uniform chat-completion and embedding interface.
//!
//! Three backends share one surface: an OpenAI-compatible HTTP client with
//! retry/backoff, a scripted mock that replays queued responses, and a fully
//! deterministic hash mock used by the offline pipeline. Credentials are read
//! from the environment at call time and never stored or logged.

use std::collections::{BTreeMap, VecDeque};
use std::sync::Mutex;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::synthetic;

/// Default embedding dimension for the deterministic mock backend.
pub const DEFAULT_MOCK_EMBED_DIM: usize = 64;

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("transport: {0}")]
    Transport(String),
    #[error("rate limited after {attempts} attempt(s)")]
    RateLimitedExhausted { attempts: u32 },
    #[error("bad status {code}: {detail}")]
    BadStatus { code: u16, detail: String },
    #[error("script exhausted for prompt fingerprint {fingerprint}")]
    ScriptExhausted { fingerprint: String },
    #[error("embedding dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("empty input")]
    EmptyInput,
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("malformed response: {0}")]
    MalformedResponse(String),
}

/// One chat turn: a system prompt plus a single user message.
#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub system_prompt: String,
    pub user_content: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
    /// Sampling seed. Forwarded to HTTP backends and mixed into mock
    /// generation, which is how rollout variants stay distinct.
    pub seed: Option<u64>,
}

impl ChatRequest {
    pub fn new(system_prompt: impl Into<String>, user_content: impl Into<String>) -> Self {
        ChatRequest {
            system_prompt: system_prompt.into(),
            user_content: user_content.into(),
            temperature: 0.0,
            max_output_tokens: 2048,
            seed: None,
        }
    }

    pub fn with_temperature(mut self, t: f64) -> Self {
        self.temperature = t;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }
}

/// Which implementation serves a gateway instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    Http,
    MockScripted,
    #[default]
    MockHash,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GatewayConfig {
    pub base_url: String,
    pub model_name: String,
    /// Name of the environment variable holding the credential. The value is
    /// read per request and never retained.
    pub api_key_env_var: String,
    pub timeout_ms: u64,
    pub max_retries: u32,
    pub backend: Backend,
    /// Embedding dimension produced by the mock backends.
    pub mock_embed_dim: usize,
    /// Seed mixed into all mock generation.
    pub mock_seed: u64,
    /// Advisory cap on concurrent in-flight requests.
    pub in_flight_limit: usize,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        GatewayConfig {
            base_url: "http://localhost:8000/v1".into(),
            model_name: "default-model".into(),
            api_key_env_var: String::new(),
            timeout_ms: 30_000,
            max_retries: 3,
            backend: Backend::MockHash,
            mock_embed_dim: DEFAULT_MOCK_EMBED_DIM,
            mock_seed: 0,
            in_flight_limit: 8,
        }
    }
}

impl GatewayConfig {
    pub fn mock_hash(seed: u64) -> Self {
        GatewayConfig {
            backend: Backend::MockHash,
            mock_seed: seed,
            ..GatewayConfig::default()
        }
    }

    pub fn mock_scripted() -> Self {
        GatewayConfig {
            backend: Backend::MockScripted,
            ..GatewayConfig::default()
        }
    }
}

/// Anything that can turn texts into fixed-dimension vectors.
pub trait Embedder: Sync {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, GatewayError>;
}

/// A configured chat/embedding endpoint.
pub struct Gateway {
    cfg: GatewayConfig,
    http: Option<reqwest::blocking::Client>,
    script: ScriptStore,
}

#[derive(Default)]
struct ScriptStore {
    keyed: Mutex<BTreeMap<String, VecDeque<String>>>,
    queue: Mutex<VecDeque<String>>,
}

/// Short stable fingerprint of a prompt, used to key scripted responses.
pub fn prompt_fingerprint(system_prompt: &str, user_content: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(system_prompt.as_bytes());
    hasher.update([0x1f]);
    hasher.update(user_content.as_bytes());
    let digest = hasher.finalize();
    hex_prefix(&digest, 16)
}

fn hex_prefix(bytes: &[u8], chars: usize) -> String {
    let mut s = String::with_capacity(chars);
    for b in bytes {
        use std::fmt::Write;
        write!(s, "{b:02x}").unwrap();
        if s.len() >= chars {
            break;
        }
    }
    s.truncate(chars);
    s
}

impl Gateway {
    pub fn new(cfg: GatewayConfig) -> Result<Gateway, GatewayError> {
        if cfg.timeout_ms == 0 {
            return Err(GatewayError::InvalidRequest("timeout_ms must be > 0".into()));
        }
        let http = match cfg.backend {
            Backend::Http => Some(
                reqwest::blocking::Client::builder()
                    .timeout(Duration::from_millis(cfg.timeout_ms))
                    .build()
                    .map_err(|e| GatewayError::Transport(e.to_string()))?,
            ),
            _ => None,
        };
        Ok(Gateway {
            cfg,
            http,
            script: ScriptStore::default(),
        })
    }

    pub fn config(&self) -> &GatewayConfig {
        &self.cfg
    }

    /// Queues a scripted response served to any prompt, FIFO.
    pub fn enqueue_response(&self, text: impl Into<String>) {
        self.script.queue.lock().unwrap().push_back(text.into());
    }

    /// Queues a scripted response served only to the prompt with this
    /// fingerprint (see [`prompt_fingerprint`]).
    pub fn enqueue_keyed(&self, fingerprint: impl Into<String>, text: impl Into<String>) {
        self.script
            .keyed
            .lock()
            .unwrap()
            .entry(fingerprint.into())
            .or_default()
            .push_back(text.into());
    }

    pub fn chat(&self, req: &ChatRequest) -> Result<String, GatewayError> {
        if req.user_content.is_empty() {
            return Err(GatewayError::InvalidRequest("user_content is empty".into()));
        }
        match self.cfg.backend {
            Backend::Http => self.chat_http(req),
            Backend::MockScripted => self.chat_scripted(req),
            Backend::MockHash => Ok(synthetic::respond(&self.cfg, req)),
        }
    }

    fn chat_scripted(&self, req: &ChatRequest) -> Result<String, GatewayError> {
        let fingerprint = prompt_fingerprint(&req.system_prompt, &req.user_content);
        if let Some(q) = self.script.keyed.lock().unwrap().get_mut(&fingerprint) {
            if let Some(text) = q.pop_front() {
                return Ok(text);
            }
        }
        self.script
            .queue
            .lock()
            .unwrap()
            .pop_front()
            .ok_or(GatewayError::ScriptExhausted { fingerprint })
    }

    fn chat_http(&self, req: &ChatRequest) -> Result<String, GatewayError> {
        let mut body = serde_json::json!({
            "model": self.cfg.model_name,
            "messages": [
                {"role": "system", "content": req.system_prompt},
                {"role": "user", "content": req.user_content},
            ],
            "temperature": req.temperature,
            "max_tokens": req.max_output_tokens,
        });
        if let Some(seed) = req.seed {
            body["seed"] = serde_json::json!(seed);
        }
        let url = format!("{}/chat/completions", self.cfg.base_url.trim_end_matches('/'));
        let value = self.post_json_with_retry(&url, &body)?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| {
                GatewayError::MalformedResponse("missing choices[0].message.content".into())
            })
    }

    fn embed_http(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, GatewayError> {
        let body = serde_json::json!({
            "model": self.cfg.model_name,
            "input": texts,
        });
        let url = format!("{}/embeddings", self.cfg.base_url.trim_end_matches('/'));
        let value = self.post_json_with_retry(&url, &body)?;
        let data = value["data"]
            .as_array()
            .ok_or_else(|| GatewayError::MalformedResponse("missing data array".into()))?;
        let mut out = vec![Vec::new(); texts.len()];
        for item in data {
            let index = item["index"].as_u64().unwrap_or(u64::MAX) as usize;
            let vector: Vec<f64> = item["embedding"]
                .as_array()
                .ok_or_else(|| GatewayError::MalformedResponse("missing embedding".into()))?
                .iter()
                .filter_map(serde_json::Value::as_f64)
                .collect();
            if index >= out.len() {
                return Err(GatewayError::MalformedResponse("embedding index out of range".into()));
            }
            out[index] = vector;
        }
        let dim = out[0].len();
        for v in &out {
            if v.len() != dim || dim == 0 {
                return Err(GatewayError::DimensionMismatch {
                    expected: dim,
                    got: v.len(),
                });
            }
        }
        Ok(out)
    }

    fn post_json_with_retry(
        &self,
        url: &str,
        body: &serde_json::Value,
    ) -> Result<serde_json::Value, GatewayError> {
        let client = self
            .http
            .as_ref()
            .ok_or_else(|| GatewayError::InvalidRequest("http backend not configured".into()))?;
        let api_key = if self.cfg.api_key_env_var.is_empty() {
            None
        } else {
            std::env::var(&self.cfg.api_key_env_var).ok()
        };
        let mut attempt: u32 = 0;
        loop {
            let mut request = client.post(url).json(body);
            if let Some(key) = &api_key {
                request = request.bearer_auth(key);
            }
            let outcome = request.send();
            let (status, text) = match outcome {
                Ok(resp) => {
                    let status = resp.status().as_u16();
                    let text = resp.text().unwrap_or_default();
                    (status, text)
                }
                Err(e) => {
                    return Err(GatewayError::Transport(redact(&e.to_string(), &api_key)));
                }
            };
            if (200..300).contains(&status) {
                return serde_json::from_str(&text)
                    .map_err(|e| GatewayError::MalformedResponse(e.to_string()));
            }
            let retryable = status == 429 || (500..600).contains(&status);
            if !retryable || attempt >= self.cfg.max_retries {
                if status == 429 {
                    return Err(GatewayError::RateLimitedExhausted {
                        attempts: attempt + 1,
                    });
                }
                let detail = redact(text.trim(), &api_key);
                let detail = detail.chars().take(200).collect();
                return Err(GatewayError::BadStatus {
                    code: status,
                    detail,
                });
            }
            // Exponential backoff from a 250 ms base, with jitter.
            let base = 250u64.saturating_mul(1 << attempt.min(6));
            let jitter = rand::thread_rng().gen_range(0..100);
            std::thread::sleep(Duration::from_millis(base + jitter));
            attempt += 1;
        }
    }
}

impl Embedder for Gateway {
    /// One unit-norm vector per input text. The mock backends derive each
    /// vector from a seeded hash of the text, so identical text always maps
    /// to an identical vector.
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, GatewayError> {
        if texts.is_empty() {
            return Err(GatewayError::EmptyInput);
        }
        match self.cfg.backend {
            Backend::Http => self.embed_http(texts),
            Backend::MockScripted | Backend::MockHash => Ok(texts
                .iter()
                .map(|t| hash_embedding(self.cfg.mock_seed, t, self.cfg.mock_embed_dim))
                .collect()),
        }
    }
}

/// Deterministic pseudo-random unit vector from a seeded hash of the text.
pub fn hash_embedding(seed: u64, text: &str, dim: usize) -> Vec<f64> {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(text.as_bytes());
    let digest = hasher.finalize();
    let mut rng_seed = [0u8; 32];
    rng_seed.copy_from_slice(&digest);
    let mut rng = ChaCha8Rng::from_seed(rng_seed);
    let mut v: Vec<f64> = (0..dim).map(|_| standard_normal(&mut rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in &mut v {
            *x /= norm;
        }
    }
    v
}

/// Box-Muller draw, enough for mock vectors.
fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn redact(text: &str, api_key: &Option<String>) -> String {
    match api_key {
        Some(key) if !key.is_empty() => text.replace(key.as_str(), "[redacted]"),
        _ => text.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{Read, Write};
    use std::net::TcpListener;

    fn cosine(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    /// Minimal HTTP stub answering each connection with the next scripted
    /// (status, body) pair.
    fn spawn_stub(responses: Vec<(u16, String)>) -> String {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        std::thread::spawn(move || {
            for (status, body) in responses {
                let Ok((mut stream, _)) = listener.accept() else {
                    return;
                };
                let mut buf = [0u8; 65536];
                let mut read = 0;
                // Read until the end of headers plus declared body length.
                loop {
                    match stream.read(&mut buf[read..]) {
                        Ok(0) => break,
                        Ok(n) => {
                            read += n;
                            let text = String::from_utf8_lossy(&buf[..read]);
                            if let Some(idx) = text.find("\r\n\r\n") {
                                let content_length = text
                                    .lines()
                                    .find_map(|l| l.to_ascii_lowercase().strip_prefix("content-length:").map(str::trim).map(str::to_string))
                                    .and_then(|v| v.parse::<usize>().ok())
                                    .unwrap_or(0);
                                if read >= idx + 4 + content_length {
                                    break;
                                }
                            }
                        }
                        Err(_) => break,
                    }
                }
                let reason = if status == 200 { "OK" } else { "ERR" };
                let response = format!(
                    "HTTP/1.1 {status} {reason}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                );
                let _ = stream.write_all(response.as_bytes());
            }
        });
        format!("http://{addr}")
    }

    fn chat_ok_body(content: &str) -> String {
        serde_json::json!({"choices": [{"message": {"content": content}}]}).to_string()
    }

    #[test]
    fn scripted_returns_queued_response() {
        let gw = Gateway::new(GatewayConfig::mock_scripted()).unwrap();
        gw.enqueue_response(r#"{"operation":"APPEND","content":"x"}"#);
        let out = gw.chat(&ChatRequest::new("sys", "user")).unwrap();
        assert_eq!(out, r#"{"operation":"APPEND","content":"x"}"#);
        let err = gw.chat(&ChatRequest::new("sys", "user")).unwrap_err();
        assert!(matches!(err, GatewayError::ScriptExhausted { .. }));
    }

    #[test]
    fn scripted_keyed_takes_priority() {
        let gw = Gateway::new(GatewayConfig::mock_scripted()).unwrap();
        let fp = prompt_fingerprint("sys", "user");
        gw.enqueue_response("default");
        gw.enqueue_keyed(fp, "keyed");
        assert_eq!(gw.chat(&ChatRequest::new("sys", "user")).unwrap(), "keyed");
        assert_eq!(gw.chat(&ChatRequest::new("sys", "user")).unwrap(), "default");
    }

    #[test]
    fn http_retries_on_5xx_then_succeeds() {
        let base = spawn_stub(vec![
            (500, "{}".into()),
            (500, "{}".into()),
            (200, chat_ok_body("hello")),
        ]);
        let cfg = GatewayConfig {
            backend: Backend::Http,
            base_url: base,
            max_retries: 2,
            timeout_ms: 5000,
            ..GatewayConfig::default()
        };
        let gw = Gateway::new(cfg).unwrap();
        let out = gw.chat(&ChatRequest::new("s", "u")).unwrap();
        assert_eq!(out, "hello");
    }

    #[test]
    fn http_rate_limit_exhaustion() {
        let base = spawn_stub(vec![(429, "{}".into())]);
        let cfg = GatewayConfig {
            backend: Backend::Http,
            base_url: base,
            max_retries: 0,
            timeout_ms: 5000,
            ..GatewayConfig::default()
        };
        let gw = Gateway::new(cfg).unwrap();
        let err = gw.chat(&ChatRequest::new("s", "u")).unwrap_err();
        assert!(matches!(err, GatewayError::RateLimitedExhausted { attempts: 1 }));
    }

    #[test]
    fn http_non_retryable_status_is_bad_status() {
        let base = spawn_stub(vec![(404, r#"{"error":"nope"}"#.into())]);
        let cfg = GatewayConfig {
            backend: Backend::Http,
            base_url: base,
            max_retries: 3,
            timeout_ms: 5000,
            ..GatewayConfig::default()
        };
        let gw = Gateway::new(cfg).unwrap();
        let err = gw.chat(&ChatRequest::new("s", "u")).unwrap_err();
        match err {
            GatewayError::BadStatus { code, .. } => assert_eq!(code, 404),
            other => panic!("expected BadStatus, got {other:?}"),
        }
    }

    #[test]
    fn credential_never_appears_in_errors() {
        std::env::set_var("MEMBANK_TEST_SECRET", "sk-sentinel-0451");
        let base = spawn_stub(vec![(503, "upstream sk-sentinel-0451 woes".into())]);
        let cfg = GatewayConfig {
            backend: Backend::Http,
            base_url: base,
            api_key_env_var: "MEMBANK_TEST_SECRET".into(),
            max_retries: 0,
            timeout_ms: 5000,
            ..GatewayConfig::default()
        };
        let gw = Gateway::new(cfg).unwrap();
        let err = gw.chat(&ChatRequest::new("s", "u")).unwrap_err();
        let rendered = format!("{err} / {err:?}");
        assert!(!rendered.contains("sk-sentinel-0451"), "leaked: {rendered}");
    }

    #[test]
    fn hash_embedding_is_deterministic_and_unit_norm() {
        let a = hash_embedding(7, "abc", 64);
        let b = hash_embedding(7, "abc", 64);
        assert_eq!(a, b);
        let norm: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-9);
        let c = hash_embedding(8, "abc", 64);
        assert_ne!(a, c);
    }

    #[test]
    fn distinct_strings_are_nearly_orthogonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut max_cos: f64 = 0.0;
        for _ in 0..100 {
            let s1: String = (0..10).map(|_| rng.gen_range(b'a'..=b'z') as char).collect();
            let s2: String = (0..10).map(|_| rng.gen_range(b'a'..=b'z') as char).collect();
            if s1 == s2 {
                continue;
            }
            let v1 = hash_embedding(0, &s1, 64);
            let v2 = hash_embedding(0, &s2, 64);
            max_cos = max_cos.max(cosine(&v1, &v2).abs());
        }
        assert!(max_cos < 0.9, "max cosine {max_cos}");
    }

    #[test]
    fn embed_empty_input_errors() {
        let gw = Gateway::new(GatewayConfig::mock_hash(0)).unwrap();
        assert!(matches!(gw.embed(&[]), Err(GatewayError::EmptyInput)));
    }

    #[test]
    fn embed_empty_string_is_defined() {
        let gw = Gateway::new(GatewayConfig::mock_hash(0)).unwrap();
        let out = gw.embed(&[String::new()]).unwrap();
        assert_eq!(out.len(), 1);
        let norm: f64 = out[0].iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-9);
    }

    #[test]
    fn empty_user_content_rejected() {
        let gw = Gateway::new(GatewayConfig::mock_hash(0)).unwrap();
        let err = gw.chat(&ChatRequest::new("s", "")).unwrap_err();
        assert!(matches!(err, GatewayError::InvalidRequest(_)));
    }
}
