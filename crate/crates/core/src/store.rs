//! Exact-similarity vector index over entry memories.
//!
//! Search is an exhaustive cosine scan — banks here are a few thousand
//! entries at most, and exactness is what the retrieval-count attribution
//! tests demand. Vectors are stored unit-norm so cosine reduces to a dot
//! product; ties break by ascending entry id for deterministic rankings.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{Embedder, GatewayError};
use crate::memory::{EntryId, MemType, MemoryEntry};

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("vector dimension mismatch: store has {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("embedding failed: {0}")]
    Embed(#[from] GatewayError),
    #[error("store io: {0}")]
    Io(#[from] std::io::Error),
    #[error("store decode: {0}")]
    Decode(String),
}

/// One indexed entry: id, type, and its unit-norm embedding.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbeddedEntry {
    pub entry_id: EntryId,
    pub mem_type: MemType,
    pub vector: Vec<f64>,
}

/// Ranked retrieval output. Scores are cosine similarities in `[-1, 1]`,
/// non-increasing, with ties broken by ascending entry id.
#[derive(Debug, Clone)]
pub struct RetrievalResult {
    pub ranked: Vec<(EntryId, MemType, f64)>,
    pub query_text: String,
}

impl RetrievalResult {
    pub fn ids(&self) -> Vec<EntryId> {
        self.ranked.iter().map(|(id, _, _)| *id).collect()
    }

    /// Per-type tallies over the ranked list, the raw attribution signal.
    pub fn counts_by_type(&self) -> std::collections::BTreeMap<MemType, usize> {
        let mut counts = std::collections::BTreeMap::new();
        for (_, mem_type, _) in &self.ranked {
            *counts.entry(*mem_type).or_insert(0) += 1;
        }
        counts
    }
}

/// Brute-force vector index. Cloning yields an isolated view, which is how
/// per-rollout candidate stores stay independent.
#[derive(Debug, Clone, Default)]
pub struct VectorStore {
    items: Vec<EmbeddedEntry>,
}

impl VectorStore {
    pub fn new() -> VectorStore {
        VectorStore::default()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn dimension(&self) -> Option<usize> {
        self.items.first().map(|e| e.vector.len())
    }

    /// Embeds each entry's content and indexes it. Re-upserting an existing
    /// id replaces its vector in place.
    pub fn upsert(
        &mut self,
        entries: &[MemoryEntry],
        embedder: &dyn Embedder,
    ) -> Result<(), StoreError> {
        if entries.is_empty() {
            return Ok(());
        }
        let texts: Vec<String> = entries.iter().map(|e| e.content.clone()).collect();
        let vectors = embedder.embed(&texts)?;
        // Validate the whole batch before touching state so readers never
        // observe a partial upsert.
        let mut staged = Vec::with_capacity(entries.len());
        for (entry, vector) in entries.iter().zip(vectors) {
            let expected = self.dimension().or_else(|| staged.first().map(|e: &EmbeddedEntry| e.vector.len()));
            if let Some(expected) = expected {
                if vector.len() != expected {
                    return Err(StoreError::DimensionMismatch {
                        expected,
                        got: vector.len(),
                    });
                }
            }
            staged.push(EmbeddedEntry {
                entry_id: entry.id,
                mem_type: entry.mem_type,
                vector: normalize(vector),
            });
        }
        for item in staged {
            match self.items.iter_mut().find(|e| e.entry_id == item.entry_id) {
                Some(existing) => *existing = item,
                None => self.items.push(item),
            }
        }
        Ok(())
    }

    /// Top-`k` entries by cosine similarity to the query text, optionally
    /// restricted to a set of memory types. Returns exactly
    /// `min(k, matching population)` results.
    pub fn top_k(
        &self,
        query: &str,
        k: usize,
        type_filter: Option<&BTreeSet<MemType>>,
        embedder: &dyn Embedder,
    ) -> Result<RetrievalResult, StoreError> {
        let mut ranked = Vec::new();
        if self.is_empty() || k == 0 {
            return Ok(RetrievalResult {
                ranked,
                query_text: query.to_string(),
            });
        }
        let query_vec = normalize(embedder.embed(&[query.to_string()])?.remove(0));
        let dim = self.dimension().unwrap_or(0);
        if query_vec.len() != dim {
            return Err(StoreError::DimensionMismatch {
                expected: dim,
                got: query_vec.len(),
            });
        }
        for item in &self.items {
            if let Some(filter) = type_filter {
                if !filter.contains(&item.mem_type) {
                    continue;
                }
            }
            let score: f64 = item.vector.iter().zip(&query_vec).map(|(a, b)| a * b).sum();
            ranked.push((item.entry_id, item.mem_type, score));
        }
        ranked.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)));
        ranked.truncate(k);
        Ok(RetrievalResult {
            ranked,
            query_text: query.to_string(),
        })
    }

    /// Writes `vectors.jsonl`, one embedded entry per line.
    pub fn save(&self, path: &Path) -> Result<(), StoreError> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let mut file = fs::File::create(path)?;
        for item in &self.items {
            let line = serde_json::to_string(item).map_err(|e| StoreError::Decode(e.to_string()))?;
            writeln!(file, "{line}")?;
        }
        Ok(())
    }

    /// Loads `vectors.jsonl`, validating dimension uniformity.
    pub fn load(path: &Path) -> Result<VectorStore, StoreError> {
        let file = fs::File::open(path)?;
        let mut store = VectorStore::new();
        for line in BufReader::new(file).lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let item: EmbeddedEntry =
                serde_json::from_str(&line).map_err(|e| StoreError::Decode(e.to_string()))?;
            if let Some(dim) = store.dimension() {
                if item.vector.len() != dim {
                    return Err(StoreError::DimensionMismatch {
                        expected: dim,
                        got: item.vector.len(),
                    });
                }
            }
            store.items.push(item);
        }
        Ok(store)
    }
}

fn normalize(mut v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 && (norm - 1.0).abs() > 1e-12 {
        for x in &mut v {
            *x /= norm;
        }
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::hash_embedding;
    use crate::memory::{EntryTimestamp, Origin};
    use chrono::NaiveDate;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    struct HashEmbed {
        dim: usize,
    }

    impl Embedder for HashEmbed {
        fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, GatewayError> {
            Ok(texts.iter().map(|t| hash_embedding(0, t, self.dim)).collect())
        }
    }

    fn entry(id: u64, mem_type: MemType, content: &str) -> MemoryEntry {
        MemoryEntry {
            id: EntryId(id),
            mem_type,
            timestamp: EntryTimestamp::Date(
                NaiveDate::parse_from_str("2024-01-01", "%Y-%m-%d").unwrap(),
            ),
            content: content.to_string(),
            refs: Vec::new(),
            origin: Origin::Add,
        }
    }

    #[test]
    fn upsert_then_size() {
        let mut store = VectorStore::new();
        let embed = HashEmbed { dim: 16 };
        store
            .upsert(
                &[
                    entry(1, MemType::Episodic, "a"),
                    entry(2, MemType::Semantic, "b"),
                    entry(3, MemType::Procedural, "c"),
                ],
                &embed,
            )
            .unwrap();
        assert_eq!(store.len(), 3);
    }

    #[test]
    fn upsert_same_id_replaces_vector() {
        let mut store = VectorStore::new();
        let embed = HashEmbed { dim: 16 };
        store.upsert(&[entry(1, MemType::Episodic, "old")], &embed).unwrap();
        let before = store.items[0].vector.clone();
        store.upsert(&[entry(1, MemType::Episodic, "new")], &embed).unwrap();
        assert_eq!(store.len(), 1);
        assert_ne!(store.items[0].vector, before);
    }

    #[test]
    fn upsert_empty_content_is_fine() {
        let mut store = VectorStore::new();
        let embed = HashEmbed { dim: 16 };
        store.upsert(&[entry(1, MemType::Semantic, "")], &embed).unwrap();
        assert_eq!(store.len(), 1);
        let norm: f64 = store.items[0].vector.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-9);
    }

    #[test]
    fn k_exceeding_population_returns_all() {
        let mut store = VectorStore::new();
        let embed = HashEmbed { dim: 16 };
        store.upsert(&[entry(1, MemType::Episodic, "only")], &embed).unwrap();
        let result = store.top_k("query", 10, None, &embed).unwrap();
        assert_eq!(result.ranked.len(), 1);
    }

    #[test]
    fn empty_store_returns_empty() {
        let store = VectorStore::new();
        let embed = HashEmbed { dim: 16 };
        let result = store.top_k("query", 5, None, &embed).unwrap();
        assert!(result.ranked.is_empty());
    }

    #[test]
    fn type_filter_is_sound() {
        let mut store = VectorStore::new();
        let embed = HashEmbed { dim: 16 };
        let entries: Vec<MemoryEntry> = (0..30)
            .map(|i| {
                let t = match i % 3 {
                    0 => MemType::Episodic,
                    1 => MemType::Semantic,
                    _ => MemType::Procedural,
                };
                entry(i + 1, t, &format!("content {i}"))
            })
            .collect();
        store.upsert(&entries, &embed).unwrap();
        let filter: BTreeSet<MemType> = [MemType::Episodic].into();
        let result = store.top_k("content", 20, Some(&filter), &embed).unwrap();
        assert_eq!(result.ranked.len(), 10);
        assert!(result.ranked.iter().all(|(_, t, _)| *t == MemType::Episodic));
    }

    /// Independent oracle: exhaustive cosine scan with its own arithmetic.
    fn brute_force(
        store_items: &[(u64, MemType, Vec<f64>)],
        query: &[f64],
        k: usize,
    ) -> Vec<u64> {
        let mut scored: Vec<(u64, f64)> = store_items
            .iter()
            .map(|(id, _, v)| {
                let mut dot = 0.0;
                for i in 0..v.len() {
                    dot += v[i] * query[i];
                }
                (*id, dot)
            })
            .collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        scored.truncate(k);
        scored.into_iter().map(|(id, _)| id).collect()
    }

    #[test]
    fn matches_brute_force_oracle() {
        let embed = HashEmbed { dim: 24 };
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for case in 0..50 {
            let n = rng.gen_range(1..=50);
            let mut store = VectorStore::new();
            let mut raw = Vec::new();
            for i in 0..n {
                let t = match rng.gen_range(0..3) {
                    0 => MemType::Episodic,
                    1 => MemType::Semantic,
                    _ => MemType::Procedural,
                };
                let content = format!("case{case} item{i} {}", rng.gen::<u32>());
                let e = entry(i as u64 + 1, t, &content);
                raw.push((e.id.0, t, hash_embedding(0, &content, 24)));
                store.upsert(&[e], &embed).unwrap();
            }
            let query = format!("query {}", rng.gen::<u32>());
            let k = rng.gen_range(1..=8);
            let got = store.top_k(&query, k, None, &embed).unwrap().ids();
            let expected = brute_force(&raw, &hash_embedding(0, &query, 24), k);
            assert_eq!(
                got.iter().map(|id| id.0).collect::<Vec<_>>(),
                expected,
                "case {case}"
            );
        }
    }

    #[test]
    fn scores_bounded_and_sorted() {
        let embed = HashEmbed { dim: 16 };
        let mut store = VectorStore::new();
        let entries: Vec<MemoryEntry> =
            (0..20).map(|i| entry(i + 1, MemType::Episodic, &format!("text {i}"))).collect();
        store.upsert(&entries, &embed).unwrap();
        let result = store.top_k("text", 20, None, &embed).unwrap();
        for window in result.ranked.windows(2) {
            assert!(window[0].2 >= window[1].2);
        }
        for (_, _, score) in &result.ranked {
            assert!((-1.0 - 1e-9..=1.0 + 1e-9).contains(score));
        }
    }

    #[test]
    fn dimension_mismatch_detected() {
        struct Ragged;
        impl Embedder for Ragged {
            fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, GatewayError> {
                Ok(texts
                    .iter()
                    .enumerate()
                    .map(|(i, _)| vec![1.0; if i == 0 { 4 } else { 5 }])
                    .collect())
            }
        }
        let mut store = VectorStore::new();
        let err = store
            .upsert(
                &[entry(1, MemType::Episodic, "a"), entry(2, MemType::Episodic, "b")],
                &Ragged,
            )
            .unwrap_err();
        assert!(matches!(err, StoreError::DimensionMismatch { .. }));
        assert_eq!(store.len(), 0, "partial batch must not be visible");
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vectors.jsonl");
        let embed = HashEmbed { dim: 8 };
        let mut store = VectorStore::new();
        store
            .upsert(
                &[entry(1, MemType::Episodic, "a"), entry(2, MemType::Semantic, "b")],
                &embed,
            )
            .unwrap();
        store.save(&path).unwrap();
        let loaded = VectorStore::load(&path).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded.dimension(), Some(8));
        let a = store.top_k("a", 2, None, &embed).unwrap().ids();
        let b = loaded.top_k("a", 2, None, &embed).unwrap().ids();
        assert_eq!(a, b);
    }
}
