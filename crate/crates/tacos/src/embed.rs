//! Tag embeddings: a deterministic offline embedder plus a remote
//! endpoint client.
//!
//! The hashing embedder maps character 3-grams into signed buckets, so
//! related phrases share mass without any model weights. Every embedder
//! returns unit vectors; k-means over Euclidean distance then behaves
//! like cosine similarity.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::PathBuf;
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

/// One embedded tag. `values` always has unit L2 norm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TagVector {
    pub tag: String,
    pub values: Vec<f64>,
}

impl TagVector {
    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("embedding backend: {0}")]
    Backend(String),
    #[error("embedding dimension changed mid-run: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("embedding cache: {0}")]
    Cache(String),
}

/// FNV-1a 64-bit. Stable across platforms and runs, unlike the std
/// hasher.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn l2_normalize(values: &mut [f64]) -> bool {
    let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return false;
    }
    for v in values.iter_mut() {
        *v /= norm;
    }
    true
}

/// Character-3-gram feature hashing into `dim` signed buckets, then unit
/// normalization. Pure function of (tag, dim).
pub fn hash_embed(tag: &str, dim: usize) -> TagVector {
    assert!(dim >= 8, "embedding dim must be at least 8, got {dim}");
    let chars: Vec<char> = tag.chars().collect();
    let mut values = vec![0.0f64; dim];
    let mut bump = |gram: &str| {
        let h = fnv1a(gram.as_bytes());
        let bucket = ((h >> 1) % dim as u64) as usize;
        let sign = if h & 1 == 1 { 1.0 } else { -1.0 };
        values[bucket] += sign;
    };
    if chars.len() < 3 {
        bump(tag);
    } else {
        for window in chars.windows(3) {
            bump(&window.iter().collect::<String>());
        }
    }
    if !l2_normalize(&mut values) {
        // Signs cancelled exactly; park unit mass in a tag-derived bucket
        // so the output is still deterministic and unit-norm.
        values[(fnv1a(tag.as_bytes()) % dim as u64) as usize] = 1.0;
    }
    TagVector {
        tag: tag.to_string(),
        values,
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Anything that turns canonical tags into unit vectors, order preserved.
pub trait TagEmbedder: Send + Sync {
    fn embed(&self, tags: &[String]) -> Result<Vec<TagVector>, EmbedError>;
}

pub struct HashEmbedder {
    pub dim: usize,
}

impl TagEmbedder for HashEmbedder {
    fn embed(&self, tags: &[String]) -> Result<Vec<TagVector>, EmbedError> {
        Ok(tags.iter().map(|t| hash_embed(t, self.dim)).collect())
    }
}

/// One cached embedding, stored as a JSONL line keyed by (model, tag).
#[derive(Debug, Serialize, Deserialize)]
struct EmbedCacheRecord {
    model: String,
    tag: String,
    values: Vec<f64>,
}

struct EmbedCache {
    entries: HashMap<(String, String), Vec<f64>>,
    writer: BufWriter<File>,
}

impl EmbedCache {
    fn open(path: &PathBuf) -> std::io::Result<Self> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mut entries = HashMap::new();
        if path.exists() {
            for line in BufReader::new(File::open(path)?).lines() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                if let Ok(rec) = serde_json::from_str::<EmbedCacheRecord>(&line) {
                    entries.entry((rec.model, rec.tag)).or_insert(rec.values);
                }
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(EmbedCache {
            entries,
            writer: BufWriter::new(file),
        })
    }

    fn insert(&mut self, model: &str, tag: &str, values: &[f64]) -> std::io::Result<()> {
        let key = (model.to_string(), tag.to_string());
        if self.entries.contains_key(&key) {
            return Ok(());
        }
        let rec = EmbedCacheRecord {
            model: model.to_string(),
            tag: tag.to_string(),
            values: values.to_vec(),
        };
        let line = serde_json::to_string(&rec).map_err(std::io::Error::other)?;
        self.writer.write_all(line.as_bytes())?;
        self.writer.write_all(b"\n")?;
        self.writer.flush()?;
        self.entries.insert(key, values.to_vec());
        Ok(())
    }
}

/// Client for an OpenAI-compatible embeddings endpoint. Batches requests
/// and caches responses on disk so warm reruns make no network calls.
pub struct RemoteEmbedder {
    base_url: String,
    model: String,
    api_key: Option<String>,
    batch_size: usize,
    cache: Option<Mutex<EmbedCache>>,
    client: reqwest::blocking::Client,
}

#[derive(Deserialize)]
struct EmbeddingsBody {
    data: Vec<EmbeddingRow>,
}

#[derive(Deserialize)]
struct EmbeddingRow {
    index: usize,
    embedding: Vec<f64>,
}

impl RemoteEmbedder {
    pub fn new(
        base_url: impl Into<String>,
        model: impl Into<String>,
        api_key: Option<String>,
        cache_path: Option<PathBuf>,
    ) -> Result<Self, EmbedError> {
        let cache = match cache_path {
            Some(path) => Some(Mutex::new(
                EmbedCache::open(&path).map_err(|e| EmbedError::Cache(e.to_string()))?,
            )),
            None => None,
        };
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(120))
            .build()
            .map_err(|e| EmbedError::Backend(e.to_string()))?;
        Ok(RemoteEmbedder {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            model: model.into(),
            api_key,
            batch_size: 128,
            cache,
            client,
        })
    }

    fn fetch_batch(&self, tags: &[String]) -> Result<Vec<Vec<f64>>, EmbedError> {
        let url = format!("{}/embeddings", self.base_url);
        let body = json!({ "model": self.model, "input": tags });
        let mut builder = self.client.post(&url).json(&body);
        if let Some(key) = &self.api_key {
            builder = builder.bearer_auth(key);
        }
        let response = builder.send().map_err(|e| EmbedError::Backend(e.to_string()))?;
        let status = response.status();
        let text = response.text().map_err(|e| EmbedError::Backend(e.to_string()))?;
        if !status.is_success() {
            return Err(EmbedError::Backend(format!("HTTP {status}: {}", text.trim())));
        }
        let mut parsed: EmbeddingsBody =
            serde_json::from_str(&text).map_err(|e| EmbedError::Backend(format!("embeddings body: {e}")))?;
        if parsed.data.len() != tags.len() {
            return Err(EmbedError::Backend(format!(
                "expected {} embeddings, got {}",
                tags.len(),
                parsed.data.len()
            )));
        }
        parsed.data.sort_by_key(|row| row.index);
        Ok(parsed.data.into_iter().map(|row| row.embedding).collect())
    }
}

impl TagEmbedder for RemoteEmbedder {
    fn embed(&self, tags: &[String]) -> Result<Vec<TagVector>, EmbedError> {
        let mut out: Vec<Option<Vec<f64>>> = vec![None; tags.len()];
        let mut missing: Vec<usize> = Vec::new();
        if let Some(cache) = &self.cache {
            let guard = cache.lock().expect("embed cache lock");
            for (i, tag) in tags.iter().enumerate() {
                match guard.entries.get(&(self.model.clone(), tag.clone())) {
                    Some(values) => out[i] = Some(values.clone()),
                    None => missing.push(i),
                }
            }
        } else {
            missing = (0..tags.len()).collect();
        }

        for chunk in missing.chunks(self.batch_size.max(1)) {
            let batch: Vec<String> = chunk.iter().map(|&i| tags[i].clone()).collect();
            let fetched = self.fetch_batch(&batch)?;
            for (&i, mut values) in chunk.iter().zip(fetched) {
                if !l2_normalize(&mut values) {
                    return Err(EmbedError::Backend(format!("zero vector for tag {:?}", tags[i])));
                }
                if let Some(cache) = &self.cache {
                    cache
                        .lock()
                        .expect("embed cache lock")
                        .insert(&self.model, &tags[i], &values)
                        .map_err(|e| EmbedError::Cache(e.to_string()))?;
                }
                out[i] = Some(values);
            }
        }

        let mut dim: Option<usize> = None;
        let mut vectors = Vec::with_capacity(tags.len());
        for (tag, values) in tags.iter().zip(out) {
            let values = values.expect("all slots filled");
            match dim {
                None => dim = Some(values.len()),
                Some(d) if d != values.len() => {
                    return Err(EmbedError::DimensionMismatch {
                        expected: d,
                        got: values.len(),
                    })
                }
                _ => {}
            }
            vectors.push(TagVector {
                tag: tag.clone(),
                values,
            });
        }
        Ok(vectors)
    }
}
