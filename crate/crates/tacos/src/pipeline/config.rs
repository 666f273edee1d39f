//! Run configuration: a single JSON file, optionally patched by
//! `--set key=value` overrides before the typed parse.
//!
//! Deserialization goes through a path-tracking adapter so a bad field
//! is reported by its dotted path, and unknown fields are rejected
//! rather than silently ignored.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::de::{self, Deserializer, Visitor};
use serde::ser::Serializer;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::PipelineError;
use crate::corpus::DatasetFormat;
use crate::normalize::NormalizeConfig;

/// Everything a run needs. `cluster.seed` is mandatory so two operators
/// with the same file get the same subset; nothing falls back to clocks
/// or OS entropy.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub dataset: DatasetConfig,
    pub backend: BackendConfig,
    /// Directory for stage files, response caches, and the manifest.
    pub out_dir: PathBuf,
    pub cluster: ClusterConfig,
    pub select: SelectConfig,
    #[serde(default)]
    pub tagging: TaggingConfig,
    #[serde(default)]
    pub normalize: NormalizeConfig,
    #[serde(default)]
    pub embed: EmbedConfig,
    #[serde(default)]
    pub score: ScoreConfig,
    #[serde(default)]
    pub eval: Option<EvalConfig>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub path: PathBuf,
    #[serde(default = "default_format")]
    pub format: DatasetFormat,
}

fn default_format() -> DatasetFormat {
    DatasetFormat::Jsonl
}

/// Chat backend for tagging, scoring, and judging. The mock variant is
/// fully offline and driven by markers planted in sample text.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BackendConfig {
    Mock {
        #[serde(default)]
        seed: u64,
        #[serde(default)]
        position_bias: i64,
    },
    /// OpenAI-compatible chat completions endpoint. The API key is read
    /// from TACOS_API_KEY at gateway construction, never from the file.
    Http {
        base_url: String,
        tag_model: String,
        score_model: String,
        judge_model: String,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaggingConfig {
    pub max_tag_retries: u32,
}

impl Default for TaggingConfig {
    fn default() -> Self {
        TaggingConfig { max_tag_retries: 2 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedConfig {
    pub dim: usize,
    pub backend: EmbedBackendConfig,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        EmbedConfig {
            dim: 64,
            backend: EmbedBackendConfig::Hash,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EmbedBackendConfig {
    /// Feature-hashing embedder, no network.
    Hash,
    /// OpenAI-compatible embeddings endpoint, cached on disk.
    Http { base_url: String, model: String },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterConfig {
    #[serde(default)]
    pub k: KChoice,
    /// Run seed. Clustering, pair schedules, and any other seeded choice
    /// derive from it.
    pub seed: u64,
}

/// Cluster count: a number, or "auto" for round(sqrt(#tags)).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum KChoice {
    #[default]
    Auto,
    Fixed(usize),
}

impl Serialize for KChoice {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        match self {
            KChoice::Auto => serializer.serialize_str("auto"),
            KChoice::Fixed(k) => serializer.serialize_u64(*k as u64),
        }
    }
}

impl<'de> Deserialize<'de> for KChoice {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct KVisitor;

        impl<'de> Visitor<'de> for KVisitor {
            type Value = KChoice;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                write!(f, "a positive integer or \"auto\"")
            }

            fn visit_u64<E: de::Error>(self, v: u64) -> Result<KChoice, E> {
                if v == 0 {
                    return Err(E::custom("k must be at least 1"));
                }
                Ok(KChoice::Fixed(v as usize))
            }

            fn visit_i64<E: de::Error>(self, v: i64) -> Result<KChoice, E> {
                if v < 1 {
                    return Err(E::custom("k must be at least 1"));
                }
                Ok(KChoice::Fixed(v as usize))
            }

            fn visit_str<E: de::Error>(self, v: &str) -> Result<KChoice, E> {
                if v == "auto" {
                    Ok(KChoice::Auto)
                } else {
                    Err(E::custom(format!(
                        "expected \"auto\" or an integer, got {v:?}"
                    )))
                }
            }
        }

        deserializer.deserialize_any(KVisitor)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoreConfig {
    pub rounds: usize,
    pub round_robin_cap: usize,
    pub rescore_inconsistent: bool,
    pub max_score_retries: u32,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        ScoreConfig {
            rounds: 3,
            round_robin_cap: 8,
            rescore_inconsistent: false,
            max_score_retries: 2,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectConfig {
    pub budget: usize,
}

/// Head-to-head evaluation inputs. Response and reference files are
/// JSONL with `id` and `response`; the instruction file uses the corpus
/// schema.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub responses_a: PathBuf,
    pub responses_b: PathBuf,
    pub instructions: PathBuf,
    #[serde(default = "default_format")]
    pub instructions_format: DatasetFormat,
    #[serde(default)]
    pub references: Option<PathBuf>,
    #[serde(default = "default_judge_retries")]
    pub max_judge_retries: u32,
}

fn default_judge_retries() -> u32 {
    2
}

fn config_err(field: impl Into<String>, message: impl Into<String>) -> PipelineError {
    PipelineError::Config {
        field: field.into(),
        message: message.into(),
    }
}

/// Structural checks beyond what serde enforces. Input paths used by
/// pipeline stages must resolve now, not mid-run.
pub fn validate(cfg: &PipelineConfig) -> Result<(), PipelineError> {
    if !cfg.dataset.path.is_file() {
        return Err(config_err(
            "dataset.path",
            format!("file not found: {}", cfg.dataset.path.display()),
        ));
    }
    if let Some(rules) = &cfg.normalize.rules_path {
        if !rules.is_file() {
            return Err(config_err(
                "normalize.rules_path",
                format!("file not found: {}", rules.display()),
            ));
        }
    }
    if cfg.normalize.min_freq < 1 {
        return Err(config_err("normalize.min_freq", "must be at least 1"));
    }
    if !(0.0..=1.0).contains(&cfg.normalize.assoc_min_confidence) {
        return Err(config_err(
            "normalize.assoc_min_confidence",
            "must lie in [0, 1]",
        ));
    }
    if cfg.embed.dim == 0 {
        return Err(config_err("embed.dim", "must be at least 1"));
    }
    if cfg.score.rounds == 0 {
        return Err(config_err("score.rounds", "must be at least 1"));
    }
    if cfg.score.round_robin_cap < 2 {
        return Err(config_err(
            "score.round_robin_cap",
            "must be at least 2; pairs need two members",
        ));
    }
    match &cfg.backend {
        BackendConfig::Mock { .. } => {}
        BackendConfig::Http {
            base_url,
            tag_model,
            score_model,
            judge_model,
        } => {
            if base_url.trim().is_empty() {
                return Err(config_err("backend.base_url", "must not be empty"));
            }
            for (field, model) in [
                ("backend.tag_model", tag_model),
                ("backend.score_model", score_model),
                ("backend.judge_model", judge_model),
            ] {
                if model.trim().is_empty() {
                    return Err(config_err(field, "must not be empty"));
                }
            }
        }
    }
    if let EmbedBackendConfig::Http { base_url, model } = &cfg.embed.backend {
        if base_url.trim().is_empty() {
            return Err(config_err("embed.backend.base_url", "must not be empty"));
        }
        if model.trim().is_empty() {
            return Err(config_err("embed.backend.model", "must not be empty"));
        }
    }
    Ok(())
}

/// Applies one `key=value` override to the JSON tree. The key is a
/// dotted path; the value is parsed as JSON when possible and kept as a
/// string otherwise, so `budget=50` is a number and `path=data.jsonl`
/// a string.
pub fn apply_override(root: &mut Value, spec: &str) -> Result<(), PipelineError> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| config_err(spec, "override must look like key=value"))?;
    if path.is_empty() || path.split('.').any(str::is_empty) {
        return Err(config_err(path, "override key must be a dotted field path"));
    }
    let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));

    let mut cursor = root;
    let mut parts = path.split('.').peekable();
    while let Some(part) = parts.next() {
        let object = cursor
            .as_object_mut()
            .ok_or_else(|| config_err(path, format!("{part} is not an object")))?;
        if parts.peek().is_none() {
            object.insert(part.to_string(), value);
            return Ok(());
        }
        cursor = object
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("the split yields at least one part");
}

/// Parses a config JSON tree into the typed form, reporting the dotted
/// field path on failure.
pub fn from_value(tree: Value) -> Result<PipelineConfig, PipelineError> {
    let result: Result<PipelineConfig, _> = serde_path_to_error::deserialize(tree);
    result.map_err(|e| {
        let field = e.path().to_string();
        let message = e.into_inner().to_string();
        config_err(field, message)
    })
}

/// Loads the config file, applies `--set` overrides in order, then the
/// `--out` directory override, then parses and validates.
pub fn load_config(
    path: &Path,
    overrides: &[String],
    out_dir: Option<&Path>,
) -> Result<PipelineConfig, PipelineError> {
    let text = std::fs::read_to_string(path).map_err(|source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut tree: Value = serde_json::from_str(&text).map_err(|e| PipelineError::Malformed {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    for spec in overrides {
        apply_override(&mut tree, spec)?;
    }
    if let Some(dir) = out_dir {
        if let Some(object) = tree.as_object_mut() {
            object.insert(
                "out_dir".to_string(),
                Value::String(dir.display().to_string()),
            );
        }
    }
    let cfg = from_value(tree)?;
    validate(&cfg)?;
    Ok(cfg)
}
