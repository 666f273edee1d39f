//! Stage orchestration: runs the tag, normalize, embed, cluster, score,
//! select, and eval stages against a shared output directory, with a
//! manifest recording digests and timings for provenance.
//!
//! Stages communicate through files, never memory, so any stage can be
//! re-run alone once its inputs exist. All LLM traffic goes through one
//! disk-caching gateway per run; with warm caches a full re-run touches
//! no backend at all.

pub mod config;

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::cluster::{self, Assignment, ClusterError, ClusterProfile, Clustering};
use crate::corpus::{load_dataset, CorpusError, Dataset};
use crate::embed::{EmbedError, HashEmbedder, RemoteEmbedder, TagEmbedder, TagVector};
use crate::eval::{evaluate, load_responses, EvalError, EvalReport, JudgeOptions};
use crate::gateway::{
    planted_mock, ChatBackend, Gateway, GatewayConfig, GatewayError, HttpBackend, Purpose,
};
use crate::normalize::{normalize_all, NormalizeError, TagVocabulary};
use crate::score::{score_clusters, AggScore, ScoreError, ScoringOptions};
use crate::select::{
    export_subset, select_subset, selection_stats, ScoreStats, SelectError, SelectionResult,
};
use crate::tagging::{tag_dataset, TagAnnotation, TaggingOptions};

pub use config::{
    load_config, validate, BackendConfig, ClusterConfig, DatasetConfig, EmbedBackendConfig,
    EmbedConfig, EvalConfig, KChoice, PipelineConfig, ScoreConfig, SelectConfig, TaggingConfig,
};

/// Fixed stage filenames under the output directory.
pub mod files {
    pub const TAGS: &str = "tags.jsonl";
    pub const VOCAB: &str = "vocab.json";
    pub const MERGES: &str = "merges.json";
    pub const NORMALIZED_TAGS: &str = "tags.normalized.jsonl";
    pub const VECTORS: &str = "vectors.json";
    pub const CLUSTERS: &str = "clusters.json";
    pub const SCORES: &str = "scores.jsonl";
    pub const AGG_SCORES: &str = "agg_scores.json";
    pub const SELECTED: &str = "selected.jsonl";
    pub const SELECTION_REPORT: &str = "selection_report.json";
    pub const EVAL_REPORT: &str = "eval_report.json";
    pub const MANIFEST: &str = "manifest.json";
    pub const CACHE_DIR: &str = "cache";
    pub const EMBED_CACHE: &str = "embeddings.cache.jsonl";
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Tag,
    Normalize,
    Embed,
    Cluster,
    Score,
    Select,
    Eval,
}

impl Stage {
    /// The full pipeline in dependency order. Eval is not part of a
    /// `run`; it judges externally produced responses.
    pub const PIPELINE: [Stage; 6] = [
        Stage::Tag,
        Stage::Normalize,
        Stage::Embed,
        Stage::Cluster,
        Stage::Score,
        Stage::Select,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Tag => "tag",
            Stage::Normalize => "normalize",
            Stage::Embed => "embed",
            Stage::Cluster => "cluster",
            Stage::Score => "score",
            Stage::Select => "select",
            Stage::Eval => "eval",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self, PipelineError> {
        match s {
            "tag" => Ok(Stage::Tag),
            "normalize" => Ok(Stage::Normalize),
            "embed" => Ok(Stage::Embed),
            "cluster" => Ok(Stage::Cluster),
            "score" => Ok(Stage::Score),
            "select" => Ok(Stage::Select),
            "eval" => Ok(Stage::Eval),
            other => Err(PipelineError::UnknownStage {
                name: other.to_string(),
            }),
        }
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config field {field}: {message}")]
    Config { field: String, message: String },
    #[error("stage {stage} requires {file}; run the earlier stages first")]
    MissingInput { stage: &'static str, file: String },
    #[error("unknown stage {name:?}; expected tag, normalize, embed, cluster, score, select, eval, or run")]
    UnknownStage { name: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Malformed { path: String, message: String },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Normalize(#[from] NormalizeError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error(transparent)]
    Select(#[from] SelectError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

impl PipelineError {
    fn kind(&self) -> &'static str {
        match self {
            PipelineError::Config { .. } => "config",
            PipelineError::MissingInput { .. } => "missing_input",
            PipelineError::UnknownStage { .. } => "usage",
            PipelineError::Io { .. } => "io",
            PipelineError::Malformed { .. } => "malformed",
            PipelineError::Corpus(_) => "corpus",
            PipelineError::Gateway(_) => "gateway",
            PipelineError::Normalize(_) => "normalize",
            PipelineError::Embed(_) => "embed",
            PipelineError::Cluster(_) => "cluster",
            PipelineError::Score(_) => "score",
            PipelineError::Select(_) => "select",
            PipelineError::Eval(_) => "eval",
        }
    }

    /// One-line JSON for stderr, so callers can parse failures without
    /// scraping prose.
    pub fn to_json(&self) -> String {
        let mut body = serde_json::json!({
            "error": self.kind(),
            "message": self.to_string(),
        });
        match self {
            PipelineError::Config { field, .. } => body["field"] = field.as_str().into(),
            PipelineError::MissingInput { stage, file } => {
                body["stage"] = (*stage).into();
                body["file"] = file.as_str().into();
            }
            _ => {}
        }
        body.to_string()
    }
}

/// Provenance record for one run directory. Digests are sha256 of the
/// files a stage read and wrote, captured when the stage finishes and
/// persisted before any later stage starts.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub config: serde_json::Value,
    pub stages: BTreeMap<String, StageRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageRecord {
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub duration_ms: u64,
}

/// What one stage did, for operator output.
#[derive(Debug, Clone, Serialize)]
pub struct StageOutcome {
    pub stage: &'static str,
    pub outputs: BTreeMap<String, String>,
    pub duration_ms: u64,
    pub notes: Vec<String>,
}

/// Counters a full run prints at the end.
#[derive(Debug, Clone, Default, Serialize)]
pub struct RunSummary {
    pub samples: usize,
    pub raw_tags: usize,
    pub canonical_tags: usize,
    pub clusters: usize,
    pub untagged_samples: usize,
    pub pairs_scored: usize,
    pub unscorable_pairs: usize,
    pub selected: usize,
    pub budget: usize,
    pub warnings: Vec<String>,
}

impl RunSummary {
    /// Share of distinct raw tags eliminated by normalization.
    pub fn tag_reduction(&self) -> f64 {
        if self.raw_tags == 0 {
            0.0
        } else {
            1.0 - self.canonical_tags as f64 / self.raw_tags as f64
        }
    }
}

impl fmt::Display for RunSummary {
    fn fmt(&self, f: &mut fmt::Formatter) -> fmt::Result {
        writeln!(f, "samples: {}", self.samples)?;
        writeln!(
            f,
            "tags: {} raw -> {} canonical ({:.1}% reduction)",
            self.raw_tags,
            self.canonical_tags,
            100.0 * self.tag_reduction()
        )?;
        writeln!(
            f,
            "clusters: {} ({} samples untagged)",
            self.clusters, self.untagged_samples
        )?;
        writeln!(
            f,
            "pairs scored: {} ({} unscorable)",
            self.pairs_scored, self.unscorable_pairs
        )?;
        writeln!(f, "selected: {} of budget {}", self.selected, self.budget)?;
        for w in &self.warnings {
            writeln!(f, "warning: {w}")?;
        }
        Ok(())
    }
}

enum StageStats {
    Tag {
        samples: usize,
        distinct_raw: usize,
        parse_failures: usize,
    },
    Normalize {
        raw: usize,
        canonical: usize,
        retained: usize,
        samples: usize,
        warnings: Vec<String>,
    },
    Embed {
        tags: usize,
        dim: usize,
    },
    Cluster {
        k: usize,
        tags: usize,
        untagged: usize,
    },
    Score {
        pairs: usize,
        unscorable: usize,
    },
    Select {
        selected: usize,
        budget: usize,
        warnings: Vec<String>,
    },
    Eval {
        judged: usize,
        win_rate: f64,
        excluded: usize,
    },
}

impl StageStats {
    fn notes(&self) -> Vec<String> {
        match self {
            StageStats::Tag {
                samples,
                distinct_raw,
                parse_failures,
            } => vec![format!(
                "tagged {samples} samples, {distinct_raw} distinct raw tags, {parse_failures} parse failures"
            )],
            StageStats::Normalize {
                raw,
                canonical,
                retained,
                samples,
                warnings,
            } => {
                let reduction = if *raw == 0 {
                    0.0
                } else {
                    100.0 * (1.0 - *canonical as f64 / *raw as f64)
                };
                let mut notes = vec![format!(
                    "{raw} raw tags -> {canonical} canonical ({reduction:.1}% reduction), {retained}/{samples} samples retain a tag"
                )];
                notes.extend(warnings.iter().cloned());
                notes
            }
            StageStats::Embed { tags, dim } => {
                vec![format!("embedded {tags} tags at dim {dim}")]
            }
            StageStats::Cluster { k, tags, untagged } => vec![format!(
                "k={k} clusters over {tags} tags, {untagged} samples untagged"
            )],
            StageStats::Score { pairs, unscorable } => {
                vec![format!("scored {pairs} pairs ({unscorable} unscorable)")]
            }
            StageStats::Select {
                selected,
                budget,
                warnings,
            } => {
                let mut notes = vec![format!("selected {selected} of budget {budget}")];
                notes.extend(warnings.iter().cloned());
                notes
            }
            StageStats::Eval {
                judged,
                win_rate,
                excluded,
            } => vec![format!(
                "judged {judged} instructions, win rate {win_rate:.3}, {excluded} unjudgeable"
            )],
        }
    }
}

/// Serialized form of clusters.json: the clustering plus per-cluster
/// profiles.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClustersFile {
    #[serde(flatten)]
    pub clustering: Clustering,
    pub profiles: Vec<ClusterProfile>,
}

/// Serialized form of selection_report.json.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectionReportFile {
    #[serde(flatten)]
    pub result: SelectionResult,
    pub stats: ScoreStats,
    pub warnings: Vec<String>,
}

fn sha256_file(path: &Path) -> Result<String, PipelineError> {
    let bytes = std::fs::read(path).map_err(|source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

/// One configured run rooted at an output directory. Construction
/// validates the config, creates the directory, and opens the response
/// caches; stages then run in any order their inputs allow.
pub struct Pipeline {
    cfg: PipelineConfig,
    gateway: Gateway,
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig) -> Result<Self, PipelineError> {
        let backend: Box<dyn ChatBackend> = match &cfg.backend {
            BackendConfig::Mock {
                seed,
                position_bias,
            } => Box::new(planted_mock(*seed, *position_bias)),
            BackendConfig::Http { base_url, .. } => Box::new(
                HttpBackend::new(base_url.clone(), std::env::var("TACOS_API_KEY").ok())
                    .map_err(|e| GatewayError::Config(e.to_string()))?,
            ),
        };
        Self::with_backend(cfg, backend)
    }

    /// Same as `new` but with a caller-supplied chat backend. Lets tests
    /// prove cache replay by injecting a backend that panics on contact.
    pub fn with_backend(
        cfg: PipelineConfig,
        backend: Box<dyn ChatBackend>,
    ) -> Result<Self, PipelineError> {
        validate(&cfg)?;
        std::fs::create_dir_all(&cfg.out_dir).map_err(|source| PipelineError::Io {
            path: cfg.out_dir.display().to_string(),
            source,
        })?;
        let cache_dir = cfg.out_dir.join(files::CACHE_DIR);
        let gateway = Gateway::new(backend, Some(cache_dir), GatewayConfig::default())?;
        Ok(Pipeline { cfg, gateway })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn gateway(&self) -> &Gateway {
        &self.gateway
    }

    fn path(&self, name: &str) -> PathBuf {
        self.cfg.out_dir.join(name)
    }

    fn require(&self, stage: Stage, name: &str) -> Result<PathBuf, PipelineError> {
        let path = self.path(name);
        if path.is_file() {
            Ok(path)
        } else {
            Err(PipelineError::MissingInput {
                stage: stage.name(),
                file: name.to_string(),
            })
        }
    }

    fn model_for(&self, purpose: Purpose) -> String {
        match &self.cfg.backend {
            BackendConfig::Mock { .. } => "mock".to_string(),
            BackendConfig::Http {
                tag_model,
                score_model,
                judge_model,
                ..
            } => match purpose {
                Purpose::Tagging => tag_model.clone(),
                Purpose::Scoring => score_model.clone(),
                Purpose::Judging => judge_model.clone(),
            },
        }
    }

    fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<(), PipelineError> {
        let path = self.path(name);
        let mut text = serde_json::to_string_pretty(value).expect("stage output serializes");
        text.push('\n');
        std::fs::write(&path, text).map_err(|source| PipelineError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    fn write_jsonl<T: Serialize>(&self, name: &str, items: &[T]) -> Result<(), PipelineError> {
        let path = self.path(name);
        let mut text = String::new();
        for item in items {
            text.push_str(&serde_json::to_string(item).expect("stage output serializes"));
            text.push('\n');
        }
        std::fs::write(&path, text).map_err(|source| PipelineError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    fn read_json<T: DeserializeOwned>(&self, stage: Stage, name: &str) -> Result<T, PipelineError> {
        let path = self.require(stage, name)?;
        let text = std::fs::read_to_string(&path).map_err(|source| PipelineError::Io {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| PipelineError::Malformed {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    fn read_jsonl<T: DeserializeOwned>(
        &self,
        stage: Stage,
        name: &str,
    ) -> Result<Vec<T>, PipelineError> {
        let path = self.require(stage, name)?;
        let text = std::fs::read_to_string(&path).map_err(|source| PipelineError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut items = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            items.push(
                serde_json::from_str(line).map_err(|e| PipelineError::Malformed {
                    path: path.display().to_string(),
                    message: format!("line {}: {e}", i + 1),
                })?,
            );
        }
        Ok(items)
    }

    fn load_input_dataset(&self) -> Result<Dataset, PipelineError> {
        Ok(load_dataset(&self.cfg.dataset.path, self.cfg.dataset.format)?)
    }

    /// Runs one stage: checks inputs, writes outputs, then records the
    /// stage in the manifest before returning.
    pub fn run_stage(&self, stage: Stage) -> Result<StageOutcome, PipelineError> {
        self.run_stage_inner(stage).map(|(outcome, _)| outcome)
    }

    fn run_stage_inner(&self, stage: Stage) -> Result<(StageOutcome, StageStats), PipelineError> {
        let started = Instant::now();
        let stats = match stage {
            Stage::Tag => self.stage_tag()?,
            Stage::Normalize => self.stage_normalize()?,
            Stage::Embed => self.stage_embed()?,
            Stage::Cluster => self.stage_cluster()?,
            Stage::Score => self.stage_score()?,
            Stage::Select => self.stage_select()?,
            Stage::Eval => self.stage_eval()?,
        };
        let duration_ms = started.elapsed().as_millis() as u64;

        let (inputs, outputs) = self.stage_io(stage);
        let mut record = StageRecord {
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            duration_ms,
        };
        for path in inputs {
            if path.is_file() {
                record
                    .inputs
                    .insert(path.display().to_string(), sha256_file(&path)?);
            }
        }
        for name in &outputs {
            record
                .outputs
                .insert(name.to_string(), sha256_file(&self.path(name))?);
        }

        let mut manifest = self.load_manifest()?;
        manifest.version = env!("CARGO_PKG_VERSION").to_string();
        manifest.config = serde_json::to_value(&self.cfg).expect("config serializes");
        manifest.stages.insert(stage.name().to_string(), record.clone());
        self.write_json(files::MANIFEST, &manifest)?;

        let outcome = StageOutcome {
            stage: stage.name(),
            outputs: record.outputs,
            duration_ms,
            notes: stats.notes(),
        };
        Ok((outcome, stats))
    }

    /// Runs tag through select in order, stopping at the first failure.
    /// The manifest keeps whatever stages completed.
    pub fn run_all(&self) -> Result<(RunSummary, Vec<StageOutcome>), PipelineError> {
        let mut summary = RunSummary::default();
        let mut outcomes = Vec::new();
        for stage in Stage::PIPELINE {
            let (outcome, stats) = self.run_stage_inner(stage)?;
            match stats {
                StageStats::Tag { samples, .. } => summary.samples = samples,
                StageStats::Normalize {
                    raw,
                    canonical,
                    ref warnings,
                    ..
                } => {
                    summary.raw_tags = raw;
                    summary.canonical_tags = canonical;
                    summary.warnings.extend(warnings.iter().cloned());
                }
                StageStats::Embed { .. } => {}
                StageStats::Cluster { k, untagged, .. } => {
                    summary.clusters = k;
                    summary.untagged_samples = untagged;
                }
                StageStats::Score { pairs, unscorable } => {
                    summary.pairs_scored = pairs;
                    summary.unscorable_pairs = unscorable;
                }
                StageStats::Select {
                    selected,
                    budget,
                    ref warnings,
                } => {
                    summary.selected = selected;
                    summary.budget = budget;
                    summary.warnings.extend(warnings.iter().cloned());
                }
                StageStats::Eval { .. } => unreachable!("eval is not part of a run"),
            }
            outcomes.push(outcome);
        }
        Ok((summary, outcomes))
    }

    /// Input paths and output filenames per stage, for manifest digests.
    fn stage_io(&self, stage: Stage) -> (Vec<PathBuf>, Vec<&'static str>) {
        let dataset = self.cfg.dataset.path.clone();
        match stage {
            Stage::Tag => (vec![dataset], vec![files::TAGS]),
            Stage::Normalize => {
                let mut inputs = vec![self.path(files::TAGS)];
                if let Some(rules) = &self.cfg.normalize.rules_path {
                    inputs.push(rules.clone());
                }
                (
                    inputs,
                    vec![files::NORMALIZED_TAGS, files::VOCAB, files::MERGES],
                )
            }
            Stage::Embed => (vec![self.path(files::VOCAB)], vec![files::VECTORS]),
            Stage::Cluster => (
                vec![
                    self.path(files::VECTORS),
                    self.path(files::NORMALIZED_TAGS),
                    dataset,
                ],
                vec![files::CLUSTERS],
            ),
            Stage::Score => (
                vec![self.path(files::CLUSTERS), dataset],
                vec![files::SCORES, files::AGG_SCORES],
            ),
            Stage::Select => (
                vec![
                    self.path(files::SCORES),
                    self.path(files::AGG_SCORES),
                    self.path(files::CLUSTERS),
                    dataset,
                ],
                vec![files::SELECTED, files::SELECTION_REPORT],
            ),
            Stage::Eval => {
                let mut inputs = Vec::new();
                if let Some(ev) = &self.cfg.eval {
                    inputs.push(ev.responses_a.clone());
                    inputs.push(ev.responses_b.clone());
                    inputs.push(ev.instructions.clone());
                    if let Some(r) = &ev.references {
                        inputs.push(r.clone());
                    }
                }
                (inputs, vec![files::EVAL_REPORT])
            }
        }
    }

    fn load_manifest(&self) -> Result<RunManifest, PipelineError> {
        let path = self.path(files::MANIFEST);
        if !path.is_file() {
            return Ok(RunManifest::default());
        }
        let text = std::fs::read_to_string(&path).map_err(|source| PipelineError::Io {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| PipelineError::Malformed {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    fn stage_tag(&self) -> Result<StageStats, PipelineError> {
        let dataset = self.load_input_dataset()?;
        let opts = TaggingOptions {
            model: self.model_for(Purpose::Tagging),
            max_tag_retries: self.cfg.tagging.max_tag_retries,
        };
        let (annotations, report) = tag_dataset(&dataset, &self.gateway, &opts)?;
        self.write_jsonl(files::TAGS, &annotations)?;
        let distinct_raw: std::collections::BTreeSet<&str> = annotations
            .iter()
            .flat_map(|a| a.raw_tags.iter().map(|t| t.text.as_str()))
            .collect();
        Ok(StageStats::Tag {
            samples: dataset.samples.len(),
            distinct_raw: distinct_raw.len(),
            parse_failures: report.parse_failures.len(),
        })
    }

    fn stage_normalize(&self) -> Result<StageStats, PipelineError> {
        let annotations: Vec<TagAnnotation> = self.read_jsonl(Stage::Normalize, files::TAGS)?;
        let outcome = normalize_all(&annotations, &self.cfg.normalize)?;
        self.write_jsonl(files::NORMALIZED_TAGS, &outcome.annotations)?;
        self.write_json(files::VOCAB, &outcome.vocabulary)?;
        self.write_json(files::MERGES, &outcome.merge_map)?;
        let retained = outcome
            .annotations
            .iter()
            .filter(|a| !a.normalized_tags.is_empty())
            .count();
        Ok(StageStats::Normalize {
            raw: outcome.vocabulary.total_raw,
            canonical: outcome.vocabulary.counts.len(),
            retained,
            samples: outcome.annotations.len(),
            warnings: outcome.warnings,
        })
    }

    fn stage_embed(&self) -> Result<StageStats, PipelineError> {
        let vocab: TagVocabulary = self.read_json(Stage::Embed, files::VOCAB)?;
        let tags: Vec<String> = vocab.counts.keys().cloned().collect();
        let embedder: Box<dyn TagEmbedder> = match &self.cfg.embed.backend {
            EmbedBackendConfig::Hash => Box::new(HashEmbedder {
                dim: self.cfg.embed.dim,
            }),
            EmbedBackendConfig::Http { base_url, model } => Box::new(RemoteEmbedder::new(
                base_url.clone(),
                model.clone(),
                std::env::var("TACOS_API_KEY").ok(),
                Some(self.path(files::CACHE_DIR).join(files::EMBED_CACHE)),
            )?),
        };
        let vectors = embedder.embed(&tags)?;
        let map: BTreeMap<String, Vec<f64>> = tags
            .into_iter()
            .zip(vectors.into_iter().map(|v| v.values))
            .collect();
        self.write_json(files::VECTORS, &map)?;
        Ok(StageStats::Embed {
            tags: map.len(),
            dim: self.cfg.embed.dim,
        })
    }

    fn stage_cluster(&self) -> Result<StageStats, PipelineError> {
        let raw: BTreeMap<String, Vec<f64>> = self.read_json(Stage::Cluster, files::VECTORS)?;
        let annotations: Vec<TagAnnotation> =
            self.read_jsonl(Stage::Cluster, files::NORMALIZED_TAGS)?;
        let dataset = self.load_input_dataset()?;
        let vectors: BTreeMap<String, TagVector> = raw
            .into_iter()
            .map(|(tag, values)| {
                let v = TagVector {
                    tag: tag.clone(),
                    values,
                };
                (tag, v)
            })
            .collect();
        let k = match self.cfg.cluster.k {
            KChoice::Auto => cluster::auto_k(vectors.len()),
            KChoice::Fixed(k) => k,
        };
        let mut clustering = cluster::kmeans(&vectors, k, self.cfg.cluster.seed)?;
        cluster::assign_samples(&mut clustering, &annotations, &vectors)?;
        let profiles = cluster::profile_clusters(&clustering, &dataset, &vectors);
        let untagged = clustering
            .sample_assignment
            .values()
            .filter(|a| **a == Assignment::Untagged)
            .count();
        let stats = StageStats::Cluster {
            k: clustering.k,
            tags: clustering.tag_assignment.len(),
            untagged,
        };
        self.write_json(
            files::CLUSTERS,
            &ClustersFile {
                clustering,
                profiles,
            },
        )?;
        Ok(stats)
    }

    fn stage_score(&self) -> Result<StageStats, PipelineError> {
        let clusters: ClustersFile = self.read_json(Stage::Score, files::CLUSTERS)?;
        let dataset = self.load_input_dataset()?;
        let opts = ScoringOptions {
            model: self.model_for(Purpose::Scoring),
            rounds: self.cfg.score.rounds,
            round_robin_cap: self.cfg.score.round_robin_cap,
            seed: self.cfg.cluster.seed,
            rescore_inconsistent: self.cfg.score.rescore_inconsistent,
            max_score_retries: self.cfg.score.max_score_retries,
        };
        let (pairs, agg, report) =
            score_clusters(&clusters.clustering, &dataset, &self.gateway, &opts)?;
        self.write_jsonl(files::SCORES, &pairs)?;
        self.write_json(files::AGG_SCORES, &agg)?;
        Ok(StageStats::Score {
            pairs: report.pairs_scored,
            unscorable: report.unscorable.len(),
        })
    }

    fn stage_select(&self) -> Result<StageStats, PipelineError> {
        self.require(Stage::Select, files::SCORES)?;
        let agg: BTreeMap<String, AggScore> = self.read_json(Stage::Select, files::AGG_SCORES)?;
        let clusters: ClustersFile = self.read_json(Stage::Select, files::CLUSTERS)?;
        let dataset = self.load_input_dataset()?;
        let untagged: Vec<String> = clusters
            .clustering
            .sample_assignment
            .iter()
            .filter(|(_, a)| **a == Assignment::Untagged)
            .map(|(id, _)| id.clone())
            .collect();
        let budget = self.cfg.select.budget;
        let mut warnings = Vec::new();
        if budget > dataset.samples.len() {
            warnings.push(format!(
                "budget {budget} exceeds dataset size {}; selecting every sample",
                dataset.samples.len()
            ));
        }
        let result = select_subset(&dataset, &clusters.profiles, &untagged, &agg, budget);
        export_subset(&result, &dataset, &self.path(files::SELECTED))?;
        let stats = selection_stats(&result, &agg);
        let selected = result.chosen.len();
        self.write_json(
            files::SELECTION_REPORT,
            &SelectionReportFile {
                result,
                stats,
                warnings: warnings.clone(),
            },
        )?;
        Ok(StageStats::Select {
            selected,
            budget,
            warnings,
        })
    }

    fn stage_eval(&self) -> Result<StageStats, PipelineError> {
        let ev = self.cfg.eval.as_ref().ok_or_else(|| PipelineError::Config {
            field: "eval".to_string(),
            message: "the eval stage needs an eval section in the config".to_string(),
        })?;
        for path in [&ev.responses_a, &ev.responses_b, &ev.instructions]
            .into_iter()
            .chain(ev.references.as_ref())
        {
            if !path.is_file() {
                return Err(PipelineError::MissingInput {
                    stage: Stage::Eval.name(),
                    file: path.display().to_string(),
                });
            }
        }
        let responses_a = load_responses(&ev.responses_a)?;
        let responses_b = load_responses(&ev.responses_b)?;
        let instruction_set = load_dataset(&ev.instructions, ev.instructions_format)?;
        let instructions: BTreeMap<String, String> = instruction_set
            .samples
            .into_iter()
            .map(|s| (s.id, s.instruction))
            .collect();
        let references = match &ev.references {
            Some(path) => Some(load_responses(path)?),
            None => None,
        };
        let opts = JudgeOptions {
            model: self.model_for(Purpose::Judging),
            max_judge_retries: ev.max_judge_retries,
        };
        let (report, verdicts) = evaluate(
            &instructions,
            &responses_a,
            &responses_b,
            references.as_ref(),
            &self.gateway,
            &opts,
        )?;
        self.write_json(files::EVAL_REPORT, &report)?;
        Ok(StageStats::Eval {
            judged: verdicts.len(),
            win_rate: report.win_rate,
            excluded: report.excluded_unjudgeable,
        })
    }
}

/// Convenience: loads `eval_report.json` back, for callers that ran the
/// eval stage and want the numbers.
pub fn read_eval_report(out_dir: &Path) -> Result<EvalReport, PipelineError> {
    let path = out_dir.join(files::EVAL_REPORT);
    let text = std::fs::read_to_string(&path).map_err(|source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| PipelineError::Malformed {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::save_dataset;
    use crate::gateway::PanickingBackend;
    use crate::synth::planted_dataset;
    use serde_json::json;

    fn planted_config(dir: &Path, n: usize, topics: usize, budget: usize) -> PipelineConfig {
        let dataset = planted_dataset(n, topics, 11);
        let data_path = dir.join("planted.jsonl");
        save_dataset(&dataset, &data_path).unwrap();
        config::from_value(json!({
            "dataset": { "path": data_path },
            "backend": { "kind": "mock", "seed": 5, "position_bias": 10 },
            "out_dir": dir.join("out"),
            "cluster": { "k": topics, "seed": 13 },
            "select": { "budget": budget },
        }))
        .unwrap()
    }

    #[test]
    fn stage_order_is_enforced_by_missing_inputs() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = planted_config(dir.path(), 20, 2, 5);
        let pipeline = Pipeline::new(cfg).unwrap();
        match pipeline.run_stage(Stage::Select) {
            Err(PipelineError::MissingInput { stage, file }) => {
                assert_eq!(stage, "select");
                assert_eq!(file, files::SCORES);
            }
            other => panic!("expected missing input, got {other:?}"),
        }
        match pipeline.run_stage(Stage::Normalize) {
            Err(PipelineError::MissingInput { file, .. }) => assert_eq!(file, files::TAGS),
            other => panic!("expected missing input, got {other:?}"),
        }
        match pipeline.run_stage(Stage::Cluster) {
            Err(PipelineError::MissingInput { file, .. }) => assert_eq!(file, files::VECTORS),
            other => panic!("expected missing input, got {other:?}"),
        }
    }

    #[test]
    fn full_run_writes_every_stage_file_and_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = planted_config(dir.path(), 40, 4, 10);
        let out = cfg.out_dir.clone();
        let pipeline = Pipeline::new(cfg).unwrap();
        let (summary, outcomes) = pipeline.run_all().unwrap();

        assert_eq!(summary.samples, 40);
        assert_eq!(summary.selected, 10);
        assert_eq!(summary.budget, 10);
        assert_eq!(summary.clusters, 4);
        assert!(summary.pairs_scored > 0);
        assert_eq!(outcomes.len(), 6);

        for name in [
            files::TAGS,
            files::NORMALIZED_TAGS,
            files::VOCAB,
            files::MERGES,
            files::VECTORS,
            files::CLUSTERS,
            files::SCORES,
            files::AGG_SCORES,
            files::SELECTED,
            files::SELECTION_REPORT,
            files::MANIFEST,
        ] {
            assert!(out.join(name).is_file(), "{name} missing");
        }

        let manifest: RunManifest =
            serde_json::from_str(&std::fs::read_to_string(out.join(files::MANIFEST)).unwrap())
                .unwrap();
        assert_eq!(manifest.stages.len(), 6);
        assert_eq!(manifest.version, env!("CARGO_PKG_VERSION"));
        let select_record = &manifest.stages["select"];
        assert!(select_record.outputs.contains_key(files::SELECTED));
        assert_eq!(select_record.outputs[files::SELECTED].len(), 64);
    }

    #[test]
    fn selected_file_holds_exactly_budget_samples() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = planted_config(dir.path(), 30, 3, 8);
        let out = cfg.out_dir.clone();
        let pipeline = Pipeline::new(cfg).unwrap();
        pipeline.run_all().unwrap();
        let text = std::fs::read_to_string(out.join(files::SELECTED)).unwrap();
        assert_eq!(text.lines().count(), 8);
    }

    #[test]
    fn budget_beyond_dataset_selects_everything_with_warning() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = planted_config(dir.path(), 12, 2, 40);
        let pipeline = Pipeline::new(cfg).unwrap();
        let (summary, _) = pipeline.run_all().unwrap();
        assert_eq!(summary.selected, 12);
        assert!(
            summary.warnings.iter().any(|w| w.contains("exceeds")),
            "warnings were {:?}",
            summary.warnings
        );
    }

    #[test]
    fn rerun_with_same_seed_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = planted_config(dir.path(), 30, 3, 8);
        let out = cfg.out_dir.clone();

        let pipeline = Pipeline::new(cfg.clone()).unwrap();
        pipeline.run_all().unwrap();
        let digests = |names: &[&str]| -> Vec<String> {
            names.iter().map(|n| sha256_file(&out.join(n)).unwrap()).collect()
        };
        let watched = [
            files::TAGS,
            files::VOCAB,
            files::VECTORS,
            files::CLUSTERS,
            files::SCORES,
            files::AGG_SCORES,
            files::SELECTED,
        ];
        let first = digests(&watched);
        drop(pipeline);

        let pipeline = Pipeline::new(cfg).unwrap();
        pipeline.run_all().unwrap();
        assert_eq!(digests(&watched), first);
    }

    #[test]
    fn warm_caches_make_reruns_backend_free() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = planted_config(dir.path(), 25, 3, 6);

        let pipeline = Pipeline::new(cfg.clone()).unwrap();
        pipeline.run_all().unwrap();
        assert!(pipeline.gateway().backend_calls() > 0);
        drop(pipeline);

        let replay = Pipeline::with_backend(cfg, Box::new(PanickingBackend)).unwrap();
        replay.run_all().unwrap();
        assert_eq!(replay.gateway().backend_calls(), 0);
    }

    #[test]
    fn manifest_survives_stage_by_stage_runs() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = planted_config(dir.path(), 20, 2, 5);
        let out = cfg.out_dir.clone();
        let pipeline = Pipeline::new(cfg).unwrap();

        pipeline.run_stage(Stage::Tag).unwrap();
        let manifest: RunManifest =
            serde_json::from_str(&std::fs::read_to_string(out.join(files::MANIFEST)).unwrap())
                .unwrap();
        assert_eq!(manifest.stages.len(), 1);
        assert!(manifest.stages.contains_key("tag"));

        pipeline.run_stage(Stage::Normalize).unwrap();
        let manifest: RunManifest =
            serde_json::from_str(&std::fs::read_to_string(out.join(files::MANIFEST)).unwrap())
                .unwrap();
        assert_eq!(manifest.stages.len(), 2);
        assert!(manifest.stages["tag"].outputs.contains_key(files::TAGS));
    }

    #[test]
    fn eval_stage_runs_from_config_inputs() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = planted_config(dir.path(), 10, 2, 3);
        let out = cfg.out_dir.clone();

        let instr_path = dir.path().join("questions.jsonl");
        std::fs::write(
            &instr_path,
            concat!(
                r#"{"id":"q1","instruction":"describe a fern","input":"","output":"","source":"t"}"#,
                "\n",
                r#"{"id":"q2","instruction":"name a prime","input":"","output":"","source":"t"}"#,
                "\n",
            ),
        )
        .unwrap();
        let a_path = dir.path().join("model_a.jsonl");
        std::fs::write(
            &a_path,
            concat!(
                r#"{"id":"q1","response":"a fern is a vascular plant with fronds"}"#,
                "\n",
                r#"{"id":"q2","response":"seven"}"#,
                "\n",
            ),
        )
        .unwrap();
        let b_path = dir.path().join("model_b.jsonl");
        std::fs::write(
            &b_path,
            concat!(
                r#"{"id":"q1","response":"a plant"}"#,
                "\n",
                r#"{"id":"q2","response":"the number seven is prime"}"#,
                "\n",
            ),
        )
        .unwrap();

        let mut cfg = cfg;
        cfg.eval = Some(EvalConfig {
            responses_a: a_path,
            responses_b: b_path,
            instructions: instr_path,
            instructions_format: crate::corpus::DatasetFormat::Jsonl,
            references: None,
            max_judge_retries: 2,
        });
        let pipeline = Pipeline::new(cfg).unwrap();
        let outcome = pipeline.run_stage(Stage::Eval).unwrap();
        assert_eq!(outcome.stage, "eval");

        let report = read_eval_report(&out).unwrap();
        assert_eq!(report.wins + report.ties + report.losses, 2);
        assert!(report.rouge1.is_none());
    }

    #[test]
    fn eval_without_config_section_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = planted_config(dir.path(), 10, 2, 3);
        let pipeline = Pipeline::new(cfg).unwrap();
        match pipeline.run_stage(Stage::Eval) {
            Err(PipelineError::Config { field, .. }) => assert_eq!(field, "eval"),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn error_json_is_machine_readable() {
        let err = PipelineError::MissingInput {
            stage: "select",
            file: files::SCORES.to_string(),
        };
        let parsed: serde_json::Value = serde_json::from_str(&err.to_json()).unwrap();
        assert_eq!(parsed["error"], "missing_input");
        assert_eq!(parsed["file"], "scores.jsonl");
        assert_eq!(parsed["stage"], "select");
        assert!(parsed["message"].as_str().unwrap().contains("scores.jsonl"));
    }

    #[test]
    fn stage_names_round_trip() {
        for stage in [
            Stage::Tag,
            Stage::Normalize,
            Stage::Embed,
            Stage::Cluster,
            Stage::Score,
            Stage::Select,
            Stage::Eval,
        ] {
            assert_eq!(stage.name().parse::<Stage>().unwrap(), stage);
        }
        assert!(matches!(
            "deploy".parse::<Stage>(),
            Err(PipelineError::UnknownStage { .. })
        ));
    }
}
