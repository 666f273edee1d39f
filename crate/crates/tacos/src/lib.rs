//! Diversity- and quality-aware subset selection for instruction
//! fine-tuning datasets.
//!
//! The pipeline runs in five stages, each writing one artifact that the
//! next stage reads:
//!
//! 1. **tag**: an LLM assigns open-domain tags to every sample.
//! 2. **normalize**: raw tags collapse into a canonical vocabulary
//!    (lexical cleanup, frequency filtering, co-occurrence aggregation,
//!    hand-written merge rules).
//! 3. **cluster**: tag embeddings are k-means clustered and each sample
//!    inherits the majority cluster of its tags.
//! 4. **score**: within every cluster, samples face each other in
//!    pairwise comparisons scored on [1, 100]; each pair is scored twice
//!    with slots swapped so position preference cancels.
//! 5. **select**: a per-cluster quota (proportional, floor of one)
//!    keeps the top-scoring samples until the budget is spent.
//!
//! An evaluation harness compares two response sets head to head (again
//! order-swapped) and computes ROUGE and BLEU against references.
//!
//! Every LLM call flows through [`gateway::Gateway`], which caches
//! responses on disk keyed by canonical request bytes. A finished run
//! can be replayed offline, and reruns are byte-identical.

pub mod cluster;
pub mod corpus;
pub mod embed;
pub mod eval;
pub mod gateway;
pub mod normalize;
pub mod pipeline;
pub mod relaxed_json;
pub mod score;
pub mod select;
pub mod synth;
pub mod tagging;

pub use cluster::{assign_sample, assign_samples, kmeans, profile_clusters, Assignment, ClusterProfile, Clustering};
pub use corpus::{Dataset, DatasetFormat, IftSample};
pub use embed::{hash_embed, TagEmbedder, TagVector};
pub use eval::{
    bleu, evaluate, judge_pair_swapped, rouge_l, rouge_n, win_rate, EvalReport, Outcome, Verdict,
};
pub use gateway::{ChatRequest, ChatResponse, Gateway, GatewayConfig, Purpose};
pub use normalize::{normalize_all, MergeMap, NormalizeConfig, TagVocabulary};
pub use pipeline::{
    load_config, BackendConfig, KChoice, Pipeline, PipelineConfig, PipelineError, RunManifest,
    RunSummary, Stage,
};
pub use score::{
    aggregate_scores, schedule_pairs, score_clusters, score_pair_swapped, AggScore, PairScore,
    ScoringOptions, SENTINEL_UNSCORED,
};
pub use select::{allocate_budget, export_subset, select_subset, select_top, SelectionResult};
pub use synth::{planted_dataset, planted_quality, planted_topic};
pub use tagging::{tag_dataset, RawTag, TagAnnotation};
