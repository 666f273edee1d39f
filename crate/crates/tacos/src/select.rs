//! Budget allocation across clusters and final subset assembly.
//!
//! Diversity comes from the clusters, quality from the scores: every
//! non-empty cluster gets a proportional share of the budget (with a
//! floor of one when the budget allows), and within a cluster the
//! highest-scoring samples win. Untagged samples are last in line and
//! only ever absorb leftover budget.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cluster::ClusterProfile;
use crate::corpus::{save_dataset, Dataset};
use crate::score::AggScore;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fallback {
    None,
    LongestInstruction,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectionResult {
    pub budget: usize,
    pub per_cluster_quota: BTreeMap<usize, usize>,
    /// Leftover budget granted to samples outside every cluster.
    pub untagged_quota: usize,
    /// Ordered by (cluster ascending, mean score descending), untagged
    /// picks last.
    pub chosen: Vec<String>,
    pub fallback_used: BTreeMap<usize, Fallback>,
}

#[derive(Debug, Error)]
pub enum SelectError {
    #[error("chosen sample {id:?} is not in the dataset")]
    MissingSample { id: String },
    #[error("writing subset: {0}")]
    Io(#[from] crate::corpus::CorpusError),
}

/// Largest-remainder split of `amount` across weighted keys. Integer
/// arithmetic throughout: remainders compare as `amount*w mod total`,
/// ties break on smaller key.
fn largest_remainder(weights: &BTreeMap<usize, usize>, amount: usize) -> BTreeMap<usize, usize> {
    let total: u128 = weights.values().map(|&w| w as u128).sum();
    let mut shares: BTreeMap<usize, usize> = BTreeMap::new();
    if total == 0 || amount == 0 {
        return weights.keys().map(|&k| (k, 0)).collect();
    }
    let mut remainders: Vec<(u128, usize)> = Vec::new();
    let mut assigned: usize = 0;
    for (&k, &w) in weights {
        let numerator = amount as u128 * w as u128;
        let base = (numerator / total) as usize;
        shares.insert(k, base);
        assigned += base;
        remainders.push((numerator % total, k));
    }
    remainders.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    for (_, k) in remainders.into_iter().take(amount - assigned) {
        *shares.get_mut(&k).unwrap() += 1;
    }
    shares
}

/// Proportional quotas with a floor of one per non-empty cluster when
/// the budget covers that, capped at cluster size, excess re-spread
/// until stable. The quotas sum to min(budget, total size).
pub fn allocate_budget(
    cluster_sizes: &BTreeMap<usize, usize>,
    budget: usize,
) -> BTreeMap<usize, usize> {
    let nonempty: BTreeMap<usize, usize> = cluster_sizes
        .iter()
        .filter(|(_, &s)| s > 0)
        .map(|(&k, &s)| (k, s))
        .collect();
    let total: usize = nonempty.values().sum();
    let mut quotas: BTreeMap<usize, usize> = cluster_sizes.keys().map(|&k| (k, 0)).collect();
    if budget == 0 || total == 0 {
        return quotas;
    }
    if budget >= total {
        for (&k, &s) in &nonempty {
            quotas.insert(k, s);
        }
        return quotas;
    }

    let floors = if budget >= nonempty.len() { 1 } else { 0 };
    let spread = largest_remainder(&nonempty, budget - floors * nonempty.len());
    for (&k, _) in &nonempty {
        quotas.insert(k, floors + spread[&k]);
    }

    // Clamp to cluster sizes and re-spread the excess among clusters
    // with room left. Each pass saturates at least one cluster.
    loop {
        let mut excess = 0usize;
        for (&k, &s) in &nonempty {
            let q = quotas.get_mut(&k).unwrap();
            if *q > s {
                excess += *q - s;
                *q = s;
            }
        }
        if excess == 0 {
            return quotas;
        }
        let open: BTreeMap<usize, usize> = nonempty
            .iter()
            .filter(|(k, &s)| quotas[k] < s)
            .map(|(&k, &s)| (k, s))
            .collect();
        let capacity: usize = open.iter().map(|(k, &s)| s - quotas[k]).sum();
        if capacity == 0 {
            return quotas;
        }
        for (k, extra) in largest_remainder(&open, excess.min(capacity)) {
            *quotas.get_mut(&k).unwrap() += extra;
        }
    }
}

/// Mean used for ranking: the aggregated mean when the sample was
/// scored, otherwise the unscored sentinel, which sorts below every
/// real score.
fn effective_mean(agg: &BTreeMap<String, AggScore>, id: &str) -> f64 {
    agg.get(id)
        .filter(|a| a.n_comparisons > 0)
        .map(|a| a.mean)
        .unwrap_or(crate::score::SENTINEL_UNSCORED)
}

fn ranked<'a>(
    ids: impl Iterator<Item = &'a String>,
    agg: &BTreeMap<String, AggScore>,
    lengths: &BTreeMap<&str, usize>,
) -> Vec<String> {
    let mut rows: Vec<(&'a String, f64, usize)> = ids
        .map(|id| {
            (
                id,
                effective_mean(agg, id),
                lengths.get(id.as_str()).copied().unwrap_or(0),
            )
        })
        .collect();
    rows.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap()
            .then(b.2.cmp(&a.2))
            .then(a.0.cmp(b.0))
    });
    rows.into_iter().map(|(id, _, _)| id.clone()).collect()
}

/// Pick the final subset: per cluster the top-quota samples by mean
/// (ties: longer instruction, then smaller id), falling back to the
/// longest-instruction representative when nothing in a cluster was
/// scored. Leftover budget flows to untagged samples, then to whatever
/// scored-cluster members remain.
pub fn select_top(
    agg: &BTreeMap<String, AggScore>,
    quotas: &BTreeMap<usize, usize>,
    profiles: &[ClusterProfile],
    dataset: &Dataset,
    untagged: &[String],
    budget: usize,
) -> SelectionResult {
    let lengths: BTreeMap<&str, usize> = dataset
        .samples
        .iter()
        .map(|s| (s.id.as_str(), s.instruction.chars().count()))
        .collect();

    let mut chosen: Vec<String> = Vec::new();
    let mut fallback_used: BTreeMap<usize, Fallback> = BTreeMap::new();
    let mut leftovers: Vec<String> = Vec::new();
    for profile in profiles {
        let quota = quotas.get(&profile.cluster).copied().unwrap_or(0);
        let order = ranked(profile.member_samples.iter(), agg, &lengths);
        let any_scored = profile
            .member_samples
            .iter()
            .any(|id| agg.get(id).map_or(false, |a| a.n_comparisons > 0));
        let fallback = if quota > 0 && !order.is_empty() && !any_scored {
            // With every mean at the sentinel the ranking reduces to
            // (instruction length, id), so the head of the list is the
            // longest-instruction representative.
            Fallback::LongestInstruction
        } else {
            Fallback::None
        };
        fallback_used.insert(profile.cluster, fallback);
        chosen.extend(order.iter().take(quota).cloned());
        leftovers.extend(order.into_iter().skip(quota));
    }

    let mut remaining = budget.saturating_sub(chosen.len());
    let untagged_order = ranked(untagged.iter(), agg, &lengths);
    let untagged_take = remaining.min(untagged_order.len());
    let untagged_quota = untagged_take;
    chosen.extend(untagged_order.into_iter().take(untagged_take));
    remaining -= untagged_take;

    // Only reachable when rounding or caps left budget on the table
    // while clusters still had members. Highest scores first.
    if remaining > 0 {
        let spill = ranked(leftovers.iter(), agg, &lengths);
        chosen.extend(spill.into_iter().take(remaining));
    }

    SelectionResult {
        budget,
        per_cluster_quota: quotas.clone(),
        untagged_quota,
        chosen,
        fallback_used,
    }
}

/// Quotas plus selection in one call.
pub fn select_subset(
    dataset: &Dataset,
    profiles: &[ClusterProfile],
    untagged: &[String],
    agg: &BTreeMap<String, AggScore>,
    budget: usize,
) -> SelectionResult {
    let sizes: BTreeMap<usize, usize> = profiles
        .iter()
        .map(|p| (p.cluster, p.member_samples.len()))
        .collect();
    let quotas = allocate_budget(&sizes, budget);
    select_top(agg, &quotas, profiles, dataset, untagged, budget)
}

/// Summary numbers for the selection report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreStats {
    pub scored_chosen: usize,
    pub unscored_chosen: usize,
    pub min_mean: Option<f64>,
    pub max_mean: Option<f64>,
    pub mean_mean: Option<f64>,
}

pub fn selection_stats(sel: &SelectionResult, agg: &BTreeMap<String, AggScore>) -> ScoreStats {
    let means: Vec<f64> = sel
        .chosen
        .iter()
        .filter_map(|id| agg.get(id).filter(|a| a.n_comparisons > 0))
        .map(|a| a.mean)
        .collect();
    ScoreStats {
        scored_chosen: means.len(),
        unscored_chosen: sel.chosen.len() - means.len(),
        min_mean: means.iter().copied().reduce(f64::min),
        max_mean: means.iter().copied().reduce(f64::max),
        mean_mean: if means.is_empty() {
            None
        } else {
            Some(means.iter().sum::<f64>() / means.len() as f64)
        },
    }
}

/// Write the chosen samples as corpus-schema JSONL in selection order.
/// Every chosen id must exist; the check runs before any byte hits
/// disk.
pub fn export_subset(sel: &SelectionResult, dataset: &Dataset, path: &Path) -> Result<(), SelectError> {
    let by_id: BTreeMap<&str, &crate::corpus::IftSample> =
        dataset.samples.iter().map(|s| (s.id.as_str(), s)).collect();
    let mut samples = Vec::with_capacity(sel.chosen.len());
    for id in &sel.chosen {
        match by_id.get(id.as_str()) {
            Some(s) => samples.push((*s).clone()),
            None => return Err(SelectError::MissingSample { id: id.clone() }),
        }
    }
    let subset = Dataset {
        name: format!("{}-selected", dataset.name),
        samples,
    };
    save_dataset(&subset, path)?;
    Ok(())
}
