//! K-means over tag vectors and sample-to-cluster assignment.
//!
//! Clusters are built over tags; samples inherit a cluster by majority
//! vote over their tags, with centroid distance breaking ties. Samples
//! without tags land in an untagged pseudo-cluster that selection
//! treats as lowest priority.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::{self, Visitor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::corpus::Dataset;
use crate::embed::TagVector;
use crate::tagging::TagAnnotation;

/// Where a sample belongs: a tag cluster, or the untagged bucket when it
/// has no usable tags.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Assignment {
    Cluster(usize),
    Untagged,
}

impl Serialize for Assignment {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        match self {
            Assignment::Cluster(i) => serializer.serialize_u64(*i as u64),
            Assignment::Untagged => serializer.serialize_str("untagged"),
        }
    }
}

impl<'de> Deserialize<'de> for Assignment {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct AssignmentVisitor;
        impl Visitor<'_> for AssignmentVisitor {
            type Value = Assignment;
            fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
                f.write_str("a cluster index or the string \"untagged\"")
            }
            fn visit_u64<E: de::Error>(self, v: u64) -> Result<Assignment, E> {
                Ok(Assignment::Cluster(v as usize))
            }
            fn visit_str<E: de::Error>(self, v: &str) -> Result<Assignment, E> {
                if v == "untagged" {
                    Ok(Assignment::Untagged)
                } else {
                    Err(E::custom(format!("unexpected assignment {v:?}")))
                }
            }
        }
        deserializer.deserialize_any(AssignmentVisitor)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Clustering {
    pub k: usize,
    pub centroids: Vec<Vec<f64>>,
    pub tag_assignment: BTreeMap<String, usize>,
    /// Filled by [`assign_samples`]; empty straight out of [`kmeans`].
    pub sample_assignment: BTreeMap<String, Assignment>,
    pub inertia: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClusterProfile {
    pub cluster: usize,
    pub representative_tag: String,
    pub member_tags: Vec<String>,
    pub member_samples: Vec<String>,
    /// Absent when no sample landed in this cluster.
    pub longest_instruction_sample: Option<String>,
}

#[derive(Debug, Error, PartialEq)]
pub enum ClusterError {
    #[error("k-means needs at least k points: k={k}, points={n}")]
    TooFewPoints { k: usize, n: usize },
    #[error("tag {tag:?} has no cluster assignment")]
    UnknownTag { tag: String },
}

/// Default cluster count: round(sqrt(#tags)), at least 1.
pub fn auto_k(n_tags: usize) -> usize {
    ((n_tags as f64).sqrt().round() as usize).clamp(1, n_tags.max(1))
}

fn d2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0usize, f64::INFINITY);
    for (i, c) in centroids.iter().enumerate() {
        let d = d2(point, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

fn plus_plus_init(points: &[&[f64]], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut chosen_idx: Vec<usize> = vec![rng.random_range(0..n)];
    let mut centroids: Vec<Vec<f64>> = vec![points[chosen_idx[0]].to_vec()];
    while centroids.len() < k {
        let weights: Vec<f64> = points.iter().map(|p| nearest(p, &centroids).1).collect();
        let total: f64 = weights.iter().sum();
        let next = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, w) in weights.iter().enumerate() {
                if r < *w {
                    pick = i;
                    break;
                }
                r -= w;
            }
            pick
        } else {
            // Every remaining point coincides with a centroid; fall back
            // to the smallest unused index so the result stays seeded.
            (0..n).find(|i| !chosen_idx.contains(i)).unwrap_or(0)
        };
        chosen_idx.push(next);
        centroids.push(points[next].to_vec());
    }
    centroids
}

/// One Lloyd's run from the given starting centroids. Returns the final
/// assignment, centroids, and inertia.
fn lloyd(
    points: &[&[f64]],
    mut centroids: Vec<Vec<f64>>,
    max_iter: usize,
    tol: f64,
) -> (Vec<usize>, Vec<Vec<f64>>, f64) {
    let n = points.len();
    let k = centroids.len();
    let dim = points[0].len();
    let mut assignment = vec![0usize; n];
    // Monotonicity of Lloyd's holds between unrepaired iterations; an
    // empty-cluster reseed changes the optimization state, so it resets
    // the baseline.
    let mut baseline: Option<f64> = None;

    for _ in 0..max_iter {
        let mut new_inertia = 0.0;
        for (i, p) in points.iter().enumerate() {
            let (c, d) = nearest(p, &centroids);
            assignment[i] = c;
            new_inertia += d;
        }
        if let Some(prev) = baseline {
            assert!(
                new_inertia <= prev + 1e-9,
                "Lloyd's inertia must not increase: {prev} -> {new_inertia}"
            );
        }
        baseline = Some(new_inertia);

        let mut sums = vec![vec![0.0f64; dim]; k];
        let mut counts = vec![0usize; k];
        for (i, p) in points.iter().enumerate() {
            counts[assignment[i]] += 1;
            for (s, v) in sums[assignment[i]].iter_mut().zip(*p) {
                *s += v;
            }
        }
        let mut movement = 0.0f64;
        let mut empties = Vec::new();
        for c in 0..k {
            if counts[c] == 0 {
                empties.push(c);
                continue;
            }
            let mean: Vec<f64> = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            movement = movement.max(d2(&mean, &centroids[c]).sqrt());
            centroids[c] = mean;
        }
        if !empties.is_empty() {
            let mut moved: Vec<usize> = Vec::new();
            for empty in empties {
                let far = (0..n)
                    .filter(|i| !moved.contains(i))
                    .map(|i| (i, d2(points[i], &centroids[assignment[i]])))
                    .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(b.0.cmp(&a.0)));
                match far {
                    Some((i, d)) if d > 0.0 => {
                        centroids[empty] = points[i].to_vec();
                        moved.push(i);
                        baseline = None;
                    }
                    // All points already coincide with centroids; the
                    // cluster stays empty for good.
                    _ => {}
                }
            }
            if baseline.is_none() {
                continue;
            }
        }
        if movement < tol {
            break;
        }
    }

    // Final assignment under the converged centroids.
    let mut final_inertia = 0.0;
    for (i, p) in points.iter().enumerate() {
        let (c, d) = nearest(p, &centroids);
        assignment[i] = c;
        final_inertia += d;
    }
    (assignment, centroids, final_inertia)
}

/// Seeded k-means++ plus Lloyd's iterations, keeping the best of
/// several restarts the way standard implementations do. Tags
/// participate in lexicographic order regardless of how the map was
/// built, so a fixed seed fixes the outcome.
pub fn kmeans(vectors: &BTreeMap<String, TagVector>, k: usize, seed: u64) -> Result<Clustering, ClusterError> {
    kmeans_with(vectors, k, seed, 100, 1e-6, 10)
}

pub fn kmeans_with(
    vectors: &BTreeMap<String, TagVector>,
    k: usize,
    seed: u64,
    max_iter: usize,
    tol: f64,
    n_init: usize,
) -> Result<Clustering, ClusterError> {
    let n = vectors.len();
    if k == 0 || k > n {
        return Err(ClusterError::TooFewPoints { k, n });
    }
    let tags: Vec<&String> = vectors.keys().collect();
    let points: Vec<&[f64]> = vectors.values().map(|v| v.values.as_slice()).collect();
    let dim = points[0].len();
    assert!(
        points.iter().all(|p| p.len() == dim),
        "tag vectors must share one dimension"
    );

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(Vec<usize>, Vec<Vec<f64>>, f64)> = None;
    for _ in 0..n_init.max(1) {
        let init = plus_plus_init(&points, k, &mut rng);
        let run = lloyd(&points, init, max_iter, tol);
        if best.as_ref().map_or(true, |b| run.2 < b.2) {
            best = Some(run);
        }
    }
    let (assignment, centroids, inertia) = best.expect("at least one restart");

    Ok(Clustering {
        k,
        centroids,
        tag_assignment: tags
            .iter()
            .enumerate()
            .map(|(i, t)| ((*t).clone(), assignment[i]))
            .collect(),
        sample_assignment: BTreeMap::new(),
        inertia,
    })
}

/// Cluster for one sample: majority vote over its tags' clusters; ties
/// go to the cluster whose centroid is nearest the mean of the sample's
/// tag vectors; no tags means untagged.
pub fn assign_sample(
    tags: &[String],
    clustering: &Clustering,
    vectors: &BTreeMap<String, TagVector>,
) -> Result<Assignment, ClusterError> {
    if tags.is_empty() {
        return Ok(Assignment::Untagged);
    }
    let mut votes: BTreeMap<usize, usize> = BTreeMap::new();
    for tag in tags {
        let cluster = clustering
            .tag_assignment
            .get(tag)
            .ok_or_else(|| ClusterError::UnknownTag { tag: tag.clone() })?;
        *votes.entry(*cluster).or_insert(0) += 1;
    }
    let top = *votes.values().max().expect("tags present");
    let tied: Vec<usize> = votes
        .iter()
        .filter(|(_, &v)| v == top)
        .map(|(&c, _)| c)
        .collect();
    if tied.len() == 1 {
        return Ok(Assignment::Cluster(tied[0]));
    }

    let dim = clustering.centroids[0].len();
    let mut mean = vec![0.0f64; dim];
    for tag in tags {
        let v = vectors
            .get(tag)
            .ok_or_else(|| ClusterError::UnknownTag { tag: tag.clone() })?;
        for (m, x) in mean.iter_mut().zip(&v.values) {
            *m += x;
        }
    }
    for m in mean.iter_mut() {
        *m /= tags.len() as f64;
    }
    let winner = tied
        .iter()
        .copied()
        .min_by(|&a, &b| {
            d2(&mean, &clustering.centroids[a])
                .partial_cmp(&d2(&mean, &clustering.centroids[b]))
                .unwrap()
                .then(a.cmp(&b))
        })
        .expect("tied clusters present");
    Ok(Assignment::Cluster(winner))
}

/// Assign every annotated sample, filling `sample_assignment`.
pub fn assign_samples(
    clustering: &mut Clustering,
    annotations: &[TagAnnotation],
    vectors: &BTreeMap<String, TagVector>,
) -> Result<(), ClusterError> {
    for annotation in annotations {
        let a = assign_sample(&annotation.normalized_tags, clustering, vectors)?;
        clustering
            .sample_assignment
            .insert(annotation.sample_id.clone(), a);
    }
    Ok(())
}

/// Per-cluster summaries: the tag nearest the centroid and the sample
/// with the longest instruction (in Unicode scalar values).
pub fn profile_clusters(
    clustering: &Clustering,
    dataset: &Dataset,
    vectors: &BTreeMap<String, TagVector>,
) -> Vec<ClusterProfile> {
    let lengths: BTreeMap<&str, usize> = dataset
        .samples
        .iter()
        .map(|s| (s.id.as_str(), s.instruction.chars().count()))
        .collect();

    (0..clustering.k)
        .map(|c| {
            let member_tags: Vec<String> = clustering
                .tag_assignment
                .iter()
                .filter(|(_, &a)| a == c)
                .map(|(t, _)| t.clone())
                .collect();
            let representative_tag = member_tags
                .iter()
                .min_by(|a, b| {
                    let (da, db) = match (vectors.get(*a), vectors.get(*b)) {
                        (Some(va), Some(vb)) => (
                            d2(&va.values, &clustering.centroids[c]),
                            d2(&vb.values, &clustering.centroids[c]),
                        ),
                        _ => (0.0, 0.0),
                    };
                    da.partial_cmp(&db).unwrap().then(a.cmp(b))
                })
                .cloned()
                .unwrap_or_default();
            let member_samples: Vec<String> = clustering
                .sample_assignment
                .iter()
                .filter(|(_, &a)| a == Assignment::Cluster(c))
                .map(|(id, _)| id.clone())
                .collect();
            let longest_instruction_sample = member_samples
                .iter()
                .max_by(|a, b| {
                    let (la, lb) = (
                        lengths.get(a.as_str()).copied().unwrap_or(0),
                        lengths.get(b.as_str()).copied().unwrap_or(0),
                    );
                    la.cmp(&lb).then(b.cmp(a))
                })
                .cloned();
            ClusterProfile {
                cluster: c,
                representative_tag,
                member_tags,
                member_samples,
                longest_instruction_sample,
            }
        })
        .collect()
}
