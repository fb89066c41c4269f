//! Lloyd's k-means with k-means++ seeding, run per package anchor.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use xxhash_rust::xxh64::xxh64;

use crate::index::{EmbeddedItem, VectorIndex};
use crate::kg::KnowledgeGraph;
use crate::pool;

pub const DEFAULT_MAX_ITER: usize = 100;
pub const DEFAULT_MAX_CLUSTERS: usize = 16;

#[derive(Debug, Error)]
pub enum ClusterError {
    #[error("cannot cluster an empty item set")]
    Empty,
    #[error("cluster count must be at least 1")]
    ZeroClusters,
    #[error("items have mixed dimensions")]
    MixedDimensions,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KMeansParams {
    pub clusters: usize,
    pub seed: u64,
    pub max_iter: usize,
}

impl KMeansParams {
    pub fn new(clusters: usize, seed: u64) -> Self {
        Self {
            clusters,
            seed,
            max_iter: DEFAULT_MAX_ITER,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub anchor_id: String,
    pub centroids: Vec<Vec<f64>>,
    pub assignment: BTreeMap<String, usize>,
    /// Within-cluster sum of squares after each Lloyd iteration.
    pub objective_trace: Vec<f64>,
}

impl ClusterModel {
    pub fn m(&self) -> usize {
        self.centroids.len()
    }

    pub fn objective(&self) -> f64 {
        self.objective_trace.last().copied().unwrap_or(0.0)
    }

    pub fn cluster_of(&self, item: &str) -> Option<usize> {
        self.assignment.get(item).copied()
    }
}

/// `min(⌈√count⌉, cap)`, at least one.
pub fn default_cluster_count(children: usize, cap: usize) -> usize {
    let root = (children as f64).sqrt().ceil() as usize;
    root.min(cap).max(1)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centroids.iter().enumerate() {
        let d = sq_dist(p, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

fn plus_plus(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut chosen = vec![false; n];
    let first = rng.random_range(0..n);
    chosen[first] = true;
    let mut centroids = vec![points[first].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &points[first])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                if w <= 0.0 {
                    continue;
                }
                if target < w {
                    pick = Some(i);
                    break;
                }
                target -= w;
            }
            // Rounding can leave `target` just past the last positive weight.
            pick.unwrap_or_else(|| d2.iter().rposition(|&w| w > 0.0).unwrap())
        } else {
            let free: Vec<usize> = (0..n).filter(|&i| !chosen[i]).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen[pick] = true;
        centroids.push(points[pick].clone());
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, &points[pick]));
        }
    }
    centroids
}

/// Clusters `items` into `min(m, |items|)` groups. Items are processed in id
/// order so the result does not depend on input order.
pub fn kmeans(items: &[EmbeddedItem], params: &KMeansParams) -> Result<ClusterModel, ClusterError> {
    if params.clusters == 0 {
        return Err(ClusterError::ZeroClusters);
    }
    if items.is_empty() {
        return Err(ClusterError::Empty);
    }
    let mut sorted: Vec<&EmbeddedItem> = items.iter().collect();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    let dim = sorted[0].vector.len();
    if sorted.iter().any(|i| i.vector.len() != dim) {
        return Err(ClusterError::MixedDimensions);
    }
    let points: Vec<Vec<f64>> = sorted
        .iter()
        .map(|i| i.vector.iter().map(|&x| x as f64).collect())
        .collect();
    let n = points.len();
    let k = params.clusters.min(n);

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut centroids = plus_plus(&points, k, &mut rng);
    let mut labels: Vec<usize> = vec![usize::MAX; n];
    let mut trace = Vec::new();

    for _ in 0..params.max_iter.max(1) {
        let mut next: Vec<usize> = points.iter().map(|p| nearest(p, &centroids).0).collect();
        reseed_empty(&points, &mut next, &mut centroids);
        let changed = next != labels;
        labels = next;

        let mut sums = vec![vec![0f64; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &l) in points.iter().zip(&labels) {
            counts[l] += 1;
            for (s, x) in sums[l].iter_mut().zip(p) {
                *s += x;
            }
        }
        for (c, (s, &cnt)) in centroids.iter_mut().zip(sums.into_iter().zip(&counts)) {
            *c = s.into_iter().map(|x| x / cnt as f64).collect();
        }
        let objective: f64 = points
            .iter()
            .zip(&labels)
            .map(|(p, &l)| sq_dist(p, &centroids[l]))
            .sum();
        trace.push(objective);
        if !changed {
            break;
        }
    }

    Ok(ClusterModel {
        anchor_id: String::new(),
        centroids,
        assignment: sorted.iter().zip(&labels).map(|(i, &l)| (i.id.clone(), l)).collect(),
        objective_trace: trace,
    })
}

/// Gives each empty cluster the point farthest from its current centroid,
/// taken only from clusters that can spare one.
fn reseed_empty(points: &[Vec<f64>], labels: &mut [usize], centroids: &mut [Vec<f64>]) {
    let k = centroids.len();
    let mut counts = vec![0usize; k];
    for &l in labels.iter() {
        counts[l] += 1;
    }
    for empty in 0..k {
        if counts[empty] > 0 {
            continue;
        }
        let mut best: Option<(usize, f64)> = None;
        for (i, p) in points.iter().enumerate() {
            if counts[labels[i]] <= 1 {
                continue;
            }
            let d = sq_dist(p, &centroids[labels[i]]);
            if best.is_none_or(|(_, bd)| d > bd) {
                best = Some((i, d));
            }
        }
        let (i, _) = best.expect("n >= k guarantees a donor cluster");
        counts[labels[i]] -= 1;
        labels[i] = empty;
        counts[empty] = 1;
        centroids[empty] = points[i].clone();
    }
}

/// Clusters the embedded children of every anchor. Anchors without embedded
/// children are skipped. Cluster counts follow `default_cluster_count`.
pub fn cluster_anchors(
    graph: &KnowledgeGraph,
    index: &VectorIndex,
    seed: u64,
    max_clusters: usize,
    max_iter: usize,
    workers: usize,
) -> Result<BTreeMap<String, ClusterModel>, ClusterError> {
    let jobs: Vec<(String, Vec<EmbeddedItem>)> = graph
        .anchors()
        .into_iter()
        .map(|a| {
            let items = graph
                .children(&a.id)
                .unwrap_or_default()
                .iter()
                .filter_map(|c| index.get(&c.id).cloned())
                .collect::<Vec<_>>();
            (a.id.clone(), items)
        })
        .filter(|(_, items)| !items.is_empty())
        .collect();
    let models = pool::map_bounded(&jobs, workers, |(anchor, items)| {
        let params = KMeansParams {
            clusters: default_cluster_count(items.len(), max_clusters),
            seed: xxh64(anchor.as_bytes(), seed),
            max_iter,
        };
        kmeans(items, &params).map(|mut m| {
            m.anchor_id = anchor.clone();
            m
        })
    });
    jobs.iter()
        .zip(models)
        .map(|((a, _), m)| m.map(|m| (a.clone(), m)))
        .collect()
}
