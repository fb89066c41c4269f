//! Coverage of KG-guided selection versus random subsets at fixed budgets.

use std::collections::BTreeMap;
use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::case::Case;
use crate::cluster::{self, ClusterError, ClusterModel};
use crate::embed::EmbeddingProvider;
use crate::index::VectorIndex;
use crate::kg::KnowledgeGraph;
use crate::retrieval::{self, RetrievalError};
use crate::selection::{self, to_f64, CoverageSpace, Rational, Selection, SelectionConfig, TraversalOrder};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("budget {0} is outside (0, 1]")]
    BadBudget(f64),
    #[error("candidate pool is empty")]
    EmptyPool,
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Graph embeddings, per-anchor clusters and the coverage space built from them.
pub struct Prepared {
    pub index: VectorIndex,
    pub clusters: BTreeMap<String, ClusterModel>,
    pub space: CoverageSpace,
}

pub fn prepare(
    graph: &KnowledgeGraph,
    embedder: &dyn EmbeddingProvider,
    seed: u64,
    max_clusters: usize,
    max_iter: usize,
    workers: usize,
) -> Result<Prepared, ExperimentError> {
    let index = retrieval::build_kg_index(graph, embedder, None, 64, workers)?;
    let clusters = cluster::cluster_anchors(graph, &index, seed, max_clusters, max_iter, workers)?;
    let space = CoverageSpace::new(graph, &clusters);
    Ok(Prepared { index, clusters, space })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveConfig {
    pub budgets: Vec<f64>,
    pub seeds: usize,
    pub seed: u64,
    /// Thresholds for the guided arm. Above 1 the pass runs to exhaustion, so
    /// the base is a full coverage ordering of the pool.
    pub tau1: f64,
    pub tau2: f64,
    pub order: TraversalOrder,
}

impl Default for CurveConfig {
    fn default() -> Self {
        Self {
            budgets: vec![0.1, 0.2, 0.3, 0.5, 1.0],
            seeds: 20,
            seed: 0,
            tau1: 1.0,
            tau2: 1.0,
            order: TraversalOrder::InputOrder,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub budget: f64,
    pub size: usize,
    pub kg_guided: f64,
    pub random_mean: f64,
    pub random_stdev: f64,
    pub full_pool: f64,
}

/// ⌈b·n⌉, tolerant of float noise such as 0.3·100 = 30.000000000000004.
pub fn budget_size(b: f64, n: usize) -> usize {
    ((b * n as f64) - 1e-9).ceil().max(0.0) as usize
}

pub fn check_budgets(budgets: &[f64]) -> Result<(), ExperimentError> {
    match budgets.iter().find(|&&b| !(b > 0.0 && b <= 1.0)) {
        Some(&b) => Err(ExperimentError::BadBudget(b)),
        None => Ok(()),
    }
}

/// Mean and sample standard deviation, computed exactly before the final square root.
fn mean_stdev(xs: &[Rational]) -> (f64, f64) {
    let n = Rational::from_integer(xs.len() as i64);
    let mean = xs.iter().copied().sum::<Rational>() / n;
    if xs.len() < 2 {
        return (to_f64(mean), 0.0);
    }
    let ss: Rational = xs.iter().map(|&x| (x - mean) * (x - mean)).sum();
    let var = ss / (n - 1);
    (to_f64(mean), to_f64(var).sqrt())
}

pub fn selection_curve(
    pool: &[Case],
    space: &CoverageSpace,
    cfg: &CurveConfig,
) -> Result<(Vec<CurveRow>, Selection), ExperimentError> {
    check_budgets(&cfg.budgets)?;
    if pool.is_empty() {
        return Err(ExperimentError::EmptyPool);
    }
    let sel_cfg = SelectionConfig {
        tau1: cfg.tau1,
        tau2: cfg.tau2,
        order: cfg.order,
    };
    let guided = selection::select_cases(pool, space, &sel_cfg);
    let full = space.coverage_of(pool).score();
    let rows = cfg
        .budgets
        .iter()
        .map(|&b| {
            let size = budget_size(b, pool.len()).min(pool.len());
            let take = size.min(guided.base.len());
            let kg_guided = space.coverage_of(&guided.base[..take]).score();
            let scores: Vec<Rational> = (0..cfg.seeds.max(1))
                .map(|s| {
                    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(s as u64));
                    let idx = rand::seq::index::sample(&mut rng, pool.len(), size);
                    space.coverage_of(idx.iter().map(|i| &pool[i])).score_exact()
                })
                .collect();
            let (random_mean, random_stdev) = mean_stdev(&scores);
            CurveRow {
                budget: b,
                size,
                kg_guided,
                random_mean,
                random_stdev,
                full_pool: full,
            }
        })
        .collect();
    Ok((rows, guided))
}

pub fn write_curve_csv<W: Write>(rows: &[CurveRow], w: W) -> Result<(), ExperimentError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "budget",
        "size",
        "kg_guided",
        "random_mean",
        "random_stdev",
        "full_pool",
    ])?;
    for r in rows {
        out.write_record([
            format!("{:.2}", r.budget),
            r.size.to_string(),
            format!("{:.6}", r.kg_guided),
            format!("{:.6}", r.random_mean),
            format!("{:.6}", r.random_stdev),
            format!("{:.6}", r.full_pool),
        ])?;
    }
    out.flush().map_err(csv::Error::from)?;
    Ok(())
}
