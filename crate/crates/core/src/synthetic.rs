//! Seeded synthetic knowledge graphs and case pools for experiments and tests.
//!
//! Package and function popularity follow a Zipf-like law, so random samples
//! keep hitting the same few functions while the long tail stays uncovered.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::case::Case;
use crate::kg::{KnowledgeGraph, Triple, REL_HAS_CHILD, REL_HAS_DESCRIPTION, REL_IS_A};

const TOPICS: [&str; 24] = [
    "signal", "frame", "matrix", "vector", "plot", "axis", "table", "column", "image", "pixel", "file", "stream",
    "socket", "packet", "date", "zone", "text", "token", "graph", "edge", "model", "layer", "sound", "sample",
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub packages: usize,
    pub functions_per_package: usize,
    pub cases: usize,
    /// Popularity exponent; 0 is uniform.
    pub skew: f64,
    /// Calls per case are drawn from `1..=max_calls`.
    pub max_calls: usize,
    /// Chance that a case also imports a second package.
    pub cross_package: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            packages: 8,
            functions_per_package: 9,
            cases: 100,
            skew: 1.2,
            max_calls: 3,
            cross_package: 0.2,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticWorld {
    pub graph: KnowledgeGraph,
    pub pool: Vec<Case>,
}

pub fn package_id(i: usize) -> String {
    format!("pkg{i}")
}

pub fn function_id(p: usize, f: usize) -> String {
    format!("pkg{p}.fn{f}")
}

fn zipf(n: usize, s: f64) -> WeightedIndex<f64> {
    WeightedIndex::new((0..n).map(|r| 1.0 / ((r + 1) as f64).powf(s))).expect("n > 0")
}

/// Triples for the graph: each function's description mixes words from one
/// of a few per-package topics, so embeddings form clusters.
pub fn synthetic_triples(cfg: &SyntheticConfig) -> Vec<Triple> {
    let mut t = Vec::new();
    let groups = (cfg.functions_per_package as f64).sqrt().ceil().max(1.0) as usize;
    for p in 0..cfg.packages {
        let pid = package_id(p);
        t.push(Triple::new(&pid, REL_IS_A, "package"));
        t.push(Triple::new(&pid, REL_HAS_DESCRIPTION, format!("synthetic package {p}")));
        for f in 0..cfg.functions_per_package {
            let fid = function_id(p, f);
            let g = f % groups;
            let w = |k: usize| TOPICS[(p * 5 + g * 3 + k) % TOPICS.len()];
            t.push(Triple::new(&fid, REL_IS_A, "function"));
            t.push(Triple::new(&pid, REL_HAS_CHILD, &fid));
            t.push(Triple::new(
                &fid,
                REL_HAS_DESCRIPTION,
                format!("{} {} {} {} helper", w(0), w(1), w(2), w(0)),
            ));
        }
    }
    t
}

pub fn generate(cfg: &SyntheticConfig) -> SyntheticWorld {
    assert!(
        cfg.packages > 0 && cfg.functions_per_package > 0,
        "empty synthetic world"
    );
    let graph = KnowledgeGraph::from_triples(synthetic_triples(cfg)).expect("synthetic graph is well-formed");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let pkg_dist = zipf(cfg.packages, cfg.skew);
    let fn_dist = zipf(cfg.functions_per_package, cfg.skew);
    // Popularity ranks are shuffled per package so rank 0 is not always fn0.
    let ranks: Vec<Vec<usize>> = (0..cfg.packages)
        .map(|_| {
            let mut r: Vec<usize> = (0..cfg.functions_per_package).collect();
            rand::seq::SliceRandom::shuffle(r.as_mut_slice(), &mut rng);
            r
        })
        .collect();

    let pool = (0..cfg.cases)
        .map(|k| {
            let mut pkgs = vec![pkg_dist.sample(&mut rng)];
            if rng.random::<f64>() < cfg.cross_package {
                let other = pkg_dist.sample(&mut rng);
                if other != pkgs[0] {
                    pkgs.push(other);
                }
            }
            let mut code = String::new();
            let mut words = Vec::new();
            for &p in &pkgs {
                code.push_str(&format!("import {}\n", package_id(p)));
            }
            for &p in &pkgs {
                let calls = rng.random_range(1..=cfg.max_calls.max(1));
                let mut used = Vec::new();
                for _ in 0..calls {
                    let f = ranks[p][fn_dist.sample(&mut rng)];
                    if !used.contains(&f) {
                        used.push(f);
                        code.push_str(&format!("r{} = {}(data)\n", used.len(), function_id(p, f)));
                        words.push(format!("fn{f} of {}", package_id(p)));
                    }
                }
            }
            let mut c = Case::new(
                format!("case{k:03}"),
                format!("task {k}: use {}", words.join(" and ")),
                code,
            );
            c.validated = true;
            c
        })
        .collect();
    SyntheticWorld { graph, pool }
}
