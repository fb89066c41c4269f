//! Coverage-driven case-base construction.
//!
//! Package coverage counts distinct graph packages touched by the base;
//! cluster coverage counts distinct `(anchor, cluster)` pairs hit by at least
//! one called function. A candidate is kept exactly when it raises either
//! ratio, and the scan stops once both ratios strictly exceed their thresholds.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{self, Write};

use num_rational::Ratio;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::case::Case;
use crate::cluster::ClusterModel;
use crate::kg::KnowledgeGraph;

pub type Rational = Ratio<i64>;

/// Ratio with the vacuous-coverage convention: nothing to cover counts as fully covered.
fn coverage_ratio(covered: usize, total: usize) -> Rational {
    if total == 0 {
        Rational::from_integer(1)
    } else {
        Rational::new(covered as i64, total as i64)
    }
}

pub fn to_f64(r: Rational) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

/// Everything selection needs to know about the graph and its clusters.
#[derive(Debug, Clone)]
pub struct CoverageSpace {
    packages: BTreeSet<String>,
    package_lookup: BTreeMap<String, String>,
    exact: BTreeMap<String, (String, usize)>,
    by_suffix: BTreeMap<String, Vec<(String, String, usize)>>,
    total_clusters: usize,
}

fn suffix2(name: &str) -> Option<String> {
    let parts: Vec<&str> = name.rsplit('.').take(2).collect();
    (parts.len() == 2).then(|| format!("{}.{}", parts[1], parts[0]))
}

impl CoverageSpace {
    pub fn new(graph: &KnowledgeGraph, clusters: &BTreeMap<String, ClusterModel>) -> Self {
        let anchors = graph.anchors();
        let packages: BTreeSet<String> = anchors.iter().map(|a| a.id.clone()).collect();
        let mut package_lookup = BTreeMap::new();
        for a in &anchors {
            package_lookup.entry(a.name.clone()).or_insert_with(|| a.id.clone());
        }
        for a in &anchors {
            package_lookup.insert(a.id.clone(), a.id.clone());
        }

        let mut exact = BTreeMap::new();
        let mut by_suffix: BTreeMap<String, Vec<(String, String, usize)>> = BTreeMap::new();
        let mut total_clusters = 0;
        for (anchor, model) in clusters {
            total_clusters += model.m();
            for (fid, &k) in &model.assignment {
                exact.insert(fid.clone(), (anchor.clone(), k));
                if let Some(node) = graph.node(fid) {
                    if node.name != node.id && node.name.contains('.') {
                        exact.entry(node.name.clone()).or_insert((anchor.clone(), k));
                    }
                }
                if let Some(s) = suffix2(fid) {
                    by_suffix.entry(s).or_default().push((fid.clone(), anchor.clone(), k));
                }
            }
        }
        Self {
            packages,
            package_lookup,
            exact,
            by_suffix,
            total_clusters,
        }
    }

    /// n
    pub fn package_count(&self) -> usize {
        self.packages.len()
    }

    /// m, summed over every anchor's clusters.
    pub fn cluster_count(&self) -> usize {
        self.total_clusters
    }

    /// Graph package id for an import root, if the graph knows it.
    pub fn resolve_package(&self, root: &str) -> Option<&str> {
        self.package_lookup.get(root).map(String::as_str)
    }

    /// Cluster holding a called function: exact id first, then a
    /// last-two-segments match restricted to the function's own package.
    pub fn resolve_function(&self, qualified: &str) -> Option<(String, usize)> {
        if let Some(hit) = self.exact.get(qualified) {
            return Some(hit.clone());
        }
        let root = qualified.split('.').next()?;
        let anchor = self.resolve_package(root)?;
        let cands = self.by_suffix.get(&suffix2(qualified)?)?;
        cands
            .iter()
            .filter(|(_, a, _)| a == anchor)
            .min_by(|x, y| x.0.cmp(&y.0))
            .map(|(_, a, k)| (a.clone(), *k))
    }

    fn case_footprint(&self, case: &Case) -> (BTreeSet<String>, BTreeSet<(String, usize)>) {
        let pkgs = case
            .packages
            .iter()
            .filter_map(|p| self.resolve_package(p).map(str::to_string))
            .collect();
        let clusters = case.functions.iter().filter_map(|f| self.resolve_function(f)).collect();
        (pkgs, clusters)
    }

    pub fn empty_state(&self) -> CoverageState {
        CoverageState {
            covered_packages: BTreeSet::new(),
            covered_clusters: BTreeSet::new(),
            n: self.package_count(),
            m: self.cluster_count(),
        }
    }

    /// Coverage reached by a whole collection of cases.
    pub fn coverage_of<'a>(&self, cases: impl IntoIterator<Item = &'a Case>) -> CoverageState {
        let mut state = self.empty_state();
        for c in cases {
            let (p, k) = self.case_footprint(c);
            state.covered_packages.extend(p);
            state.covered_clusters.extend(k);
        }
        state
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoverageState {
    pub covered_packages: BTreeSet<String>,
    pub covered_clusters: BTreeSet<(String, usize)>,
    pub n: usize,
    pub m: usize,
}

impl CoverageState {
    pub fn alpha(&self) -> Rational {
        coverage_ratio(self.covered_packages.len(), self.n)
    }

    pub fn beta(&self) -> Rational {
        coverage_ratio(self.covered_clusters.len(), self.m)
    }

    /// (α + β) / 2, exactly.
    pub fn score_exact(&self) -> Rational {
        (self.alpha() + self.beta()) / 2
    }

    pub fn score(&self) -> f64 {
        to_f64(self.score_exact())
    }

    pub fn meets(&self, tau1: f64, tau2: f64) -> bool {
        to_f64(self.alpha()) > tau1 && to_f64(self.beta()) > tau2
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoverageDelta {
    pub delta_alpha: Rational,
    pub delta_beta: Rational,
    pub new_packages: BTreeSet<String>,
    pub new_clusters: BTreeSet<(String, usize)>,
}

impl CoverageDelta {
    pub fn improves(&self) -> bool {
        self.delta_alpha > Rational::from_integer(0) || self.delta_beta > Rational::from_integer(0)
    }
}

/// Gain from adding `case` to the base behind `state`. Does not mutate `state`.
pub fn coverage_delta(state: &CoverageState, case: &Case, space: &CoverageSpace) -> CoverageDelta {
    let (pkgs, clusters) = space.case_footprint(case);
    let new_packages: BTreeSet<String> = pkgs.difference(&state.covered_packages).cloned().collect();
    let new_clusters: BTreeSet<(String, usize)> = clusters.difference(&state.covered_clusters).cloned().collect();
    let delta_alpha = coverage_ratio(state.covered_packages.len() + new_packages.len(), state.n) - state.alpha();
    let delta_beta = coverage_ratio(state.covered_clusters.len() + new_clusters.len(), state.m) - state.beta();
    CoverageDelta {
        delta_alpha,
        delta_beta,
        new_packages,
        new_clusters,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TraversalOrder {
    #[default]
    InputOrder,
    Shuffled(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionConfig {
    pub tau1: f64,
    pub tau2: f64,
    #[serde(default)]
    pub order: TraversalOrder,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            tau1: 0.9,
            tau2: 0.9,
            order: TraversalOrder::InputOrder,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decision {
    pub case_id: String,
    #[serde(with = "ratio_str")]
    pub delta_alpha: Rational,
    #[serde(with = "ratio_str")]
    pub delta_beta: Rational,
    pub accepted: bool,
    /// Coverage after this decision.
    #[serde(with = "ratio_str")]
    pub alpha: Rational,
    #[serde(with = "ratio_str")]
    pub beta: Rational,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    ThresholdsMet,
    CandidatesExhausted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub stop: StopReason,
    /// True when the pool ran out before both thresholds were exceeded.
    pub coverage_shortfall: bool,
    pub base_size: usize,
    pub evaluated: usize,
    #[serde(with = "ratio_str")]
    pub alpha: Rational,
    #[serde(with = "ratio_str")]
    pub beta: Rational,
    pub tau1: f64,
    pub tau2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TraceRecord {
    Decision(Decision),
    Summary(TraceSummary),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub base: Vec<Case>,
    pub state: CoverageState,
    pub decisions: Vec<Decision>,
    pub summary: TraceSummary,
}

impl Selection {
    pub fn write_trace<W: Write>(&self, mut w: W) -> io::Result<()> {
        for d in &self.decisions {
            serde_json::to_writer(&mut w, &TraceRecord::Decision(d.clone()))?;
            w.write_all(b"\n")?;
        }
        serde_json::to_writer(&mut w, &TraceRecord::Summary(self.summary.clone()))?;
        w.write_all(b"\n")
    }
}

pub fn traversal(candidates: &[Case], order: TraversalOrder) -> Vec<&Case> {
    let mut v: Vec<&Case> = candidates.iter().collect();
    if let TraversalOrder::Shuffled(seed) = order {
        v.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    v
}

/// Single pass over the candidates in configured order.
pub fn select_cases(candidates: &[Case], space: &CoverageSpace, cfg: &SelectionConfig) -> Selection {
    let mut state = space.empty_state();
    let mut base = Vec::new();
    let mut decisions = Vec::new();
    let mut stop = StopReason::CandidatesExhausted;

    for case in traversal(candidates, cfg.order) {
        if state.meets(cfg.tau1, cfg.tau2) {
            stop = StopReason::ThresholdsMet;
            break;
        }
        let delta = coverage_delta(&state, case, space);
        let accepted = delta.improves();
        if accepted {
            state.covered_packages.extend(delta.new_packages.iter().cloned());
            state.covered_clusters.extend(delta.new_clusters.iter().cloned());
            base.push(case.clone());
        }
        decisions.push(Decision {
            case_id: case.id.clone(),
            delta_alpha: delta.delta_alpha,
            delta_beta: delta.delta_beta,
            accepted,
            alpha: state.alpha(),
            beta: state.beta(),
        });
    }
    if stop == StopReason::CandidatesExhausted && state.meets(cfg.tau1, cfg.tau2) {
        stop = StopReason::ThresholdsMet;
    }
    let summary = TraceSummary {
        stop,
        coverage_shortfall: !state.meets(cfg.tau1, cfg.tau2),
        base_size: base.len(),
        evaluated: decisions.len(),
        alpha: state.alpha(),
        beta: state.beta(),
        tau1: cfg.tau1,
        tau2: cfg.tau2,
    };
    Selection {
        base,
        state,
        decisions,
        summary,
    }
}

pub fn read_trace(text: &str) -> Result<Vec<TraceRecord>, serde_json::Error> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect()
}

mod ratio_str {
    use super::Rational;
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(r: &Rational, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(r)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Rational, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(|_| D::Error::custom(format!("bad rational `{s}`")))
    }
}
