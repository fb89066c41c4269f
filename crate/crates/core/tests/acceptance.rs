//! Acceptance suite. Each criterion runs in sequence under its own time
//! limit and prints one PASS/FAIL line; the test fails if any criterion does.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{self, AssertUnwindSafe};
use std::path::PathBuf;
use std::time::{Duration, Instant};

use kgcoder::case::Case;
use kgcoder::cluster::{self, KMeansParams, DEFAULT_MAX_CLUSTERS, DEFAULT_MAX_ITER};
use kgcoder::embed::{self, StubEmbedder};
use kgcoder::eval::{self, EvalError, TaskResult};
use kgcoder::experiment::{self, CurveConfig};
use kgcoder::index::{EmbeddedItem, VectorIndex};
use kgcoder::protocol::{self, SegmentKind, StreamParser};
use kgcoder::retrieval::{self, KnowledgeItem};
use kgcoder::selection::{self, CoverageState, Rational, SelectionConfig, StopReason};
use kgcoder::store::{self, StoreOptions};
use kgcoder::synthetic::{self, SyntheticConfig};
use num_rational::Ratio;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {{
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($fmt)+));
        }
    }};
}

struct Criterion {
    number: usize,
    name: &'static str,
    limit: Option<Duration>,
}

fn run(c: Criterion, f: impl FnOnce() -> Check) -> bool {
    let start = Instant::now();
    let outcome = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into());
        Err(format!("panicked: {msg}"))
    });
    let elapsed = start.elapsed();
    let (ok, detail) = match outcome {
        Ok(d) => match c.limit {
            Some(l) if elapsed > l => (false, format!("{d}; over the {:.0} s limit", l.as_secs_f64())),
            _ => (true, d),
        },
        Err(e) => (false, e),
    };
    let limit = c
        .limit
        .map_or("no limit".to_string(), |l| format!("limit {:.0} s", l.as_secs_f64()));
    println!(
        "criterion {:>2} {:<28} {} ({detail}; {:.3} s, {limit})",
        c.number,
        c.name,
        if ok { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64()
    );
    ok
}

fn secs(s: u64) -> Option<Duration> {
    Some(Duration::from_secs(s))
}

fn tau() -> Rational {
    Ratio::new(9, 10)
}

/// Runs selection on 50 random pools and replays every trace against the
/// coverage definitions. Returns the concatenated trace bytes.
fn selection_pools() -> Result<(String, Vec<u8>), String> {
    let embedder = StubEmbedder::default();
    let mut bytes = Vec::new();
    let mut decisions = 0;
    let mut met = 0;
    for i in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + i);
        let cfg = SyntheticConfig {
            packages: rng.random_range(1..=6),
            functions_per_package: rng.random_range(1..=4),
            cases: rng.random_range(5..=30),
            seed: i,
            ..Default::default()
        };
        let world = synthetic::generate(&cfg);
        let prep = experiment::prepare(&world.graph, &embedder, i, DEFAULT_MAX_CLUSTERS, DEFAULT_MAX_ITER, 1)
            .map_err(|e| e.to_string())?;
        let n = world.graph.anchors().len();
        let m: usize = prep.clusters.values().map(|c| c.centroids.len()).sum();
        ensure!(n <= 6 && m <= 12, "pool {i}: n = {n}, m = {m} out of range");
        ensure!(
            prep.space.package_count() == n && prep.space.cluster_count() == m,
            "pool {i}: coverage space disagrees on n or m"
        );

        let sel = selection::select_cases(&world.pool, &prep.space, &SelectionConfig::default());
        let mut pkgs = BTreeSet::new();
        let mut cls = BTreeSet::new();
        let mut prev = (Rational::from_integer(0), Rational::from_integer(0));
        let mut accepted = Vec::new();
        for (j, d) in sel.decisions.iter().enumerate() {
            let case = &world.pool[j];
            ensure!(d.case_id == case.id, "pool {i}: decision {j} out of input order");
            let (a0, b0) = (common::ratio(pkgs.len(), n), common::ratio(cls.len(), m));
            ensure!(
                !(a0 > tau() && b0 > tau()),
                "pool {i}: case {} evaluated after both thresholds were exceeded",
                d.case_id
            );
            let (p, k) = common::footprint(case, &world.graph, &prep.clusters);
            let a1 = common::ratio(pkgs.union(&p).count(), n);
            let b1 = common::ratio(cls.union(&k).count(), m);
            let (da, db) = (a1 - a0, b1 - b0);
            ensure!(
                d.delta_alpha == da && d.delta_beta == db,
                "pool {i}: delta mismatch on {}",
                d.case_id
            );
            let gain = da > Rational::from_integer(0) || db > Rational::from_integer(0);
            ensure!(
                d.accepted == gain,
                "pool {i}: acceptance biconditional broken on {}",
                d.case_id
            );
            if gain {
                pkgs.extend(p);
                cls.extend(k);
                accepted.push(case.id.clone());
            }
            ensure!(
                d.alpha == common::ratio(pkgs.len(), n) && d.beta == common::ratio(cls.len(), m),
                "pool {i}: recorded coverage differs from replay"
            );
            ensure!(d.alpha >= prev.0 && d.beta >= prev.1, "pool {i}: coverage decreased");
            prev = (d.alpha, d.beta);
            decisions += 1;
        }
        let meets = prev.0 > tau() && prev.1 > tau();
        if sel.decisions.len() < world.pool.len() {
            ensure!(meets, "pool {i}: stopped early without exceeding both thresholds");
        }
        ensure!(
            (sel.summary.stop == StopReason::ThresholdsMet) == meets && sel.summary.coverage_shortfall == !meets,
            "pool {i}: summary disagrees with replay"
        );
        let base: Vec<String> = sel.base.iter().map(|c| c.id.clone()).collect();
        ensure!(base == accepted, "pool {i}: base differs from accepted decisions");
        met += meets as usize;
        sel.write_trace(&mut bytes).map_err(|e| e.to_string())?;
    }
    Ok((
        format!("50 pools, {decisions} decisions replayed, {met} met both thresholds"),
        bytes,
    ))
}

fn coverage_delta_oracle() -> Check {
    let embedder = StubEmbedder::default();
    let mut pairs = 0;
    let mut improving = 0;
    for w in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + w);
        let cfg = SyntheticConfig {
            packages: rng.random_range(1..=8),
            functions_per_package: rng.random_range(1..=9),
            cases: 40,
            seed: w,
            ..Default::default()
        };
        let world = synthetic::generate(&cfg);
        let prep = experiment::prepare(&world.graph, &embedder, w, DEFAULT_MAX_CLUSTERS, DEFAULT_MAX_ITER, 1)
            .map_err(|e| e.to_string())?;
        let anchors: Vec<String> = world.graph.anchors().iter().map(|a| a.id.clone()).collect();
        let universe: Vec<(String, usize)> = prep
            .clusters
            .iter()
            .flat_map(|(a, c)| (0..c.centroids.len()).map(move |k| (a.clone(), k)))
            .collect();
        let (n, m) = (anchors.len(), universe.len());
        for t in 0..100 {
            let p_keep = rng.random::<f64>();
            let state = CoverageState {
                covered_packages: anchors
                    .iter()
                    .filter(|_| rng.random::<f64>() < p_keep)
                    .cloned()
                    .collect(),
                covered_clusters: universe
                    .iter()
                    .filter(|_| rng.random::<f64>() < p_keep)
                    .cloned()
                    .collect(),
                n,
                m,
            };
            let case = if rng.random_bool(0.7) {
                world.pool[rng.random_range(0..world.pool.len())].clone()
            } else {
                let p = rng.random_range(0..cfg.packages + 1);
                let f = rng.random_range(0..cfg.functions_per_package);
                let code = format!("import pkg{p}\nimport elsewhere\nx = pkg{p}.fn{f}(1)\ny = elsewhere.call()\n");
                Case::new(format!("r{t}"), "random", code)
            };
            let (p, k) = common::footprint(&case, &world.graph, &prep.clusters);
            let da = common::ratio(state.covered_packages.union(&p).count(), n)
                - common::ratio(state.covered_packages.len(), n);
            let db = common::ratio(state.covered_clusters.union(&k).count(), m)
                - common::ratio(state.covered_clusters.len(), m);
            let before = state.clone();
            let d = selection::coverage_delta(&state, &case, &prep.space);
            ensure!(state == before, "coverage_delta mutated its state");
            ensure!(
                d.delta_alpha == da && d.delta_beta == db,
                "world {w} pair {t}: got ({}, {}), expected ({da}, {db})",
                d.delta_alpha,
                d.delta_beta
            );
            ensure!(
                d.improves() == (da > Rational::from_integer(0) || db > Rational::from_integer(0)),
                "world {w} pair {t}: improves() disagrees"
            );
            improving += d.improves() as usize;
            pairs += 1;
        }
    }
    Ok(format!("{pairs} pairs exact, {improving} improving"))
}

fn brute_cosine(u: &[f32], v: &[f32]) -> f64 {
    let dot: f64 = u.iter().zip(v).map(|(&a, &b)| a as f64 * b as f64).sum();
    let nu: f64 = u.iter().map(|&a| a as f64 * a as f64).sum::<f64>().sqrt();
    let nv: f64 = v.iter().map(|&b| b as f64 * b as f64).sum::<f64>().sqrt();
    (dot / (nu * nv)).clamp(-1.0, 1.0)
}

fn brute_rank(query: &[f32], items: &[(String, Vec<f32>)], k: usize) -> Vec<(String, f64)> {
    let mut all: Vec<(String, f64)> = items
        .iter()
        .map(|(id, v)| (id.clone(), brute_cosine(query, v)))
        .collect();
    all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    all.truncate(k);
    all
}

fn same_ranking(got: &[(String, f64)], want: &[(String, f64)]) -> bool {
    got.len() == want.len()
        && got
            .iter()
            .zip(want)
            .all(|(g, w)| g.0 == w.0 && (g.1 - w.1).abs() <= 1e-12)
}

fn random_query(rng: &mut ChaCha8Rng, texts: &[String]) -> String {
    let words: Vec<&str> = texts.iter().flat_map(|t| t.split_whitespace()).collect();
    (0..rng.random_range(1..=4))
        .map(|_| words[rng.random_range(0..words.len())])
        .collect::<Vec<_>>()
        .join(" ")
}

fn retrieval_exactness() -> Check {
    let embedder = StubEmbedder::default();
    let mut ties = 0;
    for i in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(3000 + i);

        // top_k on small-integer vectors, where ties are common.
        let size = rng.random_range(1..=200);
        let dim = [3, 8, 32][rng.random_range(0..3)];
        let nonzero = |rng: &mut ChaCha8Rng| loop {
            let v: Vec<f32> = (0..dim).map(|_| rng.random_range(-2i32..=2) as f32).collect();
            if v.iter().any(|&x| x != 0.0) {
                return v;
            }
        };
        let mut items: Vec<(String, Vec<f32>)> = (0..size).map(|j| (format!("v{j:03}"), nonzero(&mut rng))).collect();
        items.shuffle(&mut rng);
        let index = VectorIndex::from_items(
            items
                .iter()
                .map(|(id, v)| EmbeddedItem {
                    id: id.clone(),
                    vector: v.clone(),
                    text: String::new(),
                })
                .collect(),
        )
        .map_err(|e| e.to_string())?;
        let query = nonzero(&mut rng);
        let k = rng.random_range(1..=size + 5);
        let got = index.top_k(&query, k).map_err(|e| e.to_string())?;
        let want = brute_rank(&query, &items, k);
        ensure!(same_ranking(&got, &want), "index {i}: top_k differs from brute force");
        ties += got.windows(2).filter(|w| w[0].1 == w[1].1).count();

        // retrieve_knowledge over a random graph.
        let world = synthetic::generate(&SyntheticConfig {
            packages: rng.random_range(1..=8),
            functions_per_package: rng.random_range(1..=25),
            cases: rng.random_range(1..=200),
            seed: i,
            ..Default::default()
        });
        let graph = &world.graph;
        let kg_index = retrieval::build_kg_index(graph, &embedder, None, 64, 1).map_err(|e| e.to_string())?;
        let applicable: BTreeSet<String> = graph
            .anchors()
            .iter()
            .filter(|_| rng.random_bool(0.4))
            .map(|a| a.id.clone())
            .collect();
        let texts: Vec<String> = graph.nodes().map(|n| n.description.clone()).collect();
        let q = random_query(&mut rng, &texts);
        let top_t = rng.random_range(1..=15);
        let got = retrieval::retrieve_knowledge(&q, graph, &kg_index, &applicable, top_t, &embedder)
            .map_err(|e| e.to_string())?;
        let members: Vec<(String, Vec<f32>)> = graph
            .nodes()
            .filter(|n| n.kind.is_member())
            .filter(|n| applicable.is_empty() || graph.package_of(&n.id).is_some_and(|p| applicable.contains(p)))
            .map(|n| (n.id.clone(), embed::embed(&embedder, &n.name, &n.description).unwrap()))
            .collect();
        let qv = embed::embed_text(&embedder, &q).map_err(|e| e.to_string())?;
        let want = brute_rank(&qv, &members, top_t);
        let got_pairs: Vec<(String, f64)> = got.iter().map(|k| (k.id.clone(), k.score)).collect();
        ensure!(
            same_ranking(&got_pairs, &want),
            "index {i}: retrieve_knowledge differs for {q:?}"
        );
        ensure!(
            got.iter().all(|k| graph.package_of(&k.id) == Some(k.package.as_str())),
            "index {i}: knowledge item carries the wrong package"
        );

        // retrieve_cases over a random store.
        let case_store =
            store::store_cases(world.pool.clone(), &embedder, &StoreOptions::default()).map_err(|e| e.to_string())?;
        let tasks: Vec<String> = world.pool.iter().map(|c| c.task.clone()).collect();
        let q = random_query(&mut rng, &tasks);
        let top_r = rng.random_range(1..=10);
        let got = retrieval::retrieve_cases(&q, &case_store, top_r, &embedder).map_err(|e| e.to_string())?;
        let cases: Vec<(String, Vec<f32>)> = world
            .pool
            .iter()
            .map(|c| (c.id.clone(), embed::embed_text(&embedder, &c.task).unwrap()))
            .collect();
        let qv = embed::embed_text(&embedder, &q).map_err(|e| e.to_string())?;
        ensure!(
            same_ranking(&got, &brute_rank(&qv, &cases, top_r)),
            "index {i}: retrieve_cases differs for {q:?}"
        );
        ties += got.windows(2).filter(|w| w[0].1 == w[1].1).count();
    }
    Ok(format!("100 indices x 3 rankings exact, {ties} tied neighbours"))
}

fn rerank_oracle() -> Check {
    let embedder = StubEmbedder::default();
    let mut tie_breaks = 0;
    for i in 0..200u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(4000 + i);
        let ncase = rng.random_range(1..=12);
        let pool: Vec<Case> = (0..ncase)
            .map(|j| {
                let mut code = String::new();
                let pkgs: Vec<usize> = (0..rng.random_range(1..=2)).map(|_| rng.random_range(0..4)).collect();
                for p in &pkgs {
                    code.push_str(&format!("import p{p}\n"));
                }
                for _ in 0..rng.random_range(1..=3) {
                    let p = pkgs[rng.random_range(0..pkgs.len())];
                    code.push_str(&format!("p{p}.f{}(x)\n", rng.random_range(0..5)));
                }
                Case::new(format!("c{j:02}"), format!("task {j}"), code)
            })
            .collect();
        let opts = StoreOptions {
            require_validated: false,
            ..Default::default()
        };
        let case_store = store::store_cases(pool.clone(), &embedder, &opts).map_err(|e| e.to_string())?;
        let knowledge: Vec<KnowledgeItem> = (0..rng.random_range(0..=6))
            .map(|_| {
                let p = rng.random_range(0..4);
                let id = format!("p{p}.f{}", rng.random_range(0..5));
                KnowledgeItem {
                    name: id.clone(),
                    id,
                    description: String::new(),
                    package: format!("p{p}"),
                    score: 0.0,
                }
            })
            .collect();
        let mut ids: Vec<String> = pool.iter().map(|c| c.id.clone()).collect();
        if rng.random_bool(0.2) {
            ids.push("missing".into());
        }
        ids.shuffle(&mut rng);
        ids.truncate(rng.random_range(1..=ids.len()));
        let hits: Vec<(String, f64)> = ids
            .into_iter()
            .map(|id| (id, [0.2, 0.5, 0.8][rng.random_range(0..3)]))
            .collect();

        // Nested-loop oracle.
        let mut kids: Vec<String> = Vec::new();
        for k in &knowledge {
            for s in [&k.package, &k.id] {
                if !s.is_empty() && !kids.contains(s) {
                    kids.push(s.clone());
                }
            }
        }
        let overlaps: Vec<usize> = hits
            .iter()
            .map(|(id, _)| {
                let Some(c) = pool.iter().find(|c| &c.id == id) else {
                    return 0;
                };
                let mut cids: Vec<&String> = Vec::new();
                for s in c.packages.iter().chain(&c.functions) {
                    if !cids.contains(&s) {
                        cids.push(s);
                    }
                }
                let mut count = 0;
                for a in &cids {
                    for b in &kids {
                        if *a == b {
                            count += 1;
                        }
                    }
                }
                count
            })
            .collect();
        let mut best = 0;
        for j in 1..hits.len() {
            let better = overlaps[j] > overlaps[best]
                || (overlaps[j] == overlaps[best]
                    && (hits[j].1 > hits[best].1 || (hits[j].1 == hits[best].1 && hits[j].0 < hits[best].0)));
            if better {
                best = j;
            }
        }
        if hits
            .iter()
            .enumerate()
            .any(|(j, _)| j != best && overlaps[j] == overlaps[best])
        {
            tie_breaks += 1;
        }

        let rr = retrieval::rerank_by_overlap(&hits, &knowledge, &case_store).map_err(|e| e.to_string())?;
        ensure!(
            rr.overlaps == overlaps,
            "instance {i}: overlaps {:?} vs oracle {overlaps:?}",
            rr.overlaps
        );
        ensure!(
            rr.selected == hits[best].0,
            "instance {i}: selected {} vs oracle {}",
            rr.selected,
            hits[best].0
        );
        for _ in 0..5 {
            let mut shuffled = hits.clone();
            shuffled.shuffle(&mut rng);
            let again = retrieval::rerank_by_overlap(&shuffled, &knowledge, &case_store).map_err(|e| e.to_string())?;
            ensure!(
                again.selected == rr.selected,
                "instance {i}: selection depends on input order"
            );
        }
    }
    Ok(format!(
        "200 instances, {tie_breaks} resolved by tie-break, 5 permutations each"
    ))
}

fn kmeans_checks() -> Check {
    let mut iterations = 0;
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(5000 + seed);
        let items: Vec<EmbeddedItem> = (0..80)
            .map(|j| EmbeddedItem {
                id: format!("x{j:02}"),
                vector: (0..6).map(|_| rng.random_range(-1.0f32..1.0)).collect(),
                text: String::new(),
            })
            .collect();
        let model = cluster::kmeans(&items, &KMeansParams::new(5, seed)).map_err(|e| e.to_string())?;
        let tr = &model.objective_trace;
        ensure!(!tr.is_empty(), "seed {seed}: empty objective trace");
        for w in tr.windows(2) {
            ensure!(
                w[1] <= w[0] + 1e-12 * w[0].abs().max(1.0),
                "seed {seed}: objective rose {} -> {}",
                w[0],
                w[1]
            );
        }
        iterations += tr.len();
    }

    let mut rng = ChaCha8Rng::seed_from_u64(5999);
    let centers = [(0.0f32, 0.0f32), (10.0, 0.0), (0.0, 10.0)];
    let mut truth = BTreeMap::new();
    let mut blobs = Vec::new();
    for (b, &(cx, cy)) in centers.iter().enumerate() {
        for j in 0..20 {
            let id = format!("b{b}_{j:02}");
            truth.insert(id.clone(), b);
            blobs.push(EmbeddedItem {
                id,
                vector: vec![cx + rng.random_range(-1.0f32..1.0), cy + rng.random_range(-1.0f32..1.0)],
                text: String::new(),
            });
        }
    }
    let mut recovered = 0;
    for seed in 0..50u64 {
        let model = cluster::kmeans(&blobs, &KMeansParams::new(3, seed)).map_err(|e| e.to_string())?;
        let mut map: BTreeMap<usize, usize> = BTreeMap::new();
        let consistent = truth
            .iter()
            .all(|(id, &b)| *map.entry(b).or_insert(model.assignment[id]) == model.assignment[id]);
        let distinct: BTreeSet<usize> = map.values().copied().collect();
        if consistent && distinct.len() == 3 {
            recovered += 1;
        }
    }
    ensure!(
        recovered >= 48,
        "3-blob instance recovered in only {recovered}/50 seeds"
    );
    Ok(format!(
        "50 runs monotone over {iterations} iterations, blobs recovered {recovered}/50"
    ))
}

/// Returns the curve CSV bytes.
fn selection_curve() -> Result<(String, Vec<u8>), String> {
    let embedder = StubEmbedder::default();
    let world = synthetic::generate(&SyntheticConfig::default());
    ensure!(world.pool.len() == 100, "pool has {} cases", world.pool.len());
    let prep = experiment::prepare(&world.graph, &embedder, 0, DEFAULT_MAX_CLUSTERS, DEFAULT_MAX_ITER, 1)
        .map_err(|e| e.to_string())?;
    let cfg = CurveConfig {
        budgets: vec![0.1, 0.2, 0.3],
        seeds: 20,
        ..Default::default()
    };
    let (rows, _) = experiment::selection_curve(&world.pool, &prep.space, &cfg).map_err(|e| e.to_string())?;
    let mut summary = Vec::new();
    for r in &rows {
        summary.push(format!(
            "{:.0}%: {:.4} vs {:.4}",
            r.budget * 100.0,
            r.kg_guided,
            r.random_mean
        ));
        ensure!(
            r.kg_guided >= r.random_mean,
            "budget {}: guided {} below random mean {}",
            r.budget,
            r.kg_guided,
            r.random_mean
        );
    }
    let last = rows.last().unwrap();
    ensure!(
        last.kg_guided >= 0.95 * last.full_pool,
        "30% guided {} below 0.95 x full {}",
        last.kg_guided,
        last.full_pool
    );
    let mut bytes = Vec::new();
    experiment::write_curve_csv(&rows, &mut bytes).map_err(|e| e.to_string())?;
    Ok((format!("{}; full {:.4}", summary.join(", "), last.full_pool), bytes))
}

#[derive(Deserialize)]
struct Golden {
    name: String,
    text: String,
    kinds: Vec<SegmentKind>,
}

#[derive(Deserialize)]
struct Malformed {
    text: String,
    offset: usize,
}

fn fixture(name: &str) -> String {
    let p = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures/protocol")
        .join(name);
    std::fs::read_to_string(p).unwrap()
}

fn chunk_points(rng: &mut ChaCha8Rng, text: &str) -> Vec<usize> {
    let mut pts: Vec<usize> = (0..rng.random_range(0..=12))
        .map(|_| rng.random_range(0..=text.len()))
        .filter(|&c| text.is_char_boundary(c))
        .collect();
    pts.sort_unstable();
    pts.push(text.len());
    pts
}

fn feed_chunks(text: &str, pts: &[usize]) -> Result<protocol::Transcript, protocol::ProtocolError> {
    let mut p = StreamParser::new();
    let mut last = 0;
    for &c in pts {
        p.feed(&text[last..c])?;
        last = c;
    }
    p.finish()
}

fn protocol_fixtures() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(7000);
    let golden: Vec<Golden> = fixture("golden.jsonl")
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    ensure!(
        golden.len() == 20,
        "expected 20 golden transcripts, found {}",
        golden.len()
    );
    for g in &golden {
        let t = protocol::parse_transcript(&g.text).map_err(|e| format!("{}: {e}", g.name))?;
        ensure!(t.render() == g.text, "{}: round trip changed bytes", g.name);
        let kinds: Vec<SegmentKind> = t.segments.iter().map(|s| s.kind).collect();
        ensure!(kinds == g.kinds, "{}: kinds {kinds:?}", g.name);
        for _ in 0..10 {
            let pts = chunk_points(&mut rng, &g.text);
            let chunked = feed_chunks(&g.text, &pts).map_err(|e| format!("{} at {pts:?}: {e}", g.name))?;
            ensure!(chunked == t, "{}: chunking {pts:?} changed the parse", g.name);
        }
    }
    let malformed: Vec<Malformed> = fixture("malformed.jsonl")
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    for m in &malformed {
        match protocol::parse_transcript(&m.text) {
            Ok(_) => return Err(format!("{:?} accepted", m.text)),
            Err(e) => ensure!(
                e.offset == m.offset,
                "{:?}: offset {} expected {}",
                m.text,
                e.offset,
                m.offset
            ),
        }
        for _ in 0..10 {
            let pts = chunk_points(&mut rng, &m.text);
            match feed_chunks(&m.text, &pts) {
                Ok(_) => return Err(format!("{:?} accepted when chunked at {pts:?}", m.text)),
                Err(e) => ensure!(
                    e.offset == m.offset,
                    "{:?} chunked at {pts:?}: offset {}",
                    m.text,
                    e.offset
                ),
            }
        }
    }
    Ok(format!(
        "20 golden x 10 chunkings, {} malformed rejected",
        malformed.len()
    ))
}

/// Returns every emitted file, keyed by relative path.
fn golden_run() -> Result<(String, BTreeMap<PathBuf, Vec<u8>>), String> {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let report = common::run_golden(tmp.path());
    ensure!(report.pass_at_1 == "1.0000", "pass@1 = {}", report.pass_at_1);
    let produced = common::tree_bytes(tmp.path());
    let expected = common::tree_bytes(&PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/golden"));
    ensure!(produced == expected, "artifacts differ from the golden files");
    Ok((
        format!(
            "pass@1 {}, {} files byte-identical to golden",
            report.pass_at_1,
            produced.len()
        ),
        produced,
    ))
}

fn eval_arithmetic() -> Check {
    fn results(flags: &[(&str, bool)]) -> Vec<TaskResult> {
        flags
            .iter()
            .enumerate()
            .map(|(i, &(group, passed))| TaskResult {
                id: format!("t{i:05}"),
                group: group.into(),
                passed,
                wall_ms: 0,
                transcript: None,
                error: None,
            })
            .collect()
    }
    fn many(total: usize, passed: usize) -> Vec<(&'static str, bool)> {
        (0..total).map(|i| ("default", i < passed)).collect()
    }
    let fixtures: Vec<(Vec<(&str, bool)>, &str)> = vec![
        (vec![("default", true)], "1.0000"),
        (vec![("default", false)], "0.0000"),
        (vec![("A", true), ("A", false), ("A", true)], "0.6667"),
        (vec![("A", true), ("B", false)], "0.5000"),
        (vec![("A", true), ("A", false), ("A", false)], "0.3333"),
        (many(7, 1), "0.1429"),
        (many(32, 3), "0.0938"),
        (many(20000, 1), "0.0001"),
        (vec![("A", true), ("A", true), ("B", false)], "0.6667"),
    ];
    let mut checked = 0;
    for (flags, want) in &fixtures {
        let report = eval::aggregate(results(flags)).map_err(|e| e.to_string())?;
        let passed = flags.iter().filter(|f| f.1).count();
        ensure!(
            report.rate() == Ratio::new(passed as i64, flags.len() as i64),
            "rate for {} tasks",
            flags.len()
        );
        ensure!(
            report.pass_at_1 == *want,
            "{} tasks: {} expected {want}",
            flags.len(),
            report.pass_at_1
        );
        checked += 1;
    }
    let grouped = eval::aggregate(results(&fixtures[8].0)).unwrap();
    ensure!(
        grouped.groups["A"].pass_at_1 == "1.0000" && grouped.groups["B"].pass_at_1 == "0.0000",
        "group breakdown wrong"
    );
    ensure!(
        matches!(eval::aggregate(Vec::new()), Err(EvalError::EmptySuite)),
        "empty suite did not error"
    );
    ensure!(
        matches!(eval::pass_rate(0, 0), Err(EvalError::EmptySuite)),
        "0/0 did not error"
    );
    checked += 1;
    Ok(format!("{checked} fixtures including the empty suite"))
}

#[test]
fn acceptance_criteria() {
    let mut all = true;
    let mut first: BTreeMap<usize, Vec<u8>> = BTreeMap::new();
    let mut golden_first = BTreeMap::new();

    all &= run(
        Criterion {
            number: 1,
            name: "selection correctness",
            limit: secs(5),
        },
        || {
            selection_pools().map(|(d, b)| {
                first.insert(1, b);
                d
            })
        },
    );
    all &= run(
        Criterion {
            number: 2,
            name: "coverage-delta oracle",
            limit: secs(2),
        },
        coverage_delta_oracle,
    );
    all &= run(
        Criterion {
            number: 3,
            name: "retrieval exactness",
            limit: secs(10),
        },
        retrieval_exactness,
    );
    all &= run(
        Criterion {
            number: 4,
            name: "overlap re-rank oracle",
            limit: secs(2),
        },
        rerank_oracle,
    );
    all &= run(
        Criterion {
            number: 5,
            name: "k-means",
            limit: secs(10),
        },
        kmeans_checks,
    );
    all &= run(
        Criterion {
            number: 6,
            name: "guided vs random curve",
            limit: secs(30),
        },
        || {
            selection_curve().map(|(d, b)| {
                first.insert(6, b);
                d
            })
        },
    );
    all &= run(
        Criterion {
            number: 7,
            name: "protocol parser",
            limit: secs(2),
        },
        protocol_fixtures,
    );
    all &= run(
        Criterion {
            number: 8,
            name: "end-to-end golden run",
            limit: secs(5),
        },
        || {
            golden_run().map(|(d, files)| {
                golden_first = files;
                d
            })
        },
    );
    all &= run(
        Criterion {
            number: 9,
            name: "eval arithmetic",
            limit: secs(1),
        },
        eval_arithmetic,
    );
    all &= run(
        Criterion {
            number: 10,
            name: "determinism",
            limit: None,
        },
        || {
            let again1 = selection_pools()?.1;
            ensure!(first.get(&1) == Some(&again1), "selection traces differ between runs");
            let again6 = selection_curve()?.1;
            ensure!(first.get(&6) == Some(&again6), "curve CSV differs between runs");
            let again8 = golden_run()?.1;
            ensure!(
                !golden_first.is_empty() && golden_first == again8,
                "golden artifacts differ between runs"
            );
            Ok(format!(
                "{} trace bytes, {} CSV bytes, {} golden files identical",
                again1.len(),
                again6.len(),
                again8.len()
            ))
        },
    );
    assert!(all, "one or more acceptance criteria failed");
}
