//! Top-down knowledge retrieval and bottom-up case retrieval with overlap re-ranking.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed::{self, EmbedError, EmbeddingProvider};
use crate::index::{EmbeddedItem, EmbeddingCache, IndexError, VectorIndex};
use crate::kg::{KgNode, KnowledgeGraph};
use crate::llm::{ChatRequest, LlmClient, LlmError, Message};
use crate::pool;
use crate::store::CaseStore;

pub const DEFAULT_TOP_T: usize = 10;
pub const DEFAULT_TOP_R: usize = 5;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error("package classifier failed: {0}")]
    Judge(#[from] LlmError),
    #[error("no cases to re-rank")]
    NoCases,
}

impl RetrievalError {
    /// Searching an empty (or empty after restriction) index.
    pub fn is_empty_result(&self) -> bool {
        matches!(self, RetrievalError::Index(IndexError::EmptyIndex))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeItem {
    pub id: String,
    pub name: String,
    pub description: String,
    /// Owning package id.
    pub package: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseHit {
    pub id: String,
    pub similarity: f64,
    pub overlap: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub applicable_packages: BTreeSet<String>,
    pub knowledge: Vec<KnowledgeItem>,
    pub cases: Vec<CaseHit>,
    pub selected_case: Option<String>,
}

/// Embeds every function/attribute node as `name ∥ description`, reusing
/// vectors from `cache` when the id is present there.
pub fn build_kg_index(
    graph: &KnowledgeGraph,
    provider: &dyn EmbeddingProvider,
    cache: Option<&EmbeddingCache>,
    batch: usize,
    fanout: usize,
) -> Result<VectorIndex, RetrievalError> {
    let nodes: Vec<&KgNode> = graph.nodes().filter(|n| n.kind.is_member()).collect();
    let missing: Vec<&KgNode> = nodes
        .iter()
        .copied()
        .filter(|n| cache.and_then(|c| c.get(&n.id)).is_none())
        .collect();
    let texts: Vec<String> = missing
        .iter()
        .map(|n| embed::node_text(&n.name, &n.description))
        .collect();
    let fresh = embed::embed_many(provider, &texts, batch, fanout)?;
    let mut fresh = missing
        .iter()
        .map(|n| n.id.as_str())
        .zip(fresh)
        .collect::<std::collections::BTreeMap<_, _>>();
    let items = nodes
        .iter()
        .map(|n| EmbeddedItem {
            id: n.id.clone(),
            vector: match cache.and_then(|c| c.get(&n.id)) {
                Some(v) => v.to_vec(),
                None => fresh.remove(n.id.as_str()).expect("embedded above"),
            },
            text: embed::node_text(&n.name, &n.description),
        })
        .collect();
    Ok(VectorIndex::from_items(items)?)
}

/// First token of the reply, case-folded and stripped of punctuation.
pub fn parse_verdict(reply: &str) -> Option<bool> {
    let token = reply.split_whitespace().next()?;
    let word: String = token
        .chars()
        .filter(|c| c.is_alphanumeric())
        .collect::<String>()
        .to_lowercase();
    match word.as_str() {
        "yes" => Some(true),
        "no" => Some(false),
        _ => None,
    }
}

pub fn classifier_prompt(q: &str, package: &KgNode) -> String {
    let desc = if package.description.is_empty() {
        package.name.as_str()
    } else {
        package.description.as_str()
    };
    format!(
        "Task: {q}\nPackage: {}\nPackage description: {desc}\n\
         Is this package applicable to the task? Answer YES or NO.",
        package.id
    )
}

/// One judge call per package; packages answered YES are returned.
pub fn classify_packages(
    q: &str,
    anchors: &[&KgNode],
    judge: &dyn LlmClient,
    fanout: usize,
) -> Result<BTreeSet<String>, RetrievalError> {
    let verdicts = pool::map_bounded(anchors, fanout, |pkg| {
        let mut req = ChatRequest::new(vec![Message::user(classifier_prompt(q, pkg))]);
        req.max_tokens = 4;
        judge.complete(&req).map(|c| (pkg.id.clone(), c.text))
    });
    let mut out = BTreeSet::new();
    for v in verdicts {
        let (id, reply) = v?;
        match parse_verdict(&reply) {
            Some(true) => {
                out.insert(id);
            }
            Some(false) => {}
            None => tracing::warn!(package = %id, reply = %reply, "unparseable verdict treated as NO"),
        }
    }
    Ok(out)
}

/// Exact cosine top-T over the children of `applicable` (all packages when empty).
pub fn retrieve_knowledge(
    q: &str,
    graph: &KnowledgeGraph,
    index: &VectorIndex,
    applicable: &BTreeSet<String>,
    top_t: usize,
    provider: &dyn EmbeddingProvider,
) -> Result<Vec<KnowledgeItem>, RetrievalError> {
    let query = embed::embed_text(provider, q)?;
    let restricted;
    let searched = if applicable.is_empty() {
        index
    } else {
        restricted = index.filtered(|id| graph.package_of(id).is_some_and(|p| applicable.contains(p)));
        &restricted
    };
    let hits = searched.top_k(&query, top_t)?;
    Ok(hits
        .into_iter()
        .map(|(id, score)| {
            let node = graph.node(&id);
            KnowledgeItem {
                name: node.map(|n| n.name.clone()).unwrap_or_else(|| id.clone()),
                description: node.map(|n| n.description.clone()).unwrap_or_default(),
                package: graph.package_of(&id).unwrap_or_default().to_string(),
                id,
                score,
            }
        })
        .collect())
}

pub fn retrieve_cases(
    q: &str,
    store: &CaseStore,
    top_r: usize,
    provider: &dyn EmbeddingProvider,
) -> Result<Vec<(String, f64)>, RetrievalError> {
    let query = embed::embed_text(provider, q)?;
    Ok(store.index().top_k(&query, top_r)?)
}

/// Package and function identifiers carried by the knowledge list.
pub fn knowledge_identifiers(knowledge: &[KnowledgeItem]) -> BTreeSet<&str> {
    knowledge
        .iter()
        .flat_map(|k| [k.package.as_str(), k.id.as_str()])
        .filter(|s| !s.is_empty())
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rerank {
    pub selected: String,
    /// Overlap per input case, in input order.
    pub overlaps: Vec<usize>,
}

/// Picks the case sharing the most identifiers with the knowledge list. Ties
/// go to higher similarity, then the smaller id, so input order never matters.
pub fn rerank_by_overlap(
    cases: &[(String, f64)],
    knowledge: &[KnowledgeItem],
    store: &CaseStore,
) -> Result<Rerank, RetrievalError> {
    if cases.is_empty() {
        return Err(RetrievalError::NoCases);
    }
    let kset = knowledge_identifiers(knowledge);
    let overlaps: Vec<usize> = cases
        .iter()
        .map(|(id, _)| {
            store
                .get(id)
                .map(|c| c.identifiers().intersection(&kset).count())
                .unwrap_or(0)
        })
        .collect();
    let best = (0..cases.len())
        .min_by(|&a, &b| {
            overlaps[b]
                .cmp(&overlaps[a])
                .then(cases[b].1.total_cmp(&cases[a].1))
                .then(cases[a].0.cmp(&cases[b].0))
        })
        .unwrap();
    Ok(Rerank {
        selected: cases[best].0.clone(),
        overlaps,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalParams {
    pub top_t: usize,
    pub top_r: usize,
    pub fanout: usize,
}

impl Default for RetrievalParams {
    fn default() -> Self {
        Self {
            top_t: DEFAULT_TOP_T,
            top_r: DEFAULT_TOP_R,
            fanout: 4,
        }
    }
}

/// Read-only bundle of everything retrieval needs.
pub struct Retriever<'a> {
    pub graph: &'a KnowledgeGraph,
    pub kg_index: &'a VectorIndex,
    pub store: &'a CaseStore,
    pub embedder: &'a dyn EmbeddingProvider,
    /// Package classifier; without one every package is searched.
    pub judge: Option<&'a dyn LlmClient>,
    pub params: RetrievalParams,
}

impl Retriever<'_> {
    pub fn applicable(&self, q: &str) -> Result<BTreeSet<String>, RetrievalError> {
        match self.judge {
            Some(j) => classify_packages(q, &self.graph.anchors(), j, self.params.fanout),
            None => Ok(BTreeSet::new()),
        }
    }

    pub fn search_kg(&self, q: &str) -> Result<(BTreeSet<String>, Vec<KnowledgeItem>), RetrievalError> {
        let applicable = self.applicable(q)?;
        let k = retrieve_knowledge(
            q,
            self.graph,
            self.kg_index,
            &applicable,
            self.params.top_t,
            self.embedder,
        )?;
        Ok((applicable, k))
    }

    /// Top-R cases ordered by overlap with `knowledge` (selected case first).
    pub fn search_cases(&self, q: &str, knowledge: &[KnowledgeItem]) -> Result<Vec<CaseHit>, RetrievalError> {
        let hits = retrieve_cases(q, self.store, self.params.top_r, self.embedder)?;
        let rr = rerank_by_overlap(&hits, knowledge, self.store)?;
        let mut out: Vec<CaseHit> = hits
            .into_iter()
            .zip(rr.overlaps)
            .map(|((id, similarity), overlap)| CaseHit {
                id,
                similarity,
                overlap,
            })
            .collect();
        out.sort_by(|a, b| {
            b.overlap
                .cmp(&a.overlap)
                .then(b.similarity.total_cmp(&a.similarity))
                .then(a.id.cmp(&b.id))
        });
        debug_assert_eq!(out[0].id, rr.selected);
        Ok(out)
    }

    pub fn retrieve(&self, q: &str) -> Result<RetrievalResult, RetrievalError> {
        let (applicable, knowledge) = self.search_kg(q)?;
        let (cases, selected) = match self.search_cases(q, &knowledge) {
            Ok(mut hits) => {
                let sel = hits.first().map(|h| h.id.clone());
                hits.sort_by(|a, b| b.similarity.total_cmp(&a.similarity).then(a.id.cmp(&b.id)));
                (hits, sel)
            }
            Err(e) if e.is_empty_result() => (Vec::new(), None),
            Err(e) => return Err(e),
        };
        Ok(RetrievalResult {
            applicable_packages: applicable,
            knowledge,
            cases,
            selected_case: selected,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::case::Case;
    use crate::embed::StubEmbedder;
    use crate::kg::{Triple, REL_HAS_CHILD, REL_HAS_DESCRIPTION, REL_IS_A};
    use crate::llm::{PlaybookEntry, ScriptedLlm};
    use crate::store::{store_cases, StoreOptions};

    fn graph() -> KnowledgeGraph {
        let mut t = vec![
            Triple::new("numpy", REL_IS_A, "package"),
            Triple::new("pandas", REL_IS_A, "package"),
            Triple::new("numpy", REL_HAS_DESCRIPTION, "numerical arrays"),
        ];
        for (p, f, d) in [
            ("numpy", "numpy.dot", "dot product of two arrays"),
            ("numpy", "numpy.zeros", "array filled with zeros"),
            ("pandas", "pandas.read_csv", "read a comma separated file into a frame"),
            ("pandas", "pandas.merge", "join two frames on keys"),
        ] {
            t.push(Triple::new(f, REL_IS_A, "function"));
            t.push(Triple::new(p, REL_HAS_CHILD, f));
            t.push(Triple::new(f, REL_HAS_DESCRIPTION, d));
        }
        KnowledgeGraph::from_triples(t).unwrap()
    }

    fn kitem(id: &str, package: &str) -> KnowledgeItem {
        KnowledgeItem {
            id: id.into(),
            name: id.into(),
            description: String::new(),
            package: package.into(),
            score: 0.0,
        }
    }

    fn scripted(pairs: &[(&str, &str)]) -> ScriptedLlm {
        ScriptedLlm::new(
            pairs
                .iter()
                .map(|(p, r)| PlaybookEntry {
                    pattern: p.to_string(),
                    reply: r.to_string(),
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn verdict_grammar() {
        for (reply, want) in [
            ("YES", Some(true)),
            ("yes.", Some(true)),
            ("Yes, because arrays", Some(true)),
            ("  no!", Some(false)),
            ("NO", Some(false)),
            ("Maybe", None),
            ("", None),
            ("yesno", None),
        ] {
            assert_eq!(parse_verdict(reply), want, "{reply:?}");
        }
    }

    #[test]
    fn classifier_keeps_yes_packages() {
        let g = graph();
        let judge = scripted(&[("Package: numpy\n", "YES"), (".*", "NO")]);
        let got = classify_packages("multiply matrices", &g.anchors(), &judge, 2).unwrap();
        assert_eq!(got, BTreeSet::from(["numpy".to_string()]));
    }

    #[test]
    fn classifier_all_no_is_empty() {
        let g = graph();
        let judge = scripted(&[(".*", "NO"), (".*", "no.")]);
        assert!(classify_packages("q", &g.anchors(), &judge, 1).unwrap().is_empty());
    }

    #[test]
    fn unparseable_verdict_defaults_to_no() {
        let g = graph();
        let judge = scripted(&[(".*", "perhaps"), (".*", "yes.")]);
        let got = classify_packages("q", &g.anchors(), &judge, 1).unwrap();
        assert_eq!(got, BTreeSet::from(["pandas".to_string()]));
    }

    #[test]
    fn self_similar_node_scores_one() {
        let g = graph();
        let e = StubEmbedder::default();
        let idx = build_kg_index(&g, &e, None, 8, 1).unwrap();
        let q = "numpy.dot dot product of two arrays";
        let k = retrieve_knowledge(q, &g, &idx, &BTreeSet::new(), 1, &e).unwrap();
        assert_eq!(k[0].id, "numpy.dot");
        assert!((k[0].score - 1.0).abs() < 1e-6);
        assert_eq!(k[0].package, "numpy");
    }

    #[test]
    fn restriction_and_fallback() {
        let g = graph();
        let e = StubEmbedder::default();
        let idx = build_kg_index(&g, &e, None, 8, 1).unwrap();
        let only_pd = BTreeSet::from(["pandas".to_string()]);
        let k = retrieve_knowledge("arrays", &g, &idx, &only_pd, 10, &e).unwrap();
        assert_eq!(k.len(), 2);
        assert!(k.iter().all(|i| i.package == "pandas"));
        let all: BTreeSet<String> = g.anchors().iter().map(|a| a.id.clone()).collect();
        assert_eq!(
            retrieve_knowledge("arrays", &g, &idx, &all, 10, &e).unwrap(),
            retrieve_knowledge("arrays", &g, &idx, &BTreeSet::new(), 10, &e).unwrap()
        );
    }

    #[test]
    fn cached_vectors_are_reused() {
        let g = graph();
        let e = StubEmbedder::default();
        let idx = build_kg_index(&g, &e, None, 8, 1).unwrap();
        let cache = idx.to_cache();
        let other = StubEmbedder::new(crate::embed::DEFAULT_STUB_DIM, 99);
        let again = build_kg_index(&g, &other, Some(&cache), 8, 1).unwrap();
        assert_eq!(again.items(), idx.items());
    }

    fn store() -> CaseStore {
        let mk = |id: &str, task: &str, code: &str| {
            let mut c = Case::new(id, task, code);
            c.validated = true;
            c
        };
        store_cases(
            vec![
                mk("c1", "load a csv file", "import pandas as pd\npd.read_csv(p)"),
                mk("c2", "dot product", "import numpy as np\nnp.dot(a, b)"),
                mk(
                    "c3",
                    "zeros and merge",
                    "import numpy as np\nimport pandas as pd\nnp.zeros(3)\npd.merge(a, b)",
                ),
            ],
            &StubEmbedder::default(),
            &StoreOptions::default(),
        )
        .unwrap()
    }

    #[test]
    fn overlap_counts_packages_and_functions() {
        let s = store();
        let k = vec![kitem("numpy.dot", "numpy"), kitem("scipy.stats", "scipy")];
        let cases = vec![
            ("c1".to_string(), 0.9),
            ("c2".to_string(), 0.1),
            ("c3".to_string(), 0.5),
        ];
        let rr = rerank_by_overlap(&cases, &k, &s).unwrap();
        // c2: numpy + numpy.dot; c3: numpy
        assert_eq!(rr.overlaps, [0, 2, 1]);
        assert_eq!(rr.selected, "c2");
    }

    #[test]
    fn zero_overlap_falls_back_to_similarity() {
        let s = store();
        let cases = vec![
            ("c1".to_string(), 0.2),
            ("c3".to_string(), 0.7),
            ("c2".to_string(), 0.7),
        ];
        let rr = rerank_by_overlap(&cases, &[], &s).unwrap();
        assert_eq!(rr.overlaps, [0, 0, 0]);
        assert_eq!(rr.selected, "c2");
    }

    #[test]
    fn rerank_requires_cases() {
        assert!(matches!(
            rerank_by_overlap(&[], &[], &store()),
            Err(RetrievalError::NoCases)
        ));
    }

    #[test]
    fn retriever_end_to_end() {
        let g = graph();
        let e = StubEmbedder::default();
        let idx = build_kg_index(&g, &e, None, 8, 1).unwrap();
        let s = store();
        let judge = scripted(&[("Package: numpy\n", "YES"), (".*", "NO")]);
        let r = Retriever {
            graph: &g,
            kg_index: &idx,
            store: &s,
            embedder: &e,
            judge: Some(&judge),
            params: RetrievalParams::default(),
        };
        let res = r.retrieve("dot product of arrays").unwrap();
        assert_eq!(res.applicable_packages, BTreeSet::from(["numpy".to_string()]));
        assert!(res.knowledge.iter().all(|k| k.package == "numpy"));
        assert_eq!(res.selected_case.as_deref(), Some("c2"));
        assert_eq!(res.cases.len(), 3);
    }
}
