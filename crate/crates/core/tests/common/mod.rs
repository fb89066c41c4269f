#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use kgcoder::agent::AgentConfig;
use kgcoder::case::Case;
use kgcoder::cluster::ClusterModel;
use kgcoder::embed::StubEmbedder;
use kgcoder::eval::{self, EvalReport, EvalTask, Pipeline};
use kgcoder::kg::{KnowledgeGraph, Triple, REL_HAS_CHILD, REL_HAS_DESCRIPTION, REL_HAS_NAME, REL_IS_A};
use kgcoder::llm::{PlaybookEntry, ScriptedLlm};
use kgcoder::retrieval::{self, RetrievalParams, Retriever};
use kgcoder::runner::Runner;
use kgcoder::selection::Rational;
use kgcoder::store::{self, CaseStore, StoreOptions};

pub const GOLDEN_QUERY: &str = "Add two numbers with mathx and store the sum in result";

/// Two packages with three functions each.
pub fn toy_graph() -> KnowledgeGraph {
    let mut t = vec![
        Triple::new("mathx", REL_IS_A, "package"),
        Triple::new("mathx", REL_HAS_DESCRIPTION, "Small arithmetic helpers."),
        Triple::new("textx", REL_IS_A, "package"),
        Triple::new("textx", REL_HAS_DESCRIPTION, "String utilities."),
    ];
    for (pkg, name, desc) in [
        ("mathx", "add", "Add two numbers and return the sum."),
        ("mathx", "mul", "Multiply two numbers."),
        ("mathx", "neg", "Negate a number."),
        ("textx", "upper", "Convert text to upper case."),
        ("textx", "lower", "Convert text to lower case."),
        ("textx", "split", "Split text on whitespace."),
    ] {
        let id = format!("{pkg}.{name}");
        t.push(Triple::new(&id, REL_IS_A, "function"));
        t.push(Triple::new(pkg, REL_HAS_CHILD, &id));
        t.push(Triple::new(&id, REL_HAS_NAME, name));
        t.push(Triple::new(&id, REL_HAS_DESCRIPTION, desc));
    }
    KnowledgeGraph::from_triples(t).expect("toy graph")
}

pub fn toy_cases() -> Vec<Case> {
    [
        (
            "case-add",
            "Add two numbers",
            "import mathx\nresult = mathx.add(1, 2)\n",
        ),
        (
            "case-mul",
            "Multiply two numbers",
            "import mathx\nresult = mathx.mul(2, 4)\n",
        ),
        (
            "case-upper",
            "Upper-case a word",
            "import textx\nresult = textx.upper('a')\n",
        ),
    ]
    .into_iter()
    .map(|(id, task, code)| {
        let mut c = Case::new(id, task, code);
        c.validated = true;
        c
    })
    .collect()
}

pub fn toy_store(embedder: &StubEmbedder) -> CaseStore {
    store::store_cases(toy_cases(), embedder, &StoreOptions::default()).expect("toy store")
}

fn playbook(entries: &[(&str, &str)]) -> ScriptedLlm {
    ScriptedLlm::new(
        entries
            .iter()
            .map(|(m, r)| PlaybookEntry {
                pattern: m.to_string(),
                reply: r.to_string(),
            })
            .collect(),
    )
    .expect("playbook")
}

/// Search the graph, keep only the relevant item, fetch a case, answer.
pub fn agent_playbook() -> ScriptedLlm {
    playbook(&[
        (
            "^Add two numbers",
            "<think>I need the mathx API for addition.</think>\n<search_kg>add two numbers</search_kg>",
        ),
        (
            "mathx\\.add\\tadd",
            "<think>Only mathx.add is relevant; the text helpers are not.</think>\n<search_case>add two numbers with mathx</search_case>",
        ),
        (
            "case-add\\t",
            "<think>case-add matches the task.</think>\n<answer>K:\nmathx.add\nC:\n```python\nimport mathx\nresult = mathx.add(1, 2)\n```</answer>",
        ),
    ])
}

pub fn generator_playbook() -> ScriptedLlm {
    playbook(&[(
        "## Task",
        "Here is the solution.\n```python\nimport mathx\nresult = mathx.add(2, 3)\n```\n",
    )])
}

pub fn golden_task() -> EvalTask {
    EvalTask {
        id: "add-two".into(),
        description: GOLDEN_QUERY.into(),
        context: concat!(
            "import sys, types\n",
            "mathx = types.ModuleType(\"mathx\")\n",
            "mathx.add = lambda a, b: a + b\n",
            "sys.modules[\"mathx\"] = mathx\n",
            "[insert]\n",
            "assert result == 5, result\n",
        )
        .into(),
        test: "python3 {file}".into(),
        group: Some("mathx".into()),
    }
}

/// Full scripted pipeline over the toy world. Writes report.json, report.csv
/// and per-task artifacts under `dir`.
pub fn run_golden(dir: &Path) -> EvalReport {
    let embedder = StubEmbedder::default();
    let graph = toy_graph();
    let kg_index = retrieval::build_kg_index(&graph, &embedder, None, 32, 1).unwrap();
    let store = toy_store(&embedder);
    let retriever = Retriever {
        graph: &graph,
        kg_index: &kg_index,
        store: &store,
        embedder: &embedder,
        judge: None,
        params: RetrievalParams::default(),
    };
    let agent_llm = agent_playbook();
    let generator = generator_playbook();
    let pipeline = Pipeline {
        tools: &retriever,
        agent_llm: &agent_llm,
        generator: &generator,
        agent: AgentConfig::default(),
        runner: Runner::new("python3 {file}", Duration::from_secs(20)),
        marker: eval::DEFAULT_MARKER.into(),
        artifacts: Some(dir.join("artifacts")),
        record_wall_time: false,
        workers: 1,
    };
    let report = eval::evaluate(&[golden_task()], &pipeline).unwrap();
    report.save(dir).unwrap();
    report
}

/// Every file under `dir`, keyed by relative path.
pub fn tree_bytes(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

/// |covered| / total, with an empty universe counting as fully covered.
pub fn ratio(covered: usize, total: usize) -> Rational {
    if total == 0 {
        Rational::from_integer(1)
    } else {
        Rational::new(covered as i64, total as i64)
    }
}

/// Packages and (anchor, cluster) pairs a case touches, read straight from
/// the graph and cluster assignments. Names must be exact graph ids.
pub fn footprint(
    case: &Case,
    graph: &KnowledgeGraph,
    clusters: &BTreeMap<String, ClusterModel>,
) -> (BTreeSet<String>, BTreeSet<(String, usize)>) {
    let anchors: BTreeSet<String> = graph.anchors().iter().map(|a| a.id.clone()).collect();
    let pkgs = case.packages.iter().filter(|p| anchors.contains(*p)).cloned().collect();
    let mut cl = BTreeSet::new();
    for f in &case.functions {
        for (anchor, model) in clusters {
            if let Some(&k) = model.assignment.get(f) {
                cl.insert((anchor.clone(), k));
            }
        }
    }
    (pkgs, cl)
}
