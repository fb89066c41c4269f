use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use kgcoder::agent::{self, AgentTools};
use kgcoder::case;
use kgcoder::cluster;
use kgcoder::codegen;
use kgcoder::config::{Config, ConfigError};
use kgcoder::eval::{self, Pipeline};
use kgcoder::experiment::{self, ExperimentError};
use kgcoder::index::{EmbeddingCache, VectorIndex};
use kgcoder::kg::{self, KnowledgeGraph};
use kgcoder::retrieval::{self, Retriever};
use kgcoder::runner;
use kgcoder::selection::{self, CoverageSpace};
use kgcoder::store::{self, CaseStore};
use kgcoder::synthetic::{self, SyntheticConfig};

#[derive(Parser)]
#[command(
    name = "kgcoder",
    version,
    about = "Knowledge-graph guided retrieval for code generation"
)]
struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Knowledge graph files.
    #[command(subcommand)]
    Kg(KgCmd),
    /// Embedding index of graph nodes.
    #[command(subcommand)]
    Index(IndexCmd),
    /// Case selection, validation and storage.
    #[command(subcommand)]
    Cases(CasesCmd),
    /// Knowledge and case retrieval for one query.
    Retrieve(RetrieveArgs),
    /// The tool-calling agent.
    #[command(subcommand)]
    Agent(AgentCmd),
    /// Agent, prompt and code generation for one query.
    Generate(GenerateArgs),
    /// pass@1 over a task file.
    Eval(EvalArgs),
    /// Experiments on selection quality.
    #[command(subcommand)]
    Experiment(ExperimentCmd),
}

#[derive(Subcommand)]
enum KgCmd {
    /// Validate a graph, optionally writing its canonical form.
    Load {
        path: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print entity, triple and package counts.
    Stats { path: PathBuf },
}

#[derive(Subcommand)]
enum IndexCmd {
    /// Embed every function and attribute node and write the binary cache.
    Build {
        #[arg(long)]
        kg: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct GraphArgs {
    #[arg(long)]
    kg: PathBuf,
    /// Embedding cache from `index build`.
    #[arg(long)]
    kg_cache: Option<PathBuf>,
}

#[derive(Subcommand)]
enum CasesCmd {
    /// Coverage-guided selection of a case base from a candidate pool.
    Select {
        #[command(flatten)]
        graph: GraphArgs,
        #[arg(long)]
        candidates: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        tau1: Option<f64>,
        #[arg(long)]
        tau2: Option<f64>,
    },
    /// Run each case and record whether it executes cleanly.
    Validate {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Per-case outcomes as JSON lines.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Embed task descriptions and write a case store directory.
    Store {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct QueryArgs {
    #[command(flatten)]
    graph: GraphArgs,
    #[arg(long)]
    store: PathBuf,
    #[arg(long)]
    query: String,
}

#[derive(Args)]
struct RetrieveArgs {
    #[command(flatten)]
    q: QueryArgs,
}

#[derive(Subcommand)]
enum AgentCmd {
    /// Run one agent session and print the parsed answer.
    Run {
        #[command(flatten)]
        q: QueryArgs,
        #[arg(long)]
        transcript: Option<PathBuf>,
    },
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    q: QueryArgs,
    /// Write the generated code here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    prompt_out: Option<PathBuf>,
    #[arg(long)]
    transcript: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    graph: GraphArgs,
    #[arg(long)]
    store: PathBuf,
    #[arg(long)]
    tasks: PathBuf,
    /// Directory for report.json, report.csv and per-task artifacts.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum ExperimentCmd {
    /// Coverage of guided selection versus random subsets, as CSV.
    SelectionCurve {
        #[command(flatten)]
        graph: GraphArgs,
        #[arg(long)]
        candidates: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',')]
        budgets: Option<Vec<f64>>,
        #[arg(long)]
        seeds: Option<usize>,
    },
    /// Write a seeded synthetic graph (kg.jsonl) and case pool (pool.jsonl).
    Synthesize {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        packages: usize,
        #[arg(long, default_value_t = 9)]
        functions: usize,
        #[arg(long, default_value_t = 100)]
        cases: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

enum Failure {
    Usage(String),
    Domain(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        if let Some(ConfigError::NotFound(_)) = e.downcast_ref::<ConfigError>() {
            return Failure::Usage(format!("{e:#}"));
        }
        if let Some(ExperimentError::BadBudget(_)) = e.downcast_ref::<ExperimentError>() {
            return Failure::Usage(format!("{e:#}"));
        }
        Failure::Domain(e)
    }
}

type Res = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_writer(io::stderr)
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()))
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Domain(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Res {
    let cfg = match &cli.config {
        Some(p) => Config::load(p).map_err(anyhow::Error::from)?,
        None => Config::default(),
    };
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    match cli.command {
        Command::Kg(c) => kg_cmd(c),
        Command::Index(IndexCmd::Build { kg, out }) => index_build(&cfg, &kg, &out),
        Command::Cases(c) => cases_cmd(&cfg, c),
        Command::Retrieve(a) => retrieve(&cfg, &a.q),
        Command::Agent(AgentCmd::Run { q, transcript }) => agent_run(&cfg, &q, transcript.as_deref()),
        Command::Generate(a) => generate(&cfg, &a),
        Command::Eval(a) => eval_cmd(&cfg, &a),
        Command::Experiment(c) => experiment_cmd(&cfg, c),
    }
}

fn load_graph(path: &Path) -> anyhow::Result<KnowledgeGraph> {
    kg::load_kg(path).with_context(|| format!("loading {}", path.display()))
}

fn kg_cmd(c: KgCmd) -> Res {
    match c {
        KgCmd::Load { path, out } => {
            let g = load_graph(&path)?;
            if let Some(out) = out {
                g.save(&out).with_context(|| format!("writing {}", out.display()))?;
            }
            println!("ok: {} triples, {} entities", g.triples().len(), g.entity_count());
        }
        KgCmd::Stats { path } => {
            let s = load_graph(&path)?.stats();
            println!("entities: {}", s.entities);
            println!("triples: {}", s.triples);
            println!("packages: {}", s.packages);
            println!("functions: {}", s.functions);
            println!("attributes: {}", s.attributes);
            println!("parameters: {}", s.parameters);
            println!("descriptions: {}", s.description_literals);
        }
    }
    Ok(())
}

fn graph_index(cfg: &Config, args: &GraphArgs) -> anyhow::Result<(KnowledgeGraph, VectorIndex)> {
    let g = load_graph(&args.kg)?;
    let cache = match &args.kg_cache {
        Some(p) => Some(EmbeddingCache::load(p).with_context(|| format!("loading {}", p.display()))?),
        None => None,
    };
    let embedder = cfg.embedder()?;
    let idx = retrieval::build_kg_index(
        &g,
        embedder.as_ref(),
        cache.as_ref(),
        cfg.embedding.batch,
        cfg.embedding.fanout,
    )?;
    Ok((g, idx))
}

fn index_build(cfg: &Config, kg: &Path, out: &Path) -> Res {
    let (_, idx) = graph_index(
        cfg,
        &GraphArgs {
            kg: kg.to_path_buf(),
            kg_cache: None,
        },
    )?;
    idx.to_cache().save(out).map_err(anyhow::Error::from)?;
    println!("indexed {} nodes", idx.len());
    Ok(())
}

fn coverage_space(cfg: &Config, g: &KnowledgeGraph, idx: &VectorIndex) -> anyhow::Result<CoverageSpace> {
    let c = &cfg.clustering;
    let clusters = cluster::cluster_anchors(g, idx, c.seed, c.max_clusters, c.max_iter, cfg.runner_workers())?;
    Ok(CoverageSpace::new(g, &clusters))
}

fn create(path: &Path) -> anyhow::Result<BufWriter<fs::File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(
        fs::File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn cases_cmd(cfg: &Config, c: CasesCmd) -> Res {
    match c {
        CasesCmd::Select {
            graph,
            candidates,
            out,
            trace,
            tau1,
            tau2,
        } => {
            let (g, idx) = graph_index(cfg, &graph)?;
            let space = coverage_space(cfg, &g, &idx)?;
            let pool = case::load_cases(&candidates).with_context(|| format!("loading {}", candidates.display()))?;
            let mut sel_cfg = cfg.selection.to_config();
            sel_cfg.tau1 = tau1.unwrap_or(sel_cfg.tau1);
            sel_cfg.tau2 = tau2.unwrap_or(sel_cfg.tau2);
            let sel = selection::select_cases(&pool, &space, &sel_cfg);
            case::save_cases(&out, &sel.base).map_err(anyhow::Error::from)?;
            let mut w = create(&trace)?;
            sel.write_trace(&mut w).map_err(anyhow::Error::from)?;
            w.flush().map_err(anyhow::Error::from)?;
            let s = &sel.summary;
            println!(
                "selected {} of {} (alpha {}, beta {}){}",
                s.base_size,
                pool.len(),
                s.alpha,
                s.beta,
                if s.coverage_shortfall {
                    ", thresholds not reached"
                } else {
                    ""
                }
            );
        }
        CasesCmd::Validate { input, out, report } => {
            let cases = case::load_cases(&input).with_context(|| format!("loading {}", input.display()))?;
            let results = runner::validate_cases(cases, &cfg.runner.runner(), cfg.runner_workers())
                .map_err(anyhow::Error::from)?;
            let passed = results.iter().filter(|(c, _)| c.validated).count();
            let validated: Vec<_> = results.iter().map(|(c, _)| c.clone()).collect();
            case::save_cases(&out, &validated).map_err(anyhow::Error::from)?;
            if let Some(report) = report {
                let mut w = create(&report)?;
                for (c, o) in &results {
                    let line = serde_json::json!({"id": c.id, "outcome": o});
                    writeln!(w, "{line}").map_err(anyhow::Error::from)?;
                }
                w.flush().map_err(anyhow::Error::from)?;
            }
            println!("validated {passed} of {}", results.len());
        }
        CasesCmd::Store { input, out } => {
            let cases = case::load_cases(&input).with_context(|| format!("loading {}", input.display()))?;
            let embedder = cfg.embedder().map_err(anyhow::Error::from)?;
            let s = store::store_cases(cases, embedder.as_ref(), &cfg.store_options()).map_err(anyhow::Error::from)?;
            s.save(&out).map_err(anyhow::Error::from)?;
            println!("stored {} cases", s.len());
        }
    }
    Ok(())
}

/// Loads everything a query needs and hands a retriever to `f`.
fn with_retriever<T>(
    cfg: &Config,
    q: &QueryArgs,
    f: impl FnOnce(&Retriever<'_>, &kgcoder::config::Clients) -> anyhow::Result<T>,
) -> anyhow::Result<T> {
    let (g, idx) = graph_index(cfg, &q.graph)?;
    let st = CaseStore::load(&q.store).with_context(|| format!("loading store {}", q.store.display()))?;
    let embedder = cfg.embedder()?;
    let clients = cfg.clients()?;
    let judge = if cfg.retrieval.classify { clients.judge() } else { None };
    let r = Retriever {
        graph: &g,
        kg_index: &idx,
        store: &st,
        embedder: embedder.as_ref(),
        judge,
        params: cfg.retrieval.params(),
    };
    f(&r, &clients)
}

fn print_json(v: &impl serde::Serialize) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn retrieve(cfg: &Config, q: &QueryArgs) -> Res {
    with_retriever(cfg, q, |r, _| print_json(&r.retrieve(&q.query)?))?;
    Ok(())
}

fn write_transcript(path: &Path, t: &kgcoder::protocol::Transcript) -> anyhow::Result<()> {
    let mut w = create(path)?;
    t.write_jsonl(&mut w)?;
    w.flush()?;
    Ok(())
}

fn run_session(
    cfg: &Config,
    r: &Retriever<'_>,
    clients: &kgcoder::config::Clients,
    query: &str,
    transcript: Option<&Path>,
) -> anyhow::Result<agent::AgentRun> {
    let result = agent::run_agent(query, r as &dyn AgentTools, clients.require_agent()?, &cfg.agent);
    if let Some(path) = transcript {
        let partial = match &result {
            Ok(run) => Some(&run.transcript),
            Err(e) => e.partial_transcript(),
        };
        if let Some(t) = partial {
            write_transcript(path, t)?;
        }
    }
    Ok(result?)
}

fn agent_run(cfg: &Config, q: &QueryArgs, transcript: Option<&Path>) -> Res {
    with_retriever(cfg, q, |r, clients| {
        let run = run_session(cfg, r, clients, &q.query, transcript)?;
        print_json(&run.answer)
    })?;
    Ok(())
}

fn generate(cfg: &Config, a: &GenerateArgs) -> Res {
    with_retriever(cfg, &a.q, |r, clients| {
        let run = run_session(cfg, r, clients, &a.q.query, a.transcript.as_deref())?;
        let prompt = codegen::build_prompt(&a.q.query, &run.answer);
        if let Some(p) = &a.prompt_out {
            fs::write(p, &prompt.rendered).with_context(|| format!("writing {}", p.display()))?;
        }
        let g = codegen::generate(clients.require_generator()?, &prompt, cfg.agent.max_tokens)?;
        match &a.out {
            Some(p) => fs::write(p, &g.code).with_context(|| format!("writing {}", p.display()))?,
            None => println!("{}", g.code),
        }
        Ok(())
    })?;
    Ok(())
}

fn eval_cmd(cfg: &Config, a: &EvalArgs) -> Res {
    let tasks = eval::load_tasks(&a.tasks).with_context(|| format!("loading {}", a.tasks.display()))?;
    let q = QueryArgs {
        graph: GraphArgs {
            kg: a.graph.kg.clone(),
            kg_cache: a.graph.kg_cache.clone(),
        },
        store: a.store.clone(),
        query: String::new(),
    };
    let report = with_retriever(cfg, &q, |r, clients| {
        let pipeline = Pipeline {
            tools: r,
            agent_llm: clients.require_agent()?,
            generator: clients.require_generator()?,
            agent: cfg.agent,
            runner: cfg.runner.runner(),
            marker: cfg.eval.marker.clone(),
            artifacts: Some(a.out.join("artifacts")),
            record_wall_time: cfg.eval.record_wall_time,
            workers: cfg.eval_workers(),
        };
        let report = eval::evaluate(&tasks, &pipeline)?;
        report.save(&a.out)?;
        Ok(report)
    })?;
    println!("pass@1 {} ({}/{})", report.pass_at_1, report.passed, report.total);
    for (g, s) in &report.groups {
        println!("  {g}: {} ({}/{})", s.pass_at_1, s.passed, s.total);
    }
    Ok(())
}

fn experiment_cmd(cfg: &Config, c: ExperimentCmd) -> Res {
    match c {
        ExperimentCmd::SelectionCurve {
            graph,
            candidates,
            out,
            budgets,
            seeds,
        } => {
            let mut curve = cfg.curve();
            if let Some(b) = budgets {
                curve.budgets = b;
            }
            if let Some(s) = seeds {
                curve.seeds = s;
            }
            experiment::check_budgets(&curve.budgets).map_err(anyhow::Error::from)?;
            let (g, idx) = graph_index(cfg, &graph)?;
            let space = coverage_space(cfg, &g, &idx)?;
            let pool = case::load_cases(&candidates).with_context(|| format!("loading {}", candidates.display()))?;
            let (rows, _) = experiment::selection_curve(&pool, &space, &curve).map_err(anyhow::Error::from)?;
            let mut w = create(&out)?;
            experiment::write_curve_csv(&rows, &mut w).map_err(anyhow::Error::from)?;
            w.flush().map_err(anyhow::Error::from)?;
            for r in &rows {
                println!(
                    "budget {:.2}: guided {:.4}, random {:.4} ± {:.4}",
                    r.budget, r.kg_guided, r.random_mean, r.random_stdev
                );
            }
        }
        ExperimentCmd::Synthesize {
            out,
            packages,
            functions,
            cases,
            seed,
        } => {
            if packages == 0 || functions == 0 {
                return Err(Failure::Usage("packages and functions must be positive".into()));
            }
            let w = synthetic::generate(&SyntheticConfig {
                packages,
                functions_per_package: functions,
                cases,
                seed,
                ..Default::default()
            });
            fs::create_dir_all(&out).map_err(anyhow::Error::from)?;
            w.graph.save(out.join("kg.jsonl")).map_err(anyhow::Error::from)?;
            case::save_cases(out.join("pool.jsonl"), &w.pool).map_err(anyhow::Error::from)?;
            println!("wrote {} triples and {} cases", w.graph.triples().len(), w.pool.len());
        }
    }
    Ok(())
}
