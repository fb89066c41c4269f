//! TOML configuration with one section per stage. Every numeric default lives here.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::AgentConfig;
use crate::cluster::{DEFAULT_MAX_CLUSTERS, DEFAULT_MAX_ITER};
use crate::embed::{EmbeddingProvider, HttpEmbedder, StubEmbedder, DEFAULT_STUB_DIM};
use crate::eval::DEFAULT_MARKER;
use crate::experiment::CurveConfig;
use crate::http::HttpEndpoint;
use crate::llm::{HttpLlmClient, LlmClient, LlmError, ScriptedLlm};
use crate::pool;
use crate::retrieval::{RetrievalParams, DEFAULT_TOP_R, DEFAULT_TOP_T};
use crate::runner::Runner;
use crate::selection::{SelectionConfig, TraversalOrder};
use crate::store::StoreOptions;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config file not found: {0}")]
    NotFound(PathBuf),
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("invalid config {path}: {source}")]
    Parse { path: PathBuf, source: toml::de::Error },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Llm(#[from] LlmError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingKind {
    Stub,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingSection {
    pub provider: EmbeddingKind,
    pub dim: usize,
    pub seed: u64,
    pub url: Option<String>,
    pub api_key: Option<String>,
    pub timeout_secs: f64,
    pub batch: usize,
    pub fanout: usize,
}

impl Default for EmbeddingSection {
    fn default() -> Self {
        Self {
            provider: EmbeddingKind::Stub,
            dim: DEFAULT_STUB_DIM,
            seed: 0,
            url: None,
            api_key: None,
            timeout_secs: 60.0,
            batch: 32,
            fanout: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusteringSection {
    pub max_clusters: usize,
    pub max_iter: usize,
    pub seed: u64,
}

impl Default for ClusteringSection {
    fn default() -> Self {
        Self {
            max_clusters: DEFAULT_MAX_CLUSTERS,
            max_iter: DEFAULT_MAX_ITER,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OrderKind {
    Input,
    Shuffled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionSection {
    pub tau1: f64,
    pub tau2: f64,
    pub order: OrderKind,
    pub seed: u64,
}

impl Default for SelectionSection {
    fn default() -> Self {
        Self {
            tau1: 0.9,
            tau2: 0.9,
            order: OrderKind::Input,
            seed: 0,
        }
    }
}

impl SelectionSection {
    pub fn order(&self) -> TraversalOrder {
        match self.order {
            OrderKind::Input => TraversalOrder::InputOrder,
            OrderKind::Shuffled => TraversalOrder::Shuffled(self.seed),
        }
    }

    pub fn to_config(&self) -> SelectionConfig {
        SelectionConfig {
            tau1: self.tau1,
            tau2: self.tau2,
            order: self.order(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalSection {
    pub top_t: usize,
    pub top_r: usize,
    pub fanout: usize,
    /// Ask the judge which packages apply before searching knowledge.
    pub classify: bool,
}

impl Default for RetrievalSection {
    fn default() -> Self {
        Self {
            top_t: DEFAULT_TOP_T,
            top_r: DEFAULT_TOP_R,
            fanout: 4,
            classify: true,
        }
    }
}

impl RetrievalSection {
    pub fn params(&self) -> RetrievalParams {
        RetrievalParams {
            top_t: self.top_t,
            top_r: self.top_r,
            fanout: self.fanout,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LlmMode {
    None,
    Scripted,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LlmSection {
    pub mode: LlmMode,
    pub playbook: Option<PathBuf>,
    pub url: Option<String>,
    pub api_key: Option<String>,
    pub timeout_secs: f64,
    pub max_retries: u32,
}

impl Default for LlmSection {
    fn default() -> Self {
        Self {
            mode: LlmMode::None,
            playbook: None,
            url: None,
            api_key: None,
            timeout_secs: 60.0,
            max_retries: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunnerSection {
    pub command: String,
    pub timeout_secs: f64,
    pub file_name: String,
    /// 0 means one per CPU.
    pub workers: usize,
}

impl Default for RunnerSection {
    fn default() -> Self {
        let r = Runner::default();
        Self {
            command: r.command,
            timeout_secs: r.timeout.as_secs_f64(),
            file_name: r.file_name,
            workers: 0,
        }
    }
}

impl RunnerSection {
    pub fn runner(&self) -> Runner {
        Runner {
            command: self.command.clone(),
            timeout: Duration::from_secs_f64(self.timeout_secs),
            workdir: None,
            file_name: self.file_name.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StoreSection {
    pub require_validated: bool,
}

impl Default for StoreSection {
    fn default() -> Self {
        Self {
            require_validated: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub marker: String,
    /// 0 means one per CPU.
    pub workers: usize,
    pub record_wall_time: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            marker: DEFAULT_MARKER.into(),
            workers: 0,
            record_wall_time: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    pub budgets: Vec<f64>,
    pub seeds: usize,
    pub seed: u64,
    pub tau1: f64,
    pub tau2: f64,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        let c = CurveConfig::default();
        Self {
            budgets: c.budgets,
            seeds: c.seeds,
            seed: c.seed,
            tau1: c.tau1,
            tau2: c.tau2,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub embedding: EmbeddingSection,
    pub clustering: ClusteringSection,
    pub selection: SelectionSection,
    pub store: StoreSection,
    pub retrieval: RetrievalSection,
    pub agent: AgentConfig,
    /// The reasoning model that drives the agent.
    pub llm: LlmSection,
    /// Package classifier and relevance scorer.
    pub judge: LlmSection,
    /// Final code generator; the agent model is reused when absent.
    pub generator: Option<LlmSection>,
    pub runner: RunnerSection,
    pub eval: EvalSection,
    pub experiment: ExperimentSection,
}

fn workers(n: usize) -> usize {
    if n == 0 {
        pool::default_workers()
    } else {
        n
    }
}

impl Config {
    pub fn parse(text: &str, path: &Path) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|source| ConfigError::Parse {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Reads the file, resolves relative playbook paths against its directory,
    /// and applies environment overrides.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(ConfigError::NotFound(path.to_path_buf()));
        }
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = Self::parse(&text, path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for section in cfg.llm_sections_mut() {
            if let Some(p) = &mut section.playbook {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        cfg.apply_env(|k| std::env::var(k).ok());
        Ok(cfg)
    }

    fn llm_sections_mut(&mut self) -> Vec<&mut LlmSection> {
        let mut v = vec![&mut self.llm, &mut self.judge];
        if let Some(g) = &mut self.generator {
            v.push(g);
        }
        v
    }

    /// `KGCODER_{LLM,JUDGE,GENERATOR,EMBEDDING}_{URL,API_KEY}` override endpoints and keys.
    pub fn apply_env(&mut self, lookup: impl Fn(&str) -> Option<String>) {
        let apply = |prefix: &str, url: &mut Option<String>, key: &mut Option<String>| {
            if let Some(v) = lookup(&format!("KGCODER_{prefix}_URL")) {
                *url = Some(v);
            }
            if let Some(v) = lookup(&format!("KGCODER_{prefix}_API_KEY")) {
                *key = Some(v);
            }
        };
        apply("LLM", &mut self.llm.url, &mut self.llm.api_key);
        apply("JUDGE", &mut self.judge.url, &mut self.judge.api_key);
        if let Some(g) = &mut self.generator {
            apply("GENERATOR", &mut g.url, &mut g.api_key);
        }
        apply("EMBEDDING", &mut self.embedding.url, &mut self.embedding.api_key);
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if self.embedding.dim == 0 {
            return bad("embedding.dim must be positive");
        }
        if self.retrieval.top_t == 0 || self.retrieval.top_r == 0 {
            return bad("retrieval.top_t and retrieval.top_r must be positive");
        }
        if self.clustering.max_clusters == 0 {
            return bad("clustering.max_clusters must be positive");
        }
        if self.runner.timeout_secs.is_nan() || self.runner.timeout_secs <= 0.0 {
            return bad("runner.timeout_secs must be positive");
        }
        if self.experiment.budgets.iter().any(|&b| !(b > 0.0 && b <= 1.0)) {
            return bad("experiment.budgets must lie in (0, 1]");
        }
        Ok(())
    }

    pub fn embedder(&self) -> Result<Box<dyn EmbeddingProvider>, ConfigError> {
        let e = &self.embedding;
        Ok(match e.provider {
            EmbeddingKind::Stub => Box::new(StubEmbedder::new(e.dim, e.seed)),
            EmbeddingKind::Http => {
                let url = e
                    .url
                    .clone()
                    .ok_or_else(|| ConfigError::Invalid("embedding.url is required for the http provider".into()))?;
                let mut ep = HttpEndpoint::new(url);
                ep.api_key = e.api_key.clone();
                ep.timeout = Duration::from_secs_f64(e.timeout_secs);
                Box::new(HttpEmbedder::new(ep, Some(e.dim)))
            }
        })
    }

    pub fn store_options(&self) -> StoreOptions {
        StoreOptions {
            require_validated: self.store.require_validated,
            batch: self.embedding.batch,
            fanout: self.embedding.fanout,
        }
    }

    pub fn curve(&self) -> CurveConfig {
        CurveConfig {
            budgets: self.experiment.budgets.clone(),
            seeds: self.experiment.seeds,
            seed: self.experiment.seed,
            tau1: self.experiment.tau1,
            tau2: self.experiment.tau2,
            order: self.selection.order(),
        }
    }

    pub fn runner_workers(&self) -> usize {
        workers(self.runner.workers)
    }

    pub fn eval_workers(&self) -> usize {
        workers(self.eval.workers)
    }

    /// Builds the model clients. Sections naming the same playbook share one
    /// replay so consumption order is global.
    pub fn clients(&self) -> Result<Clients, ConfigError> {
        let mut scripts: BTreeMap<PathBuf, Arc<ScriptedLlm>> = BTreeMap::new();
        let mut build = |s: &LlmSection, name: &str| -> Result<Option<Arc<dyn LlmClient>>, ConfigError> {
            match s.mode {
                LlmMode::None => Ok(None),
                LlmMode::Scripted => {
                    let path = s
                        .playbook
                        .clone()
                        .ok_or_else(|| ConfigError::Invalid(format!("{name}.playbook is required in scripted mode")))?;
                    if let Some(existing) = scripts.get(&path) {
                        return Ok(Some(existing.clone()));
                    }
                    let script = Arc::new(ScriptedLlm::load(&path)?);
                    scripts.insert(path, script.clone());
                    Ok(Some(script))
                }
                LlmMode::Http => {
                    let url = s
                        .url
                        .clone()
                        .ok_or_else(|| ConfigError::Invalid(format!("{name}.url is required in http mode")))?;
                    let mut ep = HttpEndpoint::new(url);
                    ep.api_key = s.api_key.clone();
                    ep.timeout = Duration::from_secs_f64(s.timeout_secs);
                    ep.max_retries = s.max_retries;
                    Ok(Some(Arc::new(HttpLlmClient::new(ep))))
                }
            }
        };
        let agent = build(&self.llm, "llm")?;
        let judge = build(&self.judge, "judge")?;
        let generator = match &self.generator {
            Some(g) => build(g, "generator")?,
            None => agent.clone(),
        };
        Ok(Clients {
            agent,
            judge,
            generator,
        })
    }
}

pub struct Clients {
    pub agent: Option<Arc<dyn LlmClient>>,
    pub judge: Option<Arc<dyn LlmClient>>,
    pub generator: Option<Arc<dyn LlmClient>>,
}

impl Clients {
    pub fn require_agent(&self) -> Result<&dyn LlmClient, ConfigError> {
        self.agent
            .as_deref()
            .ok_or_else(|| ConfigError::Invalid("llm.mode must be scripted or http".into()))
    }

    pub fn require_generator(&self) -> Result<&dyn LlmClient, ConfigError> {
        self.generator
            .as_deref()
            .ok_or_else(|| ConfigError::Invalid("generator (or llm) must be configured".into()))
    }

    pub fn judge(&self) -> Option<&dyn LlmClient> {
        self.judge.as_deref()
    }
}
