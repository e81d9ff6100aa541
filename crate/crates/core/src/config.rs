//! TOML run configuration. Every key has a default, so a minimal file only
//! names the dataset paths and, for live runs, the endpoint.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adaptive::AdaptiveConfig;
use crate::agent::AgentId;
use crate::diagnostics::DiagnosticsConfig;
use crate::error::{Error, Result};
use crate::graph::GraphConfig;
use crate::pool::{AgentSpec, BackendSpec, LiveEndpoint, PoolOptions, PromptVersion, ROLES, ENV_API_KEY};
use crate::refinement::RefinementConfig;
use crate::router::TrainConfig;
use crate::synthetic::{planted_pool, PlantedConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub train: PathBuf,
    pub val: PathBuf,
    pub test: PathBuf,
    pub run_dir: PathBuf,
    /// Optional directory of `<role>.txt` files replacing the shipped prompts.
    pub prompts: Option<PathBuf>,
    /// Ingestion cap per split.
    pub limit: Option<usize>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            train: "data/train.jsonl".into(),
            val: "data/val.jsonl".into(),
            test: "data/test.jsonl".into(),
            run_dir: "run".into(),
            prompts: None,
            limit: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Synthetic,
    Live,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSection {
    pub high: f64,
    pub low: f64,
    pub seed: u64,
    pub corrupt: Vec<AgentId>,
    pub corrupt_competence: f64,
}

impl Default for SyntheticSection {
    fn default() -> Self {
        let p = PlantedConfig::default();
        Self {
            high: p.high,
            low: p.low,
            seed: p.seed,
            corrupt: p.corrupt,
            corrupt_competence: p.corrupt_competence,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LiveSection {
    /// Empty means read `AGENT_ROUTER_API_BASE`.
    pub base_url: String,
    pub api_key_env: String,
    pub timeout_secs: u64,
    /// Backbone name → model id; backbones not listed use their own name.
    pub models: BTreeMap<String, String>,
    pub temperature: f64,
    pub max_tokens: u32,
    /// Ask each agent which entities it attends to when building graphs.
    pub agent_views: bool,
}

impl Default for LiveSection {
    fn default() -> Self {
        Self {
            base_url: String::new(),
            api_key_env: ENV_API_KEY.to_string(),
            timeout_secs: 120,
            models: BTreeMap::new(),
            temperature: 0.2,
            max_tokens: 512,
            agent_views: true,
        }
    }
}

impl LiveSection {
    pub fn endpoint(&self, backbone: &str) -> LiveEndpoint {
        LiveEndpoint {
            base_url: self.base_url.clone(),
            model: self.models.get(backbone).cloned().unwrap_or_else(|| backbone.to_string()),
            api_key_env: self.api_key_env.clone(),
            timeout_secs: self.timeout_secs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoolConfig {
    pub backbones: Vec<String>,
    pub roles: Vec<String>,
    pub backend: BackendKind,
    pub concurrency: usize,
    pub retries: usize,
    pub missing_threshold: f64,
    pub synthetic: SyntheticSection,
    pub live: LiveSection,
}

impl Default for PoolConfig {
    fn default() -> Self {
        let p = PlantedConfig::default();
        let o = PoolOptions::default();
        Self {
            backbones: p.backbones,
            roles: p.roles,
            backend: BackendKind::Synthetic,
            concurrency: o.concurrency,
            retries: o.retries,
            missing_threshold: o.missing_threshold,
            synthetic: SyntheticSection::default(),
            live: LiveSection::default(),
        }
    }
}

impl PoolConfig {
    pub fn options(&self) -> PoolOptions {
        PoolOptions {
            concurrency: self.concurrency,
            retries: self.retries,
            missing_threshold: self.missing_threshold,
        }
    }

    pub fn planted(&self) -> PlantedConfig {
        PlantedConfig {
            backbones: self.backbones.clone(),
            roles: self.roles.clone(),
            high: self.synthetic.high,
            low: self.synthetic.low,
            seed: self.synthetic.seed,
            corrupt: self.synthetic.corrupt.clone(),
            corrupt_competence: self.synthetic.corrupt_competence,
        }
    }

    /// Agents with their initial prompts, sorted by id. `overrides` maps
    /// role names to replacement prompt text.
    pub fn agents(&self, overrides: &BTreeMap<String, String>) -> Result<Vec<AgentSpec>> {
        let mut agents = match self.backend {
            BackendKind::Synthetic => planted_pool(&self.planted())?,
            BackendKind::Live => {
                let mut out = Vec::new();
                for b in &self.backbones {
                    for r in &self.roles {
                        out.push(AgentSpec {
                            id: AgentId::new(b, r),
                            prompt: PromptVersion::shipped(r)?,
                            backend: BackendSpec::Live(self.live.endpoint(b)),
                            temperature: self.live.temperature,
                            max_tokens: self.live.max_tokens,
                        });
                    }
                }
                out
            }
        };
        for a in &mut agents {
            if let Some(text) = overrides.get(&a.id.role) {
                a.prompt = PromptVersion::new(text.clone(), 0);
            }
        }
        agents.sort_by(|a, b| a.id.cmp(&b.id));
        Ok(agents)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphSection {
    pub cooccurrence_window: usize,
    pub max_entities: usize,
    pub embed_dim: usize,
    /// Offline agent views: fraction of entities each agent attends to.
    pub view_rate: f64,
}

impl Default for GraphSection {
    fn default() -> Self {
        let g = GraphConfig::default();
        Self {
            cooccurrence_window: g.cooccurrence_window,
            max_entities: g.max_entities,
            embed_dim: 256,
            view_rate: 0.3,
        }
    }
}

impl GraphSection {
    pub fn graph_config(&self) -> GraphConfig {
        GraphConfig {
            cooccurrence_window: self.cooccurrence_window,
            max_entities: self.max_entities,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RewriterKind {
    Offline,
    Live,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewriterSection {
    pub backend: RewriterKind,
    /// Model id for live rewriting; endpoint settings come from `pool.live`.
    pub model: String,
    pub max_tokens: u32,
}

impl Default for RewriterSection {
    fn default() -> Self {
        Self {
            backend: RewriterKind::Offline,
            model: "gpt-4o-mini".into(),
            max_tokens: 1024,
        }
    }
}

/// Adaptive settings; unset fields fall back to the tuned values, then to the full pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptiveSection {
    pub tau_agree: Option<f64>,
    pub k_min: Option<usize>,
    pub k_max: Option<usize>,
    /// Validation F1 gap (fraction) treated as a tie when tuning.
    pub f1_tolerance: f64,
}

impl Default for AdaptiveSection {
    fn default() -> Self {
        Self {
            tau_agree: None,
            k_min: None,
            k_max: None,
            f1_tolerance: 0.005,
        }
    }
}

impl AdaptiveSection {
    pub fn resolve(&self, base: AdaptiveConfig) -> AdaptiveConfig {
        AdaptiveConfig {
            tau_agree: self.tau_agree.unwrap_or(base.tau_agree),
            k_min: self.k_min.unwrap_or(base.k_min),
            k_max: self.k_max.unwrap_or(base.k_max),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeSection {
    pub bind: String,
}

impl Default for ServeSection {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1:8080".into(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; overrides the seeds of the train and refinement sections.
    pub seed: u64,
    pub paths: PathsConfig,
    pub pool: PoolConfig,
    pub graph: GraphSection,
    pub train: TrainConfig,
    pub refinement: RefinementConfig,
    pub rewriter: RewriterSection,
    pub adaptive: AdaptiveSection,
    pub diagnostics: DiagnosticsConfig,
    pub serve: ServeSection,
}

impl RunConfig {
    /// Parses TOML and resolves relative paths against `base`.
    pub fn from_toml(text: &str, base: &Path) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.resolve_paths(base);
        cfg.apply_seed();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.paths.train);
        fix(&mut self.paths.val);
        fix(&mut self.paths.test);
        fix(&mut self.paths.run_dir);
        if let Some(p) = &mut self.paths.prompts {
            fix(p);
        }
    }

    pub fn apply_seed(&mut self) {
        self.train.seed = self.seed;
        self.refinement.seed = self.seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate().map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("[train] {m}")),
            other => other,
        })?;
        if self.pool.backbones.is_empty() || self.pool.roles.is_empty() {
            return Err(Error::Config("[pool] needs at least one backbone and one role".into()));
        }
        for r in &self.pool.roles {
            let overridden = self.paths.prompts.as_ref().is_some_and(|d| d.join(format!("{r}.txt")).exists());
            if !ROLES.contains(&r.as_str()) && !overridden {
                return Err(Error::Config(format!(
                    "[pool] role {r:?} has no shipped prompt (known: {}); add {r}.txt under paths.prompts",
                    ROLES.join(", ")
                )));
            }
        }
        if self.graph.embed_dim == 0 {
            return Err(Error::Config("[graph] embed_dim must be positive".into()));
        }
        if self.refinement.temperatures.is_empty() {
            return Err(Error::Config("[refinement] temperatures must not be empty".into()));
        }
        Ok(())
    }

    /// Role prompt overrides from `paths.prompts`.
    pub fn prompt_overrides(&self) -> Result<BTreeMap<String, String>> {
        let mut out = BTreeMap::new();
        if let Some(dir) = &self.paths.prompts {
            for r in &self.pool.roles {
                let p = dir.join(format!("{r}.txt"));
                if p.exists() {
                    out.insert(r.clone(), std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?);
                }
            }
        }
        Ok(out)
    }
}
