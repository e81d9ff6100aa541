//! Pipeline stages over a run directory:
//!
//! ```text
//! run_dir/
//!   graphs/{split}/*.json, graphs/manifest.json
//!   cache/entries.jsonl, cache/scores-{split}.json
//!   prompts/                 current prompt per agent plus history
//!   checkpoints/router.json  current router; round-N.json per refinement round
//!   diagnostics/             bundle.json, report.txt, train-log.jsonl
//!   journal/                 refinement.jsonl, state.json
//!   predictions/             {split}.jsonl, adaptive.json, eval-{split}.json
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adaptive::{
    adaptive_infer, default_grid, rank_agents, tune_adaptive, weighted_vote, AdaptiveConfig, AdaptiveResult,
    TuneExample, TuneOutcome,
};
use crate::agent::AgentId;
use crate::config::{BackendKind, RewriterKind, RunConfig};
use crate::dataset::{load_dataset, QAInstance};
use crate::diagnostics::{summarize, DiagnosticsBundle};
use crate::error::{Error, Result};
use crate::graph::{
    deserialize_graph, refresh_agent_features, serialize_graph, AgentViewProvider, CapitalizedRunExtractor,
    HashEmbedder, SeededViews, TypedGraph,
};
use crate::metrics::best_score;
use crate::pool::{evaluate_pool, invoke, write_atomic, AgentSpec, AnswerCache, LiveViews, PoolEvaluation, PromptStore};
use crate::refinement::{diagnose, run_round, Journal, LlmRewriter, OfflineRewriter, RefinementState, Rewriter, RoundInputs, RoundReport};
use crate::router::{forward, load_checkpoint, save_checkpoint, Checkpoint, EpochLog, RouterParams};
use crate::workspace::{categories_of, compile_graph, RouterWorkspace};

const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split {s:?}; use train, val or test"))),
        }
    }
}

/// File locations inside a run directory. Per-seed runs share graphs,
/// cache and prompts with the main run.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
    shared: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        let root = root.into();
        Self {
            shared: root.clone(),
            root,
        }
    }

    pub fn for_seed(&self, seed: u64) -> Self {
        Self {
            root: self.shared.join("seeds").join(format!("seed-{seed}")),
            shared: self.shared.clone(),
        }
    }

    pub fn graphs(&self, split: Split) -> PathBuf {
        self.shared.join("graphs").join(split.name())
    }
    pub fn graph_manifest(&self) -> PathBuf {
        self.shared.join("graphs").join("manifest.json")
    }
    pub fn cache(&self) -> PathBuf {
        self.shared.join("cache")
    }
    pub fn scores(&self, split: Split) -> PathBuf {
        self.shared.join("cache").join(format!("scores-{}.json", split.name()))
    }
    pub fn prompts(&self) -> PathBuf {
        self.shared.join("prompts")
    }
    pub fn checkpoint(&self) -> PathBuf {
        self.root.join("checkpoints").join("router.json")
    }
    pub fn round_checkpoint(&self, round: usize) -> PathBuf {
        self.root.join("checkpoints").join(format!("round-{round}.json"))
    }
    pub fn bundle(&self) -> PathBuf {
        self.root.join("diagnostics").join("bundle.json")
    }
    pub fn report(&self) -> PathBuf {
        self.root.join("diagnostics").join("report.txt")
    }
    pub fn train_log(&self) -> PathBuf {
        self.root.join("diagnostics").join("train-log.jsonl")
    }
    pub fn journal(&self) -> PathBuf {
        self.root.join("journal").join("refinement.jsonl")
    }
    pub fn state(&self) -> PathBuf {
        self.root.join("journal").join("state.json")
    }
    pub fn predictions(&self, split: Split) -> PathBuf {
        self.root.join("predictions").join(format!("{}.jsonl", split.name()))
    }
    pub fn tuned(&self) -> PathBuf {
        self.root.join("predictions").join("adaptive.json")
    }
    pub fn eval(&self, split: Split) -> PathBuf {
        self.root.join("predictions").join(format!("eval-{}.json", split.name()))
    }
}

fn require(path: &Path, producer: &'static str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingArtifact {
            path: path.to_path_buf(),
            producer,
        })
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path, producer: &'static str) -> Result<T> {
    require(path, producer)?;
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

fn digest(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    hex::encode(h.finalize())
}

/// Loaded configuration plus the shared answer cache.
pub struct Context {
    pub config: RunConfig,
    pub layout: Layout,
    pub cache: Arc<AnswerCache>,
}

impl Context {
    pub fn open(config: RunConfig) -> Result<Self> {
        let layout = Layout::new(&config.paths.run_dir);
        let cache = Arc::new(AnswerCache::open(layout.cache())?);
        Ok(Self { config, layout, cache })
    }

    /// Same run, separate router artifacts for `seed`.
    pub fn for_seed(&self, seed: u64) -> Self {
        let mut config = self.config.clone();
        config.seed = seed;
        config.apply_seed();
        Self {
            config,
            layout: self.layout.for_seed(seed),
            cache: Arc::clone(&self.cache),
        }
    }

    pub fn split_path(&self, split: Split) -> &Path {
        match split {
            Split::Train => &self.config.paths.train,
            Split::Val => &self.config.paths.val,
            Split::Test => &self.config.paths.test,
        }
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<QAInstance>> {
        let path = self.split_path(split);
        if !path.exists() {
            return Err(Error::Config(format!("{} split not found at {}", split.name(), path.display())));
        }
        load_dataset(path, self.config.paths.limit)
    }

    pub fn embedder(&self) -> HashEmbedder {
        HashEmbedder {
            dim: self.config.graph.embed_dim,
        }
    }

    fn offline_views(&self) -> SeededViews {
        SeededViews {
            seed: self.config.seed,
            rate: self.config.graph.view_rate,
        }
    }

    /// Agents with their current prompts: the prompt store when present,
    /// otherwise the configured initial prompts.
    pub fn agents(&self) -> Result<Vec<AgentSpec>> {
        let mut agents = self.config.pool.agents(&self.config.prompt_overrides()?)?;
        let store = PromptStore::new(self.layout.prompts());
        if store.exists() {
            let current = store.load()?;
            for a in &mut agents {
                if let Some(p) = current.get(&a.id) {
                    a.prompt = p.clone();
                }
            }
        }
        Ok(agents)
    }

    fn prompt_texts(agents: &[AgentSpec]) -> BTreeMap<AgentId, String> {
        agents.iter().map(|a| (a.id.clone(), a.prompt.text.clone())).collect()
    }

    /// Graph for an instance outside the prepared splits (used by the service).
    pub fn compile(&self, instance: &QAInstance, agents: &[AgentSpec]) -> Result<TypedGraph> {
        let ids: Vec<AgentId> = agents.iter().map(|a| a.id.clone()).collect();
        let extractor = CapitalizedRunExtractor {
            max_entities: self.config.graph.max_entities,
        };
        let prompts = Self::prompt_texts(agents);
        let views: Box<dyn AgentViewProvider + '_> = self.views(agents);
        compile_graph(
            instance,
            &extractor,
            views.as_ref(),
            &ids,
            &self.config.graph.graph_config(),
            &self.embedder(),
            &prompts,
        )
    }

    /// Like [`Context::compile`] but never calls a backend for agent views.
    pub fn compile_offline(&self, instance: &QAInstance, agents: &[AgentSpec]) -> Result<TypedGraph> {
        let ids: Vec<AgentId> = agents.iter().map(|a| a.id.clone()).collect();
        let extractor = CapitalizedRunExtractor {
            max_entities: self.config.graph.max_entities,
        };
        compile_graph(
            instance,
            &extractor,
            &self.offline_views(),
            &ids,
            &self.config.graph.graph_config(),
            &self.embedder(),
            &Self::prompt_texts(agents),
        )
    }

    fn views<'a>(&'a self, agents: &'a [AgentSpec]) -> Box<dyn AgentViewProvider + 'a> {
        if self.config.pool.backend == BackendKind::Live && self.config.pool.live.agent_views {
            Box::new(LiveViews {
                agents,
                cache: &self.cache,
                retries: self.config.pool.retries,
                fallback: self.offline_views(),
            })
        } else {
            Box::new(self.offline_views())
        }
    }

    /// Prepared graphs for `instances`, agent features refreshed to `agents`' prompts.
    pub fn load_graphs(&self, split: Split, instances: &[QAInstance], agents: &[AgentSpec]) -> Result<Vec<TypedGraph>> {
        let manifest: GraphManifest = read_json(&self.layout.graph_manifest(), "prepare")?;
        let entries = manifest.splits.get(&split).cloned().unwrap_or_default();
        let dir = self.layout.graphs(split);
        let embedder = self.embedder();
        let prompts = Self::prompt_texts(agents);
        instances
            .par_iter()
            .map(|inst| {
                let entry = entries.get(&inst.id).ok_or_else(|| Error::MissingArtifact {
                    path: dir.join(format!("<graph for {}>", inst.id)),
                    producer: "prepare",
                })?;
                let path = dir.join(&entry.file);
                require(&path, "prepare")?;
                let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
                let mut g = deserialize_graph(&bytes)?;
                refresh_agent_features(&mut g, &embedder, &prompts)?;
                Ok(g)
            })
            .collect()
    }

    pub fn load_scores(&self, split: Split) -> Result<PoolEvaluation> {
        read_json(&self.layout.scores(split), "score-agents")
    }

    pub fn load_router(&self) -> Result<Checkpoint> {
        require(&self.layout.checkpoint(), "train")?;
        load_checkpoint(&self.layout.checkpoint())
    }

    fn workspace(&self, agents: &[AgentSpec], train: &[QAInstance], val: &[QAInstance]) -> Result<RouterWorkspace> {
        Ok(RouterWorkspace {
            embedder: Box::new(self.embedder()),
            train_graphs: self.load_graphs(Split::Train, train, agents)?,
            val_graphs: self.load_graphs(Split::Val, val, agents)?,
            categories: categories_of(train),
            config: self.config.train.clone(),
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct GraphEntry {
    file: String,
    digest: String,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct GraphManifest {
    version: u32,
    splits: BTreeMap<Split, BTreeMap<String, GraphEntry>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PrepareReport {
    pub built: usize,
    pub skipped: usize,
}

/// Builds one graph per instance of every split. Graphs whose inputs are
/// unchanged are skipped; failures are collected and reported together.
pub fn prepare(ctx: &Context) -> Result<PrepareReport> {
    let agents = ctx.agents()?;
    let store = PromptStore::new(ctx.layout.prompts());
    if !store.exists() {
        store.save(&agents.iter().map(|a| (a.id.clone(), a.prompt.clone())).collect())?;
    }
    let ids: Vec<AgentId> = agents.iter().map(|a| a.id.clone()).collect();
    let settings = serde_json::to_vec(&(
        &ctx.config.graph,
        &ids,
        ctx.config.seed,
        ctx.config.pool.backend,
    ))?;
    let manifest_path = ctx.layout.graph_manifest();
    let mut manifest: GraphManifest = if manifest_path.exists() {
        read_json(&manifest_path, "prepare")?
    } else {
        GraphManifest {
            version: MANIFEST_VERSION,
            ..Default::default()
        }
    };
    let extractor = CapitalizedRunExtractor {
        max_entities: ctx.config.graph.max_entities,
    };
    let views = ctx.views(&agents);
    let embedder = ctx.embedder();
    let prompts = Context::prompt_texts(&agents);
    let gc = ctx.config.graph.graph_config();
    let mut report = PrepareReport::default();
    let mut failures = Vec::new();
    for split in Split::ALL {
        let instances = ctx.load_split(split)?;
        let dir = ctx.layout.graphs(split);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let old = manifest.splits.remove(&split).unwrap_or_default();
        let results: Vec<(String, std::result::Result<(GraphEntry, bool), String>)> = instances
            .par_iter()
            .map(|inst| {
                let d = digest(&[&settings, &serde_json::to_vec(inst).unwrap_or_default()]);
                let file = format!("{}.json", &digest(&[inst.id.as_bytes()])[..24]);
                if let Some(e) = old.get(&inst.id) {
                    if e.digest == d && dir.join(&e.file).exists() {
                        return (inst.id.clone(), Ok((e.clone(), false)));
                    }
                }
                let built = compile_graph(inst, &extractor, views.as_ref(), &ids, &gc, &embedder, &prompts)
                    .and_then(|g| serialize_graph(&g))
                    .and_then(|bytes| write_atomic(&dir.join(&file), &bytes));
                let r = built.map(|_| (GraphEntry { file, digest: d }, true)).map_err(|e| e.to_string());
                (inst.id.clone(), r)
            })
            .collect();
        let mut entries = BTreeMap::new();
        for (id, r) in results {
            match r {
                Ok((entry, built)) => {
                    if built {
                        report.built += 1;
                    } else {
                        report.skipped += 1;
                    }
                    entries.insert(id, entry);
                }
                Err(e) => failures.push(format!("{}/{id}: {e}", split.name())),
            }
        }
        manifest.splits.insert(split, entries);
    }
    write_json(&manifest_path, &manifest)?;
    if !failures.is_empty() {
        return Err(Error::validation(format!(
            "{} graph(s) failed:\n  {}",
            failures.len(),
            failures.join("\n  ")
        )));
    }
    log::info!("prepare: {} built, {} up to date", report.built, report.skipped);
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub split: Split,
    pub cells: usize,
    pub backend_calls: usize,
    pub pool_mean_f1: f64,
}

/// Runs every agent on the training and validation splits and stores the score matrices.
pub fn score_agents(ctx: &Context) -> Result<Vec<ScoreReport>> {
    require(&ctx.layout.graph_manifest(), "prepare")?;
    let agents = ctx.agents()?;
    let options = ctx.config.pool.options();
    let mut out = Vec::new();
    for split in [Split::Train, Split::Val] {
        let instances = ctx.load_split(split)?;
        let eval = evaluate_pool(&agents, &instances, &ctx.cache, &options)?;
        write_json(&ctx.layout.scores(split), &eval)?;
        let r = ScoreReport {
            split,
            cells: eval.agents.len() * eval.instances.len(),
            backend_calls: eval.backend_calls,
            pool_mean_f1: eval.pool_mean_f1(),
        };
        log::info!("score-agents {}: {} cells, {} backend calls", split.name(), r.cells, r.backend_calls);
        out.push(r);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch: usize,
    pub val_f1: f64,
    pub history: Vec<EpochLog>,
}

fn save_diagnostics(ctx: &Context, bundle: &DiagnosticsBundle) -> Result<String> {
    write_json(&ctx.layout.bundle(), bundle)?;
    let report = summarize(bundle, ctx.config.refinement.alpha);
    write_atomic(&ctx.layout.report(), report.as_bytes())?;
    Ok(report)
}

/// Trains the router from scratch, then writes the checkpoint and diagnostics.
pub fn train(ctx: &Context) -> Result<TrainReport> {
    let agents = ctx.agents()?;
    let train_set = ctx.load_split(Split::Train)?;
    let val_set = ctx.load_split(Split::Val)?;
    let train_eval = ctx.load_scores(Split::Train)?;
    let val_eval = ctx.load_scores(Split::Val)?;
    let ws = ctx.workspace(&agents, &train_set, &val_set)?;
    let trained = ws.train(None, &ws.config, (&train_set, &train_eval), (&val_set, &val_eval))?;
    let ckpt = Checkpoint {
        params: trained.params,
        config: ws.config.clone(),
        epoch: trained.epoch,
        val_f1: trained.val_f1,
    };
    save_checkpoint(&ckpt, &ctx.layout.checkpoint())?;
    let mut log = Vec::new();
    for e in &trained.history {
        log.extend(serde_json::to_vec(e)?);
        log.push(b'\n');
    }
    write_atomic(&ctx.layout.train_log(), &log)?;
    let bundle = diagnose(
        &agents,
        &train_set,
        &ctx.cache,
        &ctx.config.pool.options(),
        &ws,
        &ckpt.params,
        &ctx.config.diagnostics,
    )?;
    save_diagnostics(ctx, &bundle)?;
    // a fresh router starts a fresh refinement history
    let state = RefinementState {
        checkpoint: Some(ctx.layout.checkpoint()),
        val_f1: trained.val_f1,
        bundle: Some(bundle),
        seed: ctx.config.seed,
        ..Default::default()
    };
    write_json(&ctx.layout.state(), &state)?;
    Ok(TrainReport {
        epoch: trained.epoch,
        val_f1: trained.val_f1,
        history: trained.history,
    })
}

/// Recomputes the diagnostics bundle for the current router and prompts.
pub fn diagnose_cmd(ctx: &Context) -> Result<String> {
    let agents = ctx.agents()?;
    let train_set = ctx.load_split(Split::Train)?;
    let val_set = ctx.load_split(Split::Val)?;
    let ckpt = ctx.load_router()?;
    let ws = ctx.workspace(&agents, &train_set, &val_set)?;
    let bundle = diagnose(
        &agents,
        &train_set,
        &ctx.cache,
        &ctx.config.pool.options(),
        &ws,
        &ckpt.params,
        &ctx.config.diagnostics,
    )?;
    save_diagnostics(ctx, &bundle)
}

fn rewriter(ctx: &Context) -> Box<dyn Rewriter> {
    match ctx.config.rewriter.backend {
        RewriterKind::Offline => Box::new(OfflineRewriter),
        RewriterKind::Live => {
            let mut endpoint = ctx.config.pool.live.endpoint("rewriter");
            endpoint.model = ctx.config.rewriter.model.clone();
            Box::new(LlmRewriter {
                endpoint,
                retries: ctx.config.pool.retries,
                max_tokens: ctx.config.rewriter.max_tokens,
                cache: Arc::clone(&ctx.cache),
            })
        }
    }
}

/// Runs up to `rounds` refinement rounds (config default when `None`),
/// persisting prompts, router, state and diagnostics after each.
pub fn refine(ctx: &Context, rounds: Option<usize>) -> Result<Vec<RoundReport>> {
    refine_with(ctx, rounds, rewriter(ctx).as_ref())
}

pub fn refine_with(ctx: &Context, rounds: Option<usize>, rewriter: &dyn Rewriter) -> Result<Vec<RoundReport>> {
    let mut state: RefinementState = read_json(&ctx.layout.state(), "train")?;
    let mut agents = ctx.agents()?;
    let train_set = ctx.load_split(Split::Train)?;
    let val_set = ctx.load_split(Split::Val)?;
    let mut params = ctx.load_router()?.params;
    let mut ws = ctx.workspace(&agents, &train_set, &val_set)?;
    let mut journal = Journal::open(ctx.layout.journal())?;
    let options = ctx.config.pool.options();
    let store = PromptStore::new(ctx.layout.prompts());
    let mut reports = Vec::new();
    for _ in 0..rounds.unwrap_or(ctx.config.refinement.rounds) {
        if state.terminable && ctx.config.refinement.stop_when_no_acceptance {
            log::info!("previous round accepted no candidate; stopping");
            break;
        }
        let report = run_round(
            &mut state,
            &mut RoundInputs {
                pool: &mut agents,
                train: &train_set,
                val: &val_set,
                cache: &ctx.cache,
                pool_options: &options,
                rewriter,
                workspace: &mut ws,
                router: &mut params,
                config: &ctx.config.refinement,
                diagnostics: &ctx.config.diagnostics,
                journal: &mut journal,
            },
        )?;
        store.save(&agents.iter().map(|a| (a.id.clone(), a.prompt.clone())).collect())?;
        let ckpt = Checkpoint {
            params: params.clone(),
            config: ws.config.clone(),
            epoch: 0,
            val_f1: state.val_f1,
        };
        save_checkpoint(&ckpt, &ctx.layout.round_checkpoint(report.round))?;
        save_checkpoint(&ckpt, &ctx.layout.checkpoint())?;
        state.checkpoint = Some(ctx.layout.checkpoint());
        if let Some(b) = &state.bundle {
            save_diagnostics(ctx, b)?;
        }
        write_json(&ctx.layout.state(), &state)?;
        if !report.accepted.is_empty() {
            for split in [Split::Train, Split::Val] {
                let set = if split == Split::Train { &train_set } else { &val_set };
                write_json(&ctx.layout.scores(split), &evaluate_pool(&agents, set, &ctx.cache, &options)?)?;
            }
        }
        log::info!(
            "round {}: targets {:?}, accepted {:?}, reverted {}",
            report.round,
            report.targets.iter().map(ToString::to_string).collect::<Vec<_>>(),
            report.accepted.iter().map(ToString::to_string).collect::<Vec<_>>(),
            report.reverted
        );
        reports.push(report);
    }
    Ok(reports)
}

fn tune_examples(
    params: &RouterParams,
    graphs: &[TypedGraph],
    instances: &[QAInstance],
    eval: &PoolEvaluation,
) -> Result<Vec<TuneExample>> {
    instances
        .par_iter()
        .zip(graphs)
        .map(|(inst, g)| {
            let col = eval
                .instance_index(&inst.id)
                .ok_or_else(|| Error::validation(format!("{} missing from the score matrix", inst.id)))?;
            let answers = eval.agents.iter().cloned().zip(eval.answers(col)).collect();
            Ok(TuneExample {
                ranked: rank_agents(&forward(params, g)?),
                answers,
                gold: inst.gold_answers.clone(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneReport {
    pub best: TuneOutcome,
    pub full_pool: TuneOutcome,
    pub grid: Vec<TuneOutcome>,
}

/// Grid search of the stopping rule on the validation split.
pub fn tune(ctx: &Context) -> Result<TuneReport> {
    let agents = ctx.agents()?;
    let val_set = ctx.load_split(Split::Val)?;
    let params = ctx.load_router()?.params;
    let graphs = ctx.load_graphs(Split::Val, &val_set, &agents)?;
    let eval = evaluate_pool(&agents, &val_set, &ctx.cache, &ctx.config.pool.options())?;
    let examples = tune_examples(&params, &graphs, &val_set, &eval)?;
    let (best, grid) = tune_adaptive(&examples, &default_grid(agents.len()), ctx.config.adaptive.f1_tolerance)?;
    let full_pool = crate::adaptive::evaluate_config(&examples, &AdaptiveConfig::full_pool(agents.len()))?;
    let report = TuneReport { best, full_pool, grid };
    write_json(&ctx.layout.tuned(), &report)?;
    Ok(report)
}

/// Command-line overrides for the stopping rule.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct AdaptiveOverrides {
    pub tau_agree: Option<f64>,
    pub k_min: Option<usize>,
    pub k_max: Option<usize>,
}

/// Precedence: overrides, then `[adaptive]`, then the tuned values, then the full pool.
pub fn resolve_adaptive(ctx: &Context, overrides: AdaptiveOverrides, pool_size: usize) -> Result<AdaptiveConfig> {
    let tuned: Option<TuneReport> = if ctx.layout.tuned().exists() {
        Some(read_json(&ctx.layout.tuned(), "tune-adaptive")?)
    } else {
        None
    };
    let base = tuned.map_or(AdaptiveConfig::full_pool(pool_size), |t| t.best.config);
    let cfg = ctx.config.adaptive.resolve(base);
    let cfg = AdaptiveConfig {
        tau_agree: overrides.tau_agree.unwrap_or(cfg.tau_agree),
        k_min: overrides.k_min.unwrap_or(cfg.k_min),
        k_max: overrides.k_max.unwrap_or(cfg.k_max),
    };
    cfg.validate(pool_size)?;
    Ok(cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub gold: Vec<String>,
    #[serde(flatten)]
    pub result: AdaptiveResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferReport {
    pub split: Split,
    pub config: AdaptiveConfig,
    pub queries: usize,
    pub mean_calls: f64,
    pub backend_calls: usize,
}

/// Adaptive answer for one routed instance.
pub fn answer_one(
    params: &RouterParams,
    graph: &TypedGraph,
    instance: &QAInstance,
    agents: &BTreeMap<AgentId, &AgentSpec>,
    cache: &AnswerCache,
    retries: usize,
    config: &AdaptiveConfig,
) -> Result<(AdaptiveResult, usize)> {
    let ranked = rank_agents(&forward(params, graph)?);
    let mut fresh = 0;
    let result = adaptive_infer(&ranked, config, |a| {
        let spec = agents
            .get(a)
            .ok_or_else(|| Error::validation(format!("router ranked unknown agent {a}")))?;
        let inv = invoke(spec, instance, cache, retries)?;
        fresh += usize::from(!inv.cached);
        Ok(inv.answer)
    })?;
    Ok((result, fresh))
}

/// Adaptive inference over a split; writes one JSON line per query.
pub fn infer(ctx: &Context, split: Split, overrides: AdaptiveOverrides) -> Result<InferReport> {
    let agents = ctx.agents()?;
    let instances = ctx.load_split(split)?;
    let params = ctx.load_router()?.params;
    let graphs = ctx.load_graphs(split, &instances, &agents)?;
    let config = resolve_adaptive(ctx, overrides, agents.len())?;
    let by_id: BTreeMap<AgentId, &AgentSpec> = agents.iter().map(|a| (a.id.clone(), a)).collect();
    let retries = ctx.config.pool.retries;
    let results: Vec<(Prediction, usize)> = instances
        .par_iter()
        .zip(&graphs)
        .map(|(inst, g)| {
            let (result, fresh) = answer_one(&params, g, inst, &by_id, &ctx.cache, retries, &config)?;
            Ok((
                Prediction {
                    id: inst.id.clone(),
                    gold: inst.gold_answers.clone(),
                    result,
                },
                fresh,
            ))
        })
        .collect::<Result<_>>()?;
    let mut out = Vec::new();
    let mut calls = 0usize;
    let mut backend_calls = 0;
    for (p, fresh) in &results {
        out.extend(serde_json::to_vec(p)?);
        out.push(b'\n');
        calls += p.result.k_star + p.result.failed.len();
        backend_calls += fresh;
    }
    write_atomic(&ctx.layout.predictions(split), &out)?;
    Ok(InferReport {
        split,
        config,
        queries: results.len(),
        mean_calls: calls as f64 / results.len().max(1) as f64,
        backend_calls,
    })
}

pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>> {
    require(path, "infer")?;
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub name: String,
    /// Percentages, 0–100.
    pub f1: f64,
    pub em: f64,
    pub mean_calls: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub split: Split,
    pub queries: usize,
    pub seeds: Vec<u64>,
    pub rows: Vec<EvalRow>,
}

impl EvalSummary {
    pub fn table(&self) -> String {
        let mut out = format!(
            "{:<22} {:>8} {:>8} {:>8}\n",
            format!("{} (n={})", self.split.name(), self.queries),
            "F1",
            "EM",
            "calls"
        );
        for r in &self.rows {
            let calls = r.mean_calls.map_or("-".to_string(), |c| format!("{c:.2}"));
            out.push_str(&format!("{:<22} {:>8.2} {:>8.2} {:>8}\n", r.name, r.f1, r.em, calls));
        }
        out
    }
}

/// F1/EM (percent) of predictions against the split's gold answers.
pub fn score_predictions(predictions: &[Prediction], gold: &[QAInstance]) -> Result<(f64, f64, f64)> {
    let by_id: BTreeMap<&str, &QAInstance> = gold.iter().map(|i| (i.id.as_str(), i)).collect();
    if predictions.is_empty() {
        return Err(Error::validation("no predictions to evaluate"));
    }
    let (mut f1, mut em, mut calls) = (0.0, 0.0, 0.0);
    for p in predictions {
        let inst = by_id
            .get(p.id.as_str())
            .ok_or_else(|| Error::validation(format!("prediction for unknown instance {}", p.id)))?;
        let s = best_score(&p.result.answer, &inst.gold_answers)?;
        f1 += s.f1;
        em += f64::from(u8::from(s.em));
        calls += p.result.k_star as f64;
    }
    let n = predictions.len() as f64;
    Ok((100.0 * f1 / n, 100.0 * em / n, calls / n))
}

/// Full-pool weighted vote on a split, as (F1 %, EM %).
pub fn full_pool_vote(ctx: &Context, split: Split, agents: &[AgentSpec], params: &RouterParams) -> Result<(f64, f64)> {
    let instances = ctx.load_split(split)?;
    let graphs = ctx.load_graphs(split, &instances, agents)?;
    let eval = evaluate_pool(agents, &instances, &ctx.cache, &ctx.config.pool.options())?;
    let scores: Vec<(f64, bool)> = instances
        .par_iter()
        .zip(&graphs)
        .enumerate()
        .map(|(col, (inst, g))| {
            let dist = forward(params, g)?;
            let answer = weighted_vote(&dist.probs, &eval.answers(col))?;
            let s = best_score(&answer, &inst.gold_answers)?;
            Ok((s.f1, s.em))
        })
        .collect::<Result<_>>()?;
    let n = scores.len().max(1) as f64;
    Ok((
        100.0 * scores.iter().map(|s| s.0).sum::<f64>() / n,
        100.0 * scores.iter().filter(|s| s.1).count() as f64 / n,
    ))
}

#[derive(Debug, Clone, Default)]
pub struct EvalOptions {
    pub split: Option<Split>,
    /// Evaluate this file instead of the run's predictions.
    pub predictions: Option<PathBuf>,
    /// Also score the full-pool weighted vote.
    pub baseline: bool,
    /// Retrain and re-infer per seed, reporting the mean.
    pub seeds: Vec<u64>,
}

pub fn eval(ctx: &Context, options: &EvalOptions) -> Result<EvalSummary> {
    let split = options.split.unwrap_or(Split::Test);
    let gold = ctx.load_split(split)?;
    let mut rows = Vec::new();
    let seeds = options.seeds.clone();
    if seeds.is_empty() {
        let path = options.predictions.clone().unwrap_or_else(|| ctx.layout.predictions(split));
        let (f1, em, calls) = score_predictions(&read_predictions(&path)?, &gold)?;
        rows.push(EvalRow {
            name: "adaptive".into(),
            f1,
            em,
            mean_calls: Some(calls),
        });
        if options.baseline {
            let agents = ctx.agents()?;
            let (f1, em) = full_pool_vote(ctx, split, &agents, &ctx.load_router()?.params)?;
            rows.push(EvalRow {
                name: "full-pool vote".into(),
                f1,
                em,
                mean_calls: Some(agents.len() as f64),
            });
        }
    } else {
        let agents = ctx.agents()?;
        let overrides = AdaptiveOverrides::default();
        let shared = resolve_adaptive(ctx, overrides, agents.len())?;
        let mut per_seed = Vec::new();
        for &seed in &seeds {
            let sub = ctx.for_seed(seed);
            train(&sub)?;
            infer(
                &sub,
                split,
                AdaptiveOverrides {
                    tau_agree: Some(shared.tau_agree),
                    k_min: Some(shared.k_min),
                    k_max: Some(shared.k_max),
                },
            )?;
            let (f1, em, calls) = score_predictions(&read_predictions(&sub.layout.predictions(split))?, &gold)?;
            let base = if options.baseline {
                Some(full_pool_vote(&sub, split, &agents, &sub.load_router()?.params)?)
            } else {
                None
            };
            rows.push(EvalRow {
                name: format!("adaptive seed {seed}"),
                f1,
                em,
                mean_calls: Some(calls),
            });
            per_seed.push((f1, em, calls, base));
        }
        let n = per_seed.len() as f64;
        rows.push(EvalRow {
            name: "adaptive mean".into(),
            f1: per_seed.iter().map(|s| s.0).sum::<f64>() / n,
            em: per_seed.iter().map(|s| s.1).sum::<f64>() / n,
            mean_calls: Some(per_seed.iter().map(|s| s.2).sum::<f64>() / n),
        });
        if options.baseline {
            rows.push(EvalRow {
                name: "full-pool vote mean".into(),
                f1: per_seed.iter().filter_map(|s| s.3).map(|b| b.0).sum::<f64>() / n,
                em: per_seed.iter().filter_map(|s| s.3).map(|b| b.1).sum::<f64>() / n,
                mean_calls: Some(agents.len() as f64),
            });
        }
    }
    let summary = EvalSummary {
        split,
        queries: gold.len(),
        seeds,
        rows,
    };
    write_json(&ctx.layout.eval(split), &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub prepare: PrepareReport,
    pub scores: Vec<ScoreReport>,
    pub train: TrainReport,
    pub rounds: Vec<RoundReport>,
    pub tune: TuneOutcome,
    pub infer: InferReport,
    pub eval: EvalSummary,
}

/// Every stage in order: prepare, score, train, refine, tune, infer, eval.
pub fn run(ctx: &Context) -> Result<RunReport> {
    let prepare = prepare(ctx)?;
    let scores = score_agents(ctx)?;
    let train = train(ctx)?;
    let rounds = refine(ctx, None)?;
    let tune = tune(ctx)?.best;
    let infer = infer(ctx, Split::Test, AdaptiveOverrides::default())?;
    let eval = eval(
        ctx,
        &EvalOptions {
            baseline: true,
            ..Default::default()
        },
    )?;
    Ok(RunReport {
        prepare,
        scores,
        train,
        rounds,
        tune,
        infer,
        eval,
    })
}
