//! Agent pool: prompts, backends, answer parsing, the prompt-aware cache and
//! whole-pool evaluation.

mod cache;
mod live;
mod parse;
mod prompts;
mod synthetic;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicUsize, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use cache::{cache_key, seed_cache, AnswerCache, CacheEntry, CacheStats};
pub use live::{chat, live_reply, ChatRequest, LiveEndpoint, ENV_API_BASE, ENV_API_KEY};
pub use parse::{parse_answer, parse_answer_flagged};
pub use prompts::{
    prompt_hash, sections, shipped_prompt, system_message, user_message, PromptStore, PromptVersion,
    REWRITE_TEMPLATE, ROLES, WRAPPER,
};
pub use synthetic::SyntheticProfile;
pub(crate) use prompts::write_atomic;

use crate::agent::AgentId;
use crate::dataset::QAInstance;
use crate::error::{Error, Result};
use crate::graph::{AgentViewProvider, EntityMention};
use crate::metrics::best_score;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendSpec {
    Synthetic(SyntheticProfile),
    Live(LiveEndpoint),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentSpec {
    pub id: AgentId,
    pub prompt: PromptVersion,
    pub backend: BackendSpec,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl AgentSpec {
    pub fn with_prompt(&self, prompt: PromptVersion) -> Self {
        Self {
            prompt,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PoolOptions {
    /// Bound on concurrent backend calls.
    pub concurrency: usize,
    pub retries: usize,
    /// Largest tolerated fraction of failed cells.
    pub missing_threshold: f64,
}

impl Default for PoolOptions {
    fn default() -> Self {
        Self {
            concurrency: 8,
            retries: 3,
            missing_threshold: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Invocation {
    pub answer: String,
    pub raw: String,
    pub cached: bool,
    pub parsed: bool,
}

/// Answer `instance` with `agent`, consulting the cache first. Misses go to
/// the backend and are written back, scored against the gold answers.
pub fn invoke(agent: &AgentSpec, instance: &QAInstance, cache: &AnswerCache, retries: usize) -> Result<Invocation> {
    let key = agent.id.to_string();
    if let Some(e) = cache.lookup(&key, &instance.id, &agent.prompt.hash) {
        return Ok(Invocation {
            answer: e.answer,
            raw: e.raw,
            cached: true,
            parsed: e.parsed,
        });
    }
    let raw = match &agent.backend {
        BackendSpec::Synthetic(p) if p.outage => Err("synthetic outage".to_string()),
        BackendSpec::Synthetic(p) => Ok(p.reply(&key, instance, &agent.prompt.hash)),
        BackendSpec::Live(ep) => live_reply(agent, ep, instance, cache, retries),
    }
    .map_err(|message| Error::Backend {
        agent: key.clone(),
        instance: instance.id.clone(),
        message,
    })?;
    let (answer, parsed) = parse_answer_flagged(&raw);
    if !parsed {
        log::debug!("{key} on {}: no structured answer, using last line", instance.id);
    }
    let score = if instance.gold_answers.is_empty() {
        None
    } else {
        let s = best_score(&answer, &instance.gold_answers)?;
        Some((s.f1, s.em))
    };
    cache.put(AnswerCache::make_entry(
        &key,
        &instance.id,
        &agent.prompt.hash,
        raw.clone(),
        answer.clone(),
        parsed,
        score,
    ))?;
    Ok(Invocation {
        answer,
        raw,
        cached: false,
        parsed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub answer: String,
    pub f1: f64,
    pub em: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MissingCell {
    pub agent: AgentId,
    pub instance: String,
    pub error: String,
}

/// Agent × instance answers and scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolEvaluation {
    pub agents: Vec<AgentId>,
    pub instances: Vec<String>,
    /// `cells[agent][instance]`; `None` where the backend failed.
    pub cells: Vec<Vec<Option<Cell>>>,
    /// Backend calls made by this evaluation (cache misses).
    pub backend_calls: usize,
    pub missing: Vec<MissingCell>,
}

impl PoolEvaluation {
    pub fn agent_index(&self, agent: &AgentId) -> Option<usize> {
        self.agents.iter().position(|a| a == agent)
    }

    pub fn instance_index(&self, id: &str) -> Option<usize> {
        self.instances.iter().position(|i| i == id)
    }

    /// Per-agent F1 on one instance; missing cells count as 0.
    pub fn f1_by_agent(&self, instance: usize) -> BTreeMap<AgentId, f64> {
        self.agents
            .iter()
            .enumerate()
            .map(|(a, id)| (id.clone(), self.cells[a][instance].as_ref().map_or(0.0, |c| c.f1)))
            .collect()
    }

    /// Answers on one instance, in agent order; missing cells are empty.
    pub fn answers(&self, instance: usize) -> Vec<String> {
        (0..self.agents.len())
            .map(|a| self.cells[a][instance].as_ref().map_or_else(String::new, |c| c.answer.clone()))
            .collect()
    }

    pub fn agent_f1s(&self, agent: usize) -> Vec<f64> {
        self.cells[agent].iter().map(|c| c.as_ref().map_or(0.0, |c| c.f1)).collect()
    }

    pub fn mean_f1(&self, agent: usize) -> f64 {
        let f = self.agent_f1s(agent);
        if f.is_empty() {
            0.0
        } else {
            f.iter().sum::<f64>() / f.len() as f64
        }
    }

    /// Mean F1 over all agents and instances.
    pub fn pool_mean_f1(&self) -> f64 {
        let n = self.agents.len();
        if n == 0 {
            return 0.0;
        }
        (0..n).map(|a| self.mean_f1(a)).sum::<f64>() / n as f64
    }
}

/// Scores every (agent, instance) pair, fanning out up to
/// `options.concurrency` calls at once. Results do not depend on scheduling.
pub fn evaluate_pool(
    pool: &[AgentSpec],
    instances: &[QAInstance],
    cache: &AnswerCache,
    options: &PoolOptions,
) -> Result<PoolEvaluation> {
    if pool.is_empty() {
        return Err(Error::validation("agent pool is empty"));
    }
    let mut order: Vec<&AgentSpec> = pool.iter().collect();
    order.sort_by(|a, b| a.id.cmp(&b.id));
    let calls = AtomicUsize::new(0);
    let jobs: Vec<(usize, usize)> = (0..order.len())
        .flat_map(|a| (0..instances.len()).map(move |i| (a, i)))
        .collect();
    let threads = rayon::ThreadPoolBuilder::new()
        .num_threads(options.concurrency.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let results: Vec<std::result::Result<Cell, String>> = threads.install(|| {
        jobs.par_iter()
            .map(|&(a, i)| {
                let inst = &instances[i];
                let inv = invoke(order[a], inst, cache, options.retries).map_err(|e| e.to_string())?;
                if !inv.cached {
                    calls.fetch_add(1, Ordering::Relaxed);
                }
                let s = best_score(&inv.answer, &inst.gold_answers).map_err(|e| e.to_string())?;
                Ok(Cell {
                    answer: inv.answer,
                    f1: s.f1,
                    em: s.em,
                })
            })
            .collect()
    });

    let mut cells = vec![Vec::with_capacity(instances.len()); order.len()];
    let mut missing = Vec::new();
    for (&(a, i), r) in jobs.iter().zip(results) {
        match r {
            Ok(c) => cells[a].push(Some(c)),
            Err(error) => {
                missing.push(MissingCell {
                    agent: order[a].id.clone(),
                    instance: instances[i].id.clone(),
                    error,
                });
                cells[a].push(None);
            }
        }
    }
    let total = jobs.len().max(1);
    if missing.len() as f64 / total as f64 > options.missing_threshold {
        let mut per_agent: BTreeMap<&AgentId, usize> = BTreeMap::new();
        for m in &missing {
            *per_agent.entry(&m.agent).or_default() += 1;
        }
        let breakdown: Vec<String> = per_agent.iter().map(|(a, n)| format!("{a}: {n}")).collect();
        return Err(Error::Backend {
            agent: "pool".into(),
            instance: format!("{} of {} cells", missing.len(), jobs.len()),
            message: format!(
                "missing fraction above {}; per agent: {}; first error: {}",
                options.missing_threshold,
                breakdown.join(", "),
                missing[0].error
            ),
        });
    }
    Ok(PoolEvaluation {
        agents: order.iter().map(|a| a.id.clone()).collect(),
        instances: instances.iter().map(|i| i.id.clone()).collect(),
        cells,
        backend_calls: calls.into_inner(),
        missing,
    })
}

/// Agent views from one extra "which entities do you attend to" call per
/// live agent, cached under `agent#views`. Synthetic agents defer to
/// `fallback`.
pub struct LiveViews<'a, F: AgentViewProvider> {
    pub agents: &'a [AgentSpec],
    pub cache: &'a AnswerCache,
    pub retries: usize,
    pub fallback: F,
}

fn parse_view(raw: &str, n: usize) -> BTreeSet<usize> {
    for (i, _) in raw.match_indices('{').collect::<Vec<_>>().into_iter().rev() {
        let mut stream = serde_json::Deserializer::from_str(&raw[i..]).into_iter::<serde_json::Value>();
        if let Some(Ok(v)) = stream.next() {
            if let Some(list) = v.get("entities").and_then(|e| e.as_array()) {
                return list
                    .iter()
                    .filter_map(serde_json::Value::as_u64)
                    .map(|x| x as usize)
                    .filter(|&x| x < n)
                    .collect();
            }
        }
    }
    BTreeSet::new()
}

impl<F: AgentViewProvider> AgentViewProvider for LiveViews<'_, F> {
    fn views(
        &self,
        instance: &QAInstance,
        entities: &[EntityMention],
        agents: &[AgentId],
    ) -> Result<BTreeMap<AgentId, BTreeSet<usize>>> {
        let mut out = self.fallback.views(instance, entities, agents)?;
        if entities.is_empty() {
            return Ok(out);
        }
        let listing: Vec<String> = entities.iter().enumerate().map(|(i, e)| format!("{i}: {}", e.surface)).collect();
        for spec in self.agents.iter().filter(|s| agents.contains(&s.id)) {
            let BackendSpec::Live(ep) = &spec.backend else { continue };
            let key = format!("{}#views", spec.id);
            let raw = match self.cache.get(&key, &instance.id, &spec.prompt.hash) {
                Some(e) => e.raw,
                None => {
                    let req = ChatRequest {
                        system: format!(
                            "{}\n\nBefore answering, list the entities you would attend to. Reply ONLY with JSON {{\"entities\": [indices]}}.",
                            spec.prompt.text
                        ),
                        user: format!(
                            "{}\n\nEntities:\n{}",
                            user_message(&instance.question, &instance.context),
                            listing.join("\n")
                        ),
                        temperature: spec.temperature,
                        max_tokens: 256,
                    };
                    let raw = chat(ep, &req, self.retries).map_err(|message| Error::Backend {
                        agent: key.clone(),
                        instance: instance.id.clone(),
                        message,
                    })?;
                    self.cache.put(AnswerCache::make_entry(
                        &key,
                        &instance.id,
                        &spec.prompt.hash,
                        raw.clone(),
                        String::new(),
                        true,
                        None,
                    ))?;
                    raw
                }
            };
            out.insert(spec.id.clone(), parse_view(&raw, entities.len()));
        }
        Ok(out)
    }
}
