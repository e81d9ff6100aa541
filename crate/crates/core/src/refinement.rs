//! Closed-loop prompt refinement: target selection, candidate rewrites,
//! the validation gate, and the router update with regression revert.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::OpenOptions;
use std::io::Write;
use std::path::PathBuf;
use std::sync::Arc;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::agent::AgentId;
use crate::dataset::QAInstance;
use crate::diagnostics::{collect, DiagnosticsBundle, DiagnosticsConfig, FailureRecord};
use crate::error::{Error, Result};
use crate::pool::{
    chat, evaluate_pool, AgentSpec, AnswerCache, ChatRequest, LiveEndpoint, PoolOptions, PromptVersion,
    REWRITE_TEMPLATE,
};
use crate::router::RouterParams;
use crate::workspace::{route_all, RouterWorkspace};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefinementConfig {
    pub rounds: usize,
    /// Targets per round.
    pub max_targets: usize,
    /// One candidate per temperature.
    pub temperatures: Vec<f64>,
    pub alpha: f64,
    pub delta: f64,
    pub k_freeze: usize,
    pub finetune_epochs: usize,
    pub finetune_patience: usize,
    /// Replaces the training learning rate during fine-tuning.
    pub finetune_lr: Option<f64>,
    pub validation_sample: usize,
    pub regression_threshold: f64,
    pub max_words: usize,
    /// Stop the loop after a round in which no candidate passed.
    pub stop_when_no_acceptance: bool,
    pub seed: u64,
}

impl Default for RefinementConfig {
    fn default() -> Self {
        Self {
            rounds: 3,
            max_targets: 3,
            temperatures: vec![0.30, 0.45, 0.60],
            alpha: 0.3,
            delta: 0.02,
            k_freeze: 3,
            finetune_epochs: 15,
            finetune_patience: 5,
            finetune_lr: None,
            validation_sample: 30,
            regression_threshold: 0.03,
            max_words: 500,
            stop_when_no_acceptance: true,
            seed: 0,
        }
    }
}

/// `(1 − mean_f1) · (alpha + mean_weight)`.
pub fn priority(mean_f1: f64, mean_weight: f64, alpha: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&mean_f1) || !(0.0..=1.0).contains(&mean_weight) {
        return Err(Error::validation(format!(
            "priority inputs must lie in [0,1]: mean_f1={mean_f1}, mean_weight={mean_weight}"
        )));
    }
    if !(alpha > 0.0) {
        return Err(Error::validation(format!("alpha must be positive, got {alpha}")));
    }
    Ok((1.0 - mean_f1) * (alpha + mean_weight))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GateReason {
    WithinToleranceAccept,
    RegressionBeyondDelta,
    NoSampleChanged,
    NetDegradation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateVerdict {
    pub accepted: bool,
    pub old_mean: f64,
    pub new_mean: f64,
    pub n_up: usize,
    pub n_down: usize,
    pub reason: GateReason,
}

const MEAN_TOL: f64 = 1e-12;

/// Accept iff the mean does not drop by more than `delta`, at least one
/// sample improved, and a lower mean is not carried by more losers than winners.
pub fn gate(old_scores: &[f64], new_scores: &[f64], delta: f64) -> Result<GateVerdict> {
    if old_scores.len() != new_scores.len() {
        return Err(Error::validation(format!(
            "gate needs aligned scores, got {} and {}",
            old_scores.len(),
            new_scores.len()
        )));
    }
    if !(delta >= 0.0) {
        return Err(Error::validation(format!("delta must be non-negative, got {delta}")));
    }
    let mean = |s: &[f64]| if s.is_empty() { 0.0 } else { s.iter().sum::<f64>() / s.len() as f64 };
    let (old_mean, new_mean) = (mean(old_scores), mean(new_scores));
    let n_up = old_scores.iter().zip(new_scores).filter(|(o, n)| n > o).count();
    let n_down = old_scores.iter().zip(new_scores).filter(|(o, n)| n < o).count();
    let reason = if new_mean + MEAN_TOL < old_mean - delta {
        GateReason::RegressionBeyondDelta
    } else if n_up == 0 {
        GateReason::NoSampleChanged
    } else if new_mean + MEAN_TOL < old_mean && n_down > n_up {
        GateReason::NetDegradation
    } else {
        GateReason::WithinToleranceAccept
    };
    Ok(GateVerdict {
        accepted: reason == GateReason::WithinToleranceAccept,
        old_mean,
        new_mean,
        n_up,
        n_down,
        reason,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RefinementState {
    pub round: usize,
    pub frozen: BTreeSet<AgentId>,
    /// Consecutive rejected rounds per agent.
    pub failures: BTreeMap<AgentId, usize>,
    pub prompt_versions: BTreeMap<AgentId, u32>,
    pub checkpoint: Option<PathBuf>,
    /// Validation F1 of the current router.
    pub val_f1: f64,
    pub bundle: Option<DiagnosticsBundle>,
    pub seed: u64,
    /// Set when a round ended without any accepted candidate.
    pub terminable: bool,
}

/// Targets for this round: roles underperforming on at least `t` backbones
/// (t = 3, 2, 1), expanded to their non-frozen agents, ranked by priority.
pub fn select_targets(bundle: &DiagnosticsBundle, state: &RefinementState, config: &RefinementConfig) -> Result<Vec<AgentId>> {
    let mut by_backbone: BTreeMap<&str, Vec<(&AgentId, f64)>> = BTreeMap::new();
    for (agent, s) in &bundle.agent_summaries {
        by_backbone.entry(agent.backbone.as_str()).or_default().push((agent, s.mean_f1));
    }
    let mut below: BTreeMap<&str, usize> = BTreeMap::new();
    for members in by_backbone.values() {
        let mut f: Vec<f64> = members.iter().map(|m| m.1).collect();
        f.sort_by(f64::total_cmp);
        let median = if f.len() % 2 == 1 {
            f[f.len() / 2]
        } else {
            (f[f.len() / 2 - 1] + f[f.len() / 2]) / 2.0
        };
        for (agent, f1) in members {
            if *f1 < median && !state.frozen.contains(*agent) {
                *below.entry(agent.role.as_str()).or_default() += 1;
            }
        }
    }
    let all_roles: BTreeSet<&str> = bundle.agent_summaries.keys().map(|a| a.role.as_str()).collect();
    let mut eligible: BTreeSet<&str> = BTreeSet::new();
    for t in [3, 2, 1] {
        eligible = below.iter().filter(|(_, &n)| n >= t).map(|(r, _)| *r).collect();
        if !eligible.is_empty() {
            log::info!("role eligibility at threshold {t}: {eligible:?}");
            break;
        }
    }
    if eligible.is_empty() {
        eligible = all_roles;
    }
    let mut ranked = Vec::new();
    for agent in bundle.agent_summaries.keys() {
        if eligible.contains(agent.role.as_str()) && !state.frozen.contains(agent) {
            let p = priority(
                bundle.mean_f1(agent).clamp(0.0, 1.0),
                bundle.mean_weight(agent).clamp(0.0, 1.0),
                config.alpha,
            )?;
            ranked.push((agent.clone(), p));
        }
    }
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Ok(ranked.into_iter().take(config.max_targets).map(|(a, _)| a).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct RewriteRequest {
    pub agent: AgentId,
    pub current: String,
    pub failures: Vec<FailureRecord>,
    pub category_f1: BTreeMap<String, f64>,
    pub temperature: f64,
    /// Position of this candidate in the temperature schedule.
    pub index: usize,
    pub round: usize,
}

impl RewriteRequest {
    /// Rewriter user message: current prompt, per-category F1 and failures.
    pub fn render(&self) -> String {
        let mut out = format!("Role: {}\n\nCurrent prompt:\n{}\n\nError patterns (mean F1 by question category):\n", self.agent.role, self.current);
        for (c, f) in &self.category_f1 {
            out.push_str(&format!("- {c}: {f:.3}\n"));
        }
        out.push_str("\nFailure examples:\n");
        if self.failures.is_empty() {
            out.push_str("(none archived)\n");
        }
        for f in &self.failures {
            out.push_str(&format!(
                "- Question: {} | Gold: {} | Predicted: {} | F1: {:.2}\n",
                f.question,
                f.gold.join(" / "),
                f.predicted,
                f.f1
            ));
        }
        out
    }
}

pub trait Rewriter: Send + Sync {
    fn rewrite(&self, request: &RewriteRequest) -> Result<String>;
}

/// Deterministic rewriter for tests: candidate `i` for an agent is
/// `script[agent][i]` if scripted, else `default[i]`, else the current prompt.
#[derive(Debug, Clone, Default)]
pub struct ScriptedRewriter {
    pub script: BTreeMap<AgentId, Vec<String>>,
    pub default: Vec<String>,
}

impl Rewriter for ScriptedRewriter {
    fn rewrite(&self, request: &RewriteRequest) -> Result<String> {
        let list = self.script.get(&request.agent).unwrap_or(&self.default);
        Ok(list.get(request.index).cloned().unwrap_or_else(|| request.current.clone()))
    }
}

/// Offline rewriter: appends guidance aimed at the agent's weakest
/// category and its most recent failures. Deterministic in the request.
#[derive(Debug, Clone, Copy, Default)]
pub struct OfflineRewriter;

const OFFLINE_STYLES: [&str; 3] = [
    "Answer with the shortest exact span from the context.",
    "Check the entity named in the question against the context before answering, then give only the answer span.",
    "Quote the answer exactly as written in the context; never paraphrase names, dates or places.",
];

impl Rewriter for OfflineRewriter {
    fn rewrite(&self, request: &RewriteRequest) -> Result<String> {
        let weakest = request
            .category_f1
            .iter()
            .min_by(|a, b| a.1.total_cmp(b.1).then_with(|| a.0.cmp(b.0)))
            .map(|(c, _)| c.as_str())
            .unwrap_or("all");
        let mut out = format!(
            "{}\n\nRevision {}: {} Take extra care with \"{weakest}\" questions.",
            request.current.trim_end(),
            request.round,
            OFFLINE_STYLES[request.index % OFFLINE_STYLES.len()],
        );
        if let Some(f) = request.failures.first() {
            out.push_str(&format!(
                " A past mistake: answering \"{}\" where \"{}\" was expected.",
                f.predicted,
                f.gold.first().map(String::as_str).unwrap_or("")
            ));
        }
        Ok(out)
    }
}

/// Rewrites through a chat-completion endpoint; outputs are cached so a
/// resumed round makes no repeat calls.
pub struct LlmRewriter {
    pub endpoint: LiveEndpoint,
    pub retries: usize,
    pub max_tokens: u32,
    pub cache: Arc<AnswerCache>,
}

impl Rewriter for LlmRewriter {
    fn rewrite(&self, request: &RewriteRequest) -> Result<String> {
        let user = request.render();
        let key = format!("{}#rewrite{}", request.agent, request.index);
        let digest = hex::encode(Sha256::digest(format!("{}\0{}", request.temperature, user).as_bytes()));
        if let Some(e) = self.cache.get(&key, &format!("round{}", request.round), &digest) {
            return Ok(e.raw);
        }
        let req = ChatRequest {
            system: REWRITE_TEMPLATE.to_string(),
            user,
            temperature: request.temperature,
            max_tokens: self.max_tokens,
        };
        let raw = chat(&self.endpoint, &req, self.retries).map_err(|message| Error::Backend {
            agent: key.clone(),
            instance: format!("round{}", request.round),
            message,
        })?;
        self.cache.put(AnswerCache::make_entry(
            &key,
            &format!("round{}", request.round),
            &digest,
            raw.clone(),
            String::new(),
            true,
            None,
        ))?;
        Ok(raw)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectedCandidate {
    pub index: usize,
    pub reason: String,
}

/// Valid, distinct rewrites of `agent`'s prompt, one request per temperature.
pub fn generate_candidates(
    rewriter: &dyn Rewriter,
    agent: &AgentSpec,
    bundle: &DiagnosticsBundle,
    config: &RefinementConfig,
    round: usize,
) -> Result<(Vec<PromptVersion>, Vec<RejectedCandidate>)> {
    let failures: Vec<FailureRecord> = bundle.failures_of(&agent.id).cloned().collect();
    let category_f1 = bundle
        .agent_summaries
        .get(&agent.id)
        .map(|s| s.per_category.clone())
        .unwrap_or_default();
    let mut seen: BTreeSet<String> =
        BTreeSet::from([agent.prompt.hash.clone(), crate::pool::prompt_hash(agent.prompt.text.trim())]);
    let mut out = Vec::new();
    let mut rejected = Vec::new();
    for (index, &temperature) in config.temperatures.iter().enumerate() {
        let text = rewriter.rewrite(&RewriteRequest {
            agent: agent.id.clone(),
            current: agent.prompt.text.clone(),
            failures: failures.clone(),
            category_f1: category_f1.clone(),
            temperature,
            index,
            round,
        })?;
        let text = text.trim().to_string();
        let words = text.split_whitespace().count();
        let reason = if text.is_empty() {
            Some("empty".to_string())
        } else if words > config.max_words {
            Some(format!("{words} words exceeds {}", config.max_words))
        } else {
            None
        };
        if let Some(reason) = reason {
            rejected.push(RejectedCandidate { index, reason });
            continue;
        }
        let candidate = agent.prompt.next(text);
        if !seen.insert(candidate.hash.clone()) {
            rejected.push(RejectedCandidate {
                index,
                reason: "duplicate".into(),
            });
            continue;
        }
        out.push(candidate);
    }
    Ok((out, rejected))
}

/// The agent's archived failures (resolved through `lookup`) followed by a
/// seeded sample of `sample` validation instances, deduplicated by id.
pub fn build_validation_subset(
    bundle: &DiagnosticsBundle,
    agent: &AgentId,
    val: &[QAInstance],
    lookup: &dyn Fn(&str) -> Option<QAInstance>,
    sample: usize,
    seed: u64,
) -> Vec<QAInstance> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for f in bundle.failures_of(agent) {
        if let Some(inst) = lookup(&f.instance_id) {
            if seen.insert(inst.id.clone()) {
                out.push(inst);
            }
        }
    }
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(agent.to_string().as_bytes());
    let digest = h.finalize();
    let mut word = [0u8; 8];
    word.copy_from_slice(&digest[..8]);
    let mut rng = ChaCha8Rng::seed_from_u64(u64::from_le_bytes(word));
    for inst in val.choose_multiple(&mut rng, sample.min(val.len())) {
        if seen.insert(inst.id.clone()) {
            out.push(inst.clone());
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JournalEntry {
    pub round: usize,
    pub agent: AgentId,
    pub candidate_hash: Option<String>,
    pub verdict: String,
    pub old_mean: f64,
    pub new_mean: f64,
    pub n_up: usize,
    pub n_down: usize,
}

/// Append-only JSON-lines record of every gate decision.
#[derive(Debug, Default)]
pub struct Journal {
    path: Option<PathBuf>,
    pub entries: Vec<JournalEntry>,
}

impl Journal {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn open(path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        let mut entries = Vec::new();
        if path.exists() {
            let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            for line in text.lines().filter(|l| !l.trim().is_empty()) {
                match serde_json::from_str(line) {
                    Ok(e) => entries.push(e),
                    Err(err) => log::warn!("{}: skipping unreadable journal line: {err}", path.display()),
                }
            }
        }
        Ok(Self {
            path: Some(path),
            entries,
        })
    }

    pub fn append(&mut self, entry: JournalEntry) -> Result<()> {
        if let Some(path) = &self.path {
            if let Some(dir) = path.parent() {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            let mut f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(|e| Error::io(path, e))?;
            let mut line = serde_json::to_vec(&entry)?;
            line.push(b'\n');
            f.write_all(&line).map_err(|e| Error::io(path, e))?;
        }
        self.entries.push(entry);
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub targets: Vec<AgentId>,
    pub accepted: Vec<AgentId>,
    pub newly_frozen: Vec<AgentId>,
    /// Backend calls spent re-scoring the training set after acceptances.
    pub requery_calls: usize,
    pub val_before: Option<f64>,
    pub val_after: Option<f64>,
    pub reverted: bool,
    pub terminable: bool,
}

/// Everything a round reads or mutates besides the state itself.
pub struct RoundInputs<'a> {
    pub pool: &'a mut [AgentSpec],
    pub train: &'a [QAInstance],
    pub val: &'a [QAInstance],
    pub cache: &'a AnswerCache,
    pub pool_options: &'a PoolOptions,
    pub rewriter: &'a dyn Rewriter,
    pub workspace: &'a mut RouterWorkspace,
    pub router: &'a mut RouterParams,
    pub config: &'a RefinementConfig,
    pub diagnostics: &'a DiagnosticsConfig,
    pub journal: &'a mut Journal,
}

fn prompt_texts(pool: &[AgentSpec]) -> BTreeMap<AgentId, String> {
    pool.iter().map(|a| (a.id.clone(), a.prompt.text.clone())).collect()
}

fn prompt_hashes(pool: &[AgentSpec]) -> BTreeMap<AgentId, String> {
    pool.iter().map(|a| (a.id.clone(), a.prompt.hash.clone())).collect()
}

/// Diagnostics of `router` on the training set under the pool's current prompts.
pub fn diagnose(
    pool: &[AgentSpec],
    train: &[QAInstance],
    cache: &AnswerCache,
    options: &PoolOptions,
    workspace: &RouterWorkspace,
    router: &RouterParams,
    config: &DiagnosticsConfig,
) -> Result<DiagnosticsBundle> {
    let eval = evaluate_pool(pool, train, cache, options)?;
    let routing = route_all(router, &workspace.train_graphs)?;
    collect(&eval, &routing, train, &prompt_hashes(pool), config)
}

fn subset_scores(agent: &AgentSpec, subset: &[QAInstance], inputs: &RoundInputs<'_>) -> Result<Vec<f64>> {
    let eval = evaluate_pool(std::slice::from_ref(agent), subset, inputs.cache, inputs.pool_options)?;
    Ok(eval.agent_f1s(0))
}

/// One refinement round. Mutates prompts, counters, the router and the
/// state's diagnostics; every gate decision is journaled.
pub fn run_round(state: &mut RefinementState, inputs: &mut RoundInputs<'_>) -> Result<RoundReport> {
    let config = inputs.config;
    let round = state.round + 1;
    let bundle = match &state.bundle {
        Some(b) => b.clone(),
        None => return Err(Error::validation("refinement needs diagnostics from a trained router")),
    };
    let targets = select_targets(&bundle, state, config)?;
    log::info!("round {round}: targets {targets:?}");

    let mut lookup: BTreeMap<String, QAInstance> = BTreeMap::new();
    for inst in inputs.train.iter().chain(inputs.val) {
        lookup.insert(inst.id.clone(), inst.clone());
    }
    let lookup_fn = |id: &str| lookup.get(id).cloned();

    let mut accepted = Vec::new();
    let mut newly_frozen = Vec::new();
    for target in &targets {
        let pos = inputs
            .pool
            .iter()
            .position(|a| &a.id == target)
            .ok_or_else(|| Error::validation(format!("target {target} is not in the pool")))?;
        let current = inputs.pool[pos].clone();
        let (candidates, rejected) = generate_candidates(inputs.rewriter, &current, &bundle, config, round)?;
        for r in &rejected {
            log::info!("{target}: candidate {} rejected at generation ({})", r.index, r.reason);
        }
        let mut verdict_ok = None;
        if candidates.is_empty() {
            inputs.journal.append(JournalEntry {
                round,
                agent: target.clone(),
                candidate_hash: None,
                verdict: "no-valid-candidate".into(),
                old_mean: 0.0,
                new_mean: 0.0,
                n_up: 0,
                n_down: 0,
            })?;
        } else {
            let subset = build_validation_subset(
                &bundle,
                target,
                inputs.val,
                &lookup_fn,
                config.validation_sample,
                state.seed ^ round as u64,
            );
            let old = subset_scores(&current, &subset, inputs)?;
            let mut best: Option<(PromptVersion, Vec<f64>, f64)> = None;
            for cand in candidates {
                let scores = subset_scores(&current.with_prompt(cand.clone()), &subset, inputs)?;
                let mean = scores.iter().sum::<f64>() / scores.len().max(1) as f64;
                if best.as_ref().is_none_or(|b| mean > b.2) {
                    best = Some((cand, scores, mean));
                }
            }
            let (cand, scores, _) = best.expect("at least one candidate");
            let verdict = gate(&old, &scores, config.delta)?;
            inputs.journal.append(JournalEntry {
                round,
                agent: target.clone(),
                candidate_hash: Some(cand.hash.clone()),
                verdict: serde_json::to_value(verdict.reason)?
                    .as_str()
                    .unwrap_or_default()
                    .to_string(),
                old_mean: verdict.old_mean,
                new_mean: verdict.new_mean,
                n_up: verdict.n_up,
                n_down: verdict.n_down,
            })?;
            if verdict.accepted {
                verdict_ok = Some(cand);
            }
        }
        match verdict_ok {
            Some(cand) => {
                log::info!("{target}: accepted prompt v{}", cand.version);
                state.prompt_versions.insert(target.clone(), cand.version);
                inputs.pool[pos].prompt = cand;
                state.failures.insert(target.clone(), 0);
                accepted.push(target.clone());
            }
            None => {
                let n = state.failures.entry(target.clone()).or_default();
                *n += 1;
                if *n >= config.k_freeze && state.frozen.insert(target.clone()) {
                    log::info!("{target}: frozen after {n} rejected rounds");
                    newly_frozen.push(target.clone());
                }
            }
        }
    }

    let mut report = RoundReport {
        round,
        targets: targets.clone(),
        accepted: accepted.clone(),
        newly_frozen,
        requery_calls: 0,
        val_before: None,
        val_after: None,
        reverted: false,
        terminable: accepted.is_empty(),
    };
    if !accepted.is_empty() {
        let train_eval = evaluate_pool(inputs.pool, inputs.train, inputs.cache, inputs.pool_options)?;
        report.requery_calls = train_eval.backend_calls;
        let val_eval = evaluate_pool(inputs.pool, inputs.val, inputs.cache, inputs.pool_options)?;
        inputs.workspace.refresh_prompts(&prompt_texts(inputs.pool))?;
        let before = inputs.workspace.validation_f1(inputs.router, inputs.val, &val_eval)?;
        let mut ft = inputs.workspace.config.clone();
        ft.epochs = config.finetune_epochs;
        ft.patience = config.finetune_patience;
        if let Some(lr) = config.finetune_lr {
            ft.learning_rate = lr;
        }
        ft.seed = inputs.workspace.config.seed.wrapping_add(round as u64);
        let tuned = inputs.workspace.train(
            Some(inputs.router.clone()),
            &ft,
            (inputs.train, &train_eval),
            (inputs.val, &val_eval),
        );
        let (after, params) = match tuned {
            Ok(t) => (Some(t.val_f1), Some(t.params)),
            Err(Error::Numerical(msg)) => {
                log::warn!("fine-tune diverged ({msg}); keeping the previous router");
                (None, None)
            }
            Err(e) => return Err(e),
        };
        report.val_before = Some(before);
        report.val_after = after;
        match (after, params) {
            (Some(after), Some(p)) if after >= before - config.regression_threshold => {
                *inputs.router = p;
                state.val_f1 = after;
            }
            _ => {
                log::warn!("router regressed ({after:?} vs {before:.4}); reverting to the previous checkpoint");
                report.reverted = true;
                state.val_f1 = before;
            }
        }
        let routing = route_all(inputs.router, &inputs.workspace.train_graphs)?;
        state.bundle = Some(collect(
            &train_eval,
            &routing,
            inputs.train,
            &prompt_hashes(inputs.pool),
            inputs.diagnostics,
        )?);
    }
    state.terminable = report.terminable;
    state.round = round;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diagnostics::AgentSummary;
    use proptest::prelude::*;

    #[test]
    fn priority_examples() {
        assert!((priority(0.6, 0.1, 0.3).unwrap() - 0.16).abs() < 1e-12);
        assert_eq!(priority(1.0, 0.9, 0.3).unwrap(), 0.0);
        assert!((priority(0.0, 0.0, 0.3).unwrap() - 0.3).abs() < 1e-12);
        assert!(priority(1.2, 0.0, 0.3).is_err());
        assert!(priority(0.5, 0.0, 0.0).is_err());
    }

    #[test]
    fn gate_examples() {
        let v = gate(&[0.5, 0.5, 0.5, 0.5, 0.5], &[0.6, 0.6, 0.6, 0.45, 0.2], 0.03).unwrap();
        assert!((v.old_mean - 0.5).abs() < 1e-12 && (v.new_mean - 0.49).abs() < 1e-12);
        assert_eq!((v.n_up, v.n_down), (3, 2));
        assert!(v.accepted);
        assert_eq!(v.reason, GateReason::WithinToleranceAccept);
        let v = gate(&[0.5, 0.5], &[0.4, 0.5], 0.03).unwrap();
        assert_eq!(v.reason, GateReason::RegressionBeyondDelta);
        let v = gate(&[0.3, 0.7], &[0.3, 0.7], 0.03).unwrap();
        assert_eq!(v.reason, GateReason::NoSampleChanged);
        assert!(gate(&[0.1], &[], 0.0).is_err());
    }

    fn bundle(rows: &[(&str, &str, f64, f64)]) -> DiagnosticsBundle {
        let mut b = DiagnosticsBundle {
            agent_summaries: BTreeMap::new(),
            failure_archive: vec![],
            weight_stats: BTreeMap::new(),
            cache_manifest: BTreeMap::new(),
            config: DiagnosticsConfig::default(),
        };
        for &(bb, role, f1, w) in rows {
            let id = AgentId::new(bb, role);
            b.agent_summaries.insert(
                id.clone(),
                AgentSummary {
                    mean_f1: f1,
                    per_category: BTreeMap::new(),
                    samples: 10,
                },
            );
            b.weight_stats.insert(
                id,
                crate::diagnostics::WeightStats {
                    mean: w,
                    per_category: BTreeMap::new(),
                },
            );
        }
        b
    }

    #[test]
    fn identical_pool_falls_through_with_tie_break() {
        let mut rows = Vec::new();
        for bb in ["b1", "b2", "b3", "b4"] {
            for r in ["raw", "cot", "sc"] {
                rows.push((bb, r, 0.5, 1.0 / 12.0));
            }
        }
        let b = bundle(&rows);
        let t = select_targets(&b, &RefinementState::default(), &RefinementConfig::default()).unwrap();
        assert_eq!(t, vec![AgentId::new("b1", "cot"), AgentId::new("b1", "raw"), AgentId::new("b1", "sc")]);
    }

    #[test]
    fn role_weak_everywhere_dominates() {
        let mut rows = Vec::new();
        for bb in ["b1", "b2", "b3", "b4"] {
            for (r, f1) in [("raw", 0.8), ("cot", 0.8), ("sc", 0.8), ("mad", 0.2), ("react_reflect", 0.8), ("summary", 0.8)] {
                rows.push((bb, r, f1, 1.0 / 24.0));
            }
        }
        // one other role below median on a single backbone
        rows[0].2 = 0.1;
        let b = bundle(&rows);
        let t = select_targets(&b, &RefinementState::default(), &RefinementConfig::default()).unwrap();
        assert_eq!(t.len(), 3);
        assert!(t.iter().all(|a| a.role == "mad"), "{t:?}");
    }

    #[test]
    fn all_frozen_gives_nothing() {
        let rows = [("b1", "raw", 0.2, 0.5), ("b1", "cot", 0.9, 0.5)];
        let b = bundle(&rows);
        let state = RefinementState {
            frozen: b.agent_summaries.keys().cloned().collect(),
            ..Default::default()
        };
        assert!(select_targets(&b, &state, &RefinementConfig::default()).unwrap().is_empty());
    }

    fn spec() -> AgentSpec {
        AgentSpec {
            id: AgentId::new("m", "cot"),
            prompt: PromptVersion::shipped("cot").unwrap(),
            backend: crate::pool::BackendSpec::Synthetic(Default::default()),
            temperature: 0.2,
            max_tokens: 100,
        }
    }

    #[test]
    fn candidates_validated_and_deduplicated() {
        let b = bundle(&[("m", "cot", 0.5, 0.5)]);
        let cfg = RefinementConfig::default();
        let fixed = ScriptedRewriter {
            default: vec!["one".into(), "two".into(), "three".into()],
            ..Default::default()
        };
        let (c, _) = generate_candidates(&fixed, &spec(), &b, &cfg, 1).unwrap();
        let hashes: BTreeSet<_> = c.iter().map(|p| p.hash.clone()).collect();
        assert_eq!(hashes.len(), 3);
        assert!(c.iter().all(|p| p.version == 1));

        let echo = ScriptedRewriter::default();
        let (c, rej) = generate_candidates(&echo, &spec(), &b, &cfg, 1).unwrap();
        assert!(c.is_empty());
        assert!(rej.iter().all(|r| r.reason == "duplicate"));

        let long = vec!["word"; 900].join(" ");
        let verbose = ScriptedRewriter {
            default: vec![long, "".into(), "fine".into()],
            ..Default::default()
        };
        let (c, rej) = generate_candidates(&verbose, &spec(), &b, &cfg, 1).unwrap();
        assert_eq!(c.len(), 1);
        assert!(rej[0].reason.contains("900 words"));
        assert_eq!(rej[1].reason, "empty");
    }

    fn instances(prefix: &str, n: usize) -> Vec<QAInstance> {
        (0..n)
            .map(|i| QAInstance {
                id: format!("{prefix}{i}"),
                question: "q?".into(),
                context: String::new(),
                gold_answers: vec!["g".into()],
                category: None,
            })
            .collect()
    }

    #[test]
    fn validation_subset_union() {
        let agent = AgentId::new("m", "cot");
        let val = instances("v", 60);
        let mut b = bundle(&[("m", "cot", 0.5, 0.5)]);
        let empty = build_validation_subset(&b, &agent, &val, &|_| None, 30, 4);
        assert_eq!(empty.len(), 30);
        assert_eq!(empty, build_validation_subset(&b, &agent, &val, &|_| None, 30, 4));

        // 20 archived: 15 training ids plus 5 validation ids drawn into the sample
        let sampled: Vec<String> = empty.iter().map(|i| i.id.clone()).collect();
        let mut archived: Vec<String> = (0..15).map(|i| format!("t{i}")).collect();
        archived.extend(sampled[..5].iter().cloned());
        for id in &archived {
            b.failure_archive.push(FailureRecord {
                instance_id: id.clone(),
                agent: agent.clone(),
                question: "q?".into(),
                predicted: "x".into(),
                gold: vec!["g".into()],
                f1: 0.0,
                router_weight: 0.1,
            });
        }
        let all: BTreeMap<String, QAInstance> = instances("t", 15)
            .into_iter()
            .chain(val.iter().cloned())
            .map(|i| (i.id.clone(), i))
            .collect();
        let subset = build_validation_subset(&b, &agent, &val, &|id| all.get(id).cloned(), 30, 4);
        assert_eq!(subset.len(), 45);
    }

    proptest! {
        #[test]
        fn gate_monotone(old in prop::collection::vec(0.0f64..1.0, 1..20), bumps in prop::collection::vec(0.0f64..0.5, 20), deltas in prop::collection::vec(-0.3f64..0.3, 20), strict in 0usize..20, delta in 0.0f64..0.1) {
            let n = old.len();
            let s: Vec<f64> = (0..n).map(|i| (old[i] + deltas[i]).clamp(0.0, 1.0)).collect();
            let base = gate(&old, &s, delta).unwrap();
            prop_assume!(base.accepted);
            let k = strict % n;
            let dominating: Vec<f64> = (0..n).map(|i| {
                let extra = if i == k { bumps[i].max(1e-3) } else { bumps[i] };
                s[i] + extra
            }).collect();
            prop_assert!(gate(&old, &dominating, delta).unwrap().accepted);
        }
    }
}
