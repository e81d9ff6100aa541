//! Per-agent performance, failure archive and router-weight statistics.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::agent::AgentId;
use crate::dataset::QAInstance;
use crate::error::{Error, Result};
use crate::pool::PoolEvaluation;
use crate::refinement::priority;
use crate::router::RoutingDistribution;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnosticsConfig {
    pub failure_threshold: f64,
    pub archive_cap: usize,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        Self {
            failure_threshold: 0.3,
            archive_cap: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentSummary {
    pub mean_f1: f64,
    pub per_category: BTreeMap<String, f64>,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub instance_id: String,
    pub agent: AgentId,
    pub question: String,
    pub predicted: String,
    pub gold: Vec<String>,
    pub f1: f64,
    pub router_weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightStats {
    /// Mean over categories of the per-category mean weight.
    pub mean: f64,
    pub per_category: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsBundle {
    pub agent_summaries: BTreeMap<AgentId, AgentSummary>,
    pub failure_archive: Vec<FailureRecord>,
    pub weight_stats: BTreeMap<AgentId, WeightStats>,
    /// Prompt hash per agent at collection time.
    pub cache_manifest: BTreeMap<AgentId, String>,
    pub config: DiagnosticsConfig,
}

impl DiagnosticsBundle {
    pub fn failures_of<'a>(&'a self, agent: &'a AgentId) -> impl Iterator<Item = &'a FailureRecord> + 'a {
        self.failure_archive.iter().filter(move |f| &f.agent == agent)
    }

    pub fn mean_weight(&self, agent: &AgentId) -> f64 {
        self.weight_stats.get(agent).map_or(0.0, |w| w.mean)
    }

    pub fn mean_f1(&self, agent: &AgentId) -> f64 {
        self.agent_summaries.get(agent).map_or(0.0, |s| s.mean_f1)
    }
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Aggregates a pool evaluation and the router's per-instance outputs.
/// Instances and distributions are matched by id, so input order is irrelevant.
pub fn collect(
    eval: &PoolEvaluation,
    routing: &BTreeMap<String, RoutingDistribution>,
    instances: &[QAInstance],
    prompt_hashes: &BTreeMap<AgentId, String>,
    config: &DiagnosticsConfig,
) -> Result<DiagnosticsBundle> {
    let mut by_id: BTreeMap<&str, &QAInstance> = BTreeMap::new();
    for inst in instances {
        by_id.insert(&inst.id, inst);
    }
    let mut columns = Vec::with_capacity(eval.instances.len());
    for (col, id) in eval.instances.iter().enumerate() {
        let inst = by_id
            .get(id.as_str())
            .ok_or_else(|| Error::validation(format!("score matrix instance {id} not among the given instances")))?;
        let dist = routing
            .get(id)
            .ok_or_else(|| Error::validation(format!("no routing distribution for instance {id}")))?;
        if dist.agents != eval.agents {
            return Err(Error::validation(format!(
                "routing distribution for {id} covers different agents than the score matrix"
            )));
        }
        columns.push((col, *inst, dist, inst.category()));
    }
    if columns.len() != instances.len() {
        return Err(Error::validation("instance list and score matrix differ in size"));
    }

    let mut agent_summaries = BTreeMap::new();
    let mut weight_stats = BTreeMap::new();
    let mut failure_archive = Vec::new();
    for (a, agent) in eval.agents.iter().enumerate() {
        let mut f1_cat: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        let mut w_cat: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        let mut all = Vec::new();
        let mut failures = Vec::new();
        for (col, inst, dist, cat) in &columns {
            let cell = eval.cells[a][*col].as_ref();
            let f1 = cell.map_or(0.0, |c| c.f1);
            let w = dist.probs[a];
            all.push(f1);
            f1_cat.entry(cat.clone()).or_default().push(f1);
            w_cat.entry(cat.clone()).or_default().push(w);
            if f1 < config.failure_threshold {
                failures.push(FailureRecord {
                    instance_id: inst.id.clone(),
                    agent: agent.clone(),
                    question: inst.question.clone(),
                    predicted: cell.map_or_else(String::new, |c| c.answer.clone()),
                    gold: inst.gold_answers.clone(),
                    f1,
                    router_weight: w,
                });
            }
        }
        failures.sort_by(|x, y| x.f1.total_cmp(&y.f1).then_with(|| x.instance_id.cmp(&y.instance_id)));
        failures.truncate(config.archive_cap);
        failure_archive.extend(failures);
        agent_summaries.insert(
            agent.clone(),
            AgentSummary {
                mean_f1: mean(&all),
                per_category: f1_cat.iter().map(|(c, v)| (c.clone(), mean(v))).collect(),
                samples: all.len(),
            },
        );
        let per_category: BTreeMap<String, f64> = w_cat.iter().map(|(c, v)| (c.clone(), mean(v))).collect();
        weight_stats.insert(
            agent.clone(),
            WeightStats {
                mean: mean(&per_category.values().copied().collect::<Vec<_>>()),
                per_category,
            },
        );
    }
    Ok(DiagnosticsBundle {
        agent_summaries,
        failure_archive,
        weight_stats,
        cache_manifest: prompt_hashes.clone(),
        config: *config,
    })
}

/// Table of agents sorted by refinement priority (descending, then id).
pub fn summarize(bundle: &DiagnosticsBundle, alpha: f64) -> String {
    let mut rows: Vec<(&AgentId, f64, f64, usize, f64)> = bundle
        .agent_summaries
        .iter()
        .map(|(a, s)| {
            let w = bundle.mean_weight(a);
            let p = priority(s.mean_f1.clamp(0.0, 1.0), w.clamp(0.0, 1.0), alpha).unwrap_or(f64::NAN);
            (a, s.mean_f1, w, bundle.failures_of(a).count(), p)
        })
        .collect();
    rows.sort_by(|x, y| y.4.total_cmp(&x.4).then_with(|| x.0.cmp(y.0)));
    let width = rows.iter().map(|r| r.0.to_string().len()).max().unwrap_or(5).max(5);
    let mut out = String::new();
    let _ = writeln!(out, "{:<width$}  {:>7}  {:>7}  {:>7}  {:>8}", "agent", "mean_f1", "weight", "archive", "priority");
    for (a, f1, w, n, p) in &rows {
        let _ = writeln!(out, "{:<width$}  {f1:>7.4}  {w:>7.4}  {n:>7}  {p:>8.4}", a.to_string());
    }
    if bundle.failure_archive.is_empty() {
        out.push_str("no failures\n");
    } else {
        let _ = writeln!(
            out,
            "{} archived failures below F1 {}",
            bundle.failure_archive.len(),
            bundle.config.failure_threshold
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pool::Cell;

    fn setup(f1s: &[Vec<f64>], probs: Option<Vec<f64>>) -> (PoolEvaluation, BTreeMap<String, RoutingDistribution>, Vec<QAInstance>) {
        let n_agents = f1s.len();
        let n_inst = f1s[0].len();
        let agents: Vec<AgentId> = (0..n_agents).map(|i| AgentId::new("m", format!("r{i:02}"))).collect();
        let instances: Vec<QAInstance> = (0..n_inst)
            .map(|i| QAInstance {
                id: format!("q{i}"),
                question: if i % 2 == 0 { "Who is it?".into() } else { "What is it?".into() },
                context: String::new(),
                gold_answers: vec!["g".into()],
                category: None,
            })
            .collect();
        let eval = PoolEvaluation {
            agents: agents.clone(),
            instances: instances.iter().map(|i| i.id.clone()).collect(),
            cells: f1s
                .iter()
                .map(|row| {
                    row.iter()
                        .map(|&f1| Some(Cell { answer: format!("ans{f1}"), f1, em: f1 == 1.0 }))
                        .collect()
                })
                .collect(),
            backend_calls: 0,
            missing: vec![],
        };
        let routing = instances
            .iter()
            .map(|i| {
                let d = match &probs {
                    Some(p) => RoutingDistribution {
                        agents: agents.clone(),
                        scores: vec![0.0; n_agents],
                        probs: p.clone(),
                        aux_logits: vec![],
                    },
                    None => RoutingDistribution::uniform(agents.clone()),
                };
                (i.id.clone(), d)
            })
            .collect();
        (eval, routing, instances)
    }

    #[test]
    fn perfect_agent_has_no_failures() {
        let (e, r, i) = setup(&[vec![1.0, 1.0, 1.0]], None);
        let b = collect(&e, &r, &i, &BTreeMap::new(), &DiagnosticsConfig::default()).unwrap();
        assert!(b.failure_archive.is_empty());
        assert_eq!(b.agent_summaries.values().next().unwrap().mean_f1, 1.0);
        assert!(summarize(&b, 0.3).contains("no failures"));
    }

    #[test]
    fn uniform_router_weights() {
        let f1s = vec![vec![0.5; 4]; 24];
        let (e, r, i) = setup(&f1s, None);
        let b = collect(&e, &r, &i, &BTreeMap::new(), &DiagnosticsConfig::default()).unwrap();
        for w in b.weight_stats.values() {
            assert!((w.mean - 1.0 / 24.0).abs() < 1e-12);
        }
    }

    #[test]
    fn archive_filters_below_threshold() {
        let (e, r, i) = setup(&[vec![0.0, 0.2, 1.0]], None);
        let b = collect(&e, &r, &i, &BTreeMap::new(), &DiagnosticsConfig::default()).unwrap();
        let ids: Vec<&str> = b.failure_archive.iter().map(|f| f.instance_id.as_str()).collect();
        assert_eq!(ids, ["q0", "q1"]);
        let capped = collect(&e, &r, &i, &BTreeMap::new(), &DiagnosticsConfig { archive_cap: 1, ..Default::default() }).unwrap();
        assert_eq!(capped.failure_archive.len(), 1);
    }

    #[test]
    fn order_insensitive_and_misaligned_rejected() {
        let (e, r, mut i) = setup(&[vec![0.0, 0.5, 1.0, 0.1], vec![1.0, 0.0, 0.2, 0.9]], Some(vec![0.7, 0.3]));
        let a = collect(&e, &r, &i, &BTreeMap::new(), &DiagnosticsConfig::default()).unwrap();
        i.reverse();
        let b = collect(&e, &r, &i, &BTreeMap::new(), &DiagnosticsConfig::default()).unwrap();
        assert_eq!(a, b);
        i.pop();
        assert!(collect(&e, &r, &i, &BTreeMap::new(), &DiagnosticsConfig::default()).is_err());
    }

    #[test]
    fn report_sorted_by_priority() {
        // mean F1 0.6/0.2/0.9 with weights 0.1/0.5/0.4, alpha 0.3:
        // priorities 0.16, 0.64, 0.07
        let (e, r, i) = setup(&[vec![0.6, 0.6], vec![0.2, 0.2], vec![0.9, 0.9]], Some(vec![0.1, 0.5, 0.4]));
        let b = collect(&e, &r, &i, &BTreeMap::new(), &DiagnosticsConfig::default()).unwrap();
        let report = summarize(&b, 0.3);
        let lines: Vec<&str> = report.lines().collect();
        assert!(lines[1].starts_with("m::r01") && lines[1].ends_with("0.6400"), "{report}");
        assert!(lines[2].starts_with("m::r00") && lines[2].ends_with("0.1600"), "{report}");
        assert!(lines[3].starts_with("m::r02") && lines[3].ends_with("0.0700"), "{report}");
    }
}
