//! Router-ranked sequential querying with weighted answer agreement.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::agent::AgentId;
use crate::error::{Error, Result};
use crate::metrics::{best_score, normalize_answer};
use crate::router::RoutingDistribution;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveConfig {
    pub tau_agree: f64,
    pub k_min: usize,
    pub k_max: usize,
}

impl AdaptiveConfig {
    pub fn validate(&self, pool_size: usize) -> Result<()> {
        if !(self.tau_agree > 0.0 && self.tau_agree <= 1.0) {
            return Err(Error::Config(format!("tau_agree must lie in (0,1], got {}", self.tau_agree)));
        }
        if self.k_min == 0 || self.k_min > self.k_max || self.k_max > pool_size {
            return Err(Error::Config(format!(
                "need 1 <= k_min <= k_max <= {pool_size}, got k_min={} k_max={}",
                self.k_min, self.k_max
            )));
        }
        if self.k_min == 1 {
            log::warn!("k_min = 1 always stops after the first agent");
        }
        Ok(())
    }

    pub fn full_pool(n: usize) -> Self {
        Self {
            tau_agree: 1.0,
            k_min: n,
            k_max: n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Consulted {
    pub agent: AgentId,
    pub weight: f64,
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveResult {
    pub answer: String,
    pub consulted: Vec<Consulted>,
    pub k_star: usize,
    pub stopped_early: bool,
    pub agreement_trace: Vec<f64>,
    /// Agents that errored and were skipped.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub failed: Vec<AgentId>,
}

/// Agents by descending probability, ties by ascending id.
pub fn rank_agents(dist: &RoutingDistribution) -> Vec<(AgentId, f64)> {
    let mut ranked: Vec<(AgentId, f64)> = dist.agents.iter().cloned().zip(dist.probs.iter().copied()).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked
}

/// Summed weight per normalized answer class, with the first index of each class.
fn classes(weights: &[f64], answers: &[String]) -> Vec<(String, f64, usize)> {
    let mut out: Vec<(String, f64, usize)> = Vec::new();
    let mut index: BTreeMap<String, usize> = BTreeMap::new();
    for (i, (w, a)) in weights.iter().zip(answers).enumerate() {
        let key = normalize_answer(a);
        match index.get(&key) {
            Some(&c) => out[c].1 += w,
            None => {
                index.insert(key.clone(), out.len());
                out.push((key, *w, i));
            }
        }
    }
    out
}

/// Weighted share of the best-supported answer among the first `k`.
pub fn agreement(weights: &[f64], answers: &[String], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::validation("agreement needs k >= 1"));
    }
    if k > weights.len() || weights.len() != answers.len() {
        return Err(Error::validation(format!(
            "agreement over k={k} with {} weights and {} answers",
            weights.len(),
            answers.len()
        )));
    }
    let total: f64 = weights[..k].iter().sum();
    let top = classes(&weights[..k], &answers[..k])
        .into_iter()
        .map(|(_, w, _)| w)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(top / total)
}

/// Answer class with the largest summed weight. Inputs are in rank order, so
/// ties go to the class whose first member ranks highest; the returned string
/// is the raw answer of the heaviest member of that class.
pub fn weighted_vote(weights: &[f64], answers: &[String]) -> Result<String> {
    if weights.is_empty() || weights.len() != answers.len() {
        return Err(Error::validation(format!(
            "weighted vote over {} weights and {} answers",
            weights.len(),
            answers.len()
        )));
    }
    let cls = classes(weights, answers);
    let mut winner = &cls[0];
    for c in &cls[1..] {
        if c.1 > winner.1 || (c.1 == winner.1 && c.2 < winner.2) {
            winner = c;
        }
    }
    let mut best: Option<usize> = None;
    for i in 0..answers.len() {
        if normalize_answer(&answers[i]) == winner.0 && best.is_none_or(|b| weights[i] > weights[b]) {
            best = Some(i);
        }
    }
    Ok(answers[best.expect("winning class is non-empty")].clone())
}

/// Consult agents in `ranked` order until agreement reaches `tau_agree`
/// (at or after `k_min` answers) or `k_max` answers are in. Failed agents are
/// skipped and do not count toward k.
pub fn adaptive_infer<F>(ranked: &[(AgentId, f64)], config: &AdaptiveConfig, mut ask: F) -> Result<AdaptiveResult>
where
    F: FnMut(&AgentId) -> Result<String>,
{
    config.validate(ranked.len())?;
    let mut weights = Vec::new();
    let mut answers = Vec::new();
    let mut consulted = Vec::new();
    let mut failed = Vec::new();
    let mut trace = Vec::new();
    let mut stopped_early = false;
    let mut last_err = None;
    for (agent, weight) in ranked {
        let answer = match ask(agent) {
            Ok(a) => a,
            Err(e) => {
                log::warn!("skipping {agent}: {e}");
                failed.push(agent.clone());
                last_err = Some(e);
                continue;
            }
        };
        weights.push(*weight);
        answers.push(answer.clone());
        consulted.push(Consulted {
            agent: agent.clone(),
            weight: *weight,
            answer,
        });
        let k = weights.len();
        let a = agreement(&weights, &answers, k)?;
        trace.push(a);
        if k >= config.k_min && a >= config.tau_agree {
            stopped_early = true;
            break;
        }
        if k >= config.k_max {
            break;
        }
    }
    if consulted.is_empty() {
        return Err(match last_err {
            Some(Error::Backend { instance, message, .. }) => Error::Backend {
                agent: "every agent".into(),
                instance,
                message,
            },
            Some(e) => e,
            None => Error::validation("no agents to consult"),
        });
    }
    Ok(AdaptiveResult {
        answer: weighted_vote(&weights, &answers)?,
        k_star: consulted.len(),
        consulted,
        stopped_early,
        agreement_trace: trace,
        failed,
    })
}

/// One validation query for tuning: router ranking, every agent's answer, gold.
#[derive(Debug, Clone)]
pub struct TuneExample {
    pub ranked: Vec<(AgentId, f64)>,
    pub answers: BTreeMap<AgentId, String>,
    pub gold: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneOutcome {
    pub config: AdaptiveConfig,
    pub f1: f64,
    pub em: f64,
    pub mean_calls: f64,
}

/// Default search grid; `k_max` values above the pool size are clipped to it.
pub fn default_grid(pool_size: usize) -> Vec<AdaptiveConfig> {
    let mut k_maxes: Vec<usize> = [5, 10, pool_size].iter().map(|&k| k.min(pool_size)).collect();
    k_maxes.sort_unstable();
    k_maxes.dedup();
    let mut grid = Vec::new();
    for tau in [0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9] {
        for k_min in [2, 3] {
            for &k_max in &k_maxes {
                if k_min <= k_max {
                    grid.push(AdaptiveConfig {
                        tau_agree: tau,
                        k_min,
                        k_max,
                    });
                }
            }
        }
    }
    grid
}

/// Mean F1, EM and calls of one configuration over `examples`.
pub fn evaluate_config(examples: &[TuneExample], config: &AdaptiveConfig) -> Result<TuneOutcome> {
    if examples.is_empty() {
        return Err(Error::validation("no examples to evaluate"));
    }
    let (mut f1, mut em, mut calls) = (0.0, 0.0, 0.0);
    for ex in examples {
        let r = adaptive_infer(&ex.ranked, config, |a| {
            ex.answers
                .get(a)
                .cloned()
                .ok_or_else(|| Error::validation(format!("no answer recorded for {a}")))
        })?;
        let s = best_score(&r.answer, &ex.gold)?;
        f1 += s.f1;
        em += f64::from(u8::from(s.em));
        calls += r.k_star as f64;
    }
    let n = examples.len() as f64;
    Ok(TuneOutcome {
        config: *config,
        f1: f1 / n,
        em: em / n,
        mean_calls: calls / n,
    })
}

/// Grid search by validation F1, then fewest mean calls, then grid order.
/// Configurations within `f1_tolerance` (a fraction, 0.005 = half a point)
/// of the best F1 count as tied on F1.
pub fn tune_adaptive(
    examples: &[TuneExample],
    grid: &[AdaptiveConfig],
    f1_tolerance: f64,
) -> Result<(TuneOutcome, Vec<TuneOutcome>)> {
    if !(f1_tolerance >= 0.0) {
        return Err(Error::Config(format!("f1_tolerance must be non-negative, got {f1_tolerance}")));
    }
    let mut all = Vec::with_capacity(grid.len());
    for cfg in grid {
        all.push(evaluate_config(examples, cfg)?);
    }
    let top = all
        .iter()
        .map(|o| o.f1)
        .fold(None, |m: Option<f64>, f| Some(m.map_or(f, |m| m.max(f))))
        .ok_or_else(|| Error::Config("empty tuning grid".into()))?;
    let floor = top - f1_tolerance - 1e-12;
    let mut best: Option<&TuneOutcome> = None;
    for o in all.iter().filter(|o| o.f1 >= floor) {
        if best.is_none_or(|b| o.mean_calls < b.mean_calls) {
            best = Some(o);
        }
    }
    let best = best.cloned().expect("the top configuration passes its own floor");
    Ok((best, all))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    fn ranked(ws: &[f64]) -> Vec<(AgentId, f64)> {
        ws.iter()
            .enumerate()
            .map(|(i, w)| (AgentId::new("m", format!("r{i:02}")), *w))
            .collect()
    }

    #[test]
    fn rank_examples() {
        let ids: Vec<AgentId> = ["c", "a", "b"].iter().map(|r| AgentId::new("m", *r)).collect();
        let uniform = RoutingDistribution::uniform(ids.clone());
        let order: Vec<String> = rank_agents(&uniform).into_iter().map(|(a, _)| a.role).collect();
        assert_eq!(order, ["a", "b", "c"]);
        let d = RoutingDistribution {
            agents: ids,
            scores: vec![0.0; 3],
            probs: vec![0.2, 0.5, 0.3],
            aux_logits: vec![],
        };
        let order: Vec<String> = rank_agents(&d).into_iter().map(|(a, _)| a.role).collect();
        assert_eq!(order, ["a", "b", "c"]);
    }

    #[test]
    fn agreement_examples() {
        assert_eq!(agreement(&[0.3, 0.7], &s(&["x", "y"]), 1).unwrap(), 1.0);
        assert!((agreement(&[0.5, 0.3, 0.2], &s(&["a", "a", "b"]), 3).unwrap() - 0.8).abs() < 1e-12);
        assert_eq!(agreement(&[0.1, 0.9], &s(&["Yes", "yes"]), 2).unwrap(), 1.0);
        assert!(agreement(&[0.1], &s(&["a"]), 0).is_err());
    }

    #[test]
    fn vote_examples() {
        assert_eq!(weighted_vote(&[1.0], &s(&["Only"])).unwrap(), "Only");
        assert_eq!(weighted_vote(&[0.4, 0.35, 0.25], &s(&["a", "b", "b"])).unwrap(), "b");
        assert_eq!(weighted_vote(&[0.5, 0.5], &s(&["x", "y"])).unwrap(), "x");
        assert_eq!(weighted_vote(&[0.2, 0.5, 0.3], &s(&["q", "The Dog", "dog"])).unwrap(), "The Dog");
        assert!(weighted_vote(&[], &[]).is_err());
    }

    #[test]
    fn stops_when_agreement_reached() {
        let r = ranked(&[0.5, 0.3, 0.1, 0.1]);
        let cfg = AdaptiveConfig {
            tau_agree: 0.9,
            k_min: 2,
            k_max: 4,
        };
        let out = adaptive_infer(&r, &cfg, |_| Ok("a".into())).unwrap();
        assert_eq!(out.k_star, 2);
        assert!(out.stopped_early);
        assert_eq!(out.answer, "a");
        assert_eq!(out.agreement_trace, vec![1.0, 1.0]);
    }

    #[test]
    fn runs_to_k_max_on_disagreement() {
        let r = ranked(&[0.4, 0.3, 0.2, 0.1]);
        let cfg = AdaptiveConfig {
            tau_agree: 1.0,
            k_min: 2,
            k_max: 3,
        };
        let out = adaptive_infer(&r, &cfg, |a| Ok(a.role.clone())).unwrap();
        assert_eq!(out.k_star, 3);
        assert!(!out.stopped_early);
        assert_eq!(out.answer, "r00");
    }

    #[test]
    fn failures_are_skipped() {
        let r = ranked(&[0.4, 0.3, 0.2, 0.1]);
        let cfg = AdaptiveConfig {
            tau_agree: 0.9,
            k_min: 2,
            k_max: 4,
        };
        let out = adaptive_infer(&r, &cfg, |a| {
            if a.role == "r00" {
                Err(Error::Backend {
                    agent: a.to_string(),
                    instance: "q".into(),
                    message: "down".into(),
                })
            } else {
                Ok("z".into())
            }
        })
        .unwrap();
        assert_eq!(out.failed.len(), 1);
        assert_eq!(out.k_star, 2);
        assert_eq!(out.consulted[0].agent.role, "r01");
        let all_fail = adaptive_infer(&r, &cfg, |a| {
            Err(Error::Backend {
                agent: a.to_string(),
                instance: "q".into(),
                message: "down".into(),
            })
        });
        assert!(matches!(all_fail, Err(Error::Backend { .. })));
    }

    #[test]
    fn full_pool_matches_weighted_vote() {
        let ws = [0.3, 0.25, 0.2, 0.15, 0.1];
        let ans = s(&["a", "b", "b", "c", "a"]);
        let r = ranked(&ws);
        let out = adaptive_infer(&r, &AdaptiveConfig::full_pool(5), |a| {
            let i: usize = a.role[1..].parse().unwrap();
            Ok(ans[i].clone())
        })
        .unwrap();
        assert_eq!(out.k_star, 5);
        assert_eq!(out.answer, weighted_vote(&ws, &ans).unwrap());
    }

    #[test]
    fn invalid_configs_rejected() {
        let bad = [(0.0, 1, 2), (1.1, 1, 2), (0.5, 0, 2), (0.5, 3, 2), (0.5, 1, 9)];
        for (tau_agree, k_min, k_max) in bad {
            assert!(AdaptiveConfig { tau_agree, k_min, k_max }.validate(4).is_err());
        }
    }

    #[test]
    fn grid_clips_k_max() {
        let g = default_grid(8);
        assert!(g.iter().all(|c| c.k_max <= 8));
        assert_eq!(g.len(), 9 * 2 * 2);
    }

    proptest! {
        #[test]
        fn scale_invariance(ws in prop::collection::vec(0.01f64..1.0, 1..8), picks in prop::collection::vec(0usize..3, 8), c in 0.1f64..10.0, tau in 0.3f64..1.0) {
            let n = ws.len();
            let ans: Vec<String> = (0..n).map(|i| ["x", "y", "z"][picks[i]].to_string()).collect();
            let cfg = AdaptiveConfig { tau_agree: tau, k_min: 1, k_max: n };
            let run = |scale: f64| {
                let r: Vec<(AgentId, f64)> = ranked(&ws).into_iter().map(|(a, w)| (a, w * scale)).collect();
                adaptive_infer(&r, &cfg, |a| Ok(ans[a.role[1..].parse::<usize>().unwrap()].clone())).unwrap()
            };
            let (a, b) = (run(1.0), run(c));
            prop_assert_eq!(a.k_star, b.k_star);
            prop_assert_eq!(a.answer, b.answer);
        }

        #[test]
        fn agreement_bounds(ws in prop::collection::vec(0.01f64..1.0, 1..8), picks in prop::collection::vec(0usize..3, 8)) {
            let ans: Vec<String> = (0..ws.len()).map(|i| ["x", "y", "z"][picks[i]].to_string()).collect();
            for k in 1..=ws.len() {
                let a = agreement(&ws, &ans, k).unwrap();
                prop_assert!(a > 0.0 && a <= 1.0 + 1e-12);
            }
            prop_assert_eq!(agreement(&ws, &ans, 1).unwrap(), 1.0);
        }
    }

    #[test]
    fn tuning_prefers_fewer_calls_within_tolerance() {
        let agents: Vec<AgentId> = (0..4).map(|i| AgentId::new("m", format!("r{i}"))).collect();
        let ranked: Vec<(AgentId, f64)> = agents.iter().cloned().zip([0.4, 0.3, 0.2, 0.1]).collect();
        // 9 of 10 queries: everyone right; 1: only the top agent wrong
        let mut examples = Vec::new();
        for i in 0..10 {
            let answers: BTreeMap<AgentId, String> = agents
                .iter()
                .enumerate()
                .map(|(j, a)| (a.clone(), if i == 0 && j == 0 { "wrong".to_string() } else { "ok".to_string() }))
                .collect();
            examples.push(TuneExample {
                ranked: ranked.clone(),
                answers,
                gold: vec!["ok".into()],
            });
        }
        let grid = [
            AdaptiveConfig { tau_agree: 0.9, k_min: 2, k_max: 2 },
            AdaptiveConfig::full_pool(4),
        ];
        let (strict, all) = tune_adaptive(&examples, &grid, 0.0).unwrap();
        assert_eq!(strict.config, AdaptiveConfig::full_pool(4));
        assert!((all[0].f1 - 0.9).abs() < 1e-12 && (all[1].f1 - 1.0).abs() < 1e-12);
        let (loose, _) = tune_adaptive(&examples, &grid, 0.1).unwrap();
        assert_eq!(loose.config, grid[0]);
        assert!(tune_adaptive(&examples, &grid, -1.0).is_err());
    }
}
