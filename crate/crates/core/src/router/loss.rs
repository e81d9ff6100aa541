//! KL distillation loss with entropy bonuses and the auxiliary question-type term.

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use super::{RoutingDistribution, SoftTarget, TrainConfig};
use crate::agent::AgentId;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub kl: f64,
    /// Entropy of the backbone marginal of the prediction.
    pub backbone_entropy: f64,
    pub agent_entropy: f64,
    pub aux: f64,
}

pub(crate) struct LossGrad {
    pub breakdown: LossBreakdown,
    pub d_scores: Array1<f64>,
    pub d_aux: Option<Array1<f64>>,
}

pub(crate) fn log_softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    x.iter().map(|v| v - lse).collect()
}

fn backbone_groups(agents: &[AgentId]) -> Vec<usize> {
    let mut names: Vec<&str> = agents.iter().map(|a| a.backbone.as_str()).collect();
    names.sort_unstable();
    names.dedup();
    agents
        .iter()
        .map(|a| names.binary_search(&a.backbone.as_str()).expect("present"))
        .collect()
}

/// For f(p) with ∂f/∂p = g, returns ∂f/∂s through p = softmax(s).
fn through_softmax(p: &[f64], g: &[f64]) -> Vec<f64> {
    let dot: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
    p.iter().zip(g).map(|(pi, gi)| pi * (gi - dot)).collect()
}

pub(crate) fn loss_and_grad(
    agents: &[AgentId],
    scores: &[f64],
    target: &SoftTarget,
    aux: Option<(&[f64], usize)>,
    config: &TrainConfig,
) -> Result<LossGrad> {
    if target.agents != agents {
        return Err(Error::validation("prediction and target cover different agent sets"));
    }
    let n = agents.len();
    let log_p = log_softmax(scores);
    let p: Vec<f64> = log_p.iter().map(|l| l.exp()).collect();
    let eps = config.label_smoothing;
    let smoothed: Vec<f64> = target.probs.iter().map(|t| (1.0 - eps) * t + eps / n as f64).collect();

    let kl: f64 = smoothed
        .iter()
        .zip(&log_p)
        .filter(|(t, _)| **t > 0.0)
        .map(|(t, lp)| t * (t.ln() - lp))
        .sum();
    let agent_entropy: f64 = -p.iter().zip(&log_p).map(|(pi, lp)| pi * lp).sum::<f64>();

    let groups = backbone_groups(agents);
    let n_groups = groups.iter().max().map_or(0, |m| m + 1);
    let mut marginal = vec![0.0; n_groups];
    for (pi, &g) in p.iter().zip(&groups) {
        marginal[g] += pi;
    }
    let backbone_entropy: f64 = -marginal.iter().filter(|m| **m > 0.0).map(|m| m * m.ln()).sum::<f64>();

    // ∂/∂s of each term
    let d_kl: Vec<f64> = p.iter().zip(&smoothed).map(|(pi, ti)| pi - ti).collect();
    let g_ent: Vec<f64> = log_p.iter().map(|lp| -(lp + 1.0)).collect();
    let d_ent = through_softmax(&p, &g_ent);
    let g_bb: Vec<f64> = groups.iter().map(|&g| -(marginal[g].ln() + 1.0)).collect();
    let d_bb = through_softmax(&p, &g_bb);
    let d_scores: Array1<f64> = (0..n)
        .map(|i| d_kl[i] - config.lambda_bb * d_bb[i] - config.lambda_ent * d_ent[i])
        .collect();

    let (aux_loss, d_aux) = match aux {
        Some((logits, label)) => {
            let c = logits.len();
            let s = config.aux_smoothing;
            let log_q = log_softmax(logits);
            let y: Vec<f64> = (0..c)
                .map(|k| (1.0 - s) * f64::from(u8::from(k == label)) + s / c as f64)
                .collect();
            let ce = -y.iter().zip(&log_q).map(|(yk, lq)| yk * lq).sum::<f64>();
            let grad: Array1<f64> = log_q.iter().zip(&y).map(|(lq, yk)| lq.exp() - yk).collect();
            (ce, Some(grad))
        }
        None => (0.0, None),
    };

    let total = kl - config.lambda_bb * backbone_entropy - config.lambda_ent * agent_entropy + aux_loss;
    Ok(LossGrad {
        breakdown: LossBreakdown {
            total,
            kl,
            backbone_entropy,
            agent_entropy,
            aux: aux_loss,
        },
        d_scores,
        d_aux,
    })
}

/// Loss of a prediction against a soft target.
pub fn loss(
    pred: &RoutingDistribution,
    target: &SoftTarget,
    config: &TrainConfig,
    aux_target: Option<usize>,
) -> Result<LossBreakdown> {
    let aux = aux_target.map(|label| (pred.aux_logits.as_slice(), label));
    if let Some((logits, label)) = aux {
        if label >= logits.len() {
            return Err(Error::validation(format!("aux label {label} out of range")));
        }
    }
    Ok(loss_and_grad(&pred.agents, &pred.scores, target, aux, config)?.breakdown)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::router::soft_targets;
    use std::collections::BTreeMap;

    fn zero_reg() -> TrainConfig {
        TrainConfig {
            label_smoothing: 0.0,
            lambda_bb: 0.0,
            lambda_ent: 0.0,
            ..TrainConfig::default()
        }
    }

    fn dist(agents: &[AgentId], scores: Vec<f64>) -> RoutingDistribution {
        RoutingDistribution::from_scores(agents.to_vec(), scores, vec![])
    }

    fn two() -> Vec<AgentId> {
        vec![AgentId::new("x", "a"), AgentId::new("y", "b")]
    }

    #[test]
    fn kl_zero_at_identity() {
        let agents = two();
        let pred = dist(&agents, vec![0.3, -0.2]);
        let target = SoftTarget {
            agents: agents.clone(),
            probs: pred.probs.clone(),
        };
        let l = loss(&pred, &target, &zero_reg(), None).unwrap();
        assert!(l.kl.abs() < 1e-9);
        assert!(l.total.abs() < 1e-9);
    }

    #[test]
    fn kl_against_uniform_two_atoms() {
        let agents = two();
        let f1 = BTreeMap::from([(agents[0].clone(), 1.0), (agents[1].clone(), 0.5)]);
        let target = soft_targets(&f1, 0.25).unwrap();
        let pred = dist(&agents, vec![0.0, 0.0]);
        let l = loss(&pred, &target, &zero_reg(), None).unwrap();
        // oracle: Σ t ln(t / 0.5) with t = (0.880797, 0.119203)
        let t0 = 1.0 / (1.0 + (-2.0f64).exp());
        let t1 = 1.0 - t0;
        let oracle = t0 * (t0 / 0.5).ln() + t1 * (t1 / 0.5).ln();
        assert!((l.kl - oracle).abs() < 1e-12);
        assert!((l.kl - 0.3280).abs() < 1e-3, "{}", l.kl);
    }

    #[test]
    fn entropy_bonus_favours_uniform() {
        let agents = vec![
            AgentId::new("x", "a"),
            AgentId::new("x", "b"),
            AgentId::new("y", "a"),
            AgentId::new("y", "b"),
        ];
        let cfg = TrainConfig {
            lambda_bb: 0.02,
            lambda_ent: 1e-3,
            label_smoothing: 0.0,
            ..TrainConfig::default()
        };
        // target equal to the prediction in each case so KL = 0 for both
        let uniform = dist(&agents, vec![0.0; 4]);
        let skewed = dist(&agents, vec![1.0, 0.0, -0.5, 0.2]);
        let lu = loss(&uniform, &SoftTarget { agents: agents.clone(), probs: uniform.probs.clone() }, &cfg, None).unwrap();
        let ls = loss(&skewed, &SoftTarget { agents: agents.clone(), probs: skewed.probs.clone() }, &cfg, None).unwrap();
        assert!(lu.total < ls.total);
        // lower bound when aux absent
        let bound = -cfg.lambda_bb * 2f64.ln() - cfg.lambda_ent * 4f64.ln();
        assert!(lu.total >= bound - 1e-12);
        assert!((lu.total - bound).abs() < 1e-12);
    }

    #[test]
    fn mismatched_agents_rejected() {
        let agents = two();
        let pred = dist(&agents, vec![0.0, 0.0]);
        let target = SoftTarget {
            agents: vec![agents[1].clone(), agents[0].clone()],
            probs: vec![0.5, 0.5],
        };
        assert!(loss(&pred, &target, &zero_reg(), None).is_err());
    }

    #[test]
    fn score_gradient_matches_finite_differences() {
        let agents = vec![
            AgentId::new("x", "a"),
            AgentId::new("x", "b"),
            AgentId::new("y", "a"),
        ];
        let target = SoftTarget {
            agents: agents.clone(),
            probs: vec![0.6, 0.3, 0.1],
        };
        let cfg = TrainConfig {
            lambda_bb: 0.3,
            lambda_ent: 0.2,
            label_smoothing: 0.05,
            aux_smoothing: 0.1,
            ..TrainConfig::default()
        };
        let scores = vec![0.2, -0.4, 0.9];
        let logits = vec![0.1, 0.5, -0.3];
        let g = loss_and_grad(&agents, &scores, &target, Some((&logits, 1)), &cfg).unwrap();
        let f = |s: &[f64], l: &[f64]| {
            loss_and_grad(&agents, s, &target, Some((l, 1)), &cfg).unwrap().breakdown.total
        };
        let h = 1e-5;
        for i in 0..3 {
            let mut up = scores.clone();
            up[i] += h;
            let mut dn = scores.clone();
            dn[i] -= h;
            let fd = (f(&up, &logits) - f(&dn, &logits)) / (2.0 * h);
            assert!((fd - g.d_scores[i]).abs() < 1e-8, "score {i}: {fd} vs {}", g.d_scores[i]);
            let mut up = logits.clone();
            up[i] += h;
            let mut dn = logits.clone();
            dn[i] -= h;
            let fd = (f(&scores, &up) - f(&scores, &dn)) / (2.0 * h);
            let an = g.d_aux.as_ref().unwrap()[i];
            assert!((fd - an).abs() < 1e-8, "logit {i}: {fd} vs {an}");
        }
    }
}
