use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::loss::{loss_and_grad, LossBreakdown};
use super::model::{backward, PreparedGraph};
use super::params::RouterParams;
use super::{check_graph, run_forward, Mode, SoftTarget, TrainConfig};
use crate::adaptive::weighted_vote;
use crate::agent::AgentId;
use crate::error::{Error, Result};
use crate::graph::TypedGraph;
use crate::metrics::best_score;

#[derive(Debug, Clone)]
pub struct TrainExample {
    pub graph: TypedGraph,
    pub target: SoftTarget,
    /// Index into the router's category list.
    pub category: Option<usize>,
}

/// A validation query with every agent's answer, aligned with `graph.agent_ids()`.
#[derive(Debug, Clone)]
pub struct ValExample {
    pub graph: TypedGraph,
    pub gold: Vec<String>,
    pub answers: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_f1: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainedRouter {
    pub params: RouterParams,
    /// Epoch of the returned parameters (1-based).
    pub epoch: usize,
    pub val_f1: f64,
    pub history: Vec<EpochLog>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn accumulate_gradient(
    params: &RouterParams,
    g: &PreparedGraph,
    agents: &[AgentId],
    target: &SoftTarget,
    aux_target: Option<usize>,
    config: &TrainConfig,
    mode: Mode,
    grad: &mut RouterParams,
) -> Result<LossBreakdown> {
    if let Some(label) = aux_target {
        if label >= params.shape.categories.len() {
            return Err(Error::validation(format!("aux label {label} out of range")));
        }
    }
    let tape = run_forward(params, g, mode, config.dropout);
    let scores = tape.scores.to_vec();
    let logits = tape.aux_logits.to_vec();
    let lg = loss_and_grad(agents, &scores, target, aux_target.map(|l| (logits.as_slice(), l)), config)?;
    backward(params, g, &tape, &lg.d_scores, lg.d_aux.as_ref(), grad);
    Ok(lg.breakdown)
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    lr: f64,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(size: usize, lr: f64) -> Self {
        Self {
            m: vec![0.0; size],
            v: vec![0.0; size],
            t: 0,
            lr,
        }
    }

    /// One update. Stops at the first non-finite gradient or updated value
    /// and reports the tensor name with which of the two it was.
    fn step(&mut self, params: &mut RouterParams, grad: &RouterParams) -> std::result::Result<(), (String, &'static str)> {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        let (b1, b2, lr) = (Self::BETA1, Self::BETA2, self.lr);
        let mut offset = 0;
        for ((name, mut p), (_, g)) in params.tensors_mut().into_iter().zip(grad.tensors()) {
            let n = p.len();
            let m = &mut self.m[offset..offset + n];
            let v = &mut self.v[offset..offset + n];
            offset += n;
            let (Some(p), Some(g)) = (p.as_slice_mut(), g.as_slice()) else {
                unreachable!("parameter tensors are contiguous")
            };
            let mut finite = true;
            for (((x, &gx), m), v) in p.iter_mut().zip(g).zip(m).zip(v) {
                if !gx.is_finite() {
                    return Err((name, "gradient"));
                }
                *m = b1 * *m + (1.0 - b1) * gx;
                *v = b2 * *v + (1.0 - b2) * gx * gx;
                *x -= lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
                finite &= x.is_finite();
            }
            if !finite {
                return Err((name, "value after update"));
            }
        }
        Ok(())
    }
}

/// Mean F1 of the router-weighted vote over all agents' answers.
pub fn validation_f1(params: &RouterParams, val: &[ValExample]) -> Result<f64> {
    if val.is_empty() {
        return Err(Error::validation("validation set is empty"));
    }
    let f1s = val
        .par_iter()
        .map(|ex| {
            check_graph(params, &ex.graph)?;
            if ex.answers.len() != ex.graph.count(crate::graph::NodeKind::Agent) {
                return Err(Error::validation(format!(
                    "validation example {} has {} answers for {} agents",
                    ex.graph.instance_id,
                    ex.answers.len(),
                    ex.graph.count(crate::graph::NodeKind::Agent)
                )));
            }
            let tape = run_forward(params, &PreparedGraph::new(&ex.graph), Mode::Eval, 0.0);
            let probs: Vec<f64> = super::loss::log_softmax(&tape.scores.to_vec())
                .into_iter()
                .map(f64::exp)
                .collect();
            let answer = weighted_vote(&probs, &ex.answers)?;
            Ok(best_score(&answer, &ex.gold)?.f1)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(f1s.iter().sum::<f64>() / f1s.len() as f64)
}

/// Adam training with seeded shuffling and early stopping on validation
/// weighted-vote F1. `init` resumes from existing parameters; otherwise a
/// fresh router is initialized for `categories`.
pub fn train(
    init: Option<RouterParams>,
    categories: &[String],
    examples: &[TrainExample],
    val: &[ValExample],
    config: &TrainConfig,
) -> Result<TrainedRouter> {
    config.validate()?;
    let first = examples
        .first()
        .ok_or_else(|| Error::validation("training set is empty"))?;
    if val.is_empty() {
        return Err(Error::validation("validation set is empty"));
    }
    let mut params = match init {
        Some(p) => p,
        None => RouterParams::init(&config.shape(first.graph.feature_dim(), categories.to_vec()), config.seed),
    };
    let mut prepared = Vec::with_capacity(examples.len());
    for ex in examples {
        check_graph(&params, &ex.graph)?;
        prepared.push((PreparedGraph::new(&ex.graph), ex.graph.agent_ids()));
    }

    let mut adam = Adam::new(params.parameter_count(), config.learning_rate);
    let mut grad = params.zeros_like();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5e_ed0f_7a1e);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut best: Option<(RouterParams, usize, f64)> = None;
    let mut since_best = 0;
    let mut history = Vec::new();

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(config.accumulate) {
            grad.zero_out();
            for &i in chunk {
                let (g, agents) = &prepared[i];
                let mode = Mode::Train { seed: rng.random() };
                let ex = &examples[i];
                let b = accumulate_gradient(&params, g, agents, &ex.target, ex.category, config, mode, &mut grad)?;
                if !b.total.is_finite() {
                    return Err(Error::Numerical(format!(
                        "loss on {} (non-finite at epoch {epoch})",
                        ex.graph.instance_id
                    )));
                }
                total += b.total;
            }
            if let Err((name, what)) = adam.step(&mut params, &grad) {
                return Err(Error::Numerical(format!("{name} (non-finite {what} at epoch {epoch})")));
            }
        }
        let val_f1 = validation_f1(&params, val)?;
        let entry = EpochLog {
            epoch,
            train_loss: total / examples.len() as f64,
            val_f1,
            lr: config.learning_rate,
        };
        log::info!("{}", serde_json::to_string(&entry)?);
        history.push(entry);
        if best.as_ref().is_none_or(|(_, _, f)| val_f1 > *f) {
            best = Some((params.clone(), epoch, val_f1));
            since_best = 0;
        } else {
            since_best += 1;
        }
        if since_best >= config.patience {
            break;
        }
    }
    let (params, epoch, val_f1) = best.expect("at least one epoch runs");
    Ok(TrainedRouter {
        params,
        epoch,
        val_f1,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::QAInstance;
    use crate::graph::{build_graph, embed_graph, CapitalizedRunExtractor, EntityExtractor, GraphConfig, HashEmbedder};
    use crate::router::{forward, loss, soft_targets};
    use std::collections::BTreeMap;

    fn agents() -> Vec<AgentId> {
        vec![
            AgentId::new("m1", "cot"),
            AgentId::new("m1", "raw"),
            AgentId::new("m2", "cot"),
            AgentId::new("m2", "raw"),
        ]
    }

    fn example(i: usize) -> (TrainExample, ValExample) {
        let ids = agents();
        let topic = if i.is_multiple_of(2) { "Aurora Index" } else { "Basalt Ledger" };
        let inst = QAInstance {
            id: format!("q{i}"),
            question: format!("What does the {topic} record about Item{i}?"),
            context: format!("The {topic} records Item{i} as Value{i}. Ann Lee wrote it."),
            gold_answers: vec![format!("value{i}")],
            category: None,
        };
        let ents = CapitalizedRunExtractor::default().extract(&inst.context);
        let mut g = build_graph(&inst, &ents, &BTreeMap::new(), &ids, &GraphConfig::default()).unwrap();
        embed_graph(&mut g, &HashEmbedder { dim: 32 }, &BTreeMap::new()).unwrap();
        let good = if i.is_multiple_of(2) { 0 } else { 3 };
        let f1: BTreeMap<AgentId, f64> = ids
            .iter()
            .enumerate()
            .map(|(k, a)| (a.clone(), if k == good { 1.0 } else { 0.0 }))
            .collect();
        let answers = (0..4)
            .map(|k| if k == good { format!("Value{i}") } else { format!("wrong {k}") })
            .collect();
        (
            TrainExample {
                graph: g.clone(),
                target: soft_targets(&f1, 0.25).unwrap(),
                category: Some(i % 2),
            },
            ValExample {
                graph: g,
                gold: inst.gold_answers,
                answers,
            },
        )
    }

    fn config() -> TrainConfig {
        TrainConfig {
            hidden: 8,
            learning_rate: 1e-2,
            epochs: 8,
            patience: 8,
            ..TrainConfig::default()
        }
    }

    fn cats() -> Vec<String> {
        vec!["a".into(), "b".into()]
    }

    #[test]
    fn learns_two_topic_routing() {
        let (tr, va): (Vec<_>, Vec<_>) = (0..20).map(example).unzip();
        let out = train(None, &cats(), &tr, &va, &config()).unwrap();
        assert!(out.val_f1 >= 0.9, "{:?}", out.history);
        assert_eq!(out.history.len(), 8);
    }

    #[test]
    fn patience_zero_runs_one_epoch() {
        let (tr, va): (Vec<_>, Vec<_>) = (0..4).map(example).unzip();
        let cfg = TrainConfig {
            patience: 0,
            ..config()
        };
        let out = train(None, &cats(), &tr, &va, &cfg).unwrap();
        assert_eq!(out.history.len(), 1);
        assert_eq!(out.epoch, 1);
    }

    #[test]
    fn training_is_deterministic() {
        let (tr, va): (Vec<_>, Vec<_>) = (0..6).map(example).unzip();
        let cfg = TrainConfig {
            epochs: 3,
            ..config()
        };
        let a = train(None, &cats(), &tr, &va, &cfg).unwrap();
        let b = train(None, &cats(), &tr, &va, &cfg).unwrap();
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn empty_training_set_rejected() {
        let (_, va) = example(0);
        assert!(matches!(train(None, &cats(), &[], &[va], &config()), Err(Error::Validation(_))));
    }

    #[test]
    fn zero_learning_rate_keeps_loss() {
        let (tr, _) = example(0);
        let cfg = TrainConfig {
            learning_rate: 0.0,
            dropout: 0.0,
            ..config()
        };
        let mut params = RouterParams::init(&cfg.shape(32, cats()), 1);
        let before = loss(&forward(&params, &tr.graph).unwrap(), &tr.target, &cfg, tr.category).unwrap();
        let (_, grad) = super::super::backward(&params, &tr.graph, &tr.target, &cfg, tr.category, Mode::Eval).unwrap();
        Adam::new(params.parameter_count(), 0.0).step(&mut params, &grad).unwrap();
        let after = loss(&forward(&params, &tr.graph).unwrap(), &tr.target, &cfg, tr.category).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn small_steps_do_not_increase_loss() {
        let (tr, _) = example(1);
        let cfg = TrainConfig {
            dropout: 0.0,
            ..config()
        };
        let mut params = RouterParams::init(&cfg.shape(32, cats()), 2);
        let mut adam = Adam::new(params.parameter_count(), 1e-5);
        let mut prev = f64::INFINITY;
        for _ in 0..20 {
            let (b, grad) = super::super::backward(&params, &tr.graph, &tr.target, &cfg, tr.category, Mode::Eval).unwrap();
            assert!(b.total <= prev + 1e-12, "{} > {prev}", b.total);
            prev = b.total;
            adam.step(&mut params, &grad).unwrap();
        }
    }
}
