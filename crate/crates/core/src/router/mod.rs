//! Graph router: message passing over [`TypedGraph`], agent scoring, loss,
//! hand-written reverse pass, Adam training and checkpoints.

mod checkpoint;
mod loss;
mod model;
mod params;
mod train;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use loss::{loss, LossBreakdown};
pub use model::{activation_signature, PreparedGraph, Tape};
pub use params::{LayerParams, ParamShape, RouterParams, NUM_KINDS, NUM_RELATIONS};
pub use train::{train, validation_f1, EpochLog, TrainExample, TrainedRouter, ValExample};

use crate::agent::AgentId;
use crate::error::{Error, Result};
use crate::graph::TypedGraph;

/// Per-query distribution over agents, in graph agent order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingDistribution {
    pub agents: Vec<AgentId>,
    pub scores: Vec<f64>,
    pub probs: Vec<f64>,
    pub aux_logits: Vec<f64>,
}

impl RoutingDistribution {
    pub fn from_scores(agents: Vec<AgentId>, scores: Vec<f64>, aux_logits: Vec<f64>) -> Self {
        let probs = loss::log_softmax(&scores).into_iter().map(f64::exp).collect();
        Self {
            agents,
            scores,
            probs,
            aux_logits,
        }
    }

    pub fn uniform(agents: Vec<AgentId>) -> Self {
        let n = agents.len();
        Self::from_scores(agents, vec![0.0; n], Vec::new())
    }

    pub fn prob(&self, agent: &AgentId) -> Option<f64> {
        self.agents.iter().position(|a| a == agent).map(|i| self.probs[i])
    }

    /// Highest-probability agent; ties go to the smaller id.
    pub fn top(&self) -> Option<&AgentId> {
        let mut best: Option<usize> = None;
        for i in 0..self.agents.len() {
            best = match best {
                Some(b) if self.probs[b] > self.probs[i] => Some(b),
                Some(b) if self.probs[b] == self.probs[i] && self.agents[b] < self.agents[i] => Some(b),
                _ => Some(i),
            };
        }
        best.map(|i| &self.agents[i])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftTarget {
    pub agents: Vec<AgentId>,
    pub probs: Vec<f64>,
}

/// Temperature softmax over per-agent F1, in sorted agent order.
pub fn soft_targets(f1_by_agent: &BTreeMap<AgentId, f64>, temperature: f64) -> Result<SoftTarget> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::validation(format!("temperature must be positive, got {temperature}")));
    }
    if f1_by_agent.is_empty() {
        return Err(Error::validation("soft targets need at least one agent"));
    }
    if let Some((a, f)) = f1_by_agent.iter().find(|(_, f)| !(0.0..=1.0).contains(*f)) {
        return Err(Error::validation(format!("F1 for {a} out of [0,1]: {f}")));
    }
    let scaled: Vec<f64> = f1_by_agent.values().map(|f| f / temperature).collect();
    Ok(SoftTarget {
        agents: f1_by_agent.keys().cloned().collect(),
        probs: loss::log_softmax(&scaled).into_iter().map(f64::exp).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub layers: usize,
    pub hidden: usize,
    pub dropout: f64,
    pub learning_rate: f64,
    pub temperature: f64,
    pub label_smoothing: f64,
    pub lambda_bb: f64,
    pub lambda_ent: f64,
    pub aux_smoothing: f64,
    pub epochs: usize,
    pub patience: usize,
    /// Graphs per optimizer step.
    pub accumulate: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            hidden: 256,
            dropout: 0.2,
            learning_rate: 1e-4,
            temperature: 0.25,
            label_smoothing: 1e-3,
            lambda_bb: 0.02,
            lambda_ent: 1e-3,
            aux_smoothing: 0.05,
            epochs: 20,
            patience: 5,
            accumulate: 1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must lie in [0,1), got {v}")))
            }
        };
        unit("dropout", self.dropout)?;
        unit("label_smoothing", self.label_smoothing)?;
        unit("aux_smoothing", self.aux_smoothing)?;
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        if !(self.learning_rate >= 0.0) || self.lambda_bb < 0.0 || self.lambda_ent < 0.0 {
            return Err(Error::Config("learning rate and regularizer weights must be non-negative".into()));
        }
        if self.layers == 0 || self.hidden == 0 || self.epochs == 0 || self.accumulate == 0 {
            return Err(Error::Config("layers, hidden, epochs and accumulate must be positive".into()));
        }
        Ok(())
    }

    pub fn shape(&self, input_dim: usize, categories: Vec<String>) -> ParamShape {
        ParamShape {
            input_dim,
            hidden: self.hidden,
            layers: self.layers,
            categories,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Eval,
    /// Dropout active, mask drawn from this seed.
    Train { seed: u64 },
}

fn check_graph(params: &RouterParams, graph: &TypedGraph) -> Result<()> {
    let d = graph.feature_dim();
    if d != params.shape.input_dim {
        return Err(Error::validation(format!(
            "graph feature dimension {d} does not match router input dimension {}",
            params.shape.input_dim
        )));
    }
    if graph.agent_ids().is_empty() {
        return Err(Error::validation("graph has no agent nodes"));
    }
    Ok(())
}

pub(crate) fn run_forward(params: &RouterParams, g: &PreparedGraph, mode: Mode, dropout: f64) -> Tape {
    match mode {
        Mode::Eval => model::forward_tape(params, g, None),
        Mode::Train { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            model::forward_tape(params, g, Some((dropout, &mut rng)))
        }
    }
}

/// Routing distribution for one graph. Train mode applies dropout at `dropout`.
pub fn forward_with(params: &RouterParams, graph: &TypedGraph, mode: Mode, dropout: f64) -> Result<RoutingDistribution> {
    check_graph(params, graph)?;
    let prepared = PreparedGraph::new(graph);
    let tape = run_forward(params, &prepared, mode, dropout);
    Ok(RoutingDistribution::from_scores(
        graph.agent_ids(),
        tape.scores.to_vec(),
        tape.aux_logits.to_vec(),
    ))
}

/// Full forward record (scores, aux logits, activations) for one graph.
pub fn trace(params: &RouterParams, graph: &TypedGraph, mode: Mode, dropout: f64) -> Result<Tape> {
    check_graph(params, graph)?;
    Ok(run_forward(params, &PreparedGraph::new(graph), mode, dropout))
}

/// Routing distribution in eval mode.
pub fn forward(params: &RouterParams, graph: &TypedGraph) -> Result<RoutingDistribution> {
    forward_with(params, graph, Mode::Eval, 0.0)
}

/// Total loss and its gradient w.r.t. every parameter.
pub fn backward(
    params: &RouterParams,
    graph: &TypedGraph,
    target: &SoftTarget,
    config: &TrainConfig,
    aux_target: Option<usize>,
    mode: Mode,
) -> Result<(LossBreakdown, RouterParams)> {
    check_graph(params, graph)?;
    let prepared = PreparedGraph::new(graph);
    let mut grad = params.zeros_like();
    let breakdown = train::accumulate_gradient(params, &prepared, &graph.agent_ids(), target, aux_target, config, mode, &mut grad)?;
    if let Some(name) = grad.first_non_finite() {
        return Err(Error::Numerical(format!("{name} (non-finite gradient)")));
    }
    Ok((breakdown, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::QAInstance;
    use crate::graph::{build_graph, embed_graph, GraphConfig, HashEmbedder};

    fn agents(n: usize) -> Vec<AgentId> {
        let mut ids: Vec<AgentId> = (0..n).map(|i| AgentId::new(format!("b{}", i % 2), format!("r{i}"))).collect();
        ids.sort();
        ids
    }

    fn graph(context: &str, agents: &[AgentId]) -> TypedGraph {
        let inst = QAInstance {
            id: "q".into(),
            question: "Who met Ann Lee?".into(),
            context: context.into(),
            gold_answers: vec!["Bo".into()],
            category: None,
        };
        let ents = crate::graph::CapitalizedRunExtractor::default().extract(&inst.context);
        let mut g = build_graph(&inst, &ents, &Default::default(), agents, &GraphConfig::default()).unwrap();
        embed_graph(&mut g, &HashEmbedder { dim: 32 }, &Default::default()).unwrap();
        g
    }

    fn shape() -> ParamShape {
        ParamShape {
            input_dim: 32,
            hidden: 8,
            layers: 2,
            categories: vec!["who".into(), "what".into()],
        }
    }

    use crate::graph::EntityExtractor;

    #[test]
    fn soft_target_examples() {
        let a = AgentId::new("x", "a");
        let b = AgentId::new("x", "b");
        let t = soft_targets(&BTreeMap::from([(a.clone(), 0.7), (b.clone(), 0.7)]), 0.25).unwrap();
        assert!((t.probs[0] - 0.5).abs() < 1e-12);
        let t = soft_targets(&BTreeMap::from([(a.clone(), 1.0), (b.clone(), 0.5)]), 0.25).unwrap();
        assert!((t.probs[0] - 0.8808).abs() < 1e-4);
        assert!((t.probs[1] - 0.1192).abs() < 1e-4);
        assert!(soft_targets(&BTreeMap::from([(a, 1.0), (b, 0.5)]), 0.0).is_err());
    }

    #[test]
    fn forward_without_entities() {
        let ids = agents(5);
        let g = graph("nothing capitalized here", &ids);
        let p = RouterParams::init(&shape(), 3);
        let d = forward(&p, &g).unwrap();
        assert_eq!(d.agents, ids);
        assert!((d.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(d.probs.iter().all(|&x| x > 0.0));
        let again = forward(&p, &g).unwrap();
        assert_eq!(d, again);
    }

    #[test]
    fn identical_agents_get_uniform_probs() {
        let ids = agents(4);
        let mut g = graph("Ann Lee met Bo Chan in Paris.", &ids);
        let feat = g.nodes[1].feat.clone();
        for node in &mut g.nodes[1..=4] {
            node.feat = feat.clone();
        }
        let d = forward(&RouterParams::init(&shape(), 9), &g).unwrap();
        for p in &d.probs {
            assert!((p - 0.25).abs() < 1e-5);
        }
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let g = graph("Ann Lee", &agents(2));
        let mut s = shape();
        s.input_dim = 16;
        assert!(matches!(forward(&RouterParams::init(&s, 1), &g), Err(Error::Validation(_))));
    }

    #[test]
    fn gate_gradient_zero_without_edges() {
        let ids = agents(3);
        let g = graph("nothing capitalized here", &ids);
        let p = RouterParams::init(&shape(), 4);
        let target = SoftTarget {
            agents: ids.clone(),
            probs: vec![0.6, 0.3, 0.1],
        };
        let (_, grad) = backward(&p, &g, &target, &TrainConfig::default(), Some(0), Mode::Eval).unwrap();
        for layer in &grad.layers {
            // only query-agent edges exist
            assert_eq!(layer.gate[0], 0.0);
            assert_eq!(layer.gate[1], 0.0);
            assert_eq!(layer.gate[2], 0.0);
            assert_ne!(layer.gate[3], 0.0);
        }
    }
}
