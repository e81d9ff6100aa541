//! Glue between compiled graphs, pool scores and the router.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;

use crate::agent::AgentId;
use crate::dataset::QAInstance;
use crate::error::{Error, Result};
use crate::graph::{
    build_graph, embed_graph, refresh_agent_features, AgentViewProvider, Embedder, EntityExtractor, GraphConfig,
    TypedGraph,
};
use crate::pool::PoolEvaluation;
use crate::router::{
    forward, soft_targets, train, RouterParams, RoutingDistribution, TrainConfig, TrainExample, TrainedRouter,
    ValExample,
};

/// Extract, build and embed the graph for one instance.
pub fn compile_graph(
    instance: &QAInstance,
    extractor: &dyn EntityExtractor,
    views: &dyn AgentViewProvider,
    agents: &[AgentId],
    config: &GraphConfig,
    embedder: &dyn Embedder,
    prompts: &BTreeMap<AgentId, String>,
) -> Result<TypedGraph> {
    let mut entities = extractor.extract(&instance.context);
    entities.truncate(config.max_entities);
    let agent_views = views.views(instance, &entities, agents)?;
    let mut graph = build_graph(instance, &entities, &agent_views, agents, config)?;
    embed_graph(&mut graph, embedder, prompts)?;
    Ok(graph)
}

/// [`compile_graph`] over many instances, in parallel, preserving order.
pub fn compile_all(
    instances: &[QAInstance],
    extractor: &dyn EntityExtractor,
    views: &dyn AgentViewProvider,
    agents: &[AgentId],
    config: &GraphConfig,
    embedder: &dyn Embedder,
    prompts: &BTreeMap<AgentId, String>,
) -> Result<Vec<TypedGraph>> {
    instances
        .par_iter()
        .map(|inst| compile_graph(inst, extractor, views, agents, config, embedder, prompts))
        .collect()
}

/// Sorted distinct categories of `instances`.
pub fn categories_of(instances: &[QAInstance]) -> Vec<String> {
    instances
        .iter()
        .map(QAInstance::category)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

/// Train/validation graphs plus the settings needed to (re)train the router.
pub struct RouterWorkspace {
    pub embedder: Box<dyn Embedder>,
    pub train_graphs: Vec<TypedGraph>,
    pub val_graphs: Vec<TypedGraph>,
    pub categories: Vec<String>,
    pub config: TrainConfig,
}

fn column(eval: &PoolEvaluation, id: &str) -> Result<usize> {
    eval.instance_index(id)
        .ok_or_else(|| Error::validation(format!("instance {id} missing from the score matrix")))
}

fn check_agents(graph: &TypedGraph, eval: &PoolEvaluation) -> Result<()> {
    if graph.agent_ids() != eval.agents {
        return Err(Error::validation(format!(
            "graph {} and the score matrix cover different agents",
            graph.instance_id
        )));
    }
    Ok(())
}

impl RouterWorkspace {
    pub fn category_index(&self, instance: &QAInstance) -> Option<usize> {
        self.categories.binary_search(&instance.category()).ok()
    }

    /// Re-embed agent nodes after prompt changes.
    pub fn refresh_prompts(&mut self, prompts: &BTreeMap<AgentId, String>) -> Result<()> {
        let embedder = self.embedder.as_ref();
        for g in self.train_graphs.iter_mut().chain(self.val_graphs.iter_mut()) {
            refresh_agent_features(g, embedder, prompts)?;
        }
        Ok(())
    }

    pub fn train_examples(&self, train: &[QAInstance], eval: &PoolEvaluation) -> Result<Vec<TrainExample>> {
        if train.len() != self.train_graphs.len() {
            return Err(Error::validation("training graphs and instances differ in count"));
        }
        train
            .iter()
            .zip(&self.train_graphs)
            .map(|(inst, g)| {
                check_agents(g, eval)?;
                Ok(TrainExample {
                    graph: g.clone(),
                    target: soft_targets(&eval.f1_by_agent(column(eval, &inst.id)?), self.config.temperature)?,
                    category: self.category_index(inst),
                })
            })
            .collect()
    }

    pub fn val_examples(&self, val: &[QAInstance], eval: &PoolEvaluation) -> Result<Vec<ValExample>> {
        if val.len() != self.val_graphs.len() {
            return Err(Error::validation("validation graphs and instances differ in count"));
        }
        val.iter()
            .zip(&self.val_graphs)
            .map(|(inst, g)| {
                check_agents(g, eval)?;
                Ok(ValExample {
                    graph: g.clone(),
                    gold: inst.gold_answers.clone(),
                    answers: eval.answers(column(eval, &inst.id)?),
                })
            })
            .collect()
    }

    /// Train (or fine-tune from `init`) with this workspace's config.
    pub fn train(
        &self,
        init: Option<RouterParams>,
        config: &TrainConfig,
        train_set: (&[QAInstance], &PoolEvaluation),
        val_set: (&[QAInstance], &PoolEvaluation),
    ) -> Result<TrainedRouter> {
        let examples = self.train_examples(train_set.0, train_set.1)?;
        let val = self.val_examples(val_set.0, val_set.1)?;
        train(init, &self.categories, &examples, &val, config)
    }

    pub fn validation_f1(&self, params: &RouterParams, val: &[QAInstance], eval: &PoolEvaluation) -> Result<f64> {
        crate::router::validation_f1(params, &self.val_examples(val, eval)?)
    }
}

/// Eval-mode distributions keyed by instance id.
pub fn route_all(params: &RouterParams, graphs: &[TypedGraph]) -> Result<BTreeMap<String, RoutingDistribution>> {
    graphs
        .par_iter()
        .map(|g| Ok((g.instance_id.clone(), forward(params, g)?)))
        .collect()
}
