#![allow(dead_code)]

use std::collections::BTreeMap;

use agent_router::adaptive::{rank_agents, TuneExample};
use agent_router::dataset::QAInstance;
use agent_router::graph::{CapitalizedRunExtractor, GraphConfig, HashEmbedder, SeededViews, TypedGraph};
use agent_router::pool::{evaluate_pool, AgentSpec, AnswerCache, PoolEvaluation, PoolOptions};
use agent_router::router::{forward, RouterParams, TrainConfig};
use agent_router::synthetic::generate;
use agent_router::workspace::{categories_of, compile_all, RouterWorkspace};
use agent_router::AgentId;

/// Planted pool plus the three splits, their graphs and score matrices.
pub struct Planted {
    pub pool: Vec<AgentSpec>,
    pub train: Vec<QAInstance>,
    pub val: Vec<QAInstance>,
    pub test: Vec<QAInstance>,
    pub ws: RouterWorkspace,
    pub test_graphs: Vec<TypedGraph>,
    pub cache: AnswerCache,
    pub train_eval: PoolEvaluation,
    pub val_eval: PoolEvaluation,
}

pub fn prompts(pool: &[AgentSpec]) -> BTreeMap<AgentId, String> {
    pool.iter().map(|a| (a.id.clone(), a.prompt.text.clone())).collect()
}

pub fn compile(pool: &[AgentSpec], set: &[QAInstance]) -> Vec<TypedGraph> {
    let agents: Vec<AgentId> = pool.iter().map(|a| a.id.clone()).collect();
    compile_all(
        set,
        &CapitalizedRunExtractor::default(),
        &SeededViews::default(),
        &agents,
        &GraphConfig::default(),
        &HashEmbedder::default(),
        &prompts(pool),
    )
    .unwrap()
}

pub fn planted(pool: Vec<AgentSpec>, sizes: (usize, usize, usize)) -> Planted {
    let train = generate(sizes.0, 1, "train");
    let val = generate(sizes.1, 2, "val");
    let test = generate(sizes.2, 3, "test");
    let ws = RouterWorkspace {
        embedder: Box::new(HashEmbedder::default()),
        train_graphs: compile(&pool, &train),
        val_graphs: compile(&pool, &val),
        categories: categories_of(&train),
        config: TrainConfig::default(),
    };
    let test_graphs = compile(&pool, &test);
    let cache = AnswerCache::in_memory();
    let opts = PoolOptions::default();
    let train_eval = evaluate_pool(&pool, &train, &cache, &opts).unwrap();
    let val_eval = evaluate_pool(&pool, &val, &cache, &opts).unwrap();
    Planted {
        pool,
        train,
        val,
        test,
        ws,
        test_graphs,
        cache,
        train_eval,
        val_eval,
    }
}

/// Router ranking plus every agent's recorded answer, per instance.
pub fn tune_examples(
    params: &RouterParams,
    graphs: &[TypedGraph],
    instances: &[QAInstance],
    eval: &PoolEvaluation,
) -> Vec<TuneExample> {
    instances
        .iter()
        .zip(graphs)
        .map(|(inst, g)| {
            let col = eval.instance_index(&inst.id).unwrap();
            TuneExample {
                ranked: rank_agents(&forward(params, g).unwrap()),
                answers: eval.agents.iter().cloned().zip(eval.answers(col)).collect(),
                gold: inst.gold_answers.clone(),
            }
        })
        .collect()
}
