//! Train the router on a planted synthetic pool and report top-1 recovery.

use std::collections::BTreeMap;
use std::time::Instant;

use agent_router::graph::{CapitalizedRunExtractor, GraphConfig, HashEmbedder, SeededViews};
use agent_router::pool::{evaluate_pool, AnswerCache, PoolOptions};
use agent_router::router::{forward, TrainConfig};
use agent_router::synthetic::{generate, planted_best, planted_pool, PlantedConfig};
use agent_router::workspace::{categories_of, compile_all, RouterWorkspace};

fn main() -> agent_router::Result<()> {
    env_logger::init();
    let planted = PlantedConfig::default();
    let pool = planted_pool(&planted)?;
    let best = planted_best(&planted);
    let agents: Vec<_> = pool.iter().map(|a| a.id.clone()).collect();
    let prompts: BTreeMap<_, _> = pool.iter().map(|a| (a.id.clone(), a.prompt.text.clone())).collect();
    let train = generate(400, 1, "train");
    let val = generate(100, 2, "val");
    let test = generate(200, 3, "test");

    let embedder = HashEmbedder::default();
    let extractor = CapitalizedRunExtractor::default();
    let views = SeededViews::default();
    let gc = GraphConfig::default();
    let compile = |set| compile_all(set, &extractor, &views, &agents, &gc, &embedder, &prompts);
    let ws = RouterWorkspace {
        embedder: Box::new(embedder.clone()),
        train_graphs: compile(&train)?,
        val_graphs: compile(&val)?,
        categories: categories_of(&train),
        config: TrainConfig::default(),
    };
    let cache = AnswerCache::in_memory();
    let opts = PoolOptions::default();
    let train_eval = evaluate_pool(&pool, &train, &cache, &opts)?;
    let val_eval = evaluate_pool(&pool, &val, &cache, &opts)?;

    let start = Instant::now();
    let trained = ws.train(None, &ws.config, (&train, &train_eval), (&val, &val_eval))?;
    println!("trained in {:.1?}, best epoch {} val F1 {:.4}", start.elapsed(), trained.epoch, trained.val_f1);

    let test_graphs = compile(&test)?;
    let hits = test
        .iter()
        .zip(&test_graphs)
        .filter(|(inst, g)| {
            let dist = forward(&trained.params, g).expect("forward");
            dist.top() == Some(&best[&inst.category()])
        })
        .count();
    println!("top-1 matches planted specialist on {hits}/{} held-out questions", test.len());
    Ok(())
}
