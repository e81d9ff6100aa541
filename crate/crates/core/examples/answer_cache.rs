//! Score a pool twice through the prompt-aware cache, then edit one prompt.

use agent_router::pool::{evaluate_pool, AnswerCache, PoolOptions, PromptVersion};
use agent_router::synthetic::{generate, planted_pool, PlantedConfig};

fn main() -> agent_router::Result<()> {
    let dir = std::env::temp_dir().join(format!("agent-router-cache-{}", std::process::id()));
    let mut pool = planted_pool(&PlantedConfig::default())?;
    let questions = generate(50, 1, "q");
    let opts = PoolOptions::default();
    {
        let cache = AnswerCache::open(&dir)?;
        let cold = evaluate_pool(&pool, &questions, &cache, &opts)?;
        println!("cold pass: {} backend calls, {} entries", cold.backend_calls, cache.len());
    }
    let cache = AnswerCache::open(&dir)?;
    let warm = evaluate_pool(&pool, &questions, &cache, &opts)?;
    println!("warm pass after reopening: {} backend calls", warm.backend_calls);

    let edited = format!("{}\nName the entity exactly as written.", pool[0].prompt.text);
    pool[0].prompt = PromptVersion::new(edited, 1);
    let after = evaluate_pool(&pool, &questions, &cache, &opts)?;
    println!("after editing {}: {} backend calls", pool[0].id, after.backend_calls);
    println!("mean F1 per agent:");
    for (i, a) in after.agents.iter().enumerate() {
        println!("  {a:<12} {:.3}", after.mean_f1(i));
    }
    std::fs::remove_dir_all(&dir).ok();
    Ok(())
}
