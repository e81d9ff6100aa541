//! Generate a seeded synthetic question set and write it as JSONL.

use agent_router::dataset::{load_dataset, write_dataset};
use agent_router::synthetic::{generate, planted_best, PlantedConfig};

fn main() -> agent_router::Result<()> {
    let data = generate(8, 42, "demo-");
    for q in &data {
        println!("[{}] {}  ->  {:?}", q.category(), q.question, q.gold_answers);
    }
    println!("planted specialists:");
    for (cat, agent) in planted_best(&PlantedConfig::default()) {
        println!("  {cat:<6} {agent}");
    }
    let path = std::env::temp_dir().join(format!("agent-router-demo-{}.jsonl", std::process::id()));
    write_dataset(&path, &data)?;
    let back = load_dataset(&path, None)?;
    println!("wrote {} and read back {} instances", path.display(), back.len());
    std::fs::remove_file(&path).ok();
    Ok(())
}
