//! Train a small router, start the HTTP service and query it.

use std::sync::Arc;

use agent_router::config::RunConfig;
use agent_router::dataset::write_dataset;
use agent_router::pipeline::{self, Context};
use agent_router::service::{spawn, ServiceState};
use agent_router::synthetic::generate;
use serde_json::json;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let root = std::env::temp_dir().join(format!("agent-router-serve-{}", std::process::id()));
    std::fs::create_dir_all(root.join("data"))?;
    for (name, n, seed) in [("train", 120, 1), ("val", 40, 2), ("test", 40, 3)] {
        write_dataset(&root.join(format!("data/{name}.jsonl")), &generate(n, seed, &format!("{name}-")))?;
    }
    let config = RunConfig::from_toml(
        "[paths]\ntrain = \"data/train.jsonl\"\nval = \"data/val.jsonl\"\ntest = \"data/test.jsonl\"\nrun_dir = \"run\"\n[train]\nhidden = 32\nepochs = 3\n",
        &root,
    )?;
    let ctx = Context::open(config)?;
    pipeline::prepare(&ctx)?;
    pipeline::score_agents(&ctx)?;
    pipeline::train(&ctx)?;
    pipeline::tune(&ctx)?;

    let state = Arc::new(ServiceState::load(ctx)?);
    println!("stopping rule: {:?}", state.adaptive);
    let addr = spawn(state, "127.0.0.1:0".parse()?)?;
    println!("listening on {addr}");
    let client = reqwest::blocking::Client::new();
    let base = format!("http://{addr}");
    println!("GET /healthz -> {}", client.get(format!("{base}/healthz")).send()?.text()?);
    let q = &generate(1, 9, "live-")[0];
    let body = json!({ "question": q.question, "context": q.context });
    let route: serde_json::Value = client.post(format!("{base}/route")).json(&body).send()?.json()?;
    let top = route["agents"].as_array().and_then(|a| a.first()).cloned().unwrap_or_default();
    println!("POST /route -> top agent {} (prob {})", top["agent"], top["prob"]);
    let answer: serde_json::Value = client.post(format!("{base}/answer")).json(&body).send()?.json()?;
    println!(
        "POST /answer -> answer {} after {} call(s), agreement trace {} (gold {:?})",
        answer["answer"], answer["k_star"], answer["agreement_trace"], q.gold_answers
    );
    let bad = client.post(format!("{base}/route")).body("not json").header("content-type", "application/json").send()?;
    println!("malformed body -> HTTP {}", bad.status());
    Ok(())
}
