//! All pipeline stages on a small synthetic run directory.

use agent_router::config::RunConfig;
use agent_router::dataset::write_dataset;
use agent_router::pipeline::{self, Context};
use agent_router::synthetic::generate;

fn main() -> agent_router::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let root = std::env::temp_dir().join(format!("agent-router-pipeline-{}", std::process::id()));
    std::fs::create_dir_all(root.join("data")).map_err(|e| agent_router::Error::io(&root, e))?;
    for (name, n, seed) in [("train", 160, 1), ("val", 60, 2), ("test", 60, 3)] {
        write_dataset(&root.join(format!("data/{name}.jsonl")), &generate(n, seed, &format!("{name}-")))?;
    }
    let config = RunConfig::from_toml(
        r#"
seed = 3
[paths]
train = "data/train.jsonl"
val = "data/val.jsonl"
test = "data/test.jsonl"
run_dir = "run"
[train]
hidden = 64
epochs = 5
[refinement]
rounds = 1
finetune_epochs = 2
"#,
        &root,
    )?;
    let ctx = Context::open(config)?;
    let report = pipeline::run(&ctx)?;
    println!("graphs built: {}", report.prepare.built);
    println!("router: best epoch {} (val F1 {:.3})", report.train.epoch, report.train.val_f1);
    for r in &report.rounds {
        println!("round {}: targets {:?}, accepted {:?}", r.round, r.targets, r.accepted);
    }
    println!("tuned stopping rule: {:?}", report.tune.config);
    print!("{}", report.eval.table());
    println!("artifacts in {}", root.join("run").display());
    Ok(())
}
