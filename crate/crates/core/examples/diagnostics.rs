//! Train a small router and print the per-agent diagnostics report.

use agent_router::config::RunConfig;
use agent_router::dataset::write_dataset;
use agent_router::pipeline::{self, Context};
use agent_router::synthetic::generate;

fn main() -> agent_router::Result<()> {
    let root = std::env::temp_dir().join(format!("agent-router-diag-{}", std::process::id()));
    std::fs::create_dir_all(root.join("data")).map_err(|e| agent_router::Error::io(&root, e))?;
    for (name, n, seed) in [("train", 160, 1), ("val", 60, 2), ("test", 20, 3)] {
        write_dataset(&root.join(format!("data/{name}.jsonl")), &generate(n, seed, &format!("{name}-")))?;
    }
    let config = RunConfig::from_toml(
        "[paths]\ntrain = \"data/train.jsonl\"\nval = \"data/val.jsonl\"\ntest = \"data/test.jsonl\"\nrun_dir = \"run\"\n[train]\nhidden = 64\nepochs = 4\n",
        &root,
    )?;
    let ctx = Context::open(config)?;
    pipeline::prepare(&ctx)?;
    pipeline::score_agents(&ctx)?;
    pipeline::train(&ctx)?;
    print!("{}", pipeline::diagnose_cmd(&ctx)?);
    std::fs::remove_dir_all(&root).ok();
    Ok(())
}
