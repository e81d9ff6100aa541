//! Parse a run configuration, inspect resolved values and a validation error.

use std::path::Path;

use agent_router::config::RunConfig;

fn main() -> agent_router::Result<()> {
    let text = r#"
seed = 11
[paths]
train = "data/train.jsonl"
run_dir = "runs/exp1"
[train]
hidden = 128
epochs = 10
[adaptive]
tau_agree = 0.7
"#;
    let cfg = RunConfig::from_toml(text, Path::new("/srv/project"))?;
    cfg.validate()?;
    println!("train split: {}", cfg.paths.train.display());
    println!("run dir:     {}", cfg.paths.run_dir.display());
    println!("router:      hidden {} layers {} lr {} seed {}", cfg.train.hidden, cfg.train.layers, cfg.train.learning_rate, cfg.train.seed);
    println!("refinement:  {} round(s), temperatures {:?}", cfg.refinement.rounds, cfg.refinement.temperatures);
    println!("adaptive:    {:?}", cfg.adaptive);

    match RunConfig::from_toml("[train]\ndropout = 1.5\n", Path::new(".")) {
        Ok(_) => println!("unexpectedly valid"),
        Err(e) => println!("rejected: {e} (exit code {})", e.exit_code()),
    }
    Ok(())
}
