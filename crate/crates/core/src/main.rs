use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};
use serde::Serialize;

use agent_router::config::RunConfig;
use agent_router::dataset::write_dataset;
use agent_router::pipeline::{self, AdaptiveOverrides, Context, EvalOptions, Split};
use agent_router::service::{self, ServiceState};
use agent_router::synthetic::generate;
use agent_router::{Error, Result};

#[derive(Parser)]
#[command(name = "agent-router", version, about = "Graph routing over LLM agent pools")]
struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Override the run directory.
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
    /// Override the master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Read at most N instances per split.
    #[arg(long, global = true)]
    limit: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build one graph per instance of every split.
    Prepare {
        /// Write seeded synthetic splits to the configured paths first (missing files only).
        #[arg(long)]
        synthetic: bool,
    },
    /// Run every agent on the training and validation splits.
    ScoreAgents,
    /// Train the router and write the checkpoint and diagnostics.
    Train,
    /// Recompute diagnostics and print the report.
    Diagnose,
    /// Run prompt refinement rounds.
    Refine {
        #[arg(long)]
        rounds: Option<usize>,
    },
    /// Grid-search the stopping rule on the validation split.
    TuneAdaptive,
    /// Adaptive inference over a split.
    Infer {
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long)]
        kmin: Option<usize>,
        #[arg(long)]
        kmax: Option<usize>,
    },
    /// Score predictions against gold answers.
    Eval {
        #[arg(long, default_value = "test")]
        split: Split,
        /// Predictions file; defaults to the run's predictions for the split.
        #[arg(long)]
        predictions: Option<PathBuf>,
        /// Also score the full-pool weighted vote.
        #[arg(long)]
        baseline: bool,
        /// Retrain and re-infer per seed and report the mean.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// All stages in order.
    Run,
    /// HTTP service for routing and answering.
    Serve {
        #[arg(long)]
        bind: Option<SocketAddr>,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut config = match &cli.config {
        Some(path) if !path.exists() => {
            return Err(Error::Config(format!("config file {} not found", path.display())));
        }
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(dir) = &cli.run_dir {
        config.paths.run_dir = dir.clone();
    }
    if let Some(seed) = cli.seed {
        config.seed = seed;
        config.apply_seed();
    }
    if cli.limit.is_some() {
        config.paths.limit = cli.limit;
    }
    config.validate()?;
    Ok(config)
}

fn print<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn write_synthetic(ctx: &Context) -> Result<()> {
    for (split, n, seed) in [(Split::Train, 400, 1), (Split::Val, 100, 2), (Split::Test, 200, 3)] {
        let path = ctx.split_path(split);
        if !path.exists() {
            if let Some(dir) = path.parent() {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            let seed = ctx.config.seed.wrapping_mul(1000).wrapping_add(seed);
            write_dataset(path, &generate(n, seed, &format!("{}-", split.name())))?;
            log::info!("wrote {n} synthetic {} instances to {}", split.name(), path.display());
        }
    }
    Ok(())
}

fn execute(cli: Cli) -> Result<()> {
    let config = load_config(&cli)?;
    let ctx = Context::open(config)?;
    match cli.command {
        Command::Prepare { synthetic } => {
            if synthetic {
                write_synthetic(&ctx)?;
            }
            print(&pipeline::prepare(&ctx)?)
        }
        Command::ScoreAgents => print(&pipeline::score_agents(&ctx)?),
        Command::Train => {
            let report = pipeline::train(&ctx)?;
            for e in &report.history {
                println!(
                    "epoch {:>3}  loss {:.4}  val F1 {:.4}  lr {:.1e}",
                    e.epoch, e.train_loss, e.val_f1, e.lr
                );
            }
            println!("best epoch {} (val F1 {:.4})", report.epoch, report.val_f1);
            Ok(())
        }
        Command::Diagnose => {
            print!("{}", pipeline::diagnose_cmd(&ctx)?);
            Ok(())
        }
        Command::Refine { rounds } => print(&pipeline::refine(&ctx, rounds)?),
        Command::TuneAdaptive => {
            let report = pipeline::tune(&ctx)?;
            print(&(&report.best, &report.full_pool))
        }
        Command::Infer { split, tau, kmin, kmax } => print(&pipeline::infer(
            &ctx,
            split,
            AdaptiveOverrides {
                tau_agree: tau,
                k_min: kmin,
                k_max: kmax,
            },
        )?),
        Command::Eval {
            split,
            predictions,
            baseline,
            seeds,
        } => {
            let summary = pipeline::eval(
                &ctx,
                &EvalOptions {
                    split: Some(split),
                    predictions,
                    baseline,
                    seeds,
                },
            )?;
            print!("{}", summary.table());
            Ok(())
        }
        Command::Run => {
            let report = pipeline::run(&ctx)?;
            println!(
                "trained to epoch {} (val F1 {:.4}); {} refinement round(s)",
                report.train.epoch,
                report.train.val_f1,
                report.rounds.len()
            );
            print!("{}", report.eval.table());
            Ok(())
        }
        Command::Serve { bind } => {
            let addr = match bind {
                Some(a) => a,
                None => ctx
                    .config
                    .serve
                    .bind
                    .parse()
                    .map_err(|e| Error::Config(format!("[serve] bind: {e}")))?,
            };
            let state = Arc::new(ServiceState::load(ctx)?);
            let rt = tokio::runtime::Runtime::new().map_err(|e| Error::Config(e.to_string()))?;
            rt.block_on(service::serve(state, addr))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
