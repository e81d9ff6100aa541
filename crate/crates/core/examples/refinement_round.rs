//! One closed-loop refinement round on a pool with a sabotaged prompt.

use agent_router::diagnostics::{summarize, DiagnosticsConfig};
use agent_router::graph::{CapitalizedRunExtractor, GraphConfig, HashEmbedder, SeededViews};
use agent_router::pool::{evaluate_pool, AnswerCache, PoolOptions};
use agent_router::refinement::{
    diagnose, run_round, select_targets, Journal, OfflineRewriter, RefinementConfig, RefinementState, RoundInputs,
};
use agent_router::router::TrainConfig;
use agent_router::synthetic::{generate, planted_pool, PlantedConfig};
use agent_router::workspace::{categories_of, compile_all, RouterWorkspace};
use agent_router::AgentId;

fn main() -> agent_router::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let victim = AgentId::new("alpha", "raw");
    let mut pool = planted_pool(&PlantedConfig {
        corrupt: vec![victim.clone()],
        ..PlantedConfig::default()
    })?;
    let agents: Vec<AgentId> = pool.iter().map(|a| a.id.clone()).collect();
    let prompts = pool.iter().map(|a| (a.id.clone(), a.prompt.text.clone())).collect();
    let train = generate(200, 1, "train");
    let val = generate(80, 2, "val");
    let compile = |set| {
        compile_all(
            set,
            &CapitalizedRunExtractor::default(),
            &SeededViews::default(),
            &agents,
            &GraphConfig::default(),
            &HashEmbedder::default(),
            &prompts,
        )
    };
    let mut ws = RouterWorkspace {
        embedder: Box::new(HashEmbedder::default()),
        train_graphs: compile(&train)?,
        val_graphs: compile(&val)?,
        categories: categories_of(&train),
        config: TrainConfig {
            hidden: 64,
            epochs: 6,
            ..TrainConfig::default()
        },
    };
    let cache = AnswerCache::in_memory();
    let opts = PoolOptions::default();
    let train_eval = evaluate_pool(&pool, &train, &cache, &opts)?;
    let val_eval = evaluate_pool(&pool, &val, &cache, &opts)?;
    let trained = ws.train(None, &ws.config, (&train, &train_eval), (&val, &val_eval))?;
    let mut router = trained.params;

    let dcfg = DiagnosticsConfig::default();
    let rcfg = RefinementConfig {
        finetune_epochs: 3,
        ..RefinementConfig::default()
    };
    let bundle = diagnose(&pool, &train, &cache, &opts, &ws, &router, &dcfg)?;
    print!("{}", summarize(&bundle, rcfg.alpha));
    let mut state = RefinementState {
        val_f1: trained.val_f1,
        bundle: Some(bundle),
        ..Default::default()
    };
    println!("targets: {:?}", select_targets(state.bundle.as_ref().unwrap(), &state, &rcfg)?);

    let mut journal = Journal::in_memory();
    let report = run_round(
        &mut state,
        &mut RoundInputs {
            pool: &mut pool,
            train: &train,
            val: &val,
            cache: &cache,
            pool_options: &opts,
            rewriter: &OfflineRewriter,
            workspace: &mut ws,
            router: &mut router,
            config: &rcfg,
            diagnostics: &dcfg,
            journal: &mut journal,
        },
    )?;
    for e in &journal.entries {
        println!("{:<12} {:<18} old {:.3} new {:.3}", e.agent, e.verdict, e.old_mean, e.new_mean);
    }
    println!(
        "accepted {:?}; router val F1 {:?} -> {:?}, reverted {}",
        report.accepted, report.val_before, report.val_after, report.reverted
    );
    let idx = pool.iter().position(|a| a.id == victim).unwrap();
    println!("{victim} prompt is now v{}:\n{}", pool[idx].prompt.version, pool[idx].prompt.text);
    Ok(())
}
