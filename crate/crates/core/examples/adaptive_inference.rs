//! Agreement-based early stopping over a ranked pool, and grid tuning.

use std::collections::BTreeMap;

use agent_router::adaptive::{adaptive_infer, default_grid, tune_adaptive, AdaptiveConfig, TuneExample};
use agent_router::AgentId;

fn main() -> agent_router::Result<()> {
    let agents: Vec<AgentId> = ["raw", "cot", "sc", "mad", "reflect"].iter().map(|r| AgentId::new("m", *r)).collect();
    let ranked: Vec<(AgentId, f64)> = agents.iter().cloned().zip([0.4, 0.25, 0.15, 0.12, 0.08]).collect();
    let replies: BTreeMap<AgentId, &str> = agents.iter().cloned().zip(["Paris", "paris", "Lyon", "Paris", "Nice"]).collect();

    for cfg in [
        AdaptiveConfig { tau_agree: 0.6, k_min: 2, k_max: 5 },
        AdaptiveConfig { tau_agree: 0.9, k_min: 2, k_max: 5 },
        AdaptiveConfig::full_pool(5),
    ] {
        let r = adaptive_infer(&ranked, &cfg, |a| Ok(replies[a].to_string()))?;
        println!(
            "tau {:.1} k_min {} k_max {}: answer {:?} after {} call(s), agreement trace {:?}",
            cfg.tau_agree,
            cfg.k_min,
            cfg.k_max,
            r.answer,
            r.k_star,
            r.agreement_trace.iter().map(|a| format!("{a:.2}")).collect::<Vec<_>>()
        );
    }

    // toy tuning set: the top agent is right 90% of the time, the rest always agree with gold
    let examples: Vec<TuneExample> = (0..20)
        .map(|i| TuneExample {
            ranked: ranked.clone(),
            answers: agents
                .iter()
                .enumerate()
                .map(|(j, a)| (a.clone(), if j == 0 && i % 10 == 0 { "Lyon".into() } else { "Paris".into() }))
                .collect(),
            gold: vec!["Paris".into()],
        })
        .collect();
    let (best, grid) = tune_adaptive(&examples, &default_grid(agents.len()), 0.005)?;
    println!("tuned over {} configurations: {:?}", grid.len(), best.config);
    println!("F1 {:.3}, mean calls {:.2}", best.f1, best.mean_calls);
    Ok(())
}
