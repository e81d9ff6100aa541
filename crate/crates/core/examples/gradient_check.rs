//! Compare analytic router gradients with central differences on a tiny model.

use std::collections::BTreeMap;

use agent_router::dataset::QAInstance;
use agent_router::graph::{
    build_graph, embed_graph, AgentViewProvider, CapitalizedRunExtractor, EntityExtractor, GraphConfig, HashEmbedder,
    SeededViews,
};
use agent_router::router::{backward, forward_with, loss, soft_targets, Mode, RouterParams, TrainConfig};
use agent_router::AgentId;

fn main() -> agent_router::Result<()> {
    let cfg = TrainConfig {
        hidden: 8,
        layers: 2,
        dropout: 0.0,
        ..TrainConfig::default()
    };
    let agents: Vec<AgentId> = vec![AgentId::new("alpha", "cot"), AgentId::new("alpha", "raw"), AgentId::new("beta", "raw")];
    let inst = QAInstance {
        id: "g".into(),
        question: "Who met Ann Lee near Port Vale?".into(),
        context: "Ann Lee met Bo Rask at Port Vale.".into(),
        gold_answers: vec!["Bo Rask".into()],
        category: Some("who".into()),
    };
    let entities = CapitalizedRunExtractor::default().extract(&inst.context);
    let views = SeededViews { seed: 11, rate: 0.5 }.views(&inst, &entities, &agents)?;
    let mut graph = build_graph(&inst, &entities, &views, &agents, &GraphConfig::default())?;
    embed_graph(&mut graph, &HashEmbedder { dim: 16 }, &BTreeMap::new())?;

    let params = RouterParams::init(&cfg.shape(16, vec!["what".into(), "who".into()]), 11);
    let f1: BTreeMap<AgentId, f64> = agents.iter().cloned().zip([1.0, 0.3, 0.0]).collect();
    let target = soft_targets(&f1, cfg.temperature)?;
    let (breakdown, grad) = backward(&params, &graph, &target, &cfg, Some(1), Mode::Eval)?;
    println!("loss {:.6} (kl {:.6}, aux {:.6})", breakdown.total, breakdown.kl, breakdown.aux);

    let objective = |p: &RouterParams| -> agent_router::Result<f64> {
        Ok(loss(&forward_with(p, &graph, Mode::Eval, 0.0)?, &target, &cfg, Some(1))?.total)
    };
    let h = 1e-5;
    let grads: Vec<Vec<f64>> = grad.tensors().into_iter().map(|(_, t)| t.iter().copied().collect()).collect();
    let mut probe = params.clone();
    let names: Vec<String> = params.tensors().into_iter().map(|(n, _)| n).collect();
    for (ti, name) in names.iter().enumerate() {
        let (c, analytic) = grads[ti]
            .iter()
            .copied()
            .enumerate()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
            .unwrap();
        let nudge = |p: &mut RouterParams, d: f64| {
            *p.tensors_mut()[ti].1.iter_mut().nth(c).unwrap() += d;
        };
        nudge(&mut probe, h);
        let up = objective(&probe)?;
        nudge(&mut probe, -2.0 * h);
        let down = objective(&probe)?;
        nudge(&mut probe, h);
        let numeric = (up - down) / (2.0 * h);
        println!("{name:<32} [{c:>4}] analytic {analytic:>12.4e}  numeric {numeric:>12.4e}");
    }
    Ok(())
}
