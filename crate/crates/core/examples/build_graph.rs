//! Build, embed and round-trip one typed query graph.

use std::collections::BTreeMap;

use agent_router::dataset::QAInstance;
use agent_router::graph::{
    build_graph, deserialize_graph, embed_graph, serialize_graph, AgentViewProvider, CapitalizedRunExtractor,
    EntityExtractor, GraphConfig, HashEmbedder, NodeKind, Relation, SeededViews,
};
use agent_router::AgentId;

fn main() -> agent_router::Result<()> {
    let inst = QAInstance {
        id: "demo".into(),
        question: "Which river flows through Vienna and Budapest?".into(),
        context: "The Danube passes Vienna before reaching Budapest and the Black Sea.".into(),
        gold_answers: vec!["Danube".into()],
        category: None,
    };
    let agents: Vec<AgentId> = ["alpha", "beta"]
        .iter()
        .flat_map(|b| ["raw", "cot", "sc"].iter().map(move |r| AgentId::new(*b, *r)))
        .collect();
    let entities = CapitalizedRunExtractor::default().extract(&inst.context);
    println!("entities: {:?}", entities.iter().map(|e| e.surface.as_str()).collect::<Vec<_>>());

    let views = SeededViews { seed: 1, rate: 0.5 }.views(&inst, &entities, &agents)?;
    let mut graph = build_graph(&inst, &entities, &views, &agents, &GraphConfig::default())?;
    let prompts: BTreeMap<AgentId, String> = BTreeMap::new();
    embed_graph(&mut graph, &HashEmbedder::default(), &prompts)?;
    graph.validate()?;

    for kind in [NodeKind::Query, NodeKind::Entity, NodeKind::Agent] {
        println!("{kind:?} nodes: {}", graph.count(kind));
    }
    for rel in Relation::ALL {
        println!("{rel:?} edges: {}", graph.relation_count(rel));
    }
    let bytes = serialize_graph(&graph)?;
    let back = deserialize_graph(&bytes)?;
    println!("serialized {} bytes, feature dim {}, round-trip equal: {}", bytes.len(), graph.feature_dim(), back == graph);
    Ok(())
}
