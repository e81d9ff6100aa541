//! Versioned JSON graph files: `{version, nodes:[{id,type,label,feat}], edges:[{src,rel,dst}]}`.

use serde::{Deserialize, Serialize};

use super::{Edge, Node, NodeKind, TypedGraph};
use crate::error::{Error, Result};

pub const GRAPH_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct NodeRecord {
    id: usize,
    #[serde(rename = "type")]
    kind: NodeKind,
    label: String,
    feat: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct GraphRecord {
    version: u32,
    #[serde(default)]
    instance: String,
    nodes: Vec<NodeRecord>,
    edges: Vec<Edge>,
}

pub fn serialize_graph(graph: &TypedGraph) -> Result<Vec<u8>> {
    let record = GraphRecord {
        version: GRAPH_FORMAT_VERSION,
        instance: graph.instance_id.clone(),
        nodes: graph
            .nodes
            .iter()
            .enumerate()
            .map(|(id, n)| NodeRecord {
                id,
                kind: n.kind,
                label: n.label.clone(),
                feat: n.feat.clone(),
            })
            .collect(),
        edges: graph.edges.clone(),
    };
    Ok(serde_json::to_vec(&record)?)
}

pub fn deserialize_graph(bytes: &[u8]) -> Result<TypedGraph> {
    let value: serde_json::Value = serde_json::from_slice(bytes)?;
    match value.get("version").and_then(serde_json::Value::as_u64) {
        Some(v) if v == u64::from(GRAPH_FORMAT_VERSION) => {}
        other => {
            return Err(Error::Version {
                found: other.map_or_else(|| "<missing>".to_string(), |v| v.to_string()),
                expected: GRAPH_FORMAT_VERSION.to_string(),
            })
        }
    }
    let record: GraphRecord = serde_json::from_value(value)?;
    let mut nodes = Vec::with_capacity(record.nodes.len());
    for (pos, n) in record.nodes.into_iter().enumerate() {
        if n.id != pos {
            return Err(Error::validation(format!(
                "node ids must be dense and ordered; found id {} at position {pos}",
                n.id
            )));
        }
        nodes.push(Node {
            kind: n.kind,
            label: n.label,
            feat: n.feat,
        });
    }
    let graph = TypedGraph {
        instance_id: record.instance,
        nodes,
        edges: record.edges,
    };
    graph.validate()?;
    Ok(graph)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::AgentId;
    use crate::dataset::QAInstance;
    use crate::graph::{build_graph, embed_graph, CapitalizedRunExtractor, EntityExtractor, GraphConfig, HashEmbedder};

    fn sample() -> TypedGraph {
        let inst = QAInstance {
            id: "s".into(),
            question: "Did Ann Lee meet Bo Chan?".into(),
            context: "Ann Lee met Bo Chan in Paris.".into(),
            gold_answers: vec!["yes".into()],
            category: None,
        };
        let ents = CapitalizedRunExtractor::default().extract(&inst.context);
        let agents = vec![AgentId::new("m", "raw"), AgentId::new("m", "cot")];
        let mut g = build_graph(&inst, &ents, &Default::default(), &agents, &GraphConfig::default()).unwrap();
        embed_graph(&mut g, &HashEmbedder { dim: 16 }, &Default::default()).unwrap();
        g
    }

    #[test]
    fn round_trip_is_identity() {
        let g = sample();
        let bytes = serialize_graph(&g).unwrap();
        assert_eq!(deserialize_graph(&bytes).unwrap(), g);
    }

    #[test]
    fn unknown_version_rejected() {
        let g = sample();
        let mut v: serde_json::Value = serde_json::from_slice(&serialize_graph(&g).unwrap()).unwrap();
        v["version"] = 99.into();
        let err = deserialize_graph(&serde_json::to_vec(&v).unwrap()).unwrap_err();
        assert!(matches!(err, Error::Version { .. }));
    }

    #[test]
    fn dangling_edge_rejected() {
        let g = sample();
        let mut v: serde_json::Value = serde_json::from_slice(&serialize_graph(&g).unwrap()).unwrap();
        v["edges"][0]["dst"] = 999.into();
        let err = deserialize_graph(&serde_json::to_vec(&v).unwrap()).unwrap_err();
        assert!(matches!(err, Error::Validation(_)), "{err}");
    }
}
