//! Typed knowledge graphs compiled from QA instances.
//!
//! Node order is fixed: the query node first, then agent nodes sorted by
//! agent id, then entity nodes by first span offset. The router relies on
//! each node type occupying a contiguous block.

mod embed;
mod extract;
mod io;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use embed::{embed_graph, refresh_agent_features, Embedder, HashEmbedder};
pub use extract::{CapitalizedRunExtractor, EntityExtractor, EntityMention};
pub use io::{deserialize_graph, serialize_graph, GRAPH_FORMAT_VERSION};

use crate::agent::AgentId;
use crate::dataset::QAInstance;
use crate::error::{Error, Result};
use crate::metrics::normalize_answer;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Query,
    Agent,
    Entity,
}

impl NodeKind {
    pub const ALL: [NodeKind; 3] = [NodeKind::Query, NodeKind::Agent, NodeKind::Entity];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    QueryEntity,
    EntityEntity,
    AgentEntity,
    QueryAgent,
}

impl Relation {
    pub const ALL: [Relation; 4] = [
        Relation::QueryEntity,
        Relation::EntityEntity,
        Relation::AgentEntity,
        Relation::QueryAgent,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Unordered pair of endpoint kinds this relation may connect.
    fn endpoints(self) -> (NodeKind, NodeKind) {
        match self {
            Relation::QueryEntity => (NodeKind::Query, NodeKind::Entity),
            Relation::EntityEntity => (NodeKind::Entity, NodeKind::Entity),
            Relation::AgentEntity => (NodeKind::Agent, NodeKind::Entity),
            Relation::QueryAgent => (NodeKind::Query, NodeKind::Agent),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub kind: NodeKind,
    pub label: String,
    pub feat: Vec<f64>,
}

/// Directed edge. Undirected relations are stored once per direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Edge {
    pub src: usize,
    pub rel: Relation,
    pub dst: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TypedGraph {
    pub instance_id: String,
    pub nodes: Vec<Node>,
    pub edges: Vec<Edge>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GraphConfig {
    /// Two entities are linked when occurrences start within this many bytes.
    pub cooccurrence_window: usize,
    pub max_entities: usize,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self {
            cooccurrence_window: 200,
            max_entities: 64,
        }
    }
}

impl TypedGraph {
    pub const QUERY: usize = 0;

    pub fn node_range(&self, kind: NodeKind) -> std::ops::Range<usize> {
        let n_agents = self.count(NodeKind::Agent);
        match kind {
            NodeKind::Query => 0..1,
            NodeKind::Agent => 1..1 + n_agents,
            NodeKind::Entity => 1 + n_agents..self.nodes.len(),
        }
    }

    pub fn count(&self, kind: NodeKind) -> usize {
        self.nodes.iter().filter(|n| n.kind == kind).count()
    }

    pub fn agent_ids(&self) -> Vec<AgentId> {
        self.nodes[self.node_range(NodeKind::Agent)]
            .iter()
            .map(|n| n.label.parse().expect("agent labels validated on construction"))
            .collect()
    }

    pub fn feature_dim(&self) -> usize {
        self.nodes.first().map_or(0, |n| n.feat.len())
    }

    /// Undirected edge count for a relation.
    pub fn relation_count(&self, rel: Relation) -> usize {
        self.edges.iter().filter(|e| e.rel == rel).count() / 2
    }

    /// Check every structural invariant of a typed graph.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::validation(format!("graph {}: {m}", self.instance_id)));
        if self.nodes.first().map(|n| n.kind) != Some(NodeKind::Query) {
            return bad("first node must be the query node".into());
        }
        if self.count(NodeKind::Query) != 1 {
            return bad("exactly one query node required".into());
        }
        let mut last = NodeKind::Query;
        let mut agent_ids = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if node.kind < last {
                return bad(format!("node {i} breaks query/agent/entity ordering"));
            }
            last = node.kind;
            if node.kind == NodeKind::Agent {
                match node.label.parse::<AgentId>() {
                    Ok(id) => agent_ids.push(id),
                    Err(e) => return bad(format!("node {i}: {e}")),
                }
            }
        }
        if agent_ids.is_empty() {
            return bad("no agent nodes".into());
        }
        if agent_ids.windows(2).any(|w| w[0] >= w[1]) {
            return bad("agent nodes must be sorted by id and unique".into());
        }
        let dim = self.feature_dim();
        if self.nodes.iter().any(|n| n.feat.len() != dim) {
            return bad("feature vectors differ in dimension".into());
        }
        let mut seen = BTreeSet::new();
        for e in &self.edges {
            if e.src >= self.nodes.len() || e.dst >= self.nodes.len() {
                return bad(format!("edge {e:?} references a missing node"));
            }
            if e.src == e.dst {
                return bad(format!("self-loop on node {}", e.src));
            }
            let (a, b) = e.rel.endpoints();
            let (s, d) = (self.nodes[e.src].kind, self.nodes[e.dst].kind);
            if !((s, d) == (a, b) || (s, d) == (b, a)) {
                return bad(format!("edge {e:?} joins {s:?} and {d:?}"));
            }
            if !seen.insert(*e) {
                return bad(format!("duplicate edge {e:?}"));
            }
        }
        for e in &self.edges {
            let rev = Edge {
                src: e.dst,
                rel: e.rel,
                dst: e.src,
            };
            if !seen.contains(&rev) {
                return bad(format!("edge {e:?} lacks its reverse direction"));
            }
        }
        for a in self.node_range(NodeKind::Agent) {
            let e = Edge {
                src: Self::QUERY,
                rel: Relation::QueryAgent,
                dst: a,
            };
            if !seen.contains(&e) {
                return bad(format!("agent node {a} lacks a query-agent edge"));
            }
        }
        Ok(())
    }
}

fn push_undirected(edges: &mut Vec<Edge>, a: usize, rel: Relation, b: usize) {
    edges.push(Edge { src: a, rel, dst: b });
    edges.push(Edge { src: b, rel, dst: a });
}

fn contains_phrase(haystack_norm: &str, needle_norm: &str) -> bool {
    !needle_norm.is_empty() && format!(" {haystack_norm} ").contains(&format!(" {needle_norm} "))
}

/// Compile an instance into a typed graph (features left empty).
///
/// `agent_views` maps agents to indices into `entities` they attend to.
pub fn build_graph(
    instance: &QAInstance,
    entities: &[EntityMention],
    agent_views: &BTreeMap<AgentId, BTreeSet<usize>>,
    agents: &[AgentId],
    config: &GraphConfig,
) -> Result<TypedGraph> {
    let mut sorted_agents = agents.to_vec();
    sorted_agents.sort();
    sorted_agents.dedup();
    if sorted_agents.len() != agents.len() || agents.is_empty() {
        return Err(Error::validation("agent pool must be non-empty with unique ids"));
    }
    for (agent, idxs) in agent_views {
        if sorted_agents.binary_search(agent).is_err() {
            return Err(Error::validation(format!("agent view for unknown agent {agent}")));
        }
        if let Some(&bad) = idxs.iter().find(|&&i| i >= entities.len()) {
            return Err(Error::validation(format!(
                "agent {agent} references entity {bad} but only {} entities exist",
                entities.len()
            )));
        }
    }

    // Entities by first span offset; remember where each input index landed.
    let mut order: Vec<usize> = (0..entities.len()).collect();
    order.sort_by_key(|&i| (entities[i].span.0, i));
    let mut position = vec![0; entities.len()];
    for (pos, &i) in order.iter().enumerate() {
        position[i] = pos;
    }

    let n_agents = sorted_agents.len();
    let entity_node = |input_idx: usize| 1 + n_agents + position[input_idx];

    let mut nodes = Vec::with_capacity(1 + n_agents + entities.len());
    nodes.push(Node {
        kind: NodeKind::Query,
        label: instance.question.clone(),
        feat: Vec::new(),
    });
    for a in &sorted_agents {
        nodes.push(Node {
            kind: NodeKind::Agent,
            label: a.to_string(),
            feat: Vec::new(),
        });
    }
    for &i in &order {
        nodes.push(Node {
            kind: NodeKind::Entity,
            label: entities[i].surface.clone(),
            feat: Vec::new(),
        });
    }

    let mut edges = Vec::new();
    for a in 0..n_agents {
        push_undirected(&mut edges, TypedGraph::QUERY, Relation::QueryAgent, 1 + a);
    }

    let question_norm = normalize_answer(&instance.question);
    for &i in &order {
        if contains_phrase(&question_norm, &normalize_answer(&entities[i].surface)) {
            push_undirected(&mut edges, TypedGraph::QUERY, Relation::QueryEntity, entity_node(i));
        }
    }

    let occurrences: Vec<Vec<usize>> = order
        .iter()
        .map(|&i| {
            let mut occ: Vec<usize> = instance
                .context
                .match_indices(entities[i].surface.as_str())
                .map(|(o, _)| o)
                .collect();
            occ.push(entities[i].span.0);
            occ.sort_unstable();
            occ.dedup();
            occ
        })
        .collect();
    let window = config.cooccurrence_window;
    for x in 0..order.len() {
        for y in x + 1..order.len() {
            let near = occurrences[x]
                .iter()
                .any(|&ox| occurrences[y].iter().any(|&oy| ox.abs_diff(oy) <= window));
            if near {
                push_undirected(
                    &mut edges,
                    1 + n_agents + x,
                    Relation::EntityEntity,
                    1 + n_agents + y,
                );
            }
        }
    }

    for (a_pos, agent) in sorted_agents.iter().enumerate() {
        if let Some(idxs) = agent_views.get(agent) {
            let mut targets: Vec<usize> = idxs.iter().map(|&i| entity_node(i)).collect();
            targets.sort_unstable();
            for t in targets {
                push_undirected(&mut edges, 1 + a_pos, Relation::AgentEntity, t);
            }
        }
    }

    let graph = TypedGraph {
        instance_id: instance.id.clone(),
        nodes,
        edges,
    };
    graph.validate()?;
    Ok(graph)
}

/// Supplies agent → attended-entity sets for graph construction.
pub trait AgentViewProvider: Send + Sync {
    fn views(
        &self,
        instance: &QAInstance,
        entities: &[EntityMention],
        agents: &[AgentId],
    ) -> Result<BTreeMap<AgentId, BTreeSet<usize>>>;
}

/// Offline agent views: each (agent, entity) pair is included with a fixed
/// probability decided by a seeded hash.
#[derive(Debug, Clone)]
pub struct SeededViews {
    pub seed: u64,
    pub rate: f64,
}

impl Default for SeededViews {
    fn default() -> Self {
        Self { seed: 0, rate: 0.3 }
    }
}

impl AgentViewProvider for SeededViews {
    fn views(
        &self,
        _instance: &QAInstance,
        entities: &[EntityMention],
        agents: &[AgentId],
    ) -> Result<BTreeMap<AgentId, BTreeSet<usize>>> {
        let mut out = BTreeMap::new();
        for agent in agents {
            let set: BTreeSet<usize> = entities
                .iter()
                .enumerate()
                .filter(|(_, m)| {
                    let mut h = Sha256::new();
                    h.update(self.seed.to_le_bytes());
                    h.update(agent.to_string().as_bytes());
                    h.update([0u8]);
                    h.update(normalize_answer(&m.surface).as_bytes());
                    let digest = h.finalize();
                    let mut word = [0u8; 8];
                    word.copy_from_slice(&digest[..8]);
                    (u64::from_le_bytes(word) as f64 / u64::MAX as f64) < self.rate
                })
                .map(|(i, _)| i)
                .collect();
            out.insert(agent.clone(), set);
        }
        Ok(out)
    }
}
