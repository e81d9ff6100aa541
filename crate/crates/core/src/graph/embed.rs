use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use super::{NodeKind, TypedGraph};
use crate::agent::AgentId;
use crate::error::{Error, Result};

/// Characters of an agent's prompt folded into its node text.
const AGENT_PROMPT_PREFIX: usize = 256;

/// Text → fixed-dimension vector. Implementations must be thread-safe.
pub trait Embedder: Send + Sync {
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> std::result::Result<Vec<f64>, String>;
}

/// Signed feature hashing of lowercased alphanumeric tokens.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    pub dim: usize,
}

impl Default for HashEmbedder {
    fn default() -> Self {
        Self { dim: 256 }
    }
}

impl Embedder for HashEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> std::result::Result<Vec<f64>, String> {
        if self.dim == 0 {
            return Err("embedding dimension must be positive".into());
        }
        let mut v = vec![0.0; self.dim];
        let lowered = text.to_lowercase();
        let mut any = false;
        for tok in lowered.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()) {
            add_hashed(&mut v, tok);
            any = true;
        }
        if !any {
            add_hashed(&mut v, "\u{0}empty");
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            // every token cancelled out; fall back to the empty marker
            v.iter_mut().for_each(|x| *x = 0.0);
            add_hashed(&mut v, "\u{0}empty");
            return Ok(v);
        }
        Ok(v.into_iter().map(|x| x / norm).collect())
    }
}

fn add_hashed(v: &mut [f64], token: &str) {
    let digest = Sha256::digest(token.as_bytes());
    let mut word = [0u8; 8];
    word.copy_from_slice(&digest[..8]);
    let bucket = (u64::from_le_bytes(word) % v.len() as u64) as usize;
    let sign = if digest[8] & 1 == 0 { 1.0 } else { -1.0 };
    v[bucket] += sign;
}

fn agent_text(id: &AgentId, prompt: &str) -> String {
    let prefix: String = prompt.chars().take(AGENT_PROMPT_PREFIX).collect();
    format!("{} {} {}", id.backbone, id.role, prefix)
}

fn embed_node(graph: &mut TypedGraph, idx: usize, text: &str, embedder: &dyn Embedder) -> Result<()> {
    let feat = embedder.embed(text).map_err(|message| Error::Embedding {
        node: format!("{}#{} ({:?} {:?})", graph.instance_id, idx, graph.nodes[idx].kind, graph.nodes[idx].label),
        message,
    })?;
    if feat.len() != embedder.dim() {
        return Err(Error::Embedding {
            node: format!("{}#{}", graph.instance_id, idx),
            message: format!("expected dimension {}, got {}", embedder.dim(), feat.len()),
        });
    }
    graph.nodes[idx].feat = feat;
    Ok(())
}

/// Fill every node's feature vector: query text, entity surfaces, and
/// "backbone role <prompt prefix>" for agents.
pub fn embed_graph(
    graph: &mut TypedGraph,
    embedder: &dyn Embedder,
    prompts: &BTreeMap<AgentId, String>,
) -> Result<()> {
    for idx in 0..graph.nodes.len() {
        let text = match graph.nodes[idx].kind {
            NodeKind::Query | NodeKind::Entity => graph.nodes[idx].label.clone(),
            NodeKind::Agent => continue,
        };
        embed_node(graph, idx, &text, embedder)?;
    }
    refresh_agent_features(graph, embedder, prompts)
}

/// Re-embed only the agent nodes, e.g. after a prompt rewrite.
pub fn refresh_agent_features(
    graph: &mut TypedGraph,
    embedder: &dyn Embedder,
    prompts: &BTreeMap<AgentId, String>,
) -> Result<()> {
    for idx in graph.node_range(NodeKind::Agent) {
        let id: AgentId = graph.nodes[idx].label.parse()?;
        let prompt = prompts.get(&id).map(String::as_str).unwrap_or("");
        let text = agent_text(&id, prompt);
        embed_node(graph, idx, &text, embedder)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::QAInstance;
    use crate::graph::{build_graph, CapitalizedRunExtractor, EntityExtractor, GraphConfig};

    #[test]
    fn deterministic_and_unit_norm() {
        let e = HashEmbedder::default();
        let a = e.embed("Scott Derrickson").unwrap();
        assert_eq!(a, e.embed("Scott Derrickson").unwrap());
        for text in ["", "x", "Scott Derrickson", "a a a a", "!!!"] {
            let v = e.embed(text).unwrap();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6, "{text:?} norm {n}");
        }
    }

    #[test]
    fn prompt_changes_shift_agent_features() {
        let agents = vec![AgentId::new("b", "cot"), AgentId::new("b", "raw")];
        let inst = QAInstance {
            id: "i".into(),
            question: "Who met Ed Wood?".into(),
            context: "Scott Derrickson met Ed Wood".into(),
            gold_answers: vec!["Scott Derrickson".into()],
            category: None,
        };
        let ents = CapitalizedRunExtractor::default().extract(&inst.context);
        let mut g = build_graph(&inst, &ents, &Default::default(), &agents, &GraphConfig::default()).unwrap();
        let mut prompts = BTreeMap::new();
        prompts.insert(agents[0].clone(), "Think step by step.".to_string());
        prompts.insert(agents[1].clone(), "Think step by step.".to_string());
        embed_graph(&mut g, &HashEmbedder::default(), &prompts).unwrap();
        let before = g.nodes[1].feat.clone();
        prompts.insert(agents[0].clone(), "Answer directly.".to_string());
        refresh_agent_features(&mut g, &HashEmbedder::default(), &prompts).unwrap();
        assert_ne!(before, g.nodes[1].feat);
        assert!(g.validate().is_ok());
        assert_eq!(g.feature_dim(), 256);
    }
}
