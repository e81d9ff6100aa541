//! Seeded stand-in for an LLM agent with per-category competence.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::QAInstance;
use crate::metrics::normalize_answer;

const DISTRACTORS: &[&str] = &[
    "Marlow Quay",
    "Tessaly",
    "1847",
    "Oren Vash",
    "no",
    "yes",
    "Ketterby Hall",
    "Ilse Montague",
    "copper",
    "North Arden",
    "1962",
    "Pell Street Gallery",
    "Varric Dune",
    "seventeen",
    "Hollis Crane",
    "the eastern ridge",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticProfile {
    /// Probability of answering correctly, by question category.
    pub competence: BTreeMap<String, f64>,
    /// Used for categories absent from `competence`.
    pub default_competence: f64,
    /// Prompt hash → competence applied to every category while that prompt is active.
    pub prompt_competence: BTreeMap<String, f64>,
    pub seed: u64,
    /// Every call fails; simulates a backend outage.
    pub outage: bool,
}

impl Default for SyntheticProfile {
    fn default() -> Self {
        Self {
            competence: BTreeMap::new(),
            default_competence: 0.5,
            prompt_competence: BTreeMap::new(),
            seed: 0,
            outage: false,
        }
    }
}

fn unit_hash(parts: &[&[u8]]) -> f64 {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p);
        h.update([0u8]);
    }
    let d = h.finalize();
    let mut w = [0u8; 8];
    w.copy_from_slice(&d[..8]);
    (u64::from_le_bytes(w) >> 11) as f64 / (1u64 << 53) as f64
}

impl SyntheticProfile {
    pub fn uniform(competence: f64, seed: u64) -> Self {
        Self {
            default_competence: competence,
            seed,
            ..Self::default()
        }
    }

    pub fn competence_for(&self, category: &str, prompt_hash: &str) -> f64 {
        if let Some(&c) = self.prompt_competence.get(prompt_hash) {
            return c;
        }
        self.competence.get(category).copied().unwrap_or(self.default_competence)
    }

    /// Answer text for one query; deterministic in (seed, agent, instance, prompt).
    pub fn answer(&self, agent: &str, instance: &QAInstance, prompt_hash: &str) -> String {
        let c = self.competence_for(&instance.category(), prompt_hash);
        let seed = self.seed.to_le_bytes();
        let u = unit_hash(&[&seed, agent.as_bytes(), instance.id.as_bytes(), prompt_hash.as_bytes()]);
        if u < c {
            if let Some(gold) = instance.gold_answers.first() {
                return gold.clone();
            }
        }
        let gold_tokens: BTreeSet<String> = instance
            .gold_answers
            .iter()
            .flat_map(|g| normalize_answer(g).split_whitespace().map(str::to_string).collect::<Vec<_>>())
            .collect();
        let pool: Vec<&str> = DISTRACTORS
            .iter()
            .copied()
            .filter(|d| normalize_answer(d).split_whitespace().all(|t| !gold_tokens.contains(t)))
            .collect();
        let v = unit_hash(&[&seed, b"distractor", agent.as_bytes(), instance.id.as_bytes()]);
        pool[((v * pool.len() as f64) as usize).min(pool.len() - 1)].to_string()
    }

    /// Raw reply in the wrapper's JSON shape.
    pub fn reply(&self, agent: &str, instance: &QAInstance, prompt_hash: &str) -> String {
        serde_json::json!({ "answer": self.answer(agent, instance, prompt_hash) }).to_string()
    }
}
