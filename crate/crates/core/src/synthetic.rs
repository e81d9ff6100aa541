//! Seeded question sets and planted agent pools for offline runs.

use std::collections::BTreeMap;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::AgentId;
use crate::dataset::QAInstance;
use crate::error::{Error, Result};
use crate::pool::{AgentSpec, BackendSpec, PromptVersion, SyntheticProfile};

pub const CATEGORIES: [&str; 4] = ["what", "who", "when", "where"];

/// One marker entity per category; it appears in every context of that
/// category, so entity features carry the category.
pub const MARKERS: [&str; 4] = ["Aurora Index", "Basalt Registry", "Cobalt Almanac", "Delta Gazetteer"];

const ONSETS: &[&str] = &[
    "Bel", "Cor", "Dra", "Fen", "Gal", "Hal", "Ister", "Jor", "Kal", "Lum", "Mor", "Nev", "Ost", "Pra", "Quin",
    "Ros", "Sal", "Tor", "Ulv", "Vex", "Wyn", "Yar", "Zel",
];
const CODAS: &[&str] = &[
    "ara", "bek", "dun", "ell", "ford", "gard", "holm", "ith", "mere", "nor", "ova", "rick", "sen", "thal", "vale",
    "wick",
];

fn word(rng: &mut ChaCha8Rng) -> String {
    format!("{}{}", ONSETS.choose(rng).unwrap(), CODAS.choose(rng).unwrap())
}

fn name(rng: &mut ChaCha8Rng) -> String {
    format!("{} {}", word(rng), word(rng))
}

/// `n` instances cycling through [`CATEGORIES`], ids `{prefix}{i}`.
pub fn generate(n: usize, seed: u64, prefix: &str) -> Vec<QAInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let c = i % CATEGORIES.len();
            let marker = MARKERS[c];
            let subject = name(&mut rng);
            let (question, answer) = match c {
                0 => (format!("What does the {marker} record for {subject}?"), name(&mut rng)),
                1 => (format!("Who founded {subject} according to the {marker}?"), name(&mut rng)),
                2 => (
                    format!("When was {subject} first noted in the {marker}?"),
                    rng.random_range(1700..2000).to_string(),
                ),
                _ => (format!("Where is {subject} located per the {marker}?"), word(&mut rng)),
            };
            let context = format!("The {marker} lists {subject} alongside {answer}.");
            QAInstance {
                id: format!("{prefix}{i}"),
                question,
                context,
                gold_answers: vec![answer],
                category: Some(CATEGORIES[c].to_string()),
            }
        })
        .collect()
}

/// Agent grid with one planted specialist per category.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlantedConfig {
    pub backbones: Vec<String>,
    pub roles: Vec<String>,
    /// Specialist competence on its category.
    pub high: f64,
    /// Competence everywhere else.
    pub low: f64,
    pub seed: u64,
    /// Agents whose shipped prompt is swapped for a weak one.
    pub corrupt: Vec<AgentId>,
    pub corrupt_competence: f64,
}

impl Default for PlantedConfig {
    fn default() -> Self {
        Self {
            backbones: vec!["alpha".into(), "beta".into()],
            roles: vec!["raw".into(), "cot".into(), "sc".into(), "mad".into()],
            high: 0.95,
            low: 0.35,
            seed: 0,
            corrupt: Vec::new(),
            corrupt_competence: 0.2,
        }
    }
}

/// Category `i` is owned by backbone `i·B/C`, role `i mod R`.
pub fn planted_best(config: &PlantedConfig) -> BTreeMap<String, AgentId> {
    let (b, r) = (config.backbones.len(), config.roles.len());
    CATEGORIES
        .iter()
        .enumerate()
        .map(|(i, c)| {
            (
                c.to_string(),
                AgentId::new(&config.backbones[i * b / CATEGORIES.len()], &config.roles[i % r]),
            )
        })
        .collect()
}

/// Marks `prompt`'s hash as weak: while it is active the agent answers at `competence`.
pub fn corrupt(agent: &mut AgentSpec, competence: f64) {
    if let BackendSpec::Synthetic(p) = &mut agent.backend {
        p.prompt_competence.insert(agent.prompt.hash.clone(), competence);
    }
}

pub fn planted_pool(config: &PlantedConfig) -> Result<Vec<AgentSpec>> {
    if config.backbones.is_empty() || config.roles.is_empty() {
        return Err(Error::Config("planted pool needs at least one backbone and one role".into()));
    }
    let best = planted_best(config);
    let mut out = Vec::new();
    for b in &config.backbones {
        for r in &config.roles {
            let id = AgentId::new(b, r);
            let mut profile = SyntheticProfile::uniform(config.low, config.seed);
            for (cat, owner) in &best {
                if owner == &id {
                    profile.competence.insert(cat.clone(), config.high);
                }
            }
            let mut spec = AgentSpec {
                id: id.clone(),
                prompt: PromptVersion::shipped(r)?,
                backend: BackendSpec::Synthetic(profile),
                temperature: 0.2,
                max_tokens: 256,
            };
            if config.corrupt.contains(&id) {
                corrupt(&mut spec, config.corrupt_competence);
            }
            out.push(spec);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{CapitalizedRunExtractor, EntityExtractor};

    #[test]
    fn markers_extracted_per_category() {
        let data = generate(8, 1, "t");
        let ex = CapitalizedRunExtractor::default();
        for (i, inst) in data.iter().enumerate() {
            assert_eq!(inst.category(), CATEGORIES[i % 4]);
            let ents = ex.extract(&inst.context);
            assert!(ents.iter().any(|e| e.surface == MARKERS[i % 4]), "{:?}", ents);
        }
        assert_eq!(data, generate(8, 1, "t"));
    }

    #[test]
    fn planted_owners() {
        let cfg = PlantedConfig::default();
        let best = planted_best(&cfg);
        assert_eq!(best["what"], AgentId::new("alpha", "raw"));
        assert_eq!(best["who"], AgentId::new("alpha", "cot"));
        assert_eq!(best["when"], AgentId::new("beta", "sc"));
        assert_eq!(best["where"], AgentId::new("beta", "mad"));
        assert_eq!(planted_pool(&cfg).unwrap().len(), 8);
    }
}
