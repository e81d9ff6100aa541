//! Shipped role prompts, the system wrapper, and the on-disk prompt store.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::agent::AgentId;
use crate::error::{Error, Result};

pub const ROLES: [&str; 6] = ["raw", "cot", "sc", "mad", "react_reflect", "summary"];

pub const WRAPPER: &str = include_str!("../../prompts/wrapper.txt");
pub const REWRITE_TEMPLATE: &str = include_str!("../../prompts/rewrite.txt");

pub fn shipped_prompt(role: &str) -> Option<&'static str> {
    Some(match role {
        "raw" => include_str!("../../prompts/raw.txt"),
        "cot" => include_str!("../../prompts/cot.txt"),
        "sc" => include_str!("../../prompts/sc.txt"),
        "mad" => include_str!("../../prompts/mad.txt"),
        "react_reflect" => include_str!("../../prompts/react_reflect.txt"),
        "summary" => include_str!("../../prompts/summary.txt"),
        _ => return None,
    })
}

pub fn prompt_hash(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptVersion {
    pub text: String,
    pub version: u32,
    pub hash: String,
}

impl PromptVersion {
    pub fn new(text: impl Into<String>, version: u32) -> Self {
        let text = text.into();
        let hash = prompt_hash(&text);
        Self { text, version, hash }
    }

    /// Version-0 prompt of a shipped role.
    pub fn shipped(role: &str) -> Result<Self> {
        shipped_prompt(role)
            .map(|t| Self::new(t, 0))
            .ok_or_else(|| Error::Config(format!("no shipped prompt for role {role:?}")))
    }

    /// Successor version holding `text`.
    pub fn next(&self, text: impl Into<String>) -> Self {
        Self::new(text, self.version + 1)
    }

    pub fn short_hash(&self) -> &str {
        &self.hash[..12]
    }
}

/// Splits a multi-turn prompt into `[name]` sections. A prompt with no
/// headers is a single unnamed section.
pub fn sections(text: &str) -> Vec<(String, String)> {
    let mut out: Vec<(String, String)> = Vec::new();
    let mut current: Option<(String, Vec<&str>)> = None;
    for line in text.lines() {
        let t = line.trim();
        let header = t
            .strip_prefix('[')
            .and_then(|r| r.strip_suffix(']'))
            .filter(|n| !n.is_empty() && n.chars().all(|c| c.is_ascii_alphanumeric() || c == '_'));
        match header {
            Some(name) => {
                if let Some((n, body)) = current.take() {
                    out.push((n, body.join("\n").trim().to_string()));
                }
                current = Some((name.to_string(), Vec::new()));
            }
            None => match &mut current {
                Some((_, body)) => body.push(line),
                None => current = Some((String::new(), vec![line])),
            },
        }
    }
    if let Some((n, body)) = current {
        out.push((n, body.join("\n").trim().to_string()));
    }
    out.retain(|(n, b)| !(n.is_empty() && b.is_empty()));
    out
}

/// System message: the role prompt placed in the wrapper's slot.
pub fn system_message(role_name: &str, role_prompt: &str) -> String {
    WRAPPER
        .replace("<role_name>", role_name)
        .replace("<role_prompt>", role_prompt.trim())
}

pub fn user_message(question: &str, context: &str) -> String {
    format!("Question: {question}\n\nContext: {context}")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestEntry {
    agent: AgentId,
    role: String,
    version: u32,
    hash: String,
}

/// Current prompt per agent, persisted as one text file per agent plus a
/// manifest, with every accepted version kept under `history/`.
#[derive(Debug, Clone)]
pub struct PromptStore {
    dir: PathBuf,
}

impl PromptStore {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    fn text_path(&self, agent: &AgentId) -> PathBuf {
        self.dir.join(&agent.backbone).join(format!("{}.txt", agent.role))
    }

    fn history_path(&self, agent: &AgentId, version: u32) -> PathBuf {
        self.dir
            .join("history")
            .join(&agent.backbone)
            .join(&agent.role)
            .join(format!("v{version}.txt"))
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.dir.join("manifest.json")
    }

    pub fn exists(&self) -> bool {
        self.manifest_path().exists()
    }

    pub fn save(&self, prompts: &BTreeMap<AgentId, PromptVersion>) -> Result<()> {
        let mut manifest = Vec::new();
        for (agent, p) in prompts {
            for path in [self.text_path(agent), self.history_path(agent, p.version)] {
                write_atomic(&path, p.text.as_bytes())?;
            }
            manifest.push(ManifestEntry {
                agent: agent.clone(),
                role: agent.role.clone(),
                version: p.version,
                hash: p.hash.clone(),
            });
        }
        write_atomic(&self.manifest_path(), &serde_json::to_vec_pretty(&manifest)?)
    }

    pub fn load(&self) -> Result<BTreeMap<AgentId, PromptVersion>> {
        let path = self.manifest_path();
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Vec<ManifestEntry> = serde_json::from_slice(&bytes)?;
        let mut out = BTreeMap::new();
        for entry in manifest {
            let p = self.text_path(&entry.agent);
            let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
            let version = PromptVersion::new(text, entry.version);
            if version.hash != entry.hash {
                return Err(Error::validation(format!(
                    "prompt file {} does not match manifest hash",
                    p.display()
                )));
            }
            out.insert(entry.agent, version);
        }
        Ok(out)
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("partial");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_roles_and_sections() {
        for role in ROLES {
            let p = PromptVersion::shipped(role).unwrap();
            assert_eq!(p.version, 0);
            assert!(p.text.contains("boxed") || role == "mad");
        }
        let names: Vec<String> = sections(shipped_prompt("mad").unwrap()).into_iter().map(|s| s.0).collect();
        assert_eq!(names, ["debater_a", "debater_b", "judge"]);
        let single = sections(shipped_prompt("cot").unwrap());
        assert_eq!(single.len(), 1);
        assert_eq!(single[0].0, "");
    }

    #[test]
    fn wrapper_slots_filled() {
        let s = system_message("cot", "Think.");
        assert!(s.contains("Your role is: cot."));
        assert!(s.contains("as follows: Think.."));
        assert!(!s.contains("<role_prompt>"));
    }

    #[test]
    fn hash_tracks_text() {
        let a = PromptVersion::new("x", 0);
        assert_eq!(a.hash, PromptVersion::new("x", 5).hash);
        assert_ne!(a.hash, a.next("y").hash);
        assert_eq!(a.next("y").version, 1);
    }

    #[test]
    fn store_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let store = PromptStore::new(dir.path());
        let mut prompts = BTreeMap::new();
        prompts.insert(AgentId::new("m", "raw"), PromptVersion::shipped("raw").unwrap());
        prompts.insert(AgentId::new("m", "mad"), PromptVersion::new("custom", 3));
        store.save(&prompts).unwrap();
        assert_eq!(store.load().unwrap(), prompts);
        assert!(dir.path().join("history/m/mad/v3.txt").exists());
    }
}
