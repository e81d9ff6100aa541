//! Append-only answer cache keyed by (agent, instance, prompt hash).

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Mutex, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const ENTRIES_FILE: &str = "entries.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub key: String,
    /// Agent id, with a `#sub` suffix for sub-calls of multi-turn roles.
    pub agent: String,
    pub instance: String,
    pub prompt_hash: String,
    pub raw: String,
    pub answer: String,
    /// False when the reply had no JSON or boxed answer.
    pub parsed: bool,
    pub f1: Option<f64>,
    pub em: Option<bool>,
    pub timestamp: u64,
}

pub fn cache_key(agent: &str, instance: &str, prompt_hash: &str) -> String {
    let mut h = Sha256::new();
    for part in [agent, instance, prompt_hash] {
        h.update(part.as_bytes());
        h.update([0u8]);
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheStats {
    pub hits: usize,
    /// Top-level lookups that missed and went to a backend.
    pub misses: usize,
}

#[derive(Debug)]
pub struct AnswerCache {
    dir: Option<PathBuf>,
    index: RwLock<HashMap<String, CacheEntry>>,
    file: Mutex<Option<File>>,
    hits: AtomicUsize,
    misses: AtomicUsize,
}

impl AnswerCache {
    pub fn in_memory() -> Self {
        Self {
            dir: None,
            index: RwLock::new(HashMap::new()),
            file: Mutex::new(None),
            hits: AtomicUsize::new(0),
            misses: AtomicUsize::new(0),
        }
    }

    /// Opens (creating if needed) a cache directory and loads its index.
    /// A truncated trailing line from an interrupted write is ignored.
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let path = dir.join(ENTRIES_FILE);
        let mut index = HashMap::new();
        if path.exists() {
            let f = File::open(&path).map_err(|e| Error::io(&path, e))?;
            for (n, line) in BufReader::new(f).lines().enumerate() {
                let line = line.map_err(|e| Error::io(&path, e))?;
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<CacheEntry>(&line) {
                    Ok(e) => {
                        index.insert(e.key.clone(), e);
                    }
                    Err(err) => log::warn!("{}:{}: skipping unreadable cache line: {err}", path.display(), n + 1),
                }
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            dir: Some(dir),
            index: RwLock::new(index),
            file: Mutex::new(Some(file)),
            hits: AtomicUsize::new(0),
            misses: AtomicUsize::new(0),
        })
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    pub fn get(&self, agent: &str, instance: &str, prompt_hash: &str) -> Option<CacheEntry> {
        let key = cache_key(agent, instance, prompt_hash);
        self.index.read().expect("cache index poisoned").get(&key).cloned()
    }

    /// Lookup that also updates the hit/miss counters.
    pub(crate) fn lookup(&self, agent: &str, instance: &str, prompt_hash: &str) -> Option<CacheEntry> {
        let found = self.get(agent, instance, prompt_hash);
        let counter = if found.is_some() { &self.hits } else { &self.misses };
        counter.fetch_add(1, Ordering::Relaxed);
        found
    }

    #[allow(clippy::too_many_arguments)]
    pub fn make_entry(
        agent: &str,
        instance: &str,
        prompt_hash: &str,
        raw: String,
        answer: String,
        parsed: bool,
        score: Option<(f64, bool)>,
    ) -> CacheEntry {
        CacheEntry {
            key: cache_key(agent, instance, prompt_hash),
            agent: agent.to_string(),
            instance: instance.to_string(),
            prompt_hash: prompt_hash.to_string(),
            raw,
            answer,
            parsed,
            f1: score.map(|s| s.0),
            em: score.map(|s| s.1),
            timestamp: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
        }
    }

    pub fn put(&self, entry: CacheEntry) -> Result<()> {
        let mut file = self.file.lock().expect("cache file poisoned");
        if let Some(f) = file.as_mut() {
            let mut line = serde_json::to_vec(&entry)?;
            line.push(b'\n');
            let path = self.dir.as_ref().expect("file-backed").join(ENTRIES_FILE);
            f.write_all(&line).map_err(|e| Error::io(&path, e))?;
            f.flush().map_err(|e| Error::io(&path, e))?;
        }
        self.index
            .write()
            .expect("cache index poisoned")
            .insert(entry.key.clone(), entry);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.index.read().expect("cache index poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn stats(&self) -> CacheStats {
        CacheStats {
            hits: self.hits.load(Ordering::Relaxed),
            misses: self.misses.load(Ordering::Relaxed),
        }
    }
}

/// Copies a cache directory forward so a later stage starts warm.
pub fn seed_cache(from: &Path, to: &Path) -> Result<()> {
    std::fs::create_dir_all(to).map_err(|e| Error::io(to, e))?;
    let src = from.join(ENTRIES_FILE);
    if src.exists() {
        let dst = to.join(ENTRIES_FILE);
        std::fs::copy(&src, &dst).map_err(|e| Error::io(&dst, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(agent: &str, inst: &str, hash: &str, answer: &str) -> CacheEntry {
        AnswerCache::make_entry(agent, inst, hash, answer.into(), answer.into(), true, Some((1.0, true)))
    }

    #[test]
    fn persists_and_reloads() {
        let dir = tempfile::tempdir().unwrap();
        {
            let c = AnswerCache::open(dir.path()).unwrap();
            c.put(entry("m::raw", "q1", "h1", "yes")).unwrap();
            c.put(entry("m::raw", "q2", "h1", "no")).unwrap();
        }
        let c = AnswerCache::open(dir.path()).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c.get("m::raw", "q1", "h1").unwrap().answer, "yes");
        assert!(c.get("m::raw", "q1", "h2").is_none());
    }

    #[test]
    fn truncated_tail_ignored() {
        let dir = tempfile::tempdir().unwrap();
        {
            let c = AnswerCache::open(dir.path()).unwrap();
            c.put(entry("m::raw", "q1", "h1", "yes")).unwrap();
        }
        let mut f = OpenOptions::new().append(true).open(dir.path().join(ENTRIES_FILE)).unwrap();
        f.write_all(b"{\"key\": \"trunc").unwrap();
        let c = AnswerCache::open(dir.path()).unwrap();
        assert_eq!(c.len(), 1);
    }

    #[test]
    fn last_write_wins() {
        let c = AnswerCache::in_memory();
        c.put(entry("a", "q", "h", "x")).unwrap();
        c.put(entry("a", "q", "h", "y")).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c.get("a", "q", "h").unwrap().answer, "y");
    }

    #[test]
    fn seeding_copies_entries() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        AnswerCache::open(a.path()).unwrap().put(entry("a", "q", "h", "x")).unwrap();
        seed_cache(a.path(), &b.path().join("next")).unwrap();
        assert_eq!(AnswerCache::open(b.path().join("next")).unwrap().len(), 1);
    }
}
