//! JSON-lines QA datasets.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Question-type labels produced by [`infer_category`].
pub const HEURISTIC_CATEGORIES: [&str; 8] =
    ["what", "who", "when", "where", "which", "how", "yesno", "other"];

/// One question with its context and reference answers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QAInstance {
    pub id: String,
    pub question: String,
    pub context: String,
    #[serde(rename = "answers")]
    pub gold_answers: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
}

impl QAInstance {
    /// Stored category, or the wh-word heuristic when absent.
    pub fn category(&self) -> String {
        self.category
            .clone()
            .unwrap_or_else(|| infer_category(&self.question).to_owned())
    }
}

const AUXILIARIES: &[&str] = &[
    "is", "are", "was", "were", "do", "does", "did", "can", "could", "has", "have", "had", "will",
    "would", "should", "shall", "may", "might", "am",
];

/// Deterministic wh-word classifier: first wh-word wins, then a leading
/// auxiliary marks a yes/no question.
pub fn infer_category(question: &str) -> &'static str {
    let words: Vec<String> = question
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect();
    for w in &words {
        match w.as_str() {
            "what" => return "what",
            "who" | "whom" | "whose" => return "who",
            "when" => return "when",
            "where" => return "where",
            "which" => return "which",
            "how" => return "how",
            _ => {}
        }
    }
    match words.first() {
        Some(first) if AUXILIARIES.contains(&first.as_str()) => "yesno",
        _ => "other",
    }
}

fn check_instance(inst: &QAInstance) -> std::result::Result<(), String> {
    if inst.id.is_empty() {
        return Err("empty id".into());
    }
    if inst.question.trim().is_empty() {
        return Err(format!("instance {} has an empty question", inst.id));
    }
    if inst.gold_answers.is_empty() {
        return Err(format!("instance {} has no answers", inst.id));
    }
    Ok(())
}

/// Read a JSON-lines dataset. Blank lines are skipped; `limit` caps the
/// number of instances read.
pub fn load_dataset(path: &Path, limit: Option<usize>) -> Result<Vec<QAInstance>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        if limit.is_some_and(|l| out.len() >= l) {
            break;
        }
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            message,
        };
        let inst: QAInstance = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        check_instance(&inst).map_err(|m| parse_err(format!("validation error: {m}")))?;
        if !seen.insert(inst.id.clone()) {
            return Err(parse_err(format!("validation error: duplicate id {}", inst.id)));
        }
        out.push(inst);
    }
    Ok(out)
}

pub fn write_dataset(path: &Path, instances: &[QAInstance]) -> Result<()> {
    let mut file = File::create(path).map_err(|e| Error::io(path, e))?;
    for inst in instances {
        let line = serde_json::to_string(inst)?;
        writeln!(file, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}
