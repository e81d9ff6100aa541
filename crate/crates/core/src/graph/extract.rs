use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::metrics::normalize_answer;

/// An entity surface string and its byte span in the context.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityMention {
    pub surface: String,
    pub span: (usize, usize),
}

pub trait EntityExtractor: Send + Sync {
    fn extract(&self, context: &str) -> Vec<EntityMention>;
}

/// Leading function words that are capitalized only because they open a sentence.
const LEADING_STOPWORDS: &[&str] = &[
    "The", "A", "An", "In", "On", "At", "Of", "For", "And", "But", "Or", "If", "It", "Its", "This",
    "That", "These", "Those", "He", "She", "They", "We", "I", "His", "Her", "Their", "Our", "As",
    "By", "From", "To", "With", "After", "Before", "During", "When", "While", "Where", "What",
    "Who", "Whom", "Whose", "Which", "How", "Why", "Is", "Are", "Was", "Were", "Did", "Does", "Do",
    "According",
];

/// Maximal runs of capitalized tokens, deduplicated by normalized surface.
#[derive(Debug, Clone)]
pub struct CapitalizedRunExtractor {
    pub max_entities: usize,
}

impl Default for CapitalizedRunExtractor {
    fn default() -> Self {
        Self { max_entities: 64 }
    }
}

struct Token<'a> {
    text: &'a str,
    start: usize,
    end: usize,
    /// Run continues past this token.
    open_right: bool,
    /// Token may join a run already in progress.
    open_left: bool,
}

fn make_token(context: &str, raw_start: usize, raw_end: usize) -> Token<'_> {
    let raw = &context[raw_start..raw_end];
    let lead = raw.len() - raw.trim_start_matches(|c: char| !c.is_alphanumeric()).len();
    let core = raw.trim_matches(|c: char| !c.is_alphanumeric());
    if core.is_empty() {
        return Token {
            text: "",
            start: raw_start,
            end: raw_start,
            open_right: false,
            open_left: false,
        };
    }
    let start = raw_start + lead;
    let end = start + core.len();
    let trailing = &context[end..raw_end];
    // "J." inside "Henry J. Kaiser" keeps the run going.
    let is_initial = core.chars().count() == 1 && trailing == ".";
    Token {
        text: &context[start..end],
        start,
        end,
        open_right: trailing.is_empty() || is_initial,
        open_left: lead == 0,
    }
}

fn tokenize(context: &str) -> Vec<Token<'_>> {
    let mut out = Vec::new();
    let mut word_start = None;
    for (i, c) in context.char_indices() {
        if c.is_whitespace() {
            if let Some(s) = word_start.take() {
                out.push(make_token(context, s, i));
            }
        } else if word_start.is_none() {
            word_start = Some(i);
        }
    }
    if let Some(s) = word_start {
        out.push(make_token(context, s, context.len()));
    }
    out
}

fn is_capitalized(tok: &str) -> bool {
    tok.chars().next().is_some_and(char::is_uppercase)
}

impl EntityExtractor for CapitalizedRunExtractor {
    fn extract(&self, context: &str) -> Vec<EntityMention> {
        let tokens = tokenize(context);
        let mut runs: Vec<Vec<&Token<'_>>> = Vec::new();
        let mut current: Vec<&Token<'_>> = Vec::new();
        for tok in &tokens {
            let cap = !tok.text.is_empty() && is_capitalized(tok.text);
            if (!cap || !tok.open_left) && !current.is_empty() {
                runs.push(std::mem::take(&mut current));
            }
            if cap {
                current.push(tok);
                if !tok.open_right {
                    runs.push(std::mem::take(&mut current));
                }
            }
        }
        if !current.is_empty() {
            runs.push(current);
        }

        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for run in runs {
            let skip = run
                .iter()
                .take_while(|t| LEADING_STOPWORDS.contains(&t.text))
                .count();
            let run = &run[skip..];
            let (Some(first), Some(last)) = (run.first(), run.last()) else {
                continue;
            };
            let span = (first.start, last.end);
            let surface = context[span.0..span.1]
                .split_whitespace()
                .collect::<Vec<_>>()
                .join(" ");
            let key = normalize_answer(&surface);
            if key.is_empty() || !seen.insert(key) {
                continue;
            }
            out.push(EntityMention { surface, span });
            if out.len() >= self.max_entities {
                break;
            }
        }
        out
    }
}
