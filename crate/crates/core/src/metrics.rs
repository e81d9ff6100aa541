//! SQuAD-style answer normalization and token-level scoring.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::ValidationError;

/// F1 / exact-match pair for one prediction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub f1: f64,
    pub em: bool,
}

impl Score {
    pub const ZERO: Score = Score { f1: 0.0, em: false };
}

/// Lowercase, strip punctuation, drop the articles a/an/the, collapse whitespace.
pub fn normalize_answer(text: &str) -> String {
    let lowered = text.to_lowercase();
    let stripped: String = lowered
        .chars()
        .map(|c| {
            if c.is_whitespace() {
                ' '
            } else if c.is_alphanumeric() {
                c
            } else {
                '\0'
            }
        })
        .filter(|&c| c != '\0')
        .collect();
    stripped
        .split_whitespace()
        .filter(|tok| !matches!(*tok, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

fn tokens(text: &str) -> Vec<String> {
    normalize_answer(text)
        .split_whitespace()
        .map(str::to_owned)
        .collect()
}

/// Token-overlap F1 between a prediction and a single gold answer.
pub fn token_f1(prediction: &str, gold: &str) -> f64 {
    let pred = tokens(prediction);
    let gold = tokens(gold);
    if pred.is_empty() || gold.is_empty() {
        return if pred.is_empty() && gold.is_empty() { 1.0 } else { 0.0 };
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for tok in &gold {
        *counts.entry(tok.as_str()).or_default() += 1;
    }
    let mut common = 0usize;
    for tok in &pred {
        if let Some(c) = counts.get_mut(tok.as_str()) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / pred.len() as f64;
    let recall = common as f64 / gold.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

pub fn exact_match(prediction: &str, gold: &str) -> bool {
    normalize_answer(prediction) == normalize_answer(gold)
}

/// Max F1 and OR of EM over every reference answer.
pub fn best_score(prediction: &str, golds: &[String]) -> Result<Score, ValidationError> {
    if golds.is_empty() {
        return Err(ValidationError::new("best_score requires at least one gold answer"));
    }
    let mut best = Score::ZERO;
    for gold in golds {
        let f1 = token_f1(prediction, gold);
        let em = exact_match(prediction, gold);
        // EM implies F1 = 1; keep the pair consistent under float noise.
        let f1 = if em { 1.0 } else { f1 };
        best.f1 = best.f1.max(f1);
        best.em |= em;
    }
    Ok(best)
}

/// Mean F1 and EM rate (both in [0, 1]) over a batch of scores.
pub fn mean_scores(scores: &[Score]) -> (f64, f64) {
    if scores.is_empty() {
        return (0.0, 0.0);
    }
    let n = scores.len() as f64;
    let f1 = scores.iter().map(|s| s.f1).sum::<f64>() / n;
    let em = scores.iter().filter(|s| s.em).count() as f64 / n;
    (f1, em)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn normalization_examples() {
        assert_eq!(normalize_answer("A  Dog!"), "dog");
        assert_eq!(normalize_answer(""), "");
        assert_eq!(normalize_answer("The Apalachees"), "apalachees");
        assert_eq!(normalize_answer("  Henry J. Kaiser "), "henry j kaiser");
    }

    #[test]
    fn f1_examples() {
        assert_eq!(token_f1("rolled over", "rolled over"), 1.0);
        assert!((token_f1("york city", "new york city") - 0.8).abs() < 1e-12);
        assert_eq!(token_f1("", "yes"), 0.0);
        assert_eq!(token_f1("", "the"), 1.0);
    }

    #[test]
    fn em_examples() {
        assert!(exact_match("Yes", "yes"));
        assert!(exact_match("The Apalachees", "apalachees"));
        assert!(!exact_match("Seminole", "Apalachees"));
    }

    #[test]
    fn best_score_examples() {
        let s = best_score("a", &["a".into(), "b".into()]).unwrap();
        // "a" normalizes to the empty string, as does gold "a".
        assert_eq!(s, Score { f1: 1.0, em: true });
        let s = best_score("x", &["y".into(), "z".into()]).unwrap();
        assert_eq!(s, Score { f1: 0.0, em: false });
        let s = best_score("cat dog", &["dog fox".into(), "cat".into()]).unwrap();
        // per-gold F1: 0.5 and 2/3
        assert!((s.f1 - 2.0 / 3.0).abs() < 1e-12);
        assert!(!s.em);
        assert!(best_score("x", &[]).is_err());
    }

    proptest! {
        #[test]
        fn normalize_idempotent(s in "\\PC{0,40}") {
            let once = normalize_answer(&s);
            prop_assert_eq!(normalize_answer(&once), once);
        }

        #[test]
        fn f1_symmetric_and_bounded(a in "[a-e ,.]{0,20}", b in "[a-e ,.]{0,20}") {
            let ab = token_f1(&a, &b);
            let ba = token_f1(&b, &a);
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&ab));
            if exact_match(&a, &b) {
                prop_assert_eq!(ab, 1.0);
            }
        }

        #[test]
        fn singleton_best_score_is_pairwise(a in "[a-e ]{0,12}", b in "[a-e ]{0,12}") {
            let s = best_score(&a, std::slice::from_ref(&b)).unwrap();
            prop_assert_eq!(s.em, exact_match(&a, &b));
            prop_assert!((s.f1 - token_f1(&a, &b)).abs() < 1e-12);
        }
    }
}
