//! Token F1 and exact match against multiple gold answers.

use agent_router::metrics::{best_score, exact_match, normalize_answer, token_f1};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let golds = vec!["the Eiffel Tower".to_string(), "Eiffel Tower, Paris".to_string()];
    for pred in ["Eiffel Tower", "The tower in Paris", "Louvre", "eiffel  tower!"] {
        let s = best_score(pred, &golds)?;
        println!("{pred:<22} normalized {:<18} F1 {:.3}  EM {}", format!("{:?}", normalize_answer(pred)), s.f1, s.em);
    }
    println!("F1(\"1887 to 1889\", \"1889\") = {:.3}", token_f1("1887 to 1889", "1889"));
    println!("EM(\"An apple\", \"apple\") = {}", exact_match("An apple", "apple"));
    Ok(())
}
