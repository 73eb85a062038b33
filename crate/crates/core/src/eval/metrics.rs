use std::collections::HashMap;

/// Lowercases, drops ASCII punctuation and collapses whitespace.
pub fn normalize_answer(s: &str) -> String {
    let cleaned: String = s
        .chars()
        .map(|c| c.to_ascii_lowercase())
        .filter(|c| !c.is_ascii_punctuation())
        .collect();
    cleaned.split_whitespace().collect::<Vec<_>>().join(" ")
}

pub fn exact_match(prediction: &str, gold: &str) -> f64 {
    if normalize_answer(prediction) == normalize_answer(gold) {
        1.0
    } else {
        0.0
    }
}

/// Unigram F1 over normalized whitespace tokens. When either side is empty
/// the score is 1 only if both are.
pub fn f1_score(prediction: &str, gold: &str) -> f64 {
    let p = normalize_answer(prediction);
    let g = normalize_answer(gold);
    let p: Vec<&str> = p.split_whitespace().collect();
    let g: Vec<&str> = g.split_whitespace().collect();
    if p.is_empty() || g.is_empty() {
        return if p.is_empty() && g.is_empty() { 1.0 } else { 0.0 };
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in &g {
        *counts.entry(t).or_default() += 1;
    }
    let mut common = 0usize;
    for t in &p {
        if let Some(c) = counts.get_mut(t) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / p.len() as f64;
    let recall = common as f64 / g.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Case-insensitive containment, the needle success criterion.
pub fn contains_answer(prediction: &str, gold: &str) -> bool {
    let gold = normalize_answer(gold);
    !gold.is_empty() && normalize_answer(prediction).contains(&gold)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_match_normalizes() {
        assert_eq!(exact_match("  Coco   Chanel. ", "coco chanel"), 1.0);
        assert_eq!(exact_match("417", "418"), 0.0);
    }

    #[test]
    fn f1_counts_overlap() {
        assert!((f1_score("a b c", "b c d") - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(f1_score("x", "y"), 0.0);
        assert_eq!(f1_score("", ""), 1.0);
        assert_eq!(f1_score("", "a"), 0.0);
        // Repeated tokens only match as often as they occur in the gold.
        assert!((f1_score("a a", "a") - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn containment() {
        assert!(contains_answer("it was Coco Chanel, surely", "coco chanel"));
        assert!(!contains_answer("chanel", "coco chanel"));
        assert!(!contains_answer("anything", ""));
    }
}
