use std::collections::HashMap;

/// Additive epsilon given to zero-match precisions.
pub const BLEU_EPSILON: f64 = 0.1;

pub(crate) fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Sentence BLEU with up to 4-gram precisions, on the 0..=100 scale.
///
/// Orders the candidate is too short to contain are left out of the
/// geometric mean (so a short exact match still scores 100); an order with
/// candidate n-grams but no matches gets `epsilon / total` instead of zero.
pub fn bleu4_with(candidate: &[String], reference: &[String], epsilon: f64) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    let mut orders = 0;
    for n in 1..=4 {
        let total = candidate.len().saturating_sub(n - 1);
        if total == 0 {
            break;
        }
        let refs = ngram_counts(reference, n);
        let matched: usize = ngram_counts(candidate, n)
            .iter()
            .map(|(g, &c)| c.min(refs.get(g).copied().unwrap_or(0)))
            .sum();
        let numerator = if matched == 0 { epsilon } else { matched as f64 };
        log_sum += (numerator / total as f64).ln();
        orders += 1;
    }
    let (c, r) = (candidate.len() as f64, reference.len() as f64);
    let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    100.0 * bp * (log_sum / orders as f64).exp()
}

pub fn bleu4(candidate: &[String], reference: &[String]) -> f64 {
    bleu4_with(candidate, reference, BLEU_EPSILON)
}
