use std::collections::BTreeMap;

/// Standard deviation of the length penalty.
pub const CIDER_SIGMA: f64 = 6.0;

// Ordered maps keep float summation order, and so the scores, stable
// across runs.
type Bag<'a, V> = BTreeMap<&'a [String], V>;

struct Doc<'a> {
    grams: Vec<Bag<'a, usize>>,
    len: usize,
}

fn bag(tokens: &[String], n: usize) -> Bag<'_, usize> {
    let mut counts = Bag::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

fn doc(tokens: &[String]) -> Doc<'_> {
    Doc {
        grams: (1..=4).map(|n| bag(tokens, n)).collect(),
        len: tokens.len(),
    }
}

/// TF-IDF vector of an n-gram bag and its norm.
fn weigh<'a>(grams: &Bag<'a, usize>, df: &Bag<'_, usize>, log_docs: f64) -> (Bag<'a, f64>, f64) {
    let v: Bag<f64> = grams
        .iter()
        .map(|(g, &tf)| {
            let d = df.get(g).copied().unwrap_or(0).max(1) as f64;
            (*g, tf as f64 * (log_docs - d.ln()))
        })
        .collect();
    let norm = v.values().map(|x| x * x).sum::<f64>().sqrt();
    (v, norm)
}

/// CIDEr-D per pair, on the reporting scale (conventional value x 100, so
/// a perfect match scores 1000). Document frequencies come from the
/// references of all pairs.
pub fn cider_scores(pairs: &[(&[String], &[String])]) -> Vec<f64> {
    if pairs.is_empty() {
        return Vec::new();
    }
    let cands: Vec<Doc> = pairs.iter().map(|(c, _)| doc(c)).collect();
    let refs: Vec<Doc> = pairs.iter().map(|(_, r)| doc(r)).collect();
    let mut df: Bag<usize> = Bag::new();
    for r in &refs {
        for grams in &r.grams {
            for g in grams.keys() {
                *df.entry(g).or_insert(0) += 1;
            }
        }
    }
    let log_docs = (pairs.len() as f64).ln();
    cands
        .iter()
        .zip(&refs)
        .map(|(c, r)| {
            let delta = c.len as f64 - r.len as f64;
            let penalty = (-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
            let mut total = 0.0;
            for n in 0..4 {
                let (vc, nc) = weigh(&c.grams[n], &df, log_docs);
                let (vr, nr) = weigh(&r.grams[n], &df, log_docs);
                let mut val: f64 = vc
                    .iter()
                    .filter_map(|(g, &x)| vr.get(g).map(|&y| x.min(y) * y))
                    .sum();
                if nc != 0.0 && nr != 0.0 {
                    val /= nc * nr;
                }
                total += val * penalty;
            }
            total / 4.0 * 10.0 * 100.0
        })
        .collect()
}
