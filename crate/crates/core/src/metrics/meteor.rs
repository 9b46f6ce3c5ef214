use std::collections::HashMap;

/// Best exact-match alignment: the most matches, then the fewest chunks.
/// Returns `(matches, chunks)`.
pub fn align(candidate: &[String], reference: &[String]) -> (usize, usize) {
    let mut ref_count: HashMap<&str, usize> = HashMap::new();
    for w in reference {
        *ref_count.entry(w).or_insert(0) += 1;
    }
    let mut cand_count: HashMap<&str, usize> = HashMap::new();
    for w in candidate {
        *cand_count.entry(w).or_insert(0) += 1;
    }
    // Each word is matched min(candidate, reference) times.
    let mut need: HashMap<&str, usize> = HashMap::new();
    let mut matches = 0;
    for (w, &c) in &cand_count {
        let k = c.min(ref_count.get(w).copied().unwrap_or(0));
        if k > 0 {
            need.insert(w, k);
            matches += k;
        }
    }
    if matches == 0 {
        return (0, 0);
    }
    // Remaining candidate occurrences of each word from position i on.
    let mut left: HashMap<&str, usize> = cand_count.clone();
    let mut search = Search {
        cand: candidate,
        reference,
        used: vec![false; reference.len()],
        best: usize::MAX,
    };
    search.run(0, None, 0, &mut need, &mut left);
    (matches, search.best)
}

struct Search<'a> {
    cand: &'a [String],
    reference: &'a [String],
    used: Vec<bool>,
    best: usize,
}

impl<'a> Search<'a> {
    fn run(
        &mut self,
        i: usize,
        prev: Option<usize>,
        chunks: usize,
        need: &mut HashMap<&'a str, usize>,
        left: &mut HashMap<&'a str, usize>,
    ) {
        if chunks >= self.best {
            return;
        }
        if i == self.cand.len() {
            self.best = chunks;
            return;
        }
        let w = self.cand[i].as_str();
        let n = need.get(w).copied().unwrap_or(0);
        let l = left[w];
        *left.get_mut(w).unwrap() -= 1;
        if n > 0 {
            // Prefer continuing the current chunk, then other positions.
            let mut options: Vec<usize> = (0..self.reference.len())
                .filter(|&j| !self.used[j] && self.reference[j] == w)
                .collect();
            if let Some(p) = prev {
                options.sort_by_key(|&j| j != p + 1);
            }
            for j in options {
                let cont = prev.is_some_and(|p| p + 1 == j);
                self.used[j] = true;
                *need.get_mut(w).unwrap() -= 1;
                self.run(i + 1, Some(j), chunks + usize::from(!cont), need, left);
                *need.get_mut(w).unwrap() += 1;
                self.used[j] = false;
            }
        }
        // Skipping is only allowed while enough later occurrences remain to
        // reach the maximum number of matches.
        if l > n {
            self.run(i + 1, None, chunks, need, left);
        }
        *left.get_mut(w).unwrap() += 1;
    }
}

/// Exact-match METEOR without stemming or synonyms, on the 0..=100 scale.
pub fn meteor_lite(candidate: &[String], reference: &[String]) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let (m, chunks) = align(candidate, reference);
    if m == 0 {
        return 0.0;
    }
    let p = m as f64 / candidate.len() as f64;
    let r = m as f64 / reference.len() as f64;
    let f_mean = 10.0 * p * r / (r + 9.0 * p);
    let penalty = 0.5 * (chunks as f64 / m as f64).powi(3);
    100.0 * f_mean * (1.0 - penalty)
}
