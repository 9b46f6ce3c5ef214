//! Text side of the model: word-level vocabulary, teacher-forced NLL,
//! top-k/top-p sampling and the prediction file format.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView1};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{log_softmax_rows, Reduction};
use crate::error::{Result, VttError};
use crate::tokenize::tokenize;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(VttError::invalid("vocabulary", t.clone(), "duplicate token"));
            }
        }
        for (i, s) in SPECIALS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*s) {
                return Err(VttError::invalid("vocabulary", *s, format!("special token must have id {i}")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    /// Word-level vocabulary ordered by descending frequency, then
    /// lexicographically. Words seen fewer than `min_freq` times are left
    /// out and encode as UNK.
    pub fn build<S: AsRef<str>>(corpus: &[S], min_freq: usize) -> Result<Self> {
        if corpus.is_empty() {
            return Err(VttError::Config("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut freq: BTreeMap<String, usize> = BTreeMap::new();
        for text in corpus {
            for w in tokenize(text.as_ref()) {
                *freq.entry(w).or_default() += 1;
            }
        }
        let mut words: Vec<(String, usize)> = freq.into_iter().filter(|&(_, c)| c >= min_freq.max(1)).collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(words.into_iter().map(|(w, _)| w))
            .collect();
        Self::from_tokens(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// `[BOS, words..., EOS]`.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        std::iter::once(BOS)
            .chain(tokenize(text).iter().map(|w| self.id(w).unwrap_or(UNK)))
            .chain(std::iter::once(EOS))
            .collect()
    }

    /// Words up to the first EOS; BOS and PAD are skipped.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .take_while(|&&i| i != EOS)
            .filter(|&&i| i != BOS && i != PAD)
            .map(|&i| self.token(i).unwrap_or(SPECIALS[UNK]))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// One token per line; the line number is the id.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        fs::write(path, text).map_err(|e| VttError::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| VttError::io(path, e))?;
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }
}

/// Negative log-likelihood of `targets` under row-wise softmax of `logits`;
/// PAD targets are skipped.
pub fn nll_loss(logits: &Array2<f64>, targets: &[usize], reduction: Reduction) -> Result<f64> {
    if logits.nrows() != targets.len() {
        return Err(VttError::Shape(format!(
            "{} logit rows for {} targets",
            logits.nrows(),
            targets.len()
        )));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= logits.ncols()) {
        return Err(VttError::Shape(format!("target id {t} outside vocabulary of {}", logits.ncols())));
    }
    let logp = log_softmax_rows(logits);
    let mut total = 0.0;
    let mut count = 0usize;
    for (r, &t) in targets.iter().enumerate() {
        if t != PAD {
            total -= logp[[r, t]];
            count += 1;
        }
    }
    Ok(match reduction {
        Reduction::Sum => total,
        Reduction::Mean if count == 0 => 0.0,
        Reduction::Mean => total / count as f64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub top_k: usize,
    pub top_p: f64,
    pub max_len: usize,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            top_k: 100,
            top_p: 0.9,
            max_len: 16,
            temperature: 1.0,
            seed: 0,
        }
    }
}

impl SamplingConfig {
    /// Top-1 decoding.
    pub fn greedy() -> Self {
        SamplingConfig {
            top_k: 1,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.top_k == 0 {
            return Err(VttError::Config("top_k must be at least 1".into()));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(VttError::Config(format!("top_p must lie in (0, 1], got {}", self.top_p)));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(VttError::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        if self.max_len == 0 {
            return Err(VttError::Config("max_len must be at least 1".into()));
        }
        Ok(())
    }
}

/// Softmax of `logits / temperature`.
pub fn softmax(logits: ArrayView1<f64>, temperature: f64) -> Vec<f64> {
    let max = logits.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let exps: Vec<f64> = logits.iter().map(|&x| ((x - max) / temperature).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Candidates kept by top-k then top-p filtering, renormalized, in
/// descending probability order (ties broken by lower id).
pub fn nucleus_support(probs: &[f64], top_k: usize, top_p: f64) -> Vec<(usize, f64)> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    order.truncate(top_k.max(1));
    let mut kept = Vec::with_capacity(order.len());
    let mut mass = 0.0;
    for id in order {
        kept.push((id, probs[id]));
        mass += probs[id];
        if mass >= top_p {
            break;
        }
    }
    for (_, p) in &mut kept {
        *p /= mass;
    }
    kept
}

/// Draw one id from a renormalized support.
pub fn sample_from<R: Rng + ?Sized>(support: &[(usize, f64)], rng: &mut R) -> usize {
    if support.len() == 1 {
        return support[0].0;
    }
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for &(id, p) in support {
        acc += p;
        if u < acc {
            return id;
        }
    }
    support[support.len() - 1].0
}

/// Generated descriptions for one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResult {
    pub sample_id: String,
    pub transformations: Vec<String>,
    /// Generated ids per description, including the final EOS if reached.
    pub token_ids: Vec<Vec<usize>>,
    /// Model log-probability (temperature 1, before filtering) of each
    /// generated id.
    pub token_logprobs: Vec<Vec<f64>>,
}

/// One line of a predictions file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub sample_id: String,
    pub transformations: Vec<String>,
}

impl From<&GenerationResult> for Prediction {
    fn from(g: &GenerationResult) -> Self {
        Prediction {
            sample_id: g.sample_id.clone(),
            transformations: g.transformations.clone(),
        }
    }
}

pub fn write_predictions(preds: &[Prediction], path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| VttError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for p in preds {
        let line = serde_json::to_string(p).expect("predictions serialize");
        writeln!(w, "{line}").map_err(|e| VttError::io(path, e))?;
    }
    w.flush().map_err(|e| VttError::io(path, e))
}

pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>> {
    let file = fs::File::open(path).map_err(|e| VttError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| VttError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| VttError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            reason: e.to_string(),
        })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;
    use ndarray::array;

    #[test]
    fn vocabulary_enumeration() {
        let v = Vocabulary::build(&["pour milk", "pour water"], 1).unwrap();
        assert_eq!(v.tokens(), &["<pad>", "<bos>", "<eos>", "<unk>", "pour", "milk", "water"]);
        let v2 = Vocabulary::build(&["pour milk", "pour water"], 2).unwrap();
        assert_eq!(v2.len(), 5);
        assert_eq!(v2.encode("pour milk"), vec![BOS, 4, UNK, EOS]);
        assert_eq!(v.decode(&v.encode("Pour, WATER!")), "pour water");
        assert!(Vocabulary::build::<&str>(&[], 1).is_err());
    }

    #[test]
    fn vocabulary_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let v = Vocabulary::build(&["a b c", "b c", "c"], 1).unwrap();
        v.write(&path).unwrap();
        assert_eq!(Vocabulary::read(&path).unwrap(), v);
        fs::write(&path, "<pad>\n<bos>\n<eos>\n<unk>\nx\nx\n").unwrap();
        assert!(Vocabulary::read(&path).is_err());
        fs::write(&path, "x\n<bos>\n<eos>\n<unk>\n").unwrap();
        assert!(Vocabulary::read(&path).is_err());
    }

    #[test]
    fn nll_extremes() {
        let mut perfect = Array2::from_elem((3, 5), -1e4);
        for (r, t) in [4, 1, 2].iter().enumerate() {
            perfect[[r, *t]] = 1e4;
        }
        assert_eq!(nll_loss(&perfect, &[4, 1, 2], Reduction::Mean).unwrap(), 0.0);
        let uniform = Array2::zeros((4, 16));
        let l = nll_loss(&uniform, &[5, 6, 7, 8], Reduction::Mean).unwrap();
        assert!((l - 16f64.ln()).abs() < 1e-12);
        let s = nll_loss(&uniform, &[5, 6, PAD, 8], Reduction::Sum).unwrap();
        assert!((s - 3.0 * 16f64.ln()).abs() < 1e-12);
        assert!(nll_loss(&uniform, &[1, 2], Reduction::Mean).is_err());
        assert!(nll_loss(&uniform, &[1, 2, 3, 99], Reduction::Mean).is_err());
    }

    #[test]
    fn nll_matches_naive_oracle() {
        let logits = array![[0.3, -1.2, 2.0, 0.0], [1.5, 0.1, -0.7, 0.4], [-2.0, 0.9, 0.3, 1.1]];
        let targets = [2, 1, 3];
        let mut oracle = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let z: f64 = logits.row(r).iter().map(|x: &f64| x.exp()).sum();
            oracle -= (logits[[r, t]].exp() / z).ln();
        }
        let got = nll_loss(&logits, &targets, Reduction::Mean).unwrap();
        assert!((got - oracle / 3.0).abs() < 1e-6);
    }

    #[test]
    fn nucleus_worked_example() {
        let s = nucleus_support(&[0.5, 0.3, 0.15, 0.05], 4, 0.9);
        let ids: Vec<usize> = s.iter().map(|x| x.0).collect();
        assert_eq!(ids, vec![0, 1, 2]);
        let expected = [0.5 / 0.95, 0.3 / 0.95, 0.15 / 0.95];
        for ((_, p), e) in s.iter().zip(expected) {
            assert!((p - e).abs() < 1e-12);
        }
        assert_eq!(nucleus_support(&[0.1, 0.6, 0.3], 1, 1.0), vec![(1, 1.0)]);
        assert_eq!(nucleus_support(&[0.0, 1.0, 0.0], 3, 0.5), vec![(1, 1.0)]);
    }

    #[test]
    fn nucleus_support_grows_with_p() {
        let mut rng = stream_rng(5, "probs");
        for _ in 0..200 {
            let raw: Vec<f64> = (0..10).map(|_| rng.random::<f64>()).collect();
            let z: f64 = raw.iter().sum();
            let probs: Vec<f64> = raw.iter().map(|x| x / z).collect();
            let mut prev = 0;
            for p in [0.1, 0.3, 0.5, 0.7, 0.9, 1.0] {
                let n = nucleus_support(&probs, 10, p).len();
                assert!(n >= prev);
                prev = n;
            }
            assert_eq!(nucleus_support(&probs, 10, 1.0).len(), 10);
        }
    }

    #[test]
    fn degenerate_distribution_always_picks_its_token() {
        let mut rng = stream_rng(6, "draw");
        let support = nucleus_support(&[0.0, 0.0, 1.0, 0.0], 4, 0.9);
        for _ in 0..100 {
            assert_eq!(sample_from(&support, &mut rng), 2);
        }
    }

    #[test]
    fn predictions_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.jsonl");
        let preds = vec![Prediction {
            sample_id: "a".into(),
            transformations: vec!["x y".into(), "z".into()],
        }];
        write_predictions(&preds, &path).unwrap();
        assert_eq!(read_predictions(&path).unwrap(), preds);
    }

    #[test]
    fn sampling_config_validation() {
        assert!(SamplingConfig::default().validate().is_ok());
        assert!(SamplingConfig { top_k: 0, ..Default::default() }.validate().is_err());
        assert!(SamplingConfig { top_p: 0.0, ..Default::default() }.validate().is_err());
        assert_eq!(softmax(array![0.0, 0.0].view(), 1.0), vec![0.5, 0.5]);
    }
}
