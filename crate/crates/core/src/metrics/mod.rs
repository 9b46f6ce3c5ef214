//! Captioning metrics, scored per transformation description against its
//! single reference and averaged. All values use the x100 reporting scale;
//! CIDEr therefore tops out at 1000.

mod bleu;
mod cider;
mod meteor;
mod rouge;

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use bleu::{bleu4, bleu4_with, BLEU_EPSILON};
pub use cider::{cider_scores, CIDER_SIGMA};
pub use meteor::{align as meteor_align, meteor_lite};
pub use rouge::{rouge_l, ROUGE_BETA};

use crate::data::{DatasetManifest, Split};
use crate::decoder::Prediction;
use crate::error::{Result, VttError};
use crate::tokenize::tokenize;

/// One candidate/reference pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalPair {
    pub sample_id: String,
    pub index: usize,
    pub candidate: Vec<String>,
    pub reference: Vec<String>,
}

impl EvalPair {
    pub fn new(sample_id: impl Into<String>, index: usize, candidate: &str, reference: &str) -> Self {
        EvalPair {
            sample_id: sample_id.into(),
            index,
            candidate: tokenize(candidate),
            reference: tokenize(reference),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Bleu4,
    #[serde(rename = "rougeL")]
    RougeL,
    Cider,
    Meteor,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::Bleu4, Metric::RougeL, Metric::Cider, Metric::Meteor];
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bleu4: Option<f64>,
    #[serde(rename = "rougeL", skip_serializing_if = "Option::is_none")]
    pub rouge_l: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cider: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub meteor: Option<f64>,
}

impl Scores {
    pub fn get(&self, m: Metric) -> Option<f64> {
        match m {
            Metric::Bleu4 => self.bleu4,
            Metric::RougeL => self.rouge_l,
            Metric::Cider => self.cider,
            Metric::Meteor => self.meteor,
        }
    }

    fn slot(&mut self, m: Metric) -> &mut Option<f64> {
        match m {
            Metric::Bleu4 => &mut self.bleu4,
            Metric::RougeL => &mut self.rouge_l,
            Metric::Cider => &mut self.cider,
            Metric::Meteor => &mut self.meteor,
        }
    }
}

/// Per-sample breakdown, one entry per transformation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleScores {
    pub sample_id: String,
    pub scores: Vec<Scores>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub corpus: Scores,
    pub n_pairs: usize,
    pub per_sample: Vec<SampleScores>,
}

impl MetricReport {
    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("report serializes");
        fs::write(path, text + "\n").map_err(|e| VttError::io(path, e))
    }
}

/// Score every pair; corpus values are plain means of the per-pair scores.
pub fn evaluate_pairs(pairs: &[EvalPair], metrics: &[Metric]) -> Result<MetricReport> {
    if pairs.is_empty() {
        return Err(VttError::Config("cannot evaluate an empty corpus".into()));
    }
    let cider = if metrics.contains(&Metric::Cider) {
        let refs: Vec<(&[String], &[String])> = pairs.iter().map(|p| (&p.candidate[..], &p.reference[..])).collect();
        Some(cider_scores(&refs))
    } else {
        None
    };
    let mut per_pair = Vec::with_capacity(pairs.len());
    for (i, p) in pairs.iter().enumerate() {
        let mut s = Scores::default();
        for &m in metrics {
            *s.slot(m) = Some(match m {
                Metric::Bleu4 => bleu4(&p.candidate, &p.reference),
                Metric::RougeL => rouge_l(&p.candidate, &p.reference),
                Metric::Meteor => meteor_lite(&p.candidate, &p.reference),
                Metric::Cider => cider.as_ref().expect("computed above")[i],
            });
        }
        per_pair.push(s);
    }
    let mut corpus = Scores::default();
    for &m in metrics {
        let sum: f64 = per_pair.iter().map(|s| s.get(m).expect("scored")).sum();
        *corpus.slot(m) = Some(sum / pairs.len() as f64);
    }
    let mut per_sample: Vec<SampleScores> = Vec::new();
    for (p, s) in pairs.iter().zip(per_pair) {
        match per_sample.last_mut() {
            Some(last) if last.sample_id == p.sample_id => last.scores.push(s),
            _ => per_sample.push(SampleScores {
                sample_id: p.sample_id.clone(),
                scores: vec![s],
            }),
        }
    }
    Ok(MetricReport {
        corpus,
        n_pairs: pairs.len(),
        per_sample,
    })
}

/// Pair predictions with the references of `split`. Every sample of the
/// split needs a prediction with the right number of descriptions.
pub fn build_pairs(predictions: &[Prediction], manifest: &DatasetManifest, split: Split) -> Result<Vec<EvalPair>> {
    let by_id: HashMap<&str, &Prediction> = predictions.iter().map(|p| (p.sample_id.as_str(), p)).collect();
    let mut missing = Vec::new();
    let mut pairs = Vec::new();
    for s in manifest.split(split) {
        match by_id.get(s.sample_id.as_str()) {
            None => missing.push(s.sample_id.clone()),
            Some(p) if p.transformations.len() != s.transformations.len() => missing.push(format!(
                "{} (expected {} descriptions, got {})",
                s.sample_id,
                s.transformations.len(),
                p.transformations.len()
            )),
            Some(p) => {
                for (i, (c, r)) in p.transformations.iter().zip(&s.transformations).enumerate() {
                    pairs.push(EvalPair::new(s.sample_id.clone(), i, c, r));
                }
            }
        }
    }
    if !missing.is_empty() {
        return Err(VttError::Coverage { missing });
    }
    Ok(pairs)
}

/// Score predictions against the references of one split.
pub fn evaluate_corpus(
    predictions: &[Prediction],
    manifest: &DatasetManifest,
    split: Split,
    metrics: &[Metric],
) -> Result<MetricReport> {
    evaluate_pairs(&build_pairs(predictions, manifest, split)?, metrics)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{StateRef, VttSample};

    fn toks(s: &str) -> Vec<String> {
        tokenize(s)
    }

    #[test]
    fn bleu_identity_and_disjoint() {
        assert_eq!(bleu4(&toks("pour the water"), &toks("pour the water")), 100.0);
        let d = bleu4(&toks("a b c d"), &toks("e f g h"));
        // Every order falls back to epsilon / total.
        let expected = 100.0 * ((0.1 / 4.0) * (0.1 / 3.0) * (0.1 / 2.0) * 0.1f64).powf(0.25);
        assert!((d - expected).abs() < 1e-9);
        assert!(d > 0.0 && d / 100.0 < 1.0);
        assert_eq!(bleu4(&[], &toks("a")), 0.0);
    }

    #[test]
    fn bleu_longer_candidate() {
        // Precisions 3/4, 2/3, 1/2, epsilon/1; no brevity penalty.
        let got = bleu4(&toks("boil the noodles now"), &toks("boil the noodles"));
        let expected = 100.0 * (0.75f64 * (2.0 / 3.0) * 0.5 * 0.1).powf(0.25);
        assert!((got - expected).abs() < 1e-9);
    }

    #[test]
    fn rouge_cases() {
        assert_eq!(rouge_l(&toks("a b c"), &toks("a b c")), 100.0);
        assert_eq!(rouge_l(&toks("a b"), &toks("c d")), 0.0);
        let (p, r, b2) = (0.75, 1.0, 1.44);
        let expected = 100.0 * (1.0 + b2) * p * r / (r + b2 * p);
        assert!((rouge_l(&toks("a b c d"), &toks("a c d")) - expected).abs() < 1e-9);
    }

    #[test]
    fn meteor_cases() {
        for m in 1..6usize {
            let s: Vec<String> = (0..m).map(|i| format!("w{i}")).collect();
            let expected = 100.0 * (1.0 - 0.5 * (1.0 / m as f64).powi(3));
            assert!((meteor_lite(&s, &s) - expected).abs() < 1e-9);
        }
        assert_eq!(meteor_lite(&toks("a b"), &toks("c d")), 0.0);
        assert_eq!(meteor_align(&toks("b a"), &toks("a b")), (2, 2));
        let expected = 100.0 * (1.0 - 0.5 * 1.0);
        assert!((meteor_lite(&toks("b a"), &toks("a b")) - expected).abs() < 1e-9);
        // Repeated words: the aligner finds the single-chunk placement.
        assert_eq!(meteor_align(&toks("the cat the cat"), &toks("the cat the cat")), (4, 1));
    }

    #[test]
    fn cider_identity_and_disjoint() {
        let refs = ["pour the fresh water", "cut the red onion", "boil two small eggs"];
        let pairs: Vec<(Vec<String>, Vec<String>)> = refs.iter().map(|r| (toks(r), toks(r))).collect();
        let view: Vec<(&[String], &[String])> = pairs.iter().map(|(a, b)| (&a[..], &b[..])).collect();
        for s in cider_scores(&view) {
            assert!((s - 1000.0).abs() < 1e-9);
        }
        let one = [(toks("a b"), toks("c d"))];
        let view: Vec<(&[String], &[String])> = one.iter().map(|(a, b)| (&a[..], &b[..])).collect();
        assert_eq!(cider_scores(&view), vec![0.0]);
    }

    fn manifest() -> DatasetManifest {
        let sample = |id: &str, ts: &[&str]| VttSample {
            sample_id: id.into(),
            category: "c".into(),
            topic: "t".into(),
            split: Split::Test,
            states: (0..=ts.len())
                .map(|k| StateRef {
                    state_id: format!("{id}/{k}"),
                    source: id.into(),
                    timestamp_sec: None,
                })
                .collect(),
            transformations: ts.iter().map(|s| s.to_string()).collect(),
        };
        DatasetManifest::new(vec![
            sample("a", &["crack the brown egg", "whisk the egg yolks"]),
            sample("b", &["slice the ripe tomato"]),
            sample("c", &["fold the paper crane", "paint the crane wings"]),
        ])
    }

    fn identity_predictions(m: &DatasetManifest) -> Vec<Prediction> {
        m.samples
            .iter()
            .map(|s| Prediction {
                sample_id: s.sample_id.clone(),
                transformations: s.transformations.clone(),
            })
            .collect()
    }

    #[test]
    fn identity_corpus_and_shuffled() {
        let m = manifest();
        let id = evaluate_corpus(&identity_predictions(&m), &m, Split::Test, &Metric::ALL).unwrap();
        assert_eq!(id.corpus.bleu4, Some(100.0));
        assert_eq!(id.corpus.rouge_l, Some(100.0));
        assert!((id.corpus.cider.unwrap() - 1000.0).abs() < 1e-9);
        assert_eq!(id.n_pairs, 5);
        assert_eq!(id.per_sample.len(), 3);

        let mut shuffled = identity_predictions(&m);
        shuffled[0].transformations.reverse();
        shuffled[2].transformations.reverse();
        let sh = evaluate_corpus(&shuffled, &m, Split::Test, &Metric::ALL).unwrap();
        for metric in Metric::ALL {
            assert!(sh.corpus.get(metric).unwrap() < id.corpus.get(metric).unwrap());
        }
    }

    #[test]
    fn coverage_errors_name_samples() {
        let m = manifest();
        let mut preds = identity_predictions(&m);
        preds.remove(1);
        preds[0].transformations.pop();
        match evaluate_corpus(&preds, &m, Split::Test, &Metric::ALL) {
            Err(VttError::Coverage { missing }) => {
                assert_eq!(missing.len(), 2);
                assert!(missing[0].starts_with("a "));
                assert_eq!(missing[1], "b");
            }
            other => panic!("expected coverage error, got {other:?}"),
        }
    }

    #[test]
    fn report_serializes_with_short_names() {
        let m = manifest();
        let r = evaluate_corpus(&identity_predictions(&m), &m, Split::Test, &[Metric::RougeL]).unwrap();
        let v = serde_json::to_value(&r).unwrap();
        assert!(v["corpus"]["rougeL"].is_number());
        assert!(v["corpus"].get("bleu4").is_none());
    }
}
