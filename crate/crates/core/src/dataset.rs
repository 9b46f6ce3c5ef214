//! Turns segment-annotated videos into samples, computes dataset statistics
//! and produces the train/val/test and seen/unseen partitions.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetManifest, Split, StateRef, VttSample};
use crate::error::{Result, VttError};
use crate::rng::stream_rng;
use crate::tokenize::{normalize, tokenize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub start_sec: f64,
    pub end_sec: f64,
    pub label: String,
}

/// One annotated video. On disk the segments are `[start, end, label]`
/// triples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "AnnotationWire", into = "AnnotationWire")]
pub struct SegmentAnnotation {
    pub video_id: String,
    pub category: String,
    pub topic: String,
    pub segments: Vec<Segment>,
}

#[derive(Serialize, Deserialize)]
struct AnnotationWire {
    video_id: String,
    category: String,
    topic: String,
    segments: Vec<(f64, f64, String)>,
}

impl From<AnnotationWire> for SegmentAnnotation {
    fn from(w: AnnotationWire) -> Self {
        SegmentAnnotation {
            video_id: w.video_id,
            category: w.category,
            topic: w.topic,
            segments: w
                .segments
                .into_iter()
                .map(|(start_sec, end_sec, label)| Segment {
                    start_sec,
                    end_sec,
                    label,
                })
                .collect(),
        }
    }
}

impl From<SegmentAnnotation> for AnnotationWire {
    fn from(a: SegmentAnnotation) -> Self {
        AnnotationWire {
            video_id: a.video_id,
            category: a.category,
            topic: a.topic,
            segments: a.segments.into_iter().map(|s| (s.start_sec, s.end_sec, s.label)).collect(),
        }
    }
}

impl SegmentAnnotation {
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| VttError::invalid("annotation", &self.video_id, reason);
        if self.segments.is_empty() {
            return Err(bad("no segments".into()));
        }
        if self.category.trim().is_empty() || self.topic.trim().is_empty() {
            return Err(bad("category and topic must be non-empty".into()));
        }
        for (k, seg) in self.segments.iter().enumerate() {
            if !seg.start_sec.is_finite() || !seg.end_sec.is_finite() || seg.start_sec < 0.0 {
                return Err(bad(format!("segment {k} has invalid bounds")));
            }
            if seg.start_sec >= seg.end_sec {
                return Err(bad(format!(
                    "segment {k} has start {} >= end {}",
                    seg.start_sec, seg.end_sec
                )));
            }
            if seg.label.trim().is_empty() {
                return Err(bad(format!("segment {k} has an empty label")));
            }
            if k > 0 {
                let prev = &self.segments[k - 1];
                if seg.start_sec < prev.start_sec {
                    return Err(bad(format!("segment {k} is not sorted by start time")));
                }
                if seg.start_sec < prev.end_sec {
                    return Err(bad(format!("segment {k} overlaps segment {}", k - 1)));
                }
            }
        }
        Ok(())
    }
}

/// Read annotation JSONL. Parse errors carry the line number.
pub fn read_annotations(path: &Path) -> Result<Vec<SegmentAnnotation>> {
    let file = File::open(path).map_err(|e| VttError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| VttError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let ann: SegmentAnnotation = serde_json::from_str(&line).map_err(|e| VttError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            reason: e.to_string(),
        })?;
        out.push(ann);
    }
    Ok(out)
}

/// Apply the state extraction rule: the first state is the start of the
/// first segment, every later state is the end of a segment, and the
/// transformations are the segment labels in order.
///
/// Samples are tagged `train`; [`assign_splits`] decides the real split.
pub fn build_samples(annotations: &[SegmentAnnotation]) -> Result<Vec<VttSample>> {
    let mut seen = HashSet::new();
    annotations
        .iter()
        .map(|ann| {
            ann.validate()?;
            if !seen.insert(ann.video_id.as_str()) {
                return Err(VttError::invalid("annotation", &ann.video_id, "duplicate video_id"));
            }
            let times = std::iter::once(ann.segments[0].start_sec).chain(ann.segments.iter().map(|s| s.end_sec));
            let states = times
                .enumerate()
                .map(|(k, t)| StateRef {
                    state_id: format!("{}#{k}", ann.video_id),
                    source: ann.video_id.clone(),
                    timestamp_sec: Some(t),
                })
                .collect();
            Ok(VttSample {
                sample_id: ann.video_id.clone(),
                category: ann.category.clone(),
                topic: ann.topic.clone(),
                split: Split::Train,
                states,
                transformations: ann.segments.iter().map(|s| s.label.clone()).collect(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DatasetStats {
    pub n_samples: usize,
    pub n_states: usize,
    pub n_transformations: usize,
    pub n_unique_transformations: usize,
    pub n_categories: usize,
    pub n_topics: usize,
    pub n_unique_words: usize,
    pub per_category: BTreeMap<String, usize>,
    pub per_topic: BTreeMap<String, usize>,
    /// transformations per sample -> number of samples
    pub transformation_length_hist: BTreeMap<usize, usize>,
    /// tokens per description -> number of descriptions
    pub sentence_length_hist: BTreeMap<usize, usize>,
    pub word_freq: BTreeMap<String, usize>,
}

/// Statistics over the whole manifest, or over one split.
pub fn compute_stats(manifest: &DatasetManifest, split: Option<Split>) -> DatasetStats {
    let mut st = DatasetStats::default();
    let mut unique = BTreeSet::new();
    for s in manifest.samples.iter().filter(|s| split.is_none_or(|sp| s.split == sp)) {
        st.n_samples += 1;
        st.n_states += s.states.len();
        st.n_transformations += s.transformations.len();
        *st.per_category.entry(s.category.clone()).or_default() += 1;
        *st.per_topic.entry(s.topic.clone()).or_default() += 1;
        *st.transformation_length_hist.entry(s.transformations.len()).or_default() += 1;
        for t in &s.transformations {
            unique.insert(normalize(t));
            let toks = tokenize(t);
            *st.sentence_length_hist.entry(toks.len()).or_default() += 1;
            for w in toks {
                *st.word_freq.entry(w).or_default() += 1;
            }
        }
    }
    st.n_unique_transformations = unique.len();
    st.n_categories = st.per_category.len();
    st.n_topics = st.per_topic.len();
    st.n_unique_words = st.word_freq.len();
    st
}

impl DatasetStats {
    /// Plain-text table in the layout of the dataset statistics table.
    pub fn table(columns: &[(&str, &DatasetStats)]) -> String {
        let mut out = format!("{:<14}", "");
        for (name, _) in columns {
            out += &format!("{name:>10}");
        }
        out.push('\n');
        let rows: [(&str, fn(&DatasetStats) -> usize); 6] = [
            ("Categories", |s| s.n_categories),
            ("Topics", |s| s.n_topics),
            ("Samples", |s| s.n_samples),
            ("States", |s| s.n_states),
            ("Trans.", |s| s.n_transformations),
            ("Unique Trans.", |s| s.n_unique_transformations),
        ];
        for (label, get) in rows {
            out += &format!("{label:<14}");
            for (_, st) in columns {
                out += &format!("{:>10}", get(st));
            }
            out.push('\n');
        }
        out
    }
}

/// Split ratios for train / val / test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            train: 0.794,
            val: 0.100,
            test: 0.106,
        }
    }
}

impl SplitRatios {
    pub fn new(train: f64, val: f64, test: f64) -> Result<Self> {
        let r = SplitRatios { train, val, test };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        let v = [self.train, self.val, self.test];
        if v.iter().any(|x| !x.is_finite() || *x <= 0.0) {
            return Err(VttError::Config(format!("split ratios must be positive, got {v:?}")));
        }
        if (v.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
            return Err(VttError::Config(format!("split ratios must sum to 1, got {v:?}")));
        }
        Ok(())
    }

    /// Split `n` items by largest remainder. Ties go to the earlier split.
    pub fn allocate(&self, n: usize) -> [usize; 3] {
        let exact = [self.train, self.val, self.test].map(|r| r * n as f64);
        let mut counts = exact.map(|x| x.floor() as usize);
        let mut order = [0usize, 1, 2];
        // Remainders are compared after rounding so that float noise such
        // as 0.6 * 4 = 2.3999... does not break ties in favour of later splits.
        let frac = exact.map(|x| ((x - x.floor()) * 1e9).round() as u64);
        order.sort_by(|&a, &b| frac[b].cmp(&frac[a]).then(a.cmp(&b)));
        let mut left = n - counts.iter().sum::<usize>();
        for &k in order.iter().cycle() {
            if left == 0 {
                break;
            }
            counts[k] += 1;
            left -= 1;
        }
        counts
    }
}

/// Topic-stratified random split. Within every topic the samples are
/// shuffled with a stream derived from `(seed, topic)` and cut by
/// [`SplitRatios::allocate`]. Topics with fewer samples than splits go to
/// train entirely. Sample order in the output follows the input.
pub fn assign_splits(samples: Vec<VttSample>, ratios: SplitRatios, seed: u64) -> Result<DatasetManifest> {
    ratios.validate()?;
    let mut by_topic: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        by_topic.entry(s.topic.as_str()).or_default().push(i);
    }
    let mut assigned = vec![Split::Train; samples.len()];
    for (topic, mut idx) in by_topic {
        if idx.len() < Split::ALL.len() {
            log::warn!(
                "topic `{topic}` has {} sample(s), fewer than the number of splits; all go to train",
                idx.len()
            );
            continue;
        }
        let mut rng = stream_rng(seed, &format!("split/{topic}"));
        idx.shuffle(&mut rng);
        let [n_train, n_val, _] = ratios.allocate(idx.len());
        for (pos, &i) in idx.iter().enumerate() {
            assigned[i] = if pos < n_train {
                Split::Train
            } else if pos < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
        }
    }
    let samples = samples
        .into_iter()
        .zip(assigned)
        .map(|(mut s, split)| {
            s.split = split;
            s
        })
        .collect();
    let manifest = DatasetManifest::new(samples);
    manifest.validate()?;
    Ok(manifest)
}

/// Ordered tuple of normalized descriptions identifying a sample's
/// transformation combination.
pub fn combination_key(sample: &VttSample) -> Vec<String> {
    sample.transformations.iter().map(|t| normalize(t)).collect()
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CombinationSplit {
    pub seen_sample_ids: BTreeSet<String>,
    pub unseen_sample_ids: BTreeSet<String>,
    /// Distinct combinations among the seen / unseen samples.
    pub n_seen_combinations: usize,
    pub n_unseen_combinations: usize,
}

/// Partition `eval_split` by whether each sample's transformation
/// combination also occurs in the train split.
pub fn split_seen_unseen(manifest: &DatasetManifest, eval_split: Split) -> Result<CombinationSplit> {
    let train: HashSet<Vec<String>> = manifest.split(Split::Train).map(combination_key).collect();
    if train.is_empty() {
        return Err(VttError::Config("seen/unseen split needs a non-empty train split".into()));
    }
    let mut out = CombinationSplit::default();
    let mut seen_keys = HashSet::new();
    let mut unseen_keys = HashSet::new();
    for s in manifest.split(eval_split) {
        let key = combination_key(s);
        if train.contains(&key) {
            out.seen_sample_ids.insert(s.sample_id.clone());
            seen_keys.insert(key);
        } else {
            out.unseen_sample_ids.insert(s.sample_id.clone());
            unseen_keys.insert(key);
        }
    }
    out.n_seen_combinations = seen_keys.len();
    out.n_unseen_combinations = unseen_keys.len();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ann(id: &str, topic: &str, segs: &[(f64, f64, &str)]) -> SegmentAnnotation {
        SegmentAnnotation {
            video_id: id.into(),
            category: "dish".into(),
            topic: topic.into(),
            segments: segs
                .iter()
                .map(|&(a, b, l)| Segment {
                    start_sec: a,
                    end_sec: b,
                    label: l.into(),
                })
                .collect(),
        }
    }

    fn timestamps(s: &VttSample) -> Vec<f64> {
        s.states.iter().map(|x| x.timestamp_sec.unwrap()).collect()
    }

    #[test]
    fn extraction_rule() {
        let out = build_samples(&[
            ann("v1", "t", &[(0.0, 5.0, "a"), (5.0, 9.0, "b"), (12.0, 20.0, "c")]),
            ann("v2", "t", &[(2.0, 4.0, "x")]),
        ])
        .unwrap();
        assert_eq!(timestamps(&out[0]), [0.0, 5.0, 9.0, 20.0]);
        assert_eq!(out[0].transformations, ["a", "b", "c"]);
        assert_eq!(timestamps(&out[1]), [2.0, 4.0]);
        assert_eq!(out[1].transformations, ["x"]);
        assert_eq!(out[1].states[0].source, "v2");
    }

    #[test]
    fn bad_annotations_are_named() {
        for a in [
            ann("empty", "t", &[]),
            ann("unsorted", "t", &[(5.0, 9.0, "b"), (0.0, 4.0, "a")]),
            ann("overlap", "t", &[(0.0, 5.0, "a"), (4.0, 9.0, "b")]),
            ann("inverted", "t", &[(3.0, 3.0, "a")]),
            ann("nolabel", "t", &[(0.0, 1.0, " ")]),
        ] {
            let err = build_samples(std::slice::from_ref(&a)).unwrap_err().to_string();
            assert!(err.contains(&a.video_id), "{err}");
        }
    }

    #[test]
    fn annotation_wire_format() {
        let line = r#"{"video_id":"v","category":"c","topic":"t","segments":[[0.5,2.0,"cut mango"]]}"#;
        let a: SegmentAnnotation = serde_json::from_str(line).unwrap();
        assert_eq!(a.segments[0].label, "cut mango");
        assert_eq!(serde_json::to_string(&a).unwrap(), line);
    }

    #[test]
    fn stats_hand_counted() {
        let mut s = build_samples(&[ann("v", "t", &[(0.0, 1.0, "a b"), (1.0, 2.0, "a")])]).unwrap();
        s[0].split = Split::Train;
        let st = compute_stats(&DatasetManifest::new(s), None);
        assert_eq!(st.word_freq, BTreeMap::from([("a".into(), 2), ("b".into(), 1)]));
        assert_eq!(st.sentence_length_hist, BTreeMap::from([(2, 1), (1, 1)]));
        assert_eq!(st.n_states, st.n_samples + st.n_transformations);
        assert_eq!(st.n_unique_transformations, 2);
    }

    #[test]
    fn allocation_uses_largest_remainder() {
        let r = SplitRatios::new(0.8, 0.1, 0.1).unwrap();
        assert_eq!(r.allocate(10), [8, 1, 1]);
        // 5.6 / 0.7 / 0.7: the two 0.7 remainders win the leftover seats.
        assert_eq!(r.allocate(7), [5, 1, 1]);
        assert_eq!(SplitRatios::new(0.5, 0.25, 0.25).unwrap().allocate(3), [1, 1, 1]);
        assert_eq!(SplitRatios::new(0.6, 0.3, 0.1).unwrap().allocate(4), [3, 1, 0]);
        assert!(SplitRatios::new(0.8, 0.1, 0.2).is_err());
        assert!(SplitRatios::new(1.0, 0.0, 0.0).is_err());
    }

    fn topic_samples(n: usize, topic: &str) -> Vec<VttSample> {
        let anns: Vec<_> = (0..n)
            .map(|i| ann(&format!("{topic}-{i}"), topic, &[(0.0, 1.0, "a"), (1.0, 2.0, "b")]))
            .collect();
        build_samples(&anns).unwrap()
    }

    #[test]
    fn split_single_topic_is_reproducible() {
        let r = SplitRatios::new(0.8, 0.1, 0.1).unwrap();
        let a = assign_splits(topic_samples(10, "t"), r, 0).unwrap();
        let b = assign_splits(topic_samples(10, "t"), r, 0).unwrap();
        assert_eq!(a, b);
        assert_eq!(
            [a.split_len(Split::Train), a.split_len(Split::Val), a.split_len(Split::Test)],
            [8, 1, 1]
        );
        let c = assign_splits(topic_samples(10, "t"), r, 1).unwrap();
        assert_ne!(
            a.samples.iter().map(|s| s.split).collect::<Vec<_>>(),
            c.samples.iter().map(|s| s.split).collect::<Vec<_>>()
        );
    }

    #[test]
    fn tiny_topic_goes_to_train() {
        let r = SplitRatios::new(0.8, 0.1, 0.1).unwrap();
        let m = assign_splits(topic_samples(2, "t"), r, 3).unwrap();
        assert_eq!(m.split_len(Split::Train), 2);
    }

    #[test]
    fn seen_unseen_by_definition() {
        let mut samples = build_samples(&[
            ann("tr1", "t", &[(0.0, 1.0, "Cut  Mango"), (1.0, 2.0, "peel")]),
            ann("te1", "t", &[(0.0, 1.0, "cut mango"), (1.0, 2.0, "peel")]),
            ann("te2", "t", &[(0.0, 1.0, "peel"), (1.0, 2.0, "cut mango")]),
        ])
        .unwrap();
        samples[1].split = Split::Test;
        samples[2].split = Split::Test;
        let m = DatasetManifest::new(samples);
        let cs = split_seen_unseen(&m, Split::Test).unwrap();
        assert_eq!(cs.seen_sample_ids, BTreeSet::from(["te1".to_string()]));
        assert_eq!(cs.unseen_sample_ids, BTreeSet::from(["te2".to_string()]));

        let only_test = DatasetManifest::new(m.samples.iter().filter(|s| s.split == Split::Test).cloned().collect());
        assert!(split_seen_unseen(&only_test, Split::Test).is_err());
    }

    fn arb_annotation(idx: usize) -> impl Strategy<Value = SegmentAnnotation> {
        prop::collection::vec((0.0f64..10.0, 0.01f64..10.0, "[a-z]{1,5}"), 1..8).prop_map(move |raw| {
            let mut t = 0.0;
            let segments = raw
                .into_iter()
                .map(|(gap, len, label)| {
                    let start = t + gap;
                    t = start + len;
                    Segment {
                        start_sec: start,
                        end_sec: t,
                        label,
                    }
                })
                .collect();
            SegmentAnnotation {
                video_id: format!("v{idx}"),
                category: "c".into(),
                topic: "t".into(),
                segments,
            }
        })
    }

    proptest! {
        #[test]
        fn built_samples_satisfy_invariants(a in arb_annotation(0)) {
            let s = &build_samples(std::slice::from_ref(&a)).unwrap()[0];
            prop_assert_eq!(s.states.len(), s.transformations.len() + 1);
            let ts = timestamps(s);
            prop_assert!(ts.windows(2).all(|w| w[0] <= w[1]));
            prop_assert!(s.validate().is_ok());
        }

        #[test]
        fn splits_partition(n_topics in 1usize..5, per in 1usize..12, seed in 0u64..100) {
            let samples: Vec<_> = (0..n_topics).flat_map(|t| topic_samples(per, &format!("t{t}"))).collect();
            let total = samples.len();
            let m = assign_splits(samples.clone(), SplitRatios::default(), seed).unwrap();
            let counted: usize = Split::ALL.iter().map(|&s| m.split_len(s)).sum();
            prop_assert_eq!(counted, total);
            let again = assign_splits(samples, SplitRatios::default(), seed).unwrap();
            prop_assert_eq!(m, again);
        }
    }
}
