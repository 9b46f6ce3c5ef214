//! Analysis protocols: inference with restricted context, seen versus unseen
//! transformation combinations, and ablation sweeps over training toggles.

use std::fs;
use std::path::Path;
use std::sync::Mutex;
use std::time::Instant;

use ndarray::{s, Array2, Axis};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetManifest, EmbeddingStore, Split, VttSample};
use crate::dataset::split_seen_unseen;
use crate::decoder::{GenerationResult, Prediction, SamplingConfig, Vocabulary};
use crate::encoder::MtmPolicy;
use crate::encoding::raw_state_matrix;
use crate::error::{Result, VttError};
use crate::metrics::{evaluate_corpus, Metric, MetricReport, Scores};
use crate::model::{generate_sample, generation_rng, DiffFusion, EncoderItem, Toggles, TtNet, TtNetConfig};
use crate::rng::stream_rng;
use crate::train::{train, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextMode {
    #[default]
    Full,
    /// Each transformation sees only its own two states.
    AdjacentOnly,
    /// One uniformly chosen state is zeroed.
    MaskOneRandom,
    /// Every state but the first and last is zeroed.
    EndpointsOnly,
}

impl ContextMode {
    pub const ALL: [ContextMode; 4] = [
        ContextMode::Full,
        ContextMode::AdjacentOnly,
        ContextMode::MaskOneRandom,
        ContextMode::EndpointsOnly,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ContextMode::Full => "full",
            ContextMode::AdjacentOnly => "adjacent_only",
            ContextMode::MaskOneRandom => "mask_one_random",
            ContextMode::EndpointsOnly => "endpoints_only",
        }
    }
}

impl std::str::FromStr for ContextMode {
    type Err = VttError;

    fn from_str(s: &str) -> Result<Self> {
        ContextMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| VttError::Config(format!("unknown context setting `{s}`")))
    }
}

/// Inference-time context restriction. Training is never affected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ContextSetting {
    pub mode: ContextMode,
    /// Seeds the choice of state for `mask_one_random`.
    pub seed: u64,
}

impl ContextSetting {
    pub fn new(mode: ContextMode, seed: u64) -> Self {
        ContextSetting { mode, seed }
    }
}

/// Model inputs for one sample under `setting`. Every mode but
/// `adjacent_only` yields a single item; `adjacent_only` yields one
/// two-state item per transformation, in order. `endpoints_only` on a
/// two-state sample is the same as `full`.
pub fn apply_context_setting(
    model: &TtNet,
    sample_id: &str,
    raw: &Array2<f64>,
    setting: &ContextSetting,
) -> Result<Vec<EncoderItem>> {
    let n = raw.nrows();
    if n < 2 {
        return Err(VttError::Shape(format!("sample `{sample_id}` has {n} states")));
    }
    let mut item = model.item(raw.clone());
    match setting.mode {
        ContextMode::Full => {}
        ContextMode::AdjacentOnly => {
            return Ok((0..n - 1).map(|i| model.item(raw.slice(s![i..i + 2, ..]).to_owned())).collect());
        }
        ContextMode::MaskOneRandom => {
            let mut rng = stream_rng(setting.seed, &format!("context/mask_one/{sample_id}"));
            item.dropped[rng.random_range(0..n)] = true;
        }
        ContextMode::EndpointsOnly => {
            for d in &mut item.dropped[1..n - 1] {
                *d = true;
            }
        }
    }
    Ok(vec![item])
}

/// Generate descriptions for one sample under a context setting. Sampling
/// uses the same per-sample stream as normal generation, so `full` matches
/// it exactly.
pub fn generate_with_setting(
    model: &TtNet,
    vocab: &Vocabulary,
    sample_id: &str,
    raw: &Array2<f64>,
    setting: &ContextSetting,
    cfg: &SamplingConfig,
) -> Result<GenerationResult> {
    let items = apply_context_setting(model, sample_id, raw, setting)?;
    let contexts = model.encode(&items)?;
    if setting.mode != ContextMode::AdjacentOnly {
        return generate_sample(model, vocab, sample_id, &contexts[0], cfg);
    }
    let views: Vec<_> = contexts.iter().map(|c| c.transformation_reps.view()).collect();
    let reps = ndarray::concatenate(Axis(0), &views).map_err(|e| VttError::Shape(e.to_string()))?;
    let mut rng = generation_rng(cfg.seed, sample_id);
    let (token_ids, token_logprobs) = model.sample_descriptions(&reps, cfg, &mut rng)?;
    Ok(GenerationResult {
        sample_id: sample_id.to_string(),
        transformations: token_ids.iter().map(|ids| vocab.decode(ids)).collect(),
        token_ids,
        token_logprobs,
    })
}

/// Predictions for every sample of `split` under one setting, in manifest
/// order.
pub fn predict_with_setting(
    model: &TtNet,
    vocab: &Vocabulary,
    manifest: &DatasetManifest,
    store: &EmbeddingStore,
    split: Split,
    setting: &ContextSetting,
    cfg: &SamplingConfig,
) -> Result<Vec<Prediction>> {
    let samples: Vec<&VttSample> = manifest.split(split).collect();
    samples
        .par_iter()
        .map(|s| {
            let raw = raw_state_matrix(s, store)?;
            let r = generate_with_setting(model, vocab, &s.sample_id, &raw, setting, cfg)?;
            Ok(Prediction::from(&r))
        })
        .collect()
}

/// Per-metric `(full - restricted) / full`; metrics missing on either side
/// or with a zero full score are omitted.
pub fn relative_drop(full: &Scores, restricted: &Scores) -> Scores {
    let mut out = Scores::default();
    let drop = |m: Metric| match (full.get(m), restricted.get(m)) {
        (Some(f), Some(r)) if f != 0.0 => Some((f - r) / f),
        _ => None,
    };
    out.bleu4 = drop(Metric::Bleu4);
    out.rouge_l = drop(Metric::RougeL);
    out.cider = drop(Metric::Cider);
    out.meteor = drop(Metric::Meteor);
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextRow {
    /// Setting name; the retrained variant is `adjacent_only_retrain`.
    pub setting: String,
    pub report: MetricReport,
    /// Relative to the full-context row.
    pub relative_drop: Scores,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextSuiteReport {
    pub split: Split,
    pub rows: Vec<ContextRow>,
}

impl ContextSuiteReport {
    pub fn row(&self, setting: &str) -> Option<&ContextRow> {
        self.rows.iter().find(|r| r.setting == setting)
    }

    /// Add a row computed elsewhere (e.g. by [`run_context_retrain`]).
    pub fn push(&mut self, setting: impl Into<String>, report: MetricReport) {
        let full = self.row(ContextMode::Full.as_str()).map(|r| r.report.corpus.clone()).unwrap_or_default();
        self.rows.push(ContextRow {
            setting: setting.into(),
            relative_drop: relative_drop(&full, &report.corpus),
            report,
        });
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("report serializes");
        fs::write(path, text + "\n").map_err(|e| VttError::io(path, e))
    }
}

/// Score `split` under each mode. The full-context row always comes first
/// and is the reference for relative drops.
#[allow(clippy::too_many_arguments)]
pub fn run_context_suite(
    model: &TtNet,
    vocab: &Vocabulary,
    manifest: &DatasetManifest,
    store: &EmbeddingStore,
    split: Split,
    modes: &[ContextMode],
    seed: u64,
    sampling: &SamplingConfig,
    metrics: &[Metric],
) -> Result<ContextSuiteReport> {
    let mut order = vec![ContextMode::Full];
    order.extend(modes.iter().copied().filter(|&m| m != ContextMode::Full));
    let mut report = ContextSuiteReport { split, rows: Vec::new() };
    for mode in order {
        let preds = predict_with_setting(model, vocab, manifest, store, split, &ContextSetting::new(mode, seed), sampling)?;
        report.push(mode.as_str(), evaluate_corpus(&preds, manifest, split, metrics)?);
    }
    Ok(report)
}

/// Split every sample into its two-state sub-samples `{id}#{i}`, keeping
/// category, topic and split.
pub fn adjacent_manifest(manifest: &DatasetManifest) -> DatasetManifest {
    let samples = manifest
        .samples
        .iter()
        .flat_map(|s| {
            s.transformations.iter().enumerate().map(move |(i, t)| VttSample {
                sample_id: format!("{}#{i}", s.sample_id),
                category: s.category.clone(),
                topic: s.topic.clone(),
                split: s.split,
                states: s.states[i..i + 2].to_vec(),
                transformations: vec![t.clone()],
            })
        })
        .collect();
    DatasetManifest {
        samples,
        categories: manifest.categories.clone(),
        topics: manifest.topics.clone(),
    }
}

/// Train a fresh model on two-state sub-samples and score it with
/// adjacent-only inference on `split`.
#[allow(clippy::too_many_arguments)]
pub fn run_context_retrain(
    manifest: &DatasetManifest,
    store: &EmbeddingStore,
    vocab: &Vocabulary,
    model_cfg: &TtNetConfig,
    train_cfg: &TrainConfig,
    split: Split,
    sampling: &SamplingConfig,
    metrics: &[Metric],
) -> Result<MetricReport> {
    let outcome = train(&adjacent_manifest(manifest), store, vocab, model_cfg, train_cfg)?;
    let setting = ContextSetting::new(ContextMode::AdjacentOnly, 0);
    let preds = predict_with_setting(&outcome.best.model, vocab, manifest, store, split, &setting, sampling)?;
    evaluate_corpus(&preds, manifest, split, metrics)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeenUnseenReport {
    pub n_seen: usize,
    pub n_unseen: usize,
    /// Absent when the partition is empty.
    pub seen: Option<MetricReport>,
    pub unseen: Option<MetricReport>,
}

/// Generate once for `split` and score the seen and unseen partitions
/// separately. Corpus statistics such as CIDEr document frequencies are
/// computed within each partition.
pub fn run_seen_unseen(
    model: &TtNet,
    vocab: &Vocabulary,
    manifest: &DatasetManifest,
    store: &EmbeddingStore,
    split: Split,
    sampling: &SamplingConfig,
    metrics: &[Metric],
) -> Result<SeenUnseenReport> {
    let parts = split_seen_unseen(manifest, split)?;
    let preds = predict_with_setting(model, vocab, manifest, store, split, &ContextSetting::default(), sampling)?;
    let score = |ids: &std::collections::BTreeSet<String>| -> Result<Option<MetricReport>> {
        if ids.is_empty() {
            return Ok(None);
        }
        let sub = DatasetManifest {
            samples: manifest.split(split).filter(|s| ids.contains(&s.sample_id)).cloned().collect(),
            categories: manifest.categories.clone(),
            topics: manifest.topics.clone(),
        };
        let p: Vec<Prediction> = preds.iter().filter(|p| ids.contains(&p.sample_id)).cloned().collect();
        evaluate_corpus(&p, &sub, split, metrics).map(Some)
    };
    Ok(SeenUnseenReport {
        n_seen: parts.seen_sample_ids.len(),
        n_unseen: parts.unseen_sample_ids.len(),
        seen: score(&parts.seen_sample_ids)?,
        unseen: score(&parts.unseen_sample_ids)?,
    })
}

/// A list of complete training configurations, one per cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationGrid {
    pub cells: Vec<TrainConfig>,
}

impl AblationGrid {
    fn from_toggles(base: &TrainConfig, toggles: impl IntoIterator<Item = Toggles>) -> Self {
        AblationGrid {
            cells: toggles
                .into_iter()
                .map(|toggles| TrainConfig {
                    toggles,
                    ..base.clone()
                })
                .collect(),
        }
    }

    /// All eight on/off combinations of diff, mtm and aux.
    pub fn components(base: &TrainConfig) -> Self {
        let mut t = Vec::new();
        for diff in [false, true] {
            for mtm in [false, true] {
                for aux in [false, true] {
                    t.push(Toggles {
                        diff,
                        mtm,
                        aux,
                        ..base.toggles
                    });
                }
            }
        }
        Self::from_toggles(base, t)
    }

    /// Auxiliary tasks: none, category only, topic only, both.
    pub fn aux_tasks(base: &TrainConfig) -> Self {
        let t = [(false, false), (true, false), (false, true), (true, true)].map(|(c, p)| Toggles {
            aux: c || p,
            aux_category: c,
            aux_topic: p,
            ..base.toggles
        });
        Self::from_toggles(base, t)
    }

    /// No difference features, then early and late fusion.
    pub fn diff_fusion(base: &TrainConfig) -> Self {
        let none = Toggles {
            diff: false,
            ..base.toggles
        };
        let with = |f| Toggles {
            diff: true,
            diff_fusion: f,
            ..base.toggles
        };
        Self::from_toggles(base, [none, with(DiffFusion::Early), with(DiffFusion::Late)])
    }

    /// MTM on, sweeping the per-row mask ratio.
    pub fn mask_ratios(base: &TrainConfig, ratios: &[f64]) -> Self {
        Self::policies(base, ratios.iter().map(|&r| MtmPolicy {
            mask_ratio: r,
            ..base.mtm
        }))
    }

    /// MTM on, sweeping the fraction of samples selected for masking.
    pub fn sample_ratios(base: &TrainConfig, ratios: &[f64]) -> Self {
        Self::policies(base, ratios.iter().map(|&r| MtmPolicy {
            sample_ratio: r,
            ..base.mtm
        }))
    }

    fn policies(base: &TrainConfig, policies: impl Iterator<Item = MtmPolicy>) -> Self {
        AblationGrid {
            cells: policies
                .map(|mtm| TrainConfig {
                    mtm,
                    toggles: Toggles {
                        mtm: true,
                        ..base.toggles
                    },
                    ..base.clone()
                })
                .collect(),
        }
    }
}

pub const MASK_RATIO_SWEEP: [f64; 7] = [0.0, 0.05, 0.10, 0.15, 0.20, 0.25, 0.30];
pub const SAMPLE_RATIO_SWEEP: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

/// Data shared by every grid cell.
#[derive(Debug, Clone, Copy)]
pub struct AblationData<'a> {
    pub manifest: &'a DatasetManifest,
    pub store: &'a EmbeddingStore,
    pub vocab: &'a Vocabulary,
    pub eval_split: Split,
    pub sampling: &'a SamplingConfig,
    pub metrics: &'a [Metric],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub config: TrainConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<Scores>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub runtime_sec: f64,
}

fn run_cell(cfg: &TrainConfig, model_cfg: &TtNetConfig, data: &AblationData) -> Result<Scores> {
    let outcome = train(data.manifest, data.store, data.vocab, model_cfg, cfg)?;
    let preds = predict_with_setting(
        &outcome.best.model,
        data.vocab,
        data.manifest,
        data.store,
        data.eval_split,
        &ContextSetting::default(),
        data.sampling,
    )?;
    Ok(evaluate_corpus(&preds, data.manifest, data.eval_split, data.metrics)?.corpus)
}

pub fn read_ablation_results(path: &Path) -> Result<Vec<AblationResult>> {
    let text = fs::read_to_string(path).map_err(|e| VttError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| VttError::Parse {
        path: path.into(),
        line: e.line(),
        reason: e.to_string(),
    })
}

fn write_ablation_results(path: &Path, results: &[AblationResult]) -> Result<()> {
    let text = serde_json::to_string_pretty(results).expect("results serialize");
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, text + "\n").map_err(|e| VttError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| VttError::io(path, e))
}

/// Train and score every cell, in parallel. With `results_path`, cells
/// already present in that file (matched by full config, successful only)
/// are reused and the file is rewritten after each finished cell. A failing
/// cell is recorded with its error and does not stop the others. Results
/// come back in grid order.
pub fn run_ablation_grid(
    grid: &AblationGrid,
    model_cfg: &TtNetConfig,
    data: &AblationData,
    results_path: Option<&Path>,
) -> Result<Vec<AblationResult>> {
    let previous = match results_path {
        Some(p) if p.exists() => read_ablation_results(p)?,
        _ => Vec::new(),
    };
    let mut slots: Vec<Option<AblationResult>> = grid
        .cells
        .iter()
        .map(|c| previous.iter().find(|r| &r.config == c && r.error.is_none()).cloned())
        .collect();
    let todo: Vec<usize> = (0..slots.len()).filter(|&i| slots[i].is_none()).collect();
    let shared = Mutex::new(std::mem::take(&mut slots));
    let io_error: Mutex<Option<VttError>> = Mutex::new(None);
    todo.par_iter().for_each(|&i| {
        let cfg = &grid.cells[i];
        let started = Instant::now();
        let result = run_cell(cfg, model_cfg, data);
        let row = AblationResult {
            config: cfg.clone(),
            error: result.as_ref().err().map(|e| e.to_string()),
            scores: result.ok(),
            runtime_sec: started.elapsed().as_secs_f64(),
        };
        if let Some(e) = &row.error {
            log::warn!("ablation cell {i} failed: {e}");
        }
        let mut slots = shared.lock().expect("grid lock");
        slots[i] = Some(row);
        if let Some(p) = results_path {
            let done: Vec<AblationResult> = slots.iter().flatten().cloned().collect();
            if let Err(e) = write_ablation_results(p, &done) {
                io_error.lock().expect("error lock").get_or_insert(e);
            }
        }
    });
    if let Some(e) = io_error.into_inner().expect("error lock") {
        return Err(e);
    }
    let results: Vec<AblationResult> = shared.into_inner().expect("grid lock").into_iter().flatten().collect();
    if let Some(p) = results_path {
        write_ablation_results(p, &results)?;
    }
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn model() -> TtNet {
        let cfg = TtNetConfig {
            d_enc: 4,
            d_model: 8,
            n_heads: 2,
            enc_layers: 1,
            dec_layers: 1,
            d_ff: 16,
            vocab_size: 10,
            n_categories: 2,
            n_topics: 2,
            rel_buckets: 8,
            rel_max_distance: 16,
        };
        TtNet::new(cfg, Toggles::default(), 3).unwrap()
    }

    fn raw(n: usize) -> Array2<f64> {
        Array2::from_shape_fn((n, 4), |(i, j)| (i * 4 + j) as f64 * 0.1)
    }

    #[test]
    fn full_is_identity() {
        let m = model();
        let items = apply_context_setting(&m, "a", &raw(4), &ContextSetting::default()).unwrap();
        assert_eq!(items, vec![m.item(raw(4))]);
    }

    #[test]
    fn adjacent_only_splits_into_pairs() {
        let m = model();
        let r = raw(4);
        let items = apply_context_setting(&m, "a", &r, &ContextSetting::new(ContextMode::AdjacentOnly, 0)).unwrap();
        assert_eq!(items.len(), 3);
        for (i, it) in items.iter().enumerate() {
            assert_eq!(it.raw, r.slice(s![i..i + 2, ..]));
            assert!(!it.dropped.contains(&true));
        }
    }

    #[test]
    fn mask_one_is_seeded() {
        let m = model();
        let set = ContextSetting::new(ContextMode::MaskOneRandom, 11);
        let a = apply_context_setting(&m, "a", &raw(5), &set).unwrap();
        let b = apply_context_setting(&m, "a", &raw(5), &set).unwrap();
        assert_eq!(a, b);
        assert_eq!(a[0].dropped.iter().filter(|&&d| d).count(), 1);
    }

    #[test]
    fn endpoints_keep_first_and_last() {
        let m = model();
        let set = ContextSetting::new(ContextMode::EndpointsOnly, 0);
        let a = apply_context_setting(&m, "a", &raw(5), &set).unwrap();
        assert_eq!(a[0].dropped, vec![false, true, true, true, false]);
        let two = apply_context_setting(&m, "a", &raw(2), &set).unwrap();
        assert_eq!(two, vec![m.item(raw(2))]);
    }

    #[test]
    fn grid_shapes() {
        let base = TrainConfig::default();
        assert_eq!(AblationGrid::components(&base).cells.len(), 8);
        assert_eq!(AblationGrid::mask_ratios(&base, &MASK_RATIO_SWEEP).cells.len(), 7);
        assert_eq!(AblationGrid::sample_ratios(&base, &SAMPLE_RATIO_SWEEP).cells.len(), 5);
        let aux = AblationGrid::aux_tasks(&base);
        assert_eq!(aux.cells.len(), 4);
        assert!(!aux.cells[0].toggles.aux);
        assert!(aux.cells[1].toggles.category_active() && !aux.cells[1].toggles.topic_active());
        let fusion = AblationGrid::diff_fusion(&base);
        assert_eq!(fusion.cells.len(), 3);
        assert!(!fusion.cells[0].toggles.diff);
    }

    #[test]
    fn mode_names_round_trip() {
        for m in ContextMode::ALL {
            assert_eq!(m.as_str().parse::<ContextMode>().unwrap(), m);
        }
        assert!("nope".parse::<ContextMode>().is_err());
    }

    #[test]
    fn drop_is_relative() {
        let full = Scores {
            cider: Some(200.0),
            bleu4: Some(0.0),
            ..Scores::default()
        };
        let r = Scores {
            cider: Some(150.0),
            bleu4: Some(0.0),
            ..Scores::default()
        };
        let d = relative_drop(&full, &r);
        assert_eq!(d.cider, Some(0.25));
        assert_eq!(d.bleu4, None);
    }
}
