use vtt_core::data::{DatasetManifest, EmbeddingStore, Split};
use vtt_core::dataset::{assign_splits, split_seen_unseen, SplitRatios};
use vtt_core::decoder::{Prediction, SamplingConfig, Vocabulary};
use vtt_core::diagnostics::{
    adjacent_manifest, predict_with_setting, read_ablation_results, run_ablation_grid, run_context_suite,
    run_seen_unseen, AblationData, AblationGrid, ContextMode, ContextSetting,
};
use vtt_core::metrics::{evaluate_corpus, Metric};
use vtt_core::model::{generate_split, Toggles, TtNet, TtNetConfig};
use vtt_core::synth::{generate, SyntheticTaskSpec};
use vtt_core::train::TrainConfig;

fn setup(n: usize) -> (DatasetManifest, EmbeddingStore, Vocabulary, TtNetConfig) {
    let (m, store) = generate(&SyntheticTaskSpec::default(), n).unwrap();
    let m = assign_splits(m.samples, SplitRatios::new(0.6, 0.2, 0.2).unwrap(), 1).unwrap();
    let corpus: Vec<&str> = m.samples.iter().flat_map(|s| s.transformations.iter().map(String::as_str)).collect();
    let vocab = Vocabulary::build(&corpus, 1).unwrap();
    let mut cfg = TtNetConfig::desk(store.dim(), vocab.len(), m.categories.len(), m.topics.len());
    cfg.d_model = 16;
    cfg.d_ff = 32;
    cfg.n_heads = 2;
    (m, store, vocab, cfg)
}

#[test]
fn full_setting_matches_plain_generation() {
    let (m, store, vocab, cfg) = setup(20);
    let model = TtNet::new(cfg, Toggles::default(), 2).unwrap();
    let sampling = SamplingConfig {
        seed: 5,
        ..SamplingConfig::default()
    };
    let plain: Vec<Prediction> = generate_split(&model, &vocab, &m, &store, Split::Test, &sampling)
        .unwrap()
        .iter()
        .map(Prediction::from)
        .collect();
    let full = predict_with_setting(&model, &vocab, &m, &store, Split::Test, &ContextSetting::default(), &sampling).unwrap();
    assert_eq!(plain, full);

    let report = run_context_suite(&model, &vocab, &m, &store, Split::Test, &ContextMode::ALL, 0, &sampling, &Metric::ALL).unwrap();
    assert_eq!(report.rows[0].setting, "full");
    assert_eq!(report.rows.len(), 4);
    assert_eq!(report.rows[0].report, evaluate_corpus(&plain, &m, Split::Test, &Metric::ALL).unwrap());
}

#[test]
fn adjacent_predictions_keep_alignment() {
    let (m, store, vocab, cfg) = setup(12);
    let model = TtNet::new(cfg, Toggles::default(), 2).unwrap();
    let set = ContextSetting::new(ContextMode::AdjacentOnly, 0);
    let preds = predict_with_setting(&model, &vocab, &m, &store, Split::Train, &set, &SamplingConfig::greedy()).unwrap();
    for (p, s) in preds.iter().zip(m.split(Split::Train)) {
        assert_eq!(p.sample_id, s.sample_id);
        assert_eq!(p.transformations.len(), s.n_transformations());
    }
    let adj = adjacent_manifest(&m);
    assert_eq!(adj.samples.len(), m.samples.iter().map(|s| s.n_transformations()).sum::<usize>());
    // Neighbouring sub-samples share a state, so only per-sample rules apply.
    adj.samples.iter().for_each(|s| s.validate().unwrap());
    assert!(adj.samples.iter().all(|s| s.n_transformations() == 1));
}

#[test]
fn untrained_model_scores_similarly_across_settings() {
    // Null check: a random model has no context to lose.
    let (m, store, vocab, cfg) = setup(24);
    for seed in 0..3 {
        let model = TtNet::new(cfg.clone(), Toggles::default(), seed).unwrap();
        let r = run_context_suite(
            &model,
            &vocab,
            &m,
            &store,
            Split::Train,
            &[ContextMode::AdjacentOnly],
            0,
            &SamplingConfig::greedy(),
            &[Metric::Bleu4],
        )
        .unwrap();
        let full = r.row("full").unwrap().report.corpus.bleu4.unwrap();
        let adj = r.row("adjacent_only").unwrap().report.corpus.bleu4.unwrap();
        assert!((full - adj).abs() < 10.0, "seed {seed}: {full} vs {adj}");
    }
}

#[test]
fn seen_unseen_sizes_follow_partition() {
    let spec = SyntheticTaskSpec {
        permute_rate: 0.5,
        ..SyntheticTaskSpec::default()
    };
    let (m, store) = generate(&spec, 30).unwrap();
    let m = assign_splits(m.samples, SplitRatios::new(0.6, 0.2, 0.2).unwrap(), 4).unwrap();
    let corpus: Vec<&str> = m.samples.iter().flat_map(|s| s.transformations.iter().map(String::as_str)).collect();
    let vocab = Vocabulary::build(&corpus, 1).unwrap();
    let cfg = TtNetConfig::desk(store.dim(), vocab.len(), m.categories.len(), m.topics.len());
    let model = TtNet::new(cfg, Toggles::default(), 0).unwrap();
    let parts = split_seen_unseen(&m, Split::Test).unwrap();
    let r = run_seen_unseen(&model, &vocab, &m, &store, Split::Test, &SamplingConfig::greedy(), &Metric::ALL).unwrap();
    assert_eq!(r.n_seen, parts.seen_sample_ids.len());
    assert_eq!(r.n_unseen, parts.unseen_sample_ids.len());
    assert_eq!(r.seen.is_some(), r.n_seen > 0);
    assert_eq!(r.unseen.is_some(), r.n_unseen > 0);
}

#[test]
fn identical_train_and_test_combinations_leave_unseen_empty() {
    let (m, store, vocab, cfg) = setup(20);
    let model = TtNet::new(cfg, Toggles::default(), 0).unwrap();
    let r = run_seen_unseen(&model, &vocab, &m, &store, Split::Test, &SamplingConfig::greedy(), &Metric::ALL).unwrap();
    assert_eq!(r.n_unseen, 0);
    assert!(r.unseen.is_none());
    assert!(r.seen.is_some());
}

#[test]
fn ablation_grid_resumes_and_isolates_failures() {
    let (m, store, vocab, cfg) = setup(12);
    let base = TrainConfig {
        epochs: 2,
        batch_size: 4,
        warmup_steps: 1,
        ..TrainConfig::desk()
    };
    let mut grid = AblationGrid::mask_ratios(&base, &[0.0, 0.1]);
    // A cell whose schedule cannot be built fails on its own.
    grid.cells.push(TrainConfig {
        warmup_steps: 10_000,
        ..base.clone()
    });
    let sampling = SamplingConfig::greedy();
    let data = AblationData {
        manifest: &m,
        store: &store,
        vocab: &vocab,
        eval_split: Split::Val,
        sampling: &sampling,
        metrics: &[Metric::Bleu4, Metric::Cider],
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("grid.json");
    let first = run_ablation_grid(&grid, &cfg, &data, Some(&path)).unwrap();
    assert_eq!(first.len(), 3);
    assert!(first[0].scores.is_some() && first[1].scores.is_some());
    assert!(first[2].error.is_some() && first[2].scores.is_none());
    assert_eq!(read_ablation_results(&path).unwrap(), first);

    // Finished cells are reused verbatim, runtime included.
    let second = run_ablation_grid(&grid, &cfg, &data, Some(&path)).unwrap();
    assert_eq!(second[0], first[0]);
    assert_eq!(second[1], first[1]);

    // Masking with ratio zero is a no-op: same scores as MTM off.
    let off = AblationGrid {
        cells: vec![TrainConfig {
            toggles: Toggles {
                mtm: false,
                ..base.toggles
            },
            ..base.clone()
        }],
    };
    let r = run_ablation_grid(&off, &cfg, &data, None).unwrap();
    assert_eq!(r[0].scores, first[0].scores);
}
