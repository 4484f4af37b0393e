//! End-to-end properties through the public API: generate → write → load →
//! train → evaluate.

use dualseg_core::trainer::evaluate;
use dualseg_core::{
    generate, load_dataset, train, write_dataset, FeatureFormat, SynthConfig, TrainConfig,
};
use proptest::prelude::*;

fn small_corpus(seed: u64) -> SynthConfig {
    SynthConfig {
        num_classes: 4,
        num_videos: 6,
        frames: [80, 120],
        segments: [2, 4],
        feature_dim: 6,
        seed,
        ..SynthConfig::default()
    }
}

fn small_train(epochs: usize, e_start: usize, seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig {
        epochs,
        eval_every: 0,
        ..TrainConfig::default()
    }
    .with_seed(seed);
    cfg.backbone.layers_per_stage = 2;
    cfg.backbone.hidden_width = 6;
    cfg.loss.lambda_b = 0.1;
    cfg.loss.lambda_s = 1.0;
    cfg.loss.e_start = e_start;
    cfg
}

#[test]
fn training_lowers_model_loss_on_the_default_corpus() {
    let corpus = generate(&SynthConfig::default()).unwrap();
    for seed in 0..5 {
        let cfg = TrainConfig {
            epochs: 8,
            eval_every: 0,
            ..TrainConfig::default()
        }
        .with_seed(seed)
        .resolved_for(&corpus);
        let (_, log) = train(&corpus, &cfg).unwrap();
        let (first, last) = (log.epochs[0].l_model, log.epochs.last().unwrap().l_model);
        assert!(last < first, "seed {seed}: L_model {first} -> {last}");
    }
}

#[test]
fn loaded_dataset_trains_like_the_generated_one() {
    let corpus = generate(&small_corpus(3)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_dataset(&corpus, dir.path(), FeatureFormat::Binary).unwrap();
    let loaded = load_dataset(dir.path()).unwrap();
    assert_eq!(loaded, corpus);

    let cfg = small_train(3, 1, 0).resolved_for(&corpus);
    let (p1, log1) = train(&corpus, &cfg).unwrap();
    let (p2, log2) = train(&loaded, &cfg).unwrap();
    assert_eq!(p1, p2);
    assert_eq!(
        serde_json::to_string(&log1).unwrap(),
        serde_json::to_string(&log2).unwrap()
    );
    assert_eq!(
        evaluate(&cfg, &p1, &loaded.test).unwrap(),
        log1.final_report
    );
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 12, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn generation_is_pure_and_videos_have_several_segments(seed in any::<u64>(), lo in 2usize..4) {
        let cfg = SynthConfig { segments: [lo, lo + 2], ..small_corpus(seed) };
        let a = generate(&cfg).unwrap();
        prop_assert_eq!(&a, &generate(&cfg).unwrap());
        for v in a.train.iter().chain(&a.test) {
            prop_assert!(v.labels.segments().len() >= 2);
            prop_assert_eq!(v.features.cols(), v.labels.len());
            prop_assert!(v.labels.labels().windows(2).filter(|w| w[0] != w[1]).count() + 1 >= lo);
        }
    }

    #[test]
    fn shape_loss_is_silent_before_warm_up(seed in 0u64..1000, e_start in 0usize..4) {
        let corpus = generate(&small_corpus(seed)).unwrap();
        let cfg = small_train(4, e_start, seed).resolved_for(&corpus);
        let (_, log) = train(&corpus, &cfg).unwrap();
        for e in &log.epochs {
            if e.epoch < e_start {
                prop_assert_eq!(e.l_s, 0.0);
                prop_assert_eq!(e.n_segments_used, 0);
            }
        }
    }
}
