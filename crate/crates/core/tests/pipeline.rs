use ancon_core::data::{apply_shift, gen_clusters, split_holdout, ClusterSpec, Dataset, ShiftKind, ShiftSpec};
use ancon_core::metrics::{select_checkpoint, SelectionCriterion};
use ancon_core::selftrain::{evaluate_accuracy, run_adaptation, train_source, AdaptConfig, SourceConfig, Strategy};
use proptest::prelude::*;

fn setup(seed: u64, shift: ShiftKind, level: u8) -> (Dataset, Dataset, Dataset, ancon_core::LinearParams) {
    let spec = ClusterSpec {
        classes: 4,
        dim: 8,
        n_per_class: 40,
        spread: 0.3,
        radius: 1.0,
        seed,
    };
    let source = gen_clusters(&spec, 0).unwrap();
    let target = apply_shift(&gen_clusters(&spec, 1).unwrap(), &ShiftSpec::new(shift, level, seed)).unwrap();
    let (train, holdout) = split_holdout(&target, 0.2, seed).unwrap();
    let cfg = SourceConfig {
        epochs: 20,
        seed,
        ..SourceConfig::default()
    };
    let params = train_source(&source, 4, &cfg).unwrap().params;
    (source, train, holdout, params)
}

#[test]
fn every_strategy_adapts_without_labels() {
    let (source, train, holdout, init) = setup(3, ShiftKind::Rotation, 3);
    assert!(evaluate_accuracy(&init, &source).unwrap() > 0.9);
    // permuting the labels of the adaptation split must not change anything
    let labels = train.labels().unwrap();
    let scrambled: Vec<usize> = labels.iter().map(|&y| (y + 1) % 4).collect();
    let train_b = Dataset::new(train.dim(), train.features().to_vec(), Some(scrambled), "scrambled").unwrap();
    for strategy in Strategy::ALL {
        let cfg = AdaptConfig {
            strategy,
            epochs: 6,
            ..AdaptConfig::default()
        };
        let a = run_adaptation(&train, &holdout, init.clone(), &cfg).unwrap();
        let b = run_adaptation(&train_b, &holdout, init.clone(), &cfg).unwrap();
        assert_eq!(a.records, b.records, "{}", strategy.name());
        assert_eq!(a.checkpoints.len(), 6);
        assert!(a
            .records
            .iter()
            .all(|r| r.holdout_accuracy.is_some() && r.train_loss.is_finite()));
        for c in SelectionCriterion::ALL {
            let e = select_checkpoint(&a.records, c).unwrap();
            assert!(e < 6);
        }
    }
}

#[test]
fn ensemble_strategies_track_a_rising_threshold() {
    let (_, train, holdout, init) = setup(5, ShiftKind::Translation, 2);
    let cfg = AdaptConfig {
        epochs: 4,
        ..AdaptConfig::default()
    };
    let out = run_adaptation(&train, &holdout, init, &cfg).unwrap();
    let deltas: Vec<f64> = out.records.iter().map(|r| r.threshold_delta).collect();
    assert!(deltas.iter().all(|&d| d > 0.0 && d < 1.0));
    // mean confidence rises under self-training, so does the EMA
    assert!(deltas.last() > deltas.first());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn zero_lambda_is_vanilla(seed in 0u64..1000, beta in 0.0f64..0.99, batch in 4usize..40) {
        let (_, train, holdout, init) = setup(seed, ShiftKind::Rotation, 2);
        let base = AdaptConfig { epochs: 3, batch_size: batch, seed, ..AdaptConfig::default() };
        let mut anchored = base;
        anchored.ancon.lambda = 0.0;
        anchored.ancon.beta = beta;
        let mut vanilla = base;
        vanilla.strategy = Strategy::Vanilla;
        vanilla.ancon.beta = beta;
        let a = run_adaptation(&train, &holdout, init.clone(), &anchored).unwrap();
        let v = run_adaptation(&train, &holdout, init, &vanilla).unwrap();
        prop_assert_eq!(a.records, v.records);
        prop_assert_eq!(a.params, v.params);
    }

    #[test]
    fn records_stay_in_range(seed in 0u64..1000, strategy in 0usize..6) {
        let (_, train, holdout, init) = setup(seed, ShiftKind::GaussianNoise, 4);
        let cfg = AdaptConfig { strategy: Strategy::ALL[strategy], epochs: 3, seed, ..AdaptConfig::default() };
        let out = run_adaptation(&train, &holdout, init, &cfg).unwrap();
        for r in &out.records {
            let acc = r.holdout_accuracy.unwrap();
            let ece = r.ece.unwrap();
            prop_assert!((0.0..=1.0).contains(&acc));
            prop_assert!((0.0..=1.0).contains(&ece));
            prop_assert!((0.25..=1.0).contains(&r.mean_confidence));
            prop_assert!((0.0..=1.0).contains(&r.marginal_tv));
            prop_assert!(r.ent >= 0.0);
        }
    }
}
