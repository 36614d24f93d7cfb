use std::collections::HashSet;

use camtrap_core::active_learning::{
    self, generate_synthetic_pool, simulate, stratified_split, SimulationConfig,
    SyntheticSpec,
};
use camtrap_core::classifier::{
    self, class_weights, predict, softmax, HeadModel, TrainConfig, WeightMode,
};
use camtrap_core::embedding::EmbeddingStore;
use camtrap_core::evaluation::{confusion_matrix, metrics};
use proptest::prelude::*;

mod common;
use common::separable_fixture;

fn train_separable(config: &TrainConfig) -> HeadModel {
    let data = separable_fixture();
    let weights = class_weights(&[50, 50], config.weight_mode, config.weight_cap).unwrap();
    let init = HeadModel::zeros(vec!["l".into(), "r".into()], 2).unwrap();
    classifier::train(&init, &data, config, &weights).unwrap().0
}

fn small_spec(seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        class_names: (0..4).map(|c| format!("class {c}")).collect(),
        counts: vec![40, 20, 10, 6],
        dim: 6,
        cluster_separation: 3.0,
        noise_sigma: 1.0,
        seed,
    }
}

#[test]
fn frobenius_norm_does_not_grow_with_lambda() {
    let norms: Vec<f64> = [0.0, 0.01, 0.1]
        .iter()
        .map(|&l2_lambda| {
            train_separable(&TrainConfig {
                l2_lambda,
                epochs: 50,
                seed: 1,
                ..TrainConfig::default()
            })
            .frobenius_norm()
        })
        .collect();
    assert!(norms[0] >= norms[1] && norms[1] >= norms[2], "{norms:?}");
}

#[test]
fn trained_separable_model_predicts_its_training_set() {
    let data = separable_fixture();
    let model = train_separable(&TrainConfig {
        epochs: 50,
        seed: 1,
        ..TrainConfig::default()
    });
    let mut store = EmbeddingStore::new(2, "fixture").unwrap();
    let mut ids = Vec::new();
    for (i, ex) in data.iter().enumerate() {
        let id = format!("p{i:03}");
        store.insert(id.clone(), ex.features.iter().map(|&v| v as f32).collect()).unwrap();
        ids.push(id);
    }
    let preds = predict(&model, &store, &ids).unwrap();
    for (rec, ex) in preds.iter().zip(&data) {
        assert_eq!(rec.predicted, ex.label, "{}", rec.crop_id);
        assert!((rec.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(rec.probs.iter().all(|&p| p > 0.0 && p < 1.0));
    }
}

#[test]
fn predictions_ignore_training_weight_mode() {
    // The same parameters give the same outputs whatever weighting produced
    // them: the weights enter the loss only.
    let data = separable_fixture();
    let model = train_separable(&TrainConfig {
        epochs: 5,
        weight_mode: WeightMode::InverseFrequency,
        ..TrainConfig::default()
    });
    let relabeled = HeadModel::from_parts(
        model.class_names().to_vec(),
        model.dim(),
        model.weights().to_vec(),
        model.bias().to_vec(),
    )
    .unwrap();
    for ex in &data {
        assert_eq!(
            model.predict_proba(&ex.features).unwrap(),
            relabeled.predict_proba(&ex.features).unwrap()
        );
        let direct = softmax(&model.logits(&ex.features).unwrap()).unwrap();
        assert_eq!(direct, model.predict_proba(&ex.features).unwrap());
    }
}

#[test]
fn budget_equal_to_seed_set_gives_one_point() {
    let pool = generate_synthetic_pool(&small_spec(2)).unwrap();
    let data = stratified_split(&pool, 0.2, 2);
    let config = SimulationConfig {
        label_budget: 8,
        seed: 2,
        ..SimulationConfig::default()
    };
    let out = simulate(&data, &config).unwrap();
    assert_eq!(out.curve.len(), 1);
    assert_eq!(out.curve.points[0].labels_used, 8);
}

#[test]
fn simulation_conserves_pool_and_never_requeries() {
    for strategy in active_learning::Strategy::ALL {
        let pool = generate_synthetic_pool(&small_spec(9)).unwrap();
        let data = stratified_split(&pool, 0.2, 9);
        let mut config = SimulationConfig {
            strategy,
            batch_size_query: 7,
            seed: 9,
            ..SimulationConfig::default()
        };
        config.train.epochs = 5;
        let out = simulate(&data, &config).unwrap();
        let mut seen = HashSet::new();
        for audit in &out.rounds {
            for id in audit.batch.iter().flat_map(|b| b.ids()) {
                assert!(seen.insert(id.to_string()), "{strategy}: {id} queried twice");
                assert!(data.pool.contains_key(id));
            }
        }
        let s = &out.final_state;
        assert_eq!(s.labeled.len() + s.unlabeled.len(), data.pool.len());
        assert!(s.unlabeled.is_empty());
        let labels: Vec<usize> = out.curve.points.iter().map(|p| p.labels_used).collect();
        assert!(labels.windows(2).all(|w| w[0] < w[1]));
    }
}

#[test]
fn validation_overlap_is_rejected() {
    let pool = generate_synthetic_pool(&small_spec(1)).unwrap();
    let mut data = stratified_split(&pool, 0.2, 1);
    let (id, label) = data.pool.iter().next().map(|(k, v)| (k.clone(), *v)).unwrap();
    data.validation.push((id, label));
    assert!(matches!(
        simulate(&data, &SimulationConfig::default()),
        Err(active_learning::ActiveLearningError::ValidationOverlap(_))
    ));
}

fn labels(k: usize) -> impl proptest::strategy::Strategy<Value = (usize, Vec<usize>, Vec<usize>)> {
    proptest::collection::vec((0..k, 0..k), 0..120).prop_map(move |pairs| {
        let (t, p) = pairs.into_iter().unzip();
        (k, t, p)
    })
}

proptest! {
    #[test]
    fn softmax_shift_invariance(
        z in proptest::collection::vec(-50.0f64..50.0, 1..16),
        c in -1000.0f64..1000.0,
    ) {
        let a = softmax(&z).unwrap();
        let shifted: Vec<f64> = z.iter().map(|v| v + c).collect();
        let b = softmax(&shifted).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn accuracy_is_support_weighted_recall((k, t, p) in (1usize..15).prop_flat_map(labels)) {
        let names: Vec<String> = (0..k).map(|c| c.to_string()).collect();
        let cm = confusion_matrix(&t, &p, &names).unwrap();
        let r = metrics(&cm);
        let total = cm.total() as f64;
        if total > 0.0 {
            let weighted: f64 = (0..k)
                .map(|c| r.per_class[c].recall * cm.row_sum(c) as f64 / total)
                .sum();
            prop_assert!((weighted - r.accuracy).abs() < 1e-12);
        }
    }

    #[test]
    fn class_permutation_permutes_metrics(
        (k, t, p) in (2usize..15).prop_flat_map(labels),
        rot in 1usize..14,
    ) {
        let names: Vec<String> = (0..k).map(|c| c.to_string()).collect();
        let perm = |c: usize| (c + rot) % k;
        let r1 = metrics(&confusion_matrix(&t, &p, &names).unwrap());
        let t2: Vec<usize> = t.iter().map(|&c| perm(c)).collect();
        let p2: Vec<usize> = p.iter().map(|&c| perm(c)).collect();
        let r2 = metrics(&confusion_matrix(&t2, &p2, &names).unwrap());
        prop_assert_eq!(r1.accuracy, r2.accuracy);
        prop_assert!((r1.macro_f1 - r2.macro_f1).abs() < 1e-12);
        prop_assert!((r1.macro_precision - r2.macro_precision).abs() < 1e-12);
        prop_assert!((r1.macro_recall - r2.macro_recall).abs() < 1e-12);
        for c in 0..k {
            prop_assert_eq!(r1.per_class[c].f1, r2.per_class[perm(c)].f1);
            prop_assert_eq!(r1.per_class[c].support, r2.per_class[perm(c)].support);
        }
    }
}
