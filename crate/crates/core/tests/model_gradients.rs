mod common;

use common::{max_gradient_error, oracle_loss, random_instance, LayerFamily, FAMILIES};
use dpsparse::data::{Dataset, Split};
use dpsparse::{Batch, Model, ModelSpec, ParamVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn forward_matches_straight_line_oracle() {
    for family in FAMILIES {
        let (model, params, batch) = random_instance(family, 11, 4);
        let out = model.forward_loss(&params, &batch).unwrap();
        let mut mean = 0.0;
        for i in 0..4 {
            let want = oracle_loss(model.spec(), params.as_slice(), batch.row(i), batch.labels[i]);
            assert!((out.per_sample[i] - want).abs() <= 1e-10, "{family:?} sample {i}");
            mean += want / 4.0;
        }
        assert!((out.loss - mean).abs() <= 1e-10);
    }
}

#[test]
fn three_sample_mlp_matches_finite_differences() {
    let (model, params, batch) = random_instance(LayerFamily::Dense, 3, 3);
    assert!(max_gradient_error(&model, &params, &batch) <= 1e-4);
}

#[test]
fn mean_gradient_is_mean_of_per_sample() {
    for family in FAMILIES {
        let (model, params, batch) = random_instance(family, 5, 7);
        let per = model.per_sample_grads(&params, &batch).unwrap();
        let mean = model.batch_grad(&params, &batch).unwrap();
        for j in 0..model.dim() {
            let m: f64 = per.iter().map(|g| g.as_slice()[j]).sum::<f64>() / per.len() as f64;
            assert!((m - mean.as_slice()[j]).abs() <= 1e-12);
        }
        for g in &per {
            assert!(g.same_layout(&params));
        }
    }
}

#[test]
fn evaluate_matches_independent_argmax() {
    let (model, params, _) = random_instance(LayerFamily::LayerNorm, 8, 1);
    let d = model.spec().input_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n = 300;
    let x: Vec<f64> = (0..n * d).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
    let y: Vec<usize> = (0..n).map(|_| rng.random_range(0..model.classes())).collect();
    let data = Dataset::new(x, d, y, model.classes(), Split::FinetuneTest).unwrap();
    let mut correct = 0;
    for i in 0..n {
        // the predicted class is the one with the smallest loss
        let losses: Vec<f64> = (0..model.classes())
            .map(|c| oracle_loss(model.spec(), params.as_slice(), data.row(i), c))
            .collect();
        let mut best = 0;
        for c in 1..losses.len() {
            if losses[c] < losses[best] {
                best = c;
            }
        }
        correct += (best == data.labels[i]) as usize;
    }
    assert_eq!(model.evaluate(&params, &data).unwrap(), correct as f64 / n as f64);
}

#[test]
fn separating_params_reach_full_accuracy() {
    let model = Model::new(ModelSpec::logistic(2, 2)).unwrap();
    // class 1 iff x0 > 0
    let params = ParamVector::from_values(model.layout().clone(), vec![-5.0, 5.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut x = Vec::new();
    let mut y = Vec::new();
    for _ in 0..500 {
        let a: f64 = rng.random::<f64>() + 0.01;
        let sign = rng.random::<bool>();
        x.extend([if sign { a } else { -a }, rng.random::<f64>()]);
        y.push(sign as usize);
    }
    let data = Dataset::new(x, 2, y, 2, Split::FinetuneTest).unwrap();
    assert_eq!(model.evaluate(&params, &data).unwrap(), 1.0);
}

#[test]
fn random_guessing_on_balanced_ten_classes() {
    let model = Model::new(ModelSpec::mlp(5, &[8], 10)).unwrap();
    let params = model.init_params(&mut ChaCha8Rng::seed_from_u64(2));
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 10_000;
    let x: Vec<f64> = (0..n * 5).map(|_| rng.random::<f64>() - 0.5).collect();
    let y: Vec<usize> = (0..n).map(|i| i % 10).collect();
    let acc = model.evaluate(&params, &Dataset::new(x, 5, y, 10, Split::FinetuneTest).unwrap()).unwrap();
    assert!((acc - 0.10).abs() <= 0.01, "accuracy {acc}");
}

#[test]
fn empty_dataset_is_usage_error() {
    let model = Model::new(ModelSpec::logistic(3, 2)).unwrap();
    let params = ParamVector::zeros(model.layout().clone());
    let data = Dataset::new(Vec::new(), 3, Vec::new(), 2, Split::FinetuneTest).unwrap();
    assert!(matches!(model.evaluate(&params, &data), Err(dpsparse::Error::Usage(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn per_sample_gradients_are_finite_and_shaped(seed in 0u64..10_000, fam in 0usize..4, n in 0usize..5) {
        let (model, params, batch) = random_instance(FAMILIES[fam], seed, n);
        let grads = model.per_sample_grads(&params, &batch).unwrap();
        prop_assert_eq!(grads.len(), n);
        for g in &grads {
            prop_assert!(g.is_finite());
            prop_assert_eq!(g.len(), model.dim());
        }
        let out = model.forward_loss(&params, &batch).unwrap();
        prop_assert!(out.loss.is_finite() && out.loss >= 0.0);
    }

    #[test]
    fn batch_order_does_not_change_per_sample_gradients(seed in 0u64..10_000) {
        let (model, params, batch) = random_instance(LayerFamily::Dense, seed, 3);
        let d = batch.dim;
        let mut x = batch.inputs.clone();
        let mut y = batch.labels.clone();
        x.rotate_left(d);
        y.rotate_left(1);
        let rotated = Batch::new(x, d, y).unwrap();
        let a = model.per_sample_grads(&params, &batch).unwrap();
        let b = model.per_sample_grads(&params, &rotated).unwrap();
        prop_assert_eq!(a[1].as_slice(), b[0].as_slice());
    }
}

#[test]
fn hundred_instances_per_family_match_finite_differences() {
    for family in FAMILIES {
        let mut worst: f64 = 0.0;
        for seed in 0..100 {
            let (model, params, batch) = random_instance(family, 1000 + seed, 2);
            worst = worst.max(max_gradient_error(&model, &params, &batch));
        }
        assert!(worst <= 1e-4, "{family:?}: worst relative error {worst}");
    }
}
