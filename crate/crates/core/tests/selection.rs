mod common;

use std::sync::Arc;

use common::{random_instance, sort_top_k, LayerFamily};
use dpsparse::engine::clip_factor;
use dpsparse::mask::{
    accumulate_scores, select_mask_bitfit, select_mask_dpsgd_gradients, select_mask_magnitude, select_mask_oracle,
    select_mask_random, select_mask_sparta, OracleScore, ScoringSetup,
};
use dpsparse::mask::{group_scores, top_k_indices, top_k_mask, AlwaysTrainable, ScoreAccumulator};
use dpsparse::params::SegmentKind;
use dpsparse::{Batch, Grouping, GroupingKind, Layout, Mask, Model, ModelSpec, ParamVector, PrivacyLedger, SparsityBudget};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn model() -> Model {
    Model::new(ModelSpec::mlp(6, &[5, 4], 3)).unwrap()
}

fn grouping(layout: &Layout, kind: GroupingKind, seed: u64) -> Arc<Grouping> {
    Arc::new(Grouping::new(layout, kind, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap())
}

fn random_batch(model: &Model, n: usize, rng: &mut ChaCha8Rng) -> Batch {
    let d = model.spec().input_dim;
    let x = (0..n * d).map(|_| 3.0 * (rng.random::<f64>() - 0.5)).collect();
    let y = (0..n).map(|_| rng.random_range(0..model.classes())).collect();
    Batch::new(x, d, y).unwrap()
}

/// Group ids of every maskable coordinate, derived from segment shapes.
fn row_of(layout: &Layout) -> Vec<Option<usize>> {
    let mut out = vec![None; layout.dim()];
    let mut next = 0;
    for (_, seg) in layout.maskable() {
        let SegmentKind::Weight { rows, cols } = seg.spec.kind else { panic!() };
        for r in 0..rows {
            for c in 0..cols {
                out[seg.offset + r * cols + c] = Some(next + r);
            }
        }
        next += rows;
    }
    out
}

#[test]
fn row_group_sums_match_brute_force() {
    let m = model();
    let g = grouping(m.layout(), GroupingKind::Row, 0);
    let rows = row_of(m.layout());
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let acc = ScoreAccumulator {
            values: (0..m.dim()).map(|_| rng.random::<f64>() * 10.0 - 5.0).collect(),
            batches_seen: 3,
        };
        let v = group_scores(&acc, &g, false).unwrap();
        let mut want = vec![0.0; g.len()];
        for (i, r) in rows.iter().enumerate() {
            if let Some(r) = r {
                want[*r] += acc.values[i];
            }
        }
        for (a, b) in v.iter().zip(&want) {
            assert!((a - b).abs() <= 1e-12);
        }
        let avg = group_scores(&acc, &g, true).unwrap();
        assert_eq!(top_k_indices(&avg, 4), top_k_indices(&v, 4));
    }
}

#[test]
fn random_group_sums_cover_each_coordinate_once() {
    let m = model();
    let g = grouping(m.layout(), GroupingKind::Random { block_size: 4 }, 3);
    let acc = ScoreAccumulator {
        values: (0..m.dim()).map(|i| (i * i) as f64).collect(),
        batches_seen: 1,
    };
    let total: f64 = group_scores(&acc, &g, false).unwrap().iter().sum();
    let want: f64 = m.layout().maskable().flat_map(|(_, s)| s.range()).map(|i| (i * i) as f64).sum();
    assert_eq!(total, want);
}

#[test]
fn top_k_matches_full_sort_on_random_vectors() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..1000 {
        let len = rng.random_range(1..60);
        // coarse values force ties
        let scores: Vec<f64> = (0..len).map(|_| (rng.random::<f64>() * 8.0).floor()).collect();
        let k = rng.random_range(0..=len);
        assert_eq!(top_k_indices(&scores, k), sort_top_k(&scores, k));
    }
}

#[test]
fn per_layer_top_k_matches_sort_oracle() {
    let m = model();
    let g = grouping(m.layout(), GroupingKind::Row, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..200 {
        let scores: Vec<f64> = (0..g.len()).map(|_| rng.random::<f64>()).collect();
        let budget = SparsityBudget::new(rng.random::<f64>()).unwrap();
        let mask = top_k_mask(&scores, m.layout().clone(), g.clone(), &budget, AlwaysTrainable::STANDARD).unwrap();
        mask.check_feasible(&budget).unwrap();
        let z = &mask.selection().unwrap().z;
        for l in 0..g.layers().len() {
            let r = g.layer_range(l);
            let k = budget.groups_for_layer(r.len());
            let chosen: Vec<usize> = (0..r.len()).filter(|&j| z[r.start + j]).collect();
            assert_eq!(chosen, sort_top_k(&scores[r.clone()], k));
        }
    }
}

#[test]
fn random_selection_is_uniform_over_groups() {
    let m = model();
    let g = grouping(m.layout(), GroupingKind::Row, 0);
    let budget = SparsityBudget::new(0.4).unwrap();
    let trials = 40000;
    let mut counts = vec![0usize; g.len()];
    for seed in 0..trials {
        let mask = select_mask_random(m.layout().clone(), g.clone(), &budget, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        for (c, &on) in counts.iter_mut().zip(&mask.selection().unwrap().z) {
            *c += on as usize;
        }
    }
    for l in 0..g.layers().len() {
        let r = g.layer_range(l);
        let p = budget.groups_for_layer(r.len()) as f64 / r.len() as f64;
        let sd = (trials as f64 * p * (1.0 - p)).sqrt();
        for j in r {
            let dev = (counts[j] as f64 - trials as f64 * p).abs();
            assert!(dev <= 3.0 * sd, "group {j}: {} hits, expected {}", counts[j], trials as f64 * p);
        }
    }
}

#[test]
fn pure_noise_group_variance_scales_with_group_size() {
    let m = Model::new(ModelSpec::mlp(4, &[8], 2)).unwrap();
    let params = ParamVector::zeros(m.layout().clone());
    let g = grouping(m.layout(), GroupingKind::Row, 0);
    let setup = ScoringSetup {
        clip: 0.7,
        noise_multiplier: 1.3,
        sample_rate: 0.5,
    };
    let empty = Batch::empty(4);
    let tb = 5;
    let trials = 10_000;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut ledger = PrivacyLedger::new(1e-5).unwrap();
    let mut sums = vec![0.0; g.len()];
    let mut sq = vec![0.0; g.len()];
    for _ in 0..trials {
        let mut acc = ScoreAccumulator::new(m.layout());
        for _ in 0..tb {
            accumulate_scores(&m, &params, &empty, &setup, &mut rng, &mut acc, &mut ledger).unwrap();
        }
        for (j, v) in group_scores(&acc, &g, false).unwrap().into_iter().enumerate() {
            sums[j] += v;
            sq[j] += v * v;
        }
    }
    assert_eq!(ledger.steps(), (trials * tb) as u64);
    let n = trials as f64;
    for (j, group) in g.groups().enumerate() {
        let want = group.len() as f64 * tb as f64 * (1.3f64 * 0.7).powi(2);
        let mean = sums[j] / n;
        let var = (sq[j] - n * mean * mean) / (n - 1.0);
        let se = want * (2.0 / (n - 1.0)).sqrt();
        assert!((var - want).abs() <= 3.0 * se, "group {j}: {var} vs {want}");
        assert!(mean.abs() <= 3.0 * (want / n).sqrt());
    }
}

#[test]
fn scores_match_direct_recomputation() {
    let (model, params, batch) = random_instance(LayerFamily::Dense, 40, 5);
    let setup = ScoringSetup {
        clip: 0.3,
        noise_multiplier: 0.0,
        sample_rate: 0.1,
    };
    let mut acc = ScoreAccumulator::new(model.layout());
    let mut ledger = PrivacyLedger::new(1e-5).unwrap();
    accumulate_scores(&model, &params, &batch, &setup, &mut ChaCha8Rng::seed_from_u64(0), &mut acc, &mut ledger).unwrap();
    let mut want = vec![0.0; model.dim()];
    for g in model.per_sample_grads(&params, &batch).unwrap() {
        let norm = g.as_slice().iter().map(|v| v * v).sum::<f64>().sqrt();
        let f = (norm / 0.3).max(1.0);
        assert_eq!(f, clip_factor(norm, 0.3));
        for (_, seg) in model.layout().maskable() {
            for i in seg.range() {
                want[i] += g.as_slice()[i].abs() / f;
            }
        }
    }
    for (a, b) in acc.values.iter().zip(&want) {
        assert!((a - b).abs() <= 1e-12);
    }
    assert_eq!(ledger.steps(), 1);
}

#[test]
fn noise_free_sparta_equals_oracle() {
    let (model, params, _) = random_instance(LayerFamily::Conv, 12, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let batches: Vec<Batch> = (0..4).map(|_| random_batch(&model, 6, &mut rng)).collect();
    let budget = SparsityBudget::new(0.3).unwrap();
    let setup = ScoringSetup {
        clip: f64::INFINITY,
        noise_multiplier: 0.0,
        sample_rate: 0.25,
    };
    for kind in [GroupingKind::Singleton, GroupingKind::Row] {
        let g = grouping(model.layout(), kind, 0);
        let mut ledger = PrivacyLedger::new(1e-5).unwrap();
        let sparta = select_mask_sparta(&model, &params, &batches, &setup, g.clone(), &budget, &mut ledger, &mut rng).unwrap();
        let oracle = select_mask_oracle(&model, &params, &batches, OracleScore::L1, g, &budget).unwrap();
        assert_eq!(sparta, oracle);
        assert_eq!(ledger.steps(), 4);
    }
}

#[test]
fn noise_free_dpsgd_selection_is_top_k_of_summed_clipped_gradient() {
    let (model, params, _) = random_instance(LayerFamily::Dense, 13, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let batches: Vec<Batch> = (0..3).map(|_| random_batch(&model, 5, &mut rng)).collect();
    let g = grouping(model.layout(), GroupingKind::Singleton, 0);
    let budget = SparsityBudget::new(0.25).unwrap();
    let setup = ScoringSetup {
        clip: 0.5,
        noise_multiplier: 0.0,
        sample_rate: 0.3,
    };
    let mut ledger = PrivacyLedger::new(1e-5).unwrap();
    let mask = select_mask_dpsgd_gradients(&model, &params, &batches, &setup, g.clone(), &budget, &mut ledger, &mut rng).unwrap();
    let mut sum = vec![0.0; model.dim()];
    for b in &batches {
        for grad in model.per_sample_grads(&params, b).unwrap() {
            let f = (grad.norm() / 0.5).max(1.0);
            for (s, v) in sum.iter_mut().zip(grad.as_slice()) {
                *s += v / f;
            }
        }
    }
    let scores: Vec<f64> = g.groups().map(|grp| sum[grp[0]].abs()).collect();
    let want = top_k_mask(&scores, model.layout().clone(), g, &budget, AlwaysTrainable::STANDARD).unwrap();
    assert_eq!(mask, want);
}

#[test]
fn scoring_strategies_share_privacy_cost() {
    let (model, params, _) = random_instance(LayerFamily::LayerNorm, 14, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let batches: Vec<Batch> = (0..6).map(|_| random_batch(&model, 4, &mut rng)).collect();
    let budget = SparsityBudget::new(0.5).unwrap();
    let setup = ScoringSetup {
        clip: 1.0,
        noise_multiplier: 2.0,
        sample_rate: 1.0 / 6.0,
    };
    let mut a = PrivacyLedger::new(1e-5).unwrap();
    let mut b = PrivacyLedger::new(1e-5).unwrap();
    let g_row = grouping(model.layout(), GroupingKind::Row, 0);
    let g_single = grouping(model.layout(), GroupingKind::Singleton, 0);
    select_mask_sparta(&model, &params, &batches, &setup, g_row.clone(), &budget, &mut a, &mut rng).unwrap();
    select_mask_dpsgd_gradients(&model, &params, &batches, &setup, g_single, &budget, &mut b, &mut rng).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.steps(), 6);
    // same seed, same mask
    let run = |seed| {
        let mut l = PrivacyLedger::new(1e-5).unwrap();
        select_mask_sparta(&model, &params, &batches, &setup, g_row.clone(), &budget, &mut l, &mut ChaCha8Rng::seed_from_u64(seed))
            .unwrap()
    };
    assert_eq!(run(3), run(3));
}

#[test]
fn magnitude_selection_examples() {
    let m = Model::new(ModelSpec::mlp(10, &[4], 2)).unwrap();
    let g = grouping(m.layout(), GroupingKind::Row, 0);
    let budget = SparsityBudget::new(0.1).unwrap();
    let fc0 = m.layout().maskable().next().unwrap().1.clone();

    let mut w = ParamVector::zeros(m.layout().clone());
    w.as_mut_slice()[fc0.range()].fill(0.1);
    w.as_mut_slice()[fc0.offset + 7 * 4..fc0.offset + 8 * 4].fill(-3.0);
    let mask = select_mask_magnitude(&w, g.clone(), &budget).unwrap();
    assert_eq!(&mask.selection().unwrap().z[..10], &[false, false, false, false, false, false, false, true, false, false]);

    let mut flat = ParamVector::zeros(m.layout().clone());
    flat.as_mut_slice().fill(1.0);
    let half = SparsityBudget::new(0.5).unwrap();
    let mask = select_mask_magnitude(&flat, g.clone(), &half).unwrap();
    let z = &mask.selection().unwrap().z;
    assert!(z[..5].iter().all(|&b| b) && z[5..10].iter().all(|&b| !b));

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..50 {
        let w: Vec<f64> = (0..m.dim()).map(|_| rng.random::<f64>() - 0.5).collect();
        let p = ParamVector::from_values(m.layout().clone(), w.clone()).unwrap();
        let mask = select_mask_magnitude(&p, g.clone(), &half).unwrap();
        let z = &mask.selection().unwrap().z;
        for l in 0..g.layers().len() {
            let r = g.layer_range(l);
            let sums: Vec<f64> = g.layers()[l].groups.iter().map(|grp| grp.iter().map(|&i| w[i].abs()).sum()).collect();
            let chosen: Vec<usize> = (0..r.len()).filter(|&j| z[r.start + j]).collect();
            assert_eq!(chosen, sort_top_k(&sums, half.groups_for_layer(r.len())));
        }
    }
}

#[test]
fn bitfit_trains_no_weight_matrix() {
    let m = model();
    let mask = select_mask_bitfit(m.layout().clone());
    assert_eq!(mask.maskable_selected(), 0);
    let flags = mask.coordinate_flags();
    for (_, seg) in m.layout().maskable() {
        assert!(seg.range().all(|i| !flags[i]));
    }
    assert!(mask.trainable_count() > 0);
    assert_eq!(Mask::all(m.layout().clone()).trainable_count(), m.dim());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn top_k_is_scale_invariant(seed in 0u64..10_000, c in 1e-3f64..1e3, s in 0.0f64..=1.0) {
        let m = model();
        let g = grouping(m.layout(), GroupingKind::Row, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f64> = (0..g.len()).map(|_| rng.random::<f64>()).collect();
        let scaled: Vec<f64> = v.iter().map(|x| x * c).collect();
        let budget = SparsityBudget::new(s).unwrap();
        let a = top_k_mask(&v, m.layout().clone(), g.clone(), &budget, AlwaysTrainable::STANDARD).unwrap();
        let b = top_k_mask(&scaled, m.layout().clone(), g, &budget, AlwaysTrainable::STANDARD).unwrap();
        prop_assert_eq!(a.selection().unwrap().z.clone(), b.selection().unwrap().z.clone());
    }

    #[test]
    fn every_selected_mask_is_feasible(seed in 0u64..10_000, s in 0.0f64..=1.0, kind in 0usize..3) {
        let kind = [GroupingKind::Singleton, GroupingKind::Row, GroupingKind::Random { block_size: 3 }][kind];
        let (model, params, _) = random_instance(LayerFamily::Dense, seed, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let batches: Vec<Batch> = (0..2).map(|_| random_batch(&model, 3, &mut rng)).collect();
        let g = grouping(model.layout(), kind, seed);
        let budget = SparsityBudget::new(s).unwrap();
        let setup = ScoringSetup { clip: 1.0, noise_multiplier: 1.0, sample_rate: 0.5 };
        let mut ledger = PrivacyLedger::new(1e-5).unwrap();
        let masks = [
            select_mask_sparta(&model, &params, &batches, &setup, g.clone(), &budget, &mut ledger, &mut rng).unwrap(),
            select_mask_dpsgd_gradients(&model, &params, &batches, &setup, g.clone(), &budget, &mut ledger, &mut rng).unwrap(),
            select_mask_oracle(&model, &params, &batches, OracleScore::L2, g.clone(), &budget).unwrap(),
            select_mask_magnitude(&params, g.clone(), &budget).unwrap(),
            select_mask_random(model.layout().clone(), g.clone(), &budget, &mut rng).unwrap(),
        ];
        for mask in &masks {
            prop_assert!(mask.check_feasible(&budget).is_ok());
            let flags = mask.coordinate_flags();
            for seg in model.layout().segments() {
                if !seg.spec.is_maskable() {
                    prop_assert!(seg.range().all(|i| flags[i]));
                }
            }
        }
        prop_assert_eq!(ledger.steps(), 4);
    }
}
