//! Selection quality on the planted task, where the informative input rows of
//! the first weight matrix are known.

use dpsparse::harness::{planted_ablation, run_experiment};
use dpsparse::{RunReport, Strategy};

fn overlaps(strategy: Strategy) -> (RunReport, Vec<f64>) {
    let report = run_experiment(&planted_ablation(strategy, (0..10).collect())).unwrap();
    let o = report.runs.iter().map(|r| r.mask.planted_overlap.unwrap()).collect();
    (report, o)
}

#[test]
fn private_row_scoring_finds_planted_rows() {
    let (report, o) = overlaps(Strategy::Sparta);
    let mean = o.iter().sum::<f64>() / o.len() as f64;
    assert!(mean >= 0.8, "mean overlap {mean}");
    assert!(report.epsilon <= 1.0 + 1e-6);
}

#[test]
fn oracle_scoring_finds_planted_rows() {
    let (report, o) = overlaps(Strategy::Oracle);
    let mean = o.iter().sum::<f64>() / o.len() as f64;
    assert!(mean >= 0.95, "mean overlap {mean}");
    assert!(report.not_dp);
}

#[test]
fn noisy_gradient_selection_looks_random() {
    let (report, o) = overlaps(Strategy::DpsgdGrad);
    // 100 x 64 first-layer weights, 10 planted rows, 20% of coordinates selected
    let (total, planted) = (6400.0, 640.0);
    let selected = (0.2f64 * total).floor();
    let p = planted / total;
    let mean_hits = selected * p;
    let sd_hits = (selected * p * (1.0 - p) * (total - selected) / (total - 1.0)).sqrt();
    let denom = selected.min(planted);
    // the seed-averaged overlap, measured in units of one selection's spread
    let mean = o.iter().sum::<f64>() / o.len() as f64;
    let z = (mean * denom - mean_hits) / sd_hits;
    assert!(z.abs() <= 3.0, "mean overlap {mean}, z {z:.2}, per seed {o:?}");
    // the head is not maskable, so only the first layer contributes
    assert_eq!(report.runs[0].mask.maskable_selected as f64, selected);
}
