//! Planted-task ablation: oracle, sparta, dpsgd-grad and random masks at the
//! same privacy budget, several seeds each, with pairwise separations in units
//! of the pooled standard error.
//!
//! cargo run --release --example ablation -- [seeds]

use dpsparse::harness::{planted_ablation, run_experiment};
use dpsparse::{RunReport, Strategy};

fn pooled_se(a: &RunReport, b: &RunReport) -> f64 {
    let na = a.runs.len() as f64;
    let nb = b.runs.len() as f64;
    (a.accuracy_std.powi(2) / na + b.accuracy_std.powi(2) / nb).sqrt()
}

fn main() -> dpsparse::Result<()> {
    let seeds: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(10);
    let strategies = [Strategy::Oracle, Strategy::Sparta, Strategy::DpsgdGrad, Strategy::Random];
    let mut reports = Vec::new();
    for strategy in strategies {
        let report = run_experiment(&planted_ablation(strategy, (0..seeds).collect()))?;
        let overlap: f64 = report.runs.iter().filter_map(|r| r.mask.planted_overlap).sum::<f64>()
            / report.runs.len() as f64;
        println!(
            "{:<11} acc {:.4} +- {:.4}  eps {:.3}  sigma {:.3}  planted overlap {:.3}{}",
            strategy.label(),
            report.accuracy_mean,
            report.accuracy_std,
            report.epsilon,
            report.runs[0].noise_multiplier,
            overlap,
            if report.not_dp { "  (not private)" } else { "" },
        );
        reports.push(report);
    }
    let [oracle, sparta, dpsgd, random] = &reports[..] else { unreachable!() };
    for (name, a, b) in [
        ("oracle - sparta", oracle, sparta),
        ("sparta - random", sparta, random),
        ("sparta - dpsgd-grad", sparta, dpsgd),
        ("dpsgd-grad - random", dpsgd, random),
    ] {
        let diff = a.accuracy_mean - b.accuracy_mean;
        println!("{name:<20} {diff:+.4}  ({:+.1} pooled SE)", diff / pooled_se(a, b).max(1e-12));
    }
    Ok(())
}
