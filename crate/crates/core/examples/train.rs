//! One private fine-tuning run on the synthetic transfer task, printing the
//! per-epoch trace for sparse and full fine-tuning at the same budget.
//!
//! cargo run --release --example train

use dpsparse::data::TaskSpec;
use dpsparse::harness::{run_experiment, DataSource};
use dpsparse::{GroupingKind, Strategy, TrainConfig};

fn main() -> dpsparse::Result<()> {
    let base = TrainConfig {
        data: DataSource::Synthetic {
            task: TaskSpec {
                train_samples: 2000,
                test_samples: 1000,
                ..TaskSpec::default()
            },
        },
        grouping: GroupingKind::Row,
        epsilon: Some(2.0),
        batch_size: 200,
        epochs: 20,
        mask_epoch: 4,
        seeds: vec![0],
        ..TrainConfig::default()
    };
    for strategy in [Strategy::Sparta, Strategy::All] {
        let report = run_experiment(&TrainConfig { strategy, ..base.clone() })?;
        let run = &report.runs[0];
        println!("{} (sigma {:.3}, {} trainable of {})", strategy.label(), run.noise_multiplier, run.mask.trainable, run.mask.total);
        for e in &run.epochs {
            let loss = e.train_loss.map_or("      -".to_string(), |l| format!("{l:7.4}"));
            println!(
                "  epoch {:>2} {:<7} loss {loss}  acc {:.4}  eps {:.3}  lr {:.4}",
                e.epoch,
                format!("{:?}", e.phase).to_lowercase(),
                e.test_accuracy,
                e.epsilon,
                e.lr
            );
        }
    }
    Ok(())
}
