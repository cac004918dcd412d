//! A small grid over strategies and budgets written as CSV to stdout.
//! Every strategy in a column shares one privacy ledger.
//!
//! cargo run --release --example sweep

use dpsparse::data::TaskSpec;
use dpsparse::harness::{sweep, write_csv, DataSource, SweepSpec};
use dpsparse::{GroupingKind, Strategy, TrainConfig};

fn main() -> dpsparse::Result<()> {
    let spec = SweepSpec {
        base: TrainConfig {
            data: DataSource::Synthetic {
                task: TaskSpec {
                    train_samples: 1000,
                    test_samples: 500,
                    pretrain_samples: 2000,
                    ..TaskSpec::default()
                },
            },
            grouping: GroupingKind::Row,
            batch_size: 100,
            epochs: 10,
            mask_epoch: 2,
            epsilon: Some(1.0),
            seeds: vec![0, 1],
            ..TrainConfig::default()
        },
        strategies: vec![Strategy::Sparta, Strategy::Mp, Strategy::Random, Strategy::Bitfit, Strategy::All],
        epsilons: vec![1.0, 4.0],
        sparsities: Vec::new(),
        groupings: Vec::new(),
    };
    let (rows, _) = sweep(&spec.expand());
    write_csv(std::io::stdout(), &rows)
}
