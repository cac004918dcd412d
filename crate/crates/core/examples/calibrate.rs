//! Noise calibration and accounting: pick sigma for a budget, then show how
//! the ledger composes and how epsilon moves with the number of epochs.
//!
//! cargo run --release --example calibrate

use dpsparse::accountant::calibrate_sigma;
use dpsparse::engine::batches_per_epoch;
use dpsparse::PrivacyLedger;

fn main() -> dpsparse::Result<()> {
    let (q, delta) = (0.1, 1e-5);
    let tb = batches_per_epoch(q) as u64;
    println!("q = {q}, {tb} batches per epoch, delta = {delta}");
    for target in [1.0, 2.0, 4.0, 8.0] {
        let sigma = calibrate_sigma(q, 50 * tb, target, delta)?;
        println!("eps {target:>3}: sigma {sigma:.4} for 50 epochs");
    }

    // a scoring epoch and a training epoch at the same (q, sigma) are the same event
    let sigma = calibrate_sigma(q, 50 * tb, 1.0, delta)?;
    let mut ledger = PrivacyLedger::new(delta)?;
    for epoch in 1..=50 {
        ledger.record(q, sigma, tb)?;
        if epoch % 10 == 0 {
            println!("after {epoch:>2} epochs: eps {:.4}", ledger.epsilon()?);
        }
    }
    println!("{}", serde_json::to_string_pretty(&ledger.report()?).expect("json"));
    Ok(())
}
