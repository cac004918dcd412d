//! Mask selection on its own: score one epoch of Poisson batches with noisy
//! clipped absolute gradients, keep the top rows per layer, save the mask and
//! read it back.
//!
//! cargo run --release --example select_mask

use std::sync::Arc;

use dpsparse::data::{synth_transfer_task, TaskSpec};
use dpsparse::engine::PrivacySession;
use dpsparse::mask::{select_mask_oracle, select_mask_sparta, OracleScore, ScoringSetup};
use dpsparse::persist::{read_mask, write_mask, MaskMeta};
use dpsparse::rng::{stream, Stream};
use dpsparse::{Grouping, GroupingKind, Model, ModelSpec, SparsityBudget};

fn main() -> dpsparse::Result<()> {
    let task = synth_transfer_task(&TaskSpec::default(), 0)?;
    let model = Model::new(ModelSpec::mlp(task.train.dim, &[64], task.train.classes))?;
    let params = model.init_params(&mut stream(0, Stream::Init, 0));
    let q = 0.05;

    let mut session = PrivacySession::new(1e-5)?;
    let batches = session.draw_epoch(&task.train, q, &mut stream(0, Stream::Batches, 0))?;
    let grouping = Arc::new(Grouping::new(model.layout(), GroupingKind::Row, &mut stream(0, Stream::Grouping, 0))?);
    let budget = SparsityBudget::new(0.1)?;
    let setup = ScoringSetup {
        clip: 1.0,
        noise_multiplier: 3.0,
        sample_rate: q,
    };
    let mask = select_mask_sparta(
        &model,
        &params,
        &batches,
        &setup,
        grouping.clone(),
        &budget,
        &mut session.ledger,
        &mut stream(0, Stream::ScoreNoise, 0),
    )?;
    let exact = select_mask_oracle(&model, &params, &batches, OracleScore::L1, grouping, &budget)?;
    let (ours, theirs) = (mask.coordinate_flags(), exact.coordinate_flags());
    let agree = model
        .layout()
        .maskable()
        .flat_map(|(_, seg)| seg.range())
        .filter(|&i| ours[i] && theirs[i])
        .count();
    println!(
        "{} batches scored, eps {:.3}, accounted: {}",
        batches.len(),
        session.ledger.epsilon()?,
        session.is_accounted()
    );
    println!("planted input rows: {:?}", task.planted_dims);
    for (name, d) in mask.layer_density() {
        println!("{name}: density {d:.3}");
    }
    println!("{agree} of {} selected weights also chosen by exact scores", mask.maskable_selected());

    let path = std::env::temp_dir().join("example.dpmask");
    let meta = MaskMeta {
        strategy: Some("sparta".into()),
        sparsity: Some(0.1),
        seed: Some(0),
        private: true,
        ledger: Some(session.ledger.report()?),
    };
    write_mask(&path, &mask, &meta)?;
    let (header, back) = read_mask(&path, model.layout().clone())?;
    println!("wrote {} ({} segments), round trip equal: {}", path.display(), header.segments.len(), back.coordinate_flags() == mask.coordinate_flags());
    Ok(())
}
