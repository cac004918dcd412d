//! Mask-selection strategies.
//!
//! The private scorers consume one epoch of Poisson batches and record one
//! ledger event per batch with the same `(q, sigma)` a training step would
//! use, so a scoring epoch costs exactly one training epoch.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{group_scores, top_k_mask, AlwaysTrainable, Grouping, Mask, ScoreAccumulator, SparsityBudget};
use crate::accountant::PrivacyLedger;
use crate::engine::clip_factor;
use crate::error::{Error, Result};
use crate::model::{Batch, Model};
use crate::params::{Layout, ParamVector};

/// Clipping and noise of a scoring epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoringSetup {
    pub clip: f64,
    pub noise_multiplier: f64,
    pub sample_rate: f64,
}

impl ScoringSetup {
    fn noise_std(&self) -> Result<f64> {
        if self.noise_multiplier == 0.0 {
            return Ok(0.0);
        }
        if !self.clip.is_finite() {
            return Err(Error::Config("noise needs a finite clipping constant".into()));
        }
        Ok(self.noise_multiplier * self.clip)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OracleScore {
    /// Sum of per-sample absolute gradients.
    #[default]
    L1,
    /// Squared epoch-summed gradient.
    L2,
}

fn maskable_flags(layout: &Layout) -> Vec<bool> {
    let mut f = vec![false; layout.dim()];
    for (_, seg) in layout.maskable() {
        f[seg.range()].iter_mut().for_each(|v| *v = true);
    }
    f
}

fn add_noise<R: Rng + ?Sized>(values: &mut [f64], flags: &[bool], std: f64, rng: &mut R) {
    if std == 0.0 {
        return;
    }
    for (v, &m) in values.iter_mut().zip(flags) {
        if m {
            let z: f64 = StandardNormal.sample(rng);
            *v += std * z;
        }
    }
}

/// Adds `sum_i |g_i| / max(1, ||g_i|| / C) + N(0, C^2 sigma^2)` over the
/// maskable coordinates and records one event. The clip norm is that of the
/// full per-sample gradient.
#[allow(clippy::too_many_arguments)]
pub fn accumulate_scores<R: Rng + ?Sized>(
    model: &Model,
    params: &ParamVector,
    batch: &Batch,
    setup: &ScoringSetup,
    rng: &mut R,
    acc: &mut ScoreAccumulator,
    ledger: &mut PrivacyLedger,
) -> Result<()> {
    let std = setup.noise_std()?;
    let flags = maskable_flags(model.layout());
    let values = &mut acc.values;
    model.for_each_sample_grad(params, batch, |_, _, g| {
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        let inv = 1.0 / clip_factor(norm, setup.clip);
        for ((a, v), &m) in values.iter_mut().zip(g).zip(&flags) {
            if m {
                *a += v.abs() * inv;
            }
        }
    })?;
    add_noise(&mut acc.values, &flags, std, rng);
    acc.batches_seen += 1;
    ledger.record(setup.sample_rate, setup.noise_multiplier, 1)
}

/// Adds the signed noisy clipped sum `sum_i clip(g_i) + N(0, C^2 sigma^2)`;
/// absolute values are taken once the epoch is complete.
pub fn accumulate_dpsgd_gradients<R: Rng + ?Sized>(
    model: &Model,
    params: &ParamVector,
    batch: &Batch,
    setup: &ScoringSetup,
    rng: &mut R,
    acc: &mut ScoreAccumulator,
    ledger: &mut PrivacyLedger,
) -> Result<()> {
    let std = setup.noise_std()?;
    let flags = maskable_flags(model.layout());
    let values = &mut acc.values;
    model.for_each_sample_grad(params, batch, |_, _, g| {
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        let inv = 1.0 / clip_factor(norm, setup.clip);
        for ((a, v), &m) in values.iter_mut().zip(g).zip(&flags) {
            if m {
                *a += v * inv;
            }
        }
    })?;
    add_noise(&mut acc.values, &flags, std, rng);
    acc.batches_seen += 1;
    ledger.record(setup.sample_rate, setup.noise_multiplier, 1)
}

/// Exact, unclipped and noise-free scores. Not differentially private.
pub fn accumulate_oracle(
    model: &Model,
    params: &ParamVector,
    batch: &Batch,
    score: OracleScore,
    acc: &mut ScoreAccumulator,
) -> Result<()> {
    let flags = maskable_flags(model.layout());
    let values = &mut acc.values;
    model.for_each_sample_grad(params, batch, |_, _, g| {
        for ((a, v), &m) in values.iter_mut().zip(g).zip(&flags) {
            if m {
                *a += match score {
                    OracleScore::L1 => v.abs(),
                    OracleScore::L2 => *v,
                };
            }
        }
    })?;
    acc.batches_seen += 1;
    Ok(())
}

/// Private group scoring over one epoch of batches followed by per-layer top-k.
#[allow(clippy::too_many_arguments)]
pub fn select_mask_sparta<R: Rng + ?Sized>(
    model: &Model,
    params: &ParamVector,
    batches: &[Batch],
    setup: &ScoringSetup,
    grouping: Arc<Grouping>,
    budget: &SparsityBudget,
    ledger: &mut PrivacyLedger,
    rng: &mut R,
) -> Result<Mask> {
    let mut acc = ScoreAccumulator::new(model.layout());
    for batch in batches {
        accumulate_scores(model, params, batch, setup, rng, &mut acc, ledger)?;
    }
    let v = group_scores(&acc, &grouping, false)?;
    top_k_mask(&v, model.layout().clone(), grouping, budget, AlwaysTrainable::STANDARD)
}

/// Top-k of the absolute epoch-summed noisy DP-SGD gradient.
#[allow(clippy::too_many_arguments)]
pub fn select_mask_dpsgd_gradients<R: Rng + ?Sized>(
    model: &Model,
    params: &ParamVector,
    batches: &[Batch],
    setup: &ScoringSetup,
    grouping: Arc<Grouping>,
    budget: &SparsityBudget,
    ledger: &mut PrivacyLedger,
    rng: &mut R,
) -> Result<Mask> {
    let mut acc = ScoreAccumulator::new(model.layout());
    for batch in batches {
        accumulate_dpsgd_gradients(model, params, batch, setup, rng, &mut acc, ledger)?;
    }
    acc.values.iter_mut().for_each(|v| *v = v.abs());
    let v = group_scores(&acc, &grouping, false)?;
    top_k_mask(&v, model.layout().clone(), grouping, budget, AlwaysTrainable::STANDARD)
}

/// Non-private reference selection from exact gradients.
pub fn select_mask_oracle(
    model: &Model,
    params: &ParamVector,
    batches: &[Batch],
    score: OracleScore,
    grouping: Arc<Grouping>,
    budget: &SparsityBudget,
) -> Result<Mask> {
    let mut acc = ScoreAccumulator::new(model.layout());
    for batch in batches {
        accumulate_oracle(model, params, batch, score, &mut acc)?;
    }
    if score == OracleScore::L2 {
        acc.values.iter_mut().for_each(|v| *v *= *v);
    }
    let v = group_scores(&acc, &grouping, false)?;
    top_k_mask(&v, model.layout().clone(), grouping, budget, AlwaysTrainable::STANDARD)
}

/// Top-k of group sums of `|W_old|`. Reads no data.
pub fn select_mask_magnitude(params_old: &ParamVector, grouping: Arc<Grouping>, budget: &SparsityBudget) -> Result<Mask> {
    let acc = ScoreAccumulator {
        values: params_old.as_slice().iter().map(|v| v.abs()).collect(),
        batches_seen: 0,
    };
    let v = group_scores(&acc, &grouping, false)?;
    top_k_mask(&v, params_old.layout().clone(), grouping, budget, AlwaysTrainable::STANDARD)
}

/// `k_layer` groups per layer, uniformly at random.
pub fn select_mask_random<R: Rng + ?Sized>(
    layout: Arc<Layout>,
    grouping: Arc<Grouping>,
    budget: &SparsityBudget,
    rng: &mut R,
) -> Result<Mask> {
    let mut z = vec![false; grouping.len()];
    for l in 0..grouping.layers().len() {
        let range = grouping.layer_range(l);
        let k = budget.groups_for_layer(range.len());
        for j in rand::seq::index::sample(rng, range.len(), k) {
            z[range.start + j] = true;
        }
    }
    Mask::from_groups(layout, grouping, z, AlwaysTrainable::STANDARD)
}

/// Only the classifier head trains.
pub fn select_mask_last_layer(layout: Arc<Layout>) -> Mask {
    Mask::none(layout, AlwaysTrainable::HEAD_ONLY)
}

/// Biases, normalisation scales and the head train; no weight matrix does.
pub fn select_mask_bitfit(layout: Arc<Layout>) -> Mask {
    Mask::none(layout, AlwaysTrainable::STANDARD)
}
