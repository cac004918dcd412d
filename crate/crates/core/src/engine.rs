//! DP-SGD: Poisson subsampling, per-sample clipping, Gaussian noise and
//! masked momentum updates, plus a row-stacked update path.
//!
//! The noisy gradient is normalised by the expected batch size `q * n`, not
//! the realised one, so the clipped sum keeps sensitivity `C` under
//! add/remove-one neighbours.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::accountant::PrivacyLedger;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::mask::{GroupingKind, Mask};
use crate::model::{Batch, Model};
use crate::params::{Layout, ParamVector, SegmentKind};

/// Learning-rate schedule over the global step count of a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LrSchedule {
    Constant,
    /// Linear warmup over the first `warmup` fraction of steps, then cosine decay to zero.
    Cosine { warmup: f64 },
}

impl LrSchedule {
    pub fn factor(&self, step: u64, total_steps: u64) -> f64 {
        match *self {
            LrSchedule::Constant => 1.0,
            LrSchedule::Cosine { warmup } => {
                let total = total_steps.max(1) as f64;
                let warm = (warmup * total).ceil();
                let t = step as f64;
                if t < warm {
                    (t + 1.0) / warm
                } else {
                    let span = (total - warm).max(1.0);
                    let p = ((t - warm) / span).min(1.0);
                    0.5 * (1.0 + (std::f64::consts::PI * p).cos())
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpSgdConfig {
    pub clip: f64,
    pub noise_multiplier: f64,
    pub sample_rate: f64,
    pub lr: f64,
    pub classifier_lr: f64,
    pub momentum: f64,
    pub schedule: LrSchedule,
    pub epochs: usize,
    pub mask_epoch: usize,
}

impl Default for DpSgdConfig {
    fn default() -> Self {
        DpSgdConfig {
            clip: 1.0,
            noise_multiplier: 1.0,
            sample_rate: 0.1,
            lr: 0.01,
            classifier_lr: 0.1,
            momentum: 0.9,
            schedule: LrSchedule::Cosine { warmup: 0.02 },
            epochs: 50,
            mask_epoch: 10,
        }
    }
}

impl DpSgdConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.clip > 0.0) {
            return bad(format!("clip must be positive, got {}", self.clip));
        }
        if !(self.noise_multiplier >= 0.0) || !self.noise_multiplier.is_finite() {
            return bad(format!("invalid noise multiplier {}", self.noise_multiplier));
        }
        if self.noise_multiplier > 0.0 && self.clip.is_infinite() {
            return bad("noise needs a finite clipping constant".into());
        }
        if !(self.sample_rate > 0.0 && self.sample_rate <= 1.0) {
            return bad(format!("sample rate must lie in (0, 1], got {}", self.sample_rate));
        }
        if !(self.lr >= 0.0 && self.classifier_lr >= 0.0) {
            return bad("learning rates must be nonnegative".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if let LrSchedule::Cosine { warmup } = self.schedule {
            if !(0.0..1.0).contains(&warmup) {
                return bad(format!("warmup fraction must lie in [0, 1), got {warmup}"));
            }
        }
        if self.epochs == 0 || self.mask_epoch + 1 > self.epochs {
            return bad(format!(
                "need 0 <= mask_epoch <= epochs - 1, got mask_epoch {} with {} epochs",
                self.mask_epoch, self.epochs
            ));
        }
        Ok(())
    }

    /// Batches per epoch, `ceil(1/q)`.
    pub fn batches_per_epoch(&self) -> usize {
        batches_per_epoch(self.sample_rate)
    }
}

pub fn batches_per_epoch(q: f64) -> usize {
    (1.0 / q - 1e-12).ceil().max(1.0) as usize
}

/// `max(1, norm / C)`; 1 for an infinite clipping constant.
pub fn clip_factor(norm: f64, clip: f64) -> f64 {
    (norm / clip).max(1.0)
}

/// Scales `g` to norm at most `clip`. Leaves it untouched below the threshold.
pub fn clip(g: &ParamVector, clip: f64) -> ParamVector {
    let f = clip_factor(g.norm(), clip);
    let mut out = g.clone();
    if f > 1.0 {
        out.scale(1.0 / f);
    }
    out
}

/// Like [`clip`], but frozen coordinates are zeroed first so the norm covers
/// trainable coordinates only.
pub fn clip_trainable(g: &ParamVector, clip_c: f64, trainable: &[bool]) -> ParamVector {
    let mut out = g.clone();
    for (v, &t) in out.as_mut_slice().iter_mut().zip(trainable) {
        if !t {
            *v = 0.0;
        }
    }
    clip(&out, clip_c)
}

/// Noise and normalisation of one private gradient step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    pub clip: f64,
    pub noise_multiplier: f64,
    /// `q * n`, the expected batch size.
    pub expected_batch: f64,
}

impl NoiseSpec {
    pub fn std(&self) -> f64 {
        if self.noise_multiplier == 0.0 {
            0.0
        } else {
            self.noise_multiplier * self.clip
        }
    }
}

/// `(sum of clipped gradients + N(0, sigma^2 C^2 I)) / (q n)`.
///
/// Noise is drawn for every coordinate in layout order, so the stream
/// consumed per step does not depend on the mask.
pub fn noisy_batch_grad<R: Rng + ?Sized>(
    layout: &std::sync::Arc<Layout>,
    per_sample: &[ParamVector],
    spec: &NoiseSpec,
    rng: &mut R,
) -> Result<ParamVector> {
    let mut sum = ParamVector::zeros(layout.clone());
    for g in per_sample {
        sum.add_scaled(&clip(g, spec.clip), 1.0)?;
    }
    finish_noisy(&mut sum, spec, rng);
    Ok(sum)
}

fn finish_noisy<R: Rng + ?Sized>(sum: &mut ParamVector, spec: &NoiseSpec, rng: &mut R) {
    let std = spec.std();
    let inv = 1.0 / spec.expected_batch;
    for v in sum.as_mut_slice() {
        let z: f64 = StandardNormal.sample(rng);
        *v = (*v + std * z) * inv;
    }
}

/// Index lists of one epoch of Poisson batches: `ceil(1/q)` batches, each point
/// included independently with probability `q`.
pub fn poisson_batches<R: Rng + ?Sized>(n: usize, q: f64, rng: &mut R) -> Result<Vec<Vec<usize>>> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::Usage(format!("sample rate must lie in (0, 1], got {q}")));
    }
    Ok((0..batches_per_epoch(q))
        .map(|_| (0..n).filter(|_| rng.random::<f64>() < q).collect())
        .collect())
}

/// Ledger plus an audit of how many private batches were drawn.
///
/// Batches are drawn through [`PrivacySession::draw_epoch`] and every
/// mechanism that reads one records an event. A run is private exactly when
/// the two counts agree.
#[derive(Debug, Clone, PartialEq)]
pub struct PrivacySession {
    pub ledger: PrivacyLedger,
    batches_drawn: u64,
}

impl PrivacySession {
    pub fn new(delta: f64) -> Result<Self> {
        Ok(PrivacySession {
            ledger: PrivacyLedger::new(delta)?,
            batches_drawn: 0,
        })
    }

    pub fn draw_epoch<R: Rng + ?Sized>(&mut self, data: &Dataset, q: f64, rng: &mut R) -> Result<Vec<Batch>> {
        let ids = poisson_batches(data.len(), q, rng)?;
        self.batches_drawn += ids.len() as u64;
        Ok(ids.iter().map(|b| data.batch(b)).collect())
    }

    pub fn batches_drawn(&self) -> u64 {
        self.batches_drawn
    }

    /// Every drawn batch went through a recorded mechanism.
    pub fn is_accounted(&self) -> bool {
        self.ledger.steps() == self.batches_drawn
    }
}

/// Heavy-ball momentum state, PyTorch convention: `v = mu v + g; w -= lr v`.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentumState {
    pub velocity: Vec<f64>,
}

impl MomentumState {
    pub fn new(dim: usize) -> Self {
        MomentumState { velocity: vec![0.0; dim] }
    }

    pub fn reset(&mut self) {
        self.velocity.fill(0.0);
    }
}

/// Per-coordinate base learning rates: `classifier_lr` on head segments, `lr` elsewhere.
pub fn learning_rates(layout: &Layout, lr: f64, classifier_lr: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(layout.dim());
    for seg in layout.segments() {
        let v = if seg.spec.head { classifier_lr } else { lr };
        out.extend(std::iter::repeat_n(v, seg.len()));
    }
    out
}

/// Step position used by the schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Progress {
    pub step: u64,
    pub total_steps: u64,
}

/// Masked momentum-SGD update. Coordinates outside the mask keep their value
/// and their momentum.
pub fn step(
    params: &mut ParamVector,
    grad: &ParamVector,
    mask: &Mask,
    config: &DpSgdConfig,
    progress: Progress,
    state: &mut MomentumState,
) -> Result<()> {
    params.ensure_same_layout(grad)?;
    if mask.layout().as_ref() != params.layout().as_ref() || state.velocity.len() != params.len() {
        return Err(Error::Config("mask or momentum state does not match parameters".into()));
    }
    let factor = config.schedule.factor(progress.step, progress.total_steps);
    let lrs = learning_rates(params.layout(), config.lr, config.classifier_lr);
    let flags = mask.coordinate_flags();
    let w = params.as_mut_slice();
    for i in 0..w.len() {
        if flags[i] {
            let v = config.momentum * state.velocity[i] + grad.as_slice()[i];
            state.velocity[i] = v;
            w[i] -= lrs[i] * factor * v;
        }
    }
    Ok(())
}

/// Trainable rows of a row-grouped mask held as one dense matrix per layer,
/// next to the always-trainable segments; frozen rows are never touched.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedUpdater {
    /// (row start in the flat parameter vector, row length) per stacked row.
    rows: Vec<(usize, usize)>,
    /// Flat ranges of always-trainable segments.
    dense: Vec<std::ops::Range<usize>>,
    stacked: Vec<f64>,
    velocity: Vec<f64>,
    lrs: Vec<f64>,
}

impl StackedUpdater {
    /// Gathers the trainable rows of `params`. Fails unless the mask came from
    /// a row grouping.
    pub fn new(params: &ParamVector, mask: &Mask, config: &DpSgdConfig) -> Result<Self> {
        if mask.grouping_kind() != Some(GroupingKind::Row) {
            return Err(Error::Usage("stacked updates need a row-grouped mask".into()));
        }
        if mask.layout().as_ref() != params.layout().as_ref() {
            return Err(Error::Config("mask does not match parameters".into()));
        }
        let layout = params.layout();
        let always = mask.always();
        let mut rows = Vec::new();
        let mut dense = Vec::new();
        for (s, seg) in layout.segments().iter().enumerate() {
            if seg.spec.is_maskable() {
                let SegmentKind::Weight { rows: r, cols } = seg.spec.kind else { unreachable!() };
                let bits = mask.segment_bits(s);
                for row in 0..r {
                    if bits[row * cols] {
                        rows.push((seg.offset + row * cols, cols));
                    }
                }
            } else {
                let on = if seg.spec.head {
                    always.head
                } else {
                    match seg.spec.kind {
                        SegmentKind::Bias { .. } => always.bias,
                        SegmentKind::NormScale { .. } => always.norm,
                        SegmentKind::Weight { .. } => false,
                    }
                };
                if on {
                    dense.push(seg.range());
                }
            }
        }
        let all_lrs = learning_rates(layout, config.lr, config.classifier_lr);
        let mut stacked = Vec::new();
        let mut lrs = Vec::new();
        let p = params.as_slice();
        for &(start, len) in &rows {
            stacked.extend_from_slice(&p[start..start + len]);
            lrs.extend_from_slice(&all_lrs[start..start + len]);
        }
        for r in &dense {
            stacked.extend_from_slice(&p[r.clone()]);
            lrs.extend_from_slice(&all_lrs[r.clone()]);
        }
        Ok(StackedUpdater {
            velocity: vec![0.0; stacked.len()],
            rows,
            dense,
            stacked,
            lrs,
        })
    }

    pub fn trainable_rows(&self) -> usize {
        self.rows.len()
    }

    fn ranges(&self) -> impl Iterator<Item = std::ops::Range<usize>> + '_ {
        self.rows
            .iter()
            .map(|&(s, l)| s..s + l)
            .chain(self.dense.iter().cloned())
    }

    /// Loads momentum for the stacked coordinates from a full-length buffer.
    pub fn load_velocity(&mut self, state: &MomentumState) {
        let mut k = 0;
        let ranges: Vec<_> = self.ranges().collect();
        for r in ranges {
            for i in r {
                self.velocity[k] = state.velocity[i];
                k += 1;
            }
        }
    }

    /// Applies one update from a full-length gradient to the stacked block.
    pub fn update(&mut self, grad: &[f64], momentum: f64, factor: f64) {
        let mut k = 0;
        let ranges: Vec<_> = self.ranges().collect();
        for r in ranges {
            for i in r {
                let v = momentum * self.velocity[k] + grad[i];
                self.velocity[k] = v;
                self.stacked[k] -= self.lrs[k] * factor * v;
                k += 1;
            }
        }
    }

    /// Writes the stacked block back into `params` (and momentum into `state`).
    pub fn scatter(&self, params: &mut ParamVector, state: Option<&mut MomentumState>) {
        let mut k = 0;
        let w = params.as_mut_slice();
        let mut vel = state;
        for r in self.ranges() {
            for i in r {
                w[i] = self.stacked[k];
                if let Some(s) = vel.as_deref_mut() {
                    s.velocity[i] = self.velocity[k];
                }
                k += 1;
            }
        }
    }
}

/// Same contract as [`step`], computed on the stacked trainable rows.
pub fn stacked_step(
    params: &mut ParamVector,
    grad: &ParamVector,
    mask: &Mask,
    config: &DpSgdConfig,
    progress: Progress,
    state: &mut MomentumState,
) -> Result<()> {
    params.ensure_same_layout(grad)?;
    let mut up = StackedUpdater::new(params, mask, config)?;
    up.load_velocity(state);
    let factor = config.schedule.factor(progress.step, progress.total_steps);
    up.update(grad.as_slice(), config.momentum, factor);
    up.scatter(params, Some(state));
    Ok(())
}

/// Mean training loss and steps taken over one epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub mean_loss: f64,
    pub steps: u64,
}

/// Runs one epoch of masked DP-SGD over pre-drawn batches, recording one
/// ledger event per batch. Frozen coordinates are excluded from the clipping
/// norm.
#[allow(clippy::too_many_arguments)]
pub fn train_epoch<R: Rng + ?Sized>(
    model: &Model,
    params: &mut ParamVector,
    batches: &[Batch],
    n: usize,
    mask: &Mask,
    config: &DpSgdConfig,
    first_step: u64,
    total_steps: u64,
    state: &mut MomentumState,
    ledger: &mut PrivacyLedger,
    noise_rng: &mut R,
) -> Result<EpochStats> {
    let flags = mask.coordinate_flags();
    let spec = NoiseSpec {
        clip: config.clip,
        noise_multiplier: config.noise_multiplier,
        expected_batch: config.sample_rate * n as f64,
    };
    let mut loss_sum = 0.0;
    let mut seen = 0usize;
    let mut sum = ParamVector::zeros(params.layout().clone());
    for (b, batch) in batches.iter().enumerate() {
        sum.fill(0.0);
        let acc = sum.as_mut_slice();
        model.for_each_sample_grad(params, batch, |_, loss, g| {
            loss_sum += loss;
            let norm = g
                .iter()
                .zip(&flags)
                .filter(|(_, &t)| t)
                .map(|(v, _)| v * v)
                .sum::<f64>()
                .sqrt();
            let inv = 1.0 / clip_factor(norm, config.clip);
            for ((a, v), &t) in acc.iter_mut().zip(g).zip(&flags) {
                if t {
                    *a += v * inv;
                }
            }
        })?;
        seen += batch.len();
        finish_noisy(&mut sum, &spec, noise_rng);
        ledger.record(config.sample_rate, config.noise_multiplier, 1)?;
        let progress = Progress {
            step: first_step + b as u64,
            total_steps,
        };
        step(params, &sum, mask, config, progress, state)?;
        if !params.is_finite() {
            return Err(Error::Numeric("parameters diverged".into()));
        }
    }
    Ok(EpochStats {
        mean_loss: if seen == 0 { 0.0 } else { loss_sum / seen as f64 },
        steps: batches.len() as u64,
    })
}
