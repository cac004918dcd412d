//! Rényi-DP accounting for compositions of subsampled Gaussian mechanisms.
//!
//! Every private data access in this crate (a DP-SGD step or a mask-scoring
//! step) is a Poisson-subsampled Gaussian mechanism with sensitivity equal to
//! the clipping constant. The ledger only stores the noise multiplier
//! `sigma = noise_std / C`, the sampling rate and a repetition count.
//!
//! Per order `alpha`, the RDP of one event is `ln(A_alpha) / (alpha - 1)` with
//! `A_alpha = E_{z ~ N(0, s^2)} [((1 - q) + q * exp((2z - 1) / (2 s^2)))^alpha]`
//! (add/remove-one neighbours). Integer orders use the exact binomial
//! expansion; fractional orders use the two-sided erfc series.
//!
//! Conversion to `(eps, delta)` uses
//! `eps = rdp + ln((alpha - 1) / alpha) - (ln(delta) + ln(alpha)) / (alpha - 1)`
//! minimised over the order grid. RDP accounting is somewhat conservative
//! compared to numerical PRV/FFT accountants.

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

pub const SIGMA_SEARCH_MIN: f64 = 0.1;
pub const SIGMA_SEARCH_MAX: f64 = 1000.0;
pub const CALIBRATION_TOL: f64 = 1e-3;

/// RDP orders used when minimising the `(eps, delta)` conversion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaGrid(Vec<f64>);

impl Default for AlphaGrid {
    /// `{1.25, 1.5, 1.75}` followed by every integer in `2..=256`.
    fn default() -> Self {
        let mut orders = vec![1.25, 1.5, 1.75];
        orders.extend((2..=256).map(f64::from));
        AlphaGrid(orders)
    }
}

impl AlphaGrid {
    pub fn new(mut orders: Vec<f64>) -> Result<Self> {
        if orders.is_empty() || orders.iter().any(|&a| !(a > 1.0) || !a.is_finite()) {
            return Err(Error::Usage("RDP orders must be finite and > 1".into()));
        }
        orders.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
        orders.dedup();
        Ok(AlphaGrid(orders))
    }

    pub fn orders(&self) -> &[f64] {
        &self.0
    }
}

fn log_add(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    if lo == f64::NEG_INFINITY {
        return hi;
    }
    hi + (lo - hi).exp().ln_1p()
}

/// `ln(exp(a) - exp(b))`, clamped at `-inf` when `b >= a`.
fn log_sub(a: f64, b: f64) -> f64 {
    if b == f64::NEG_INFINITY {
        return a;
    }
    if b >= a {
        return f64::NEG_INFINITY;
    }
    a + (-(b - a).exp()).ln_1p()
}

fn log_erfc(x: f64) -> f64 {
    if x < 20.0 {
        erfc(x).ln()
    } else {
        let x2 = x * x;
        let series = 1.0 - 1.0 / (2.0 * x2) + 3.0 / (4.0 * x2 * x2) - 15.0 / (8.0 * x2 * x2 * x2);
        -x2 - x.ln() - 0.5 * std::f64::consts::PI.ln() + series.ln()
    }
}

fn log_a_int(q: f64, sigma: f64, alpha: u32) -> f64 {
    let a = alpha as f64;
    let (lq, l1q) = (q.ln(), (-q).ln_1p());
    let mut acc = f64::NEG_INFINITY;
    for k in 0..=alpha {
        let k = k as f64;
        let log_binom = ln_gamma(a + 1.0) - ln_gamma(k + 1.0) - ln_gamma(a - k + 1.0);
        let term = log_binom + k * lq + (a - k) * l1q + (k * k - k) / (2.0 * sigma * sigma);
        acc = log_add(acc, term);
    }
    acc
}

fn log_a_frac(q: f64, sigma: f64, alpha: f64) -> f64 {
    let (mut log_a0, mut log_a1) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    let s2 = sigma * sigma;
    let z0 = s2 * (1.0 / q - 1.0).ln() + 0.5;
    let (lq, l1q) = (q.ln(), (-q).ln_1p());
    let mut log_coef = 0.0;
    let mut positive = true;
    let mut i = 0u32;
    loop {
        let fi = i as f64;
        let j = alpha - fi;
        let log_t0 = log_coef + fi * lq + j * l1q;
        let log_t1 = log_coef + j * lq + fi * l1q;
        let log_e0 = 0.5f64.ln() + log_erfc((fi - z0) / (std::f64::consts::SQRT_2 * sigma));
        let log_e1 = 0.5f64.ln() + log_erfc((z0 - j) / (std::f64::consts::SQRT_2 * sigma));
        let log_s0 = log_t0 + (fi * fi - fi) / (2.0 * s2) + log_e0;
        let log_s1 = log_t1 + (j * j - j) / (2.0 * s2) + log_e1;
        if positive {
            log_a0 = log_add(log_a0, log_s0);
            log_a1 = log_add(log_a1, log_s1);
        } else {
            log_a0 = log_sub(log_a0, log_s0);
            log_a1 = log_sub(log_a1, log_s1);
        }
        i += 1;
        if (log_s0.max(log_s1) < -30.0 && fi > alpha) || i > 100_000 {
            break;
        }
        // binom(alpha, i) from binom(alpha, i - 1)
        let ratio = (alpha - fi) / (fi + 1.0);
        if ratio == 0.0 {
            break;
        }
        log_coef += ratio.abs().ln();
        if ratio < 0.0 {
            positive = !positive;
        }
    }
    log_add(log_a0, log_a1)
}

/// RDP at order `alpha` of one Poisson-subsampled Gaussian mechanism with
/// sampling rate `q` and noise multiplier `sigma`. `sigma == 0` is
/// non-private and yields `+inf`.
pub fn rdp_of_sgm(q: f64, sigma: f64, alpha: f64) -> Result<f64> {
    if !(alpha > 1.0) || !alpha.is_finite() {
        return Err(Error::Usage(format!("RDP order must be > 1, got {alpha}")));
    }
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::Usage(format!("sampling rate must lie in (0, 1], got {q}")));
    }
    if !(sigma >= 0.0) {
        return Err(Error::Usage(format!("noise multiplier must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(f64::INFINITY);
    }
    if q == 1.0 {
        return Ok(alpha / (2.0 * sigma * sigma));
    }
    let log_a = if alpha.fract() == 0.0 && alpha <= u32::MAX as f64 {
        log_a_int(q, sigma, alpha as u32)
    } else {
        log_a_frac(q, sigma, alpha)
    };
    Ok((log_a / (alpha - 1.0)).max(0.0))
}

/// `(eps, delta)` conversion of a single RDP value at order `alpha`.
pub fn rdp_to_epsilon(rdp: f64, alpha: f64, delta: f64) -> f64 {
    rdp + ((alpha - 1.0) / alpha).ln() - (delta.ln() + alpha.ln()) / (alpha - 1.0)
}

/// A run of identical subsampled Gaussian mechanisms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgmEvent {
    pub sample_rate: f64,
    pub noise_multiplier: f64,
    pub count: u64,
}

impl SgmEvent {
    pub fn new(sample_rate: f64, noise_multiplier: f64, count: u64) -> Result<Self> {
        if !(sample_rate > 0.0 && sample_rate <= 1.0) {
            return Err(Error::Usage(format!("sampling rate must lie in (0, 1], got {sample_rate}")));
        }
        if !(noise_multiplier >= 0.0) || !noise_multiplier.is_finite() {
            return Err(Error::Usage(format!("invalid noise multiplier {noise_multiplier}")));
        }
        if count == 0 {
            return Err(Error::Usage("event count must be positive".into()));
        }
        Ok(SgmEvent {
            sample_rate,
            noise_multiplier,
            count,
        })
    }

    fn same_mechanism(&self, other: &SgmEvent) -> bool {
        self.sample_rate == other.sample_rate && self.noise_multiplier == other.noise_multiplier
    }
}

/// Append-only record of private data accesses.
///
/// Consecutive events with the same `(q, sigma)` are merged, so two ledgers
/// that performed the same sequence of accesses compare equal regardless of
/// how the accesses were grouped into calls.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacyLedger {
    events: Vec<SgmEvent>,
    delta: f64,
}

impl PrivacyLedger {
    pub fn new(delta: f64) -> Result<Self> {
        check_delta(delta)?;
        Ok(PrivacyLedger {
            events: Vec::new(),
            delta,
        })
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn events(&self) -> &[SgmEvent] {
        &self.events
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Total number of mechanism invocations.
    pub fn steps(&self) -> u64 {
        self.events.iter().map(|e| e.count).sum()
    }

    pub fn push(&mut self, event: SgmEvent) {
        match self.events.last_mut() {
            Some(last) if last.same_mechanism(&event) => last.count += event.count,
            _ => self.events.push(event),
        }
    }

    pub fn record(&mut self, sample_rate: f64, noise_multiplier: f64, count: u64) -> Result<()> {
        self.push(SgmEvent::new(sample_rate, noise_multiplier, count)?);
        Ok(())
    }

    pub fn extend(&mut self, other: &PrivacyLedger) {
        other.events.iter().for_each(|e| self.push(*e));
    }

    pub fn epsilon(&self) -> Result<f64> {
        epsilon(&self.events, self.delta, &AlphaGrid::default())
    }

    pub fn epsilon_at(&self, delta: f64) -> Result<f64> {
        epsilon(&self.events, delta, &AlphaGrid::default())
    }

    pub fn report(&self) -> Result<LedgerReport> {
        Ok(LedgerReport {
            events: self.events.clone(),
            delta: self.delta,
            epsilon: self.epsilon()?,
        })
    }
}

/// JSON form emitted in run reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerReport {
    pub events: Vec<SgmEvent>,
    pub delta: f64,
    pub epsilon: f64,
}

fn check_delta(delta: f64) -> Result<()> {
    if delta > 0.0 && delta < 1.0 {
        Ok(())
    } else {
        Err(Error::Usage(format!("delta must lie in (0, 1), got {delta}")))
    }
}

/// Total RDP of `events` at every order of `grid`.
pub fn composed_rdp(events: &[SgmEvent], grid: &AlphaGrid) -> Result<Vec<f64>> {
    let mut total = vec![0.0; grid.orders().len()];
    let mut cache: Vec<(f64, f64, Vec<f64>)> = Vec::new();
    for e in events {
        let idx = match cache
            .iter()
            .position(|(q, s, _)| *q == e.sample_rate && *s == e.noise_multiplier)
        {
            Some(i) => i,
            None => {
                let curve = grid
                    .orders()
                    .iter()
                    .map(|&a| rdp_of_sgm(e.sample_rate, e.noise_multiplier, a))
                    .collect::<Result<Vec<_>>>()?;
                cache.push((e.sample_rate, e.noise_multiplier, curve));
                cache.len() - 1
            }
        };
        for (t, r) in total.iter_mut().zip(&cache[idx].2) {
            *t += e.count as f64 * r;
        }
    }
    Ok(total)
}

/// Smallest `eps` such that the composition is `(eps, delta)`-DP according to
/// the RDP conversion, minimised over `grid`. An empty composition costs 0.
pub fn epsilon(events: &[SgmEvent], delta: f64, grid: &AlphaGrid) -> Result<f64> {
    check_delta(delta)?;
    if events.is_empty() {
        return Ok(0.0);
    }
    let rdp = composed_rdp(events, grid)?;
    let best = grid
        .orders()
        .iter()
        .zip(&rdp)
        .map(|(&a, &r)| rdp_to_epsilon(r, a, delta))
        .fold(f64::INFINITY, f64::min);
    Ok(best.max(0.0))
}

/// Finds the smallest noise multiplier (within relative tolerance
/// [`CALIBRATION_TOL`]) such that `prefix` followed by `steps` mechanisms at
/// sampling rate `q` stays within `target_epsilon`.
///
/// Returns [`SIGMA_SEARCH_MIN`] when even that is within budget, and a
/// calibration error when [`SIGMA_SEARCH_MAX`] is not.
pub fn calibrate_sigma_with_prefix(
    prefix: &[SgmEvent],
    q: f64,
    steps: u64,
    target_epsilon: f64,
    delta: f64,
) -> Result<f64> {
    if !(target_epsilon > 0.0) {
        return Err(Error::Usage(format!("target epsilon must be positive, got {target_epsilon}")));
    }
    check_delta(delta)?;
    if steps == 0 {
        return Err(Error::Usage("calibration needs at least one step".into()));
    }
    let grid = AlphaGrid::default();
    let eps_at = |sigma: f64| -> Result<f64> {
        let mut events = prefix.to_vec();
        events.push(SgmEvent::new(q, sigma, steps)?);
        epsilon(&events, delta, &grid)
    };
    let (mut lo, mut hi) = (SIGMA_SEARCH_MIN, SIGMA_SEARCH_MAX);
    if eps_at(lo)? <= target_epsilon {
        return Ok(lo);
    }
    if eps_at(hi)? > target_epsilon {
        return Err(Error::Calibration(format!(
            "epsilon {target_epsilon} at delta {delta} is unattainable with sigma <= {SIGMA_SEARCH_MAX}"
        )));
    }
    // invariant: eps(lo) > target >= eps(hi)
    while lo < hi * (1.0 - CALIBRATION_TOL) {
        let mid = (lo * hi).sqrt();
        if eps_at(mid)? <= target_epsilon {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

pub fn calibrate_sigma(q: f64, total_steps: u64, target_epsilon: f64, delta: f64) -> Result<f64> {
    calibrate_sigma_with_prefix(&[], q, total_steps, target_epsilon, delta)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_batch_is_gaussian_closed_form() {
        assert_eq!(rdp_of_sgm(1.0, 2.0, 8.0).unwrap(), 1.0);
        assert_eq!(rdp_of_sgm(1.0, 0.5, 3.0).unwrap(), 6.0);
    }

    #[test]
    fn vanishing_rate_has_vanishing_cost() {
        assert!(rdp_of_sgm(1e-12, 1.0, 2.0).unwrap() < 1e-12);
        assert!(rdp_of_sgm(1e-6, 1.0, 2.0).unwrap() < rdp_of_sgm(1e-3, 1.0, 2.0).unwrap());
    }

    #[test]
    fn fractional_orders_bracket_integers() {
        // RDP is nondecreasing in alpha
        let (q, s) = (0.05, 1.1);
        let r = |a| rdp_of_sgm(q, s, a).unwrap();
        assert!(r(1.25) <= r(1.5) + 1e-15);
        assert!(r(1.5) <= r(1.75) + 1e-15);
        assert!(r(1.75) <= r(2.0) + 1e-15);
        assert!(r(2.0) <= r(2.5) + 1e-15);
        assert!(r(2.5) <= r(3.0) + 1e-15);
        // the erfc series reproduces the binomial sum at an integer order
        let series = log_a_frac(q, s, 4.0) / 3.0;
        assert!((series - r(4.0)).abs() / r(4.0) < 1e-9);
    }

    #[test]
    fn bad_arguments() {
        assert!(matches!(rdp_of_sgm(0.1, 1.0, 1.0), Err(Error::Usage(_))));
        assert!(rdp_of_sgm(0.0, 1.0, 2.0).is_err());
        assert!(rdp_of_sgm(1.5, 1.0, 2.0).is_err());
        assert_eq!(rdp_of_sgm(0.1, 0.0, 2.0).unwrap(), f64::INFINITY);
        assert!(SgmEvent::new(0.1, 1.0, 0).is_err());
        assert!(PrivacyLedger::new(1.0).is_err());
        assert!(epsilon(&[], 0.0, &AlphaGrid::default()).is_err());
    }

    #[test]
    fn empty_ledger_costs_nothing() {
        let ledger = PrivacyLedger::new(1e-5).unwrap();
        assert_eq!(ledger.epsilon().unwrap(), 0.0);
    }

    #[test]
    fn merging_preserves_steps() {
        let mut a = PrivacyLedger::new(1e-5).unwrap();
        a.record(0.1, 1.0, 3).unwrap();
        a.record(0.1, 1.0, 2).unwrap();
        a.record(0.1, 2.0, 1).unwrap();
        assert_eq!(a.events().len(), 2);
        assert_eq!(a.steps(), 6);
        let mut b = PrivacyLedger::new(1e-5).unwrap();
        for _ in 0..5 {
            b.record(0.1, 1.0, 1).unwrap();
        }
        b.record(0.1, 2.0, 1).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn calibration_is_tight() {
        let (q, steps, target, delta) = (0.05, 1000, 1.0, 1e-5);
        let sigma = calibrate_sigma(q, steps, target, delta).unwrap();
        let eps = |s| epsilon(&[SgmEvent::new(q, s, steps).unwrap()], delta, &AlphaGrid::default()).unwrap();
        assert!(eps(sigma) <= target);
        assert!(eps(sigma * (1.0 - CALIBRATION_TOL)) > target);
    }

    #[test]
    fn huge_budget_hits_lower_bound() {
        assert_eq!(calibrate_sigma(0.05, 1000, 1e6, 1e-5).unwrap(), SIGMA_SEARCH_MIN);
    }

    #[test]
    fn tiny_budget_is_unattainable() {
        assert!(matches!(calibrate_sigma(0.5, 10_000, 1e-3, 1e-5), Err(Error::Calibration(_))));
    }
}
