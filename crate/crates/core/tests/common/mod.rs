//! Independent reference implementations used as test oracles.
//!
//! Nothing here calls into the library's numerics: the forward pass is
//! rewritten from the documented parameter conventions, and the privacy
//! oracle integrates the Rényi divergence numerically.

#![allow(dead_code)]

use dpsparse::ModelSpec;

/// Straight-line cross-entropy loss of one sample.
///
/// Parameter order: `conv.weight` (filters x channels*k*k, kernel entries in
/// (channel, row, col) order), `conv.bias`, then per hidden layer `weight`
/// (in x out), `bias`, optional layer-norm scale and shift, then the head
/// weight (in x classes) and bias. Conv output is flattened (filter, row, col).
pub fn oracle_loss(spec: &ModelSpec, p: &[f64], x: &[f64], y: usize) -> f64 {
    let mut off = 0usize;
    let mut take = |n: usize| {
        let s = off;
        off += n;
        s
    };
    let mut h: Vec<f64> = x.to_vec();
    if let Some(cv) = &spec.conv {
        let k = cv.kernel;
        let w = take(cv.filters * cv.channels * k * k);
        let b = take(cv.filters);
        let oh = cv.height - k + 1;
        let ow = cv.width - k + 1;
        let mut out = Vec::new();
        for f in 0..cv.filters {
            for i in 0..oh {
                for j in 0..ow {
                    let mut s = p[b + f];
                    for c in 0..cv.channels {
                        for u in 0..k {
                            for v in 0..k {
                                let wi = w + ((f * cv.channels + c) * k + u) * k + v;
                                let xi = (c * cv.height + i + u) * cv.width + j + v;
                                s += p[wi] * x[xi];
                            }
                        }
                    }
                    out.push(relu(s));
                }
            }
        }
        h = out;
    }
    for &width in &spec.hidden {
        let w = take(h.len() * width);
        let b = take(width);
        let mut z: Vec<f64> = (0..width)
            .map(|o| p[b + o] + (0..h.len()).map(|i| h[i] * p[w + i * width + o]).sum::<f64>())
            .collect();
        if spec.layer_norm {
            let sc = take(width);
            let sh = take(width);
            let mean = z.iter().sum::<f64>() / width as f64;
            let var = z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / width as f64;
            let sd = (var + 1e-5).sqrt();
            for o in 0..width {
                z[o] = p[sc + o] * (z[o] - mean) / sd + p[sh + o];
            }
        }
        h = z.into_iter().map(relu).collect();
    }
    let k = spec.classes;
    let w = take(h.len() * k);
    let b = take(k);
    let logits: Vec<f64> = (0..k)
        .map(|c| p[b + c] + (0..h.len()).map(|i| h[i] * p[w + i * k + c]).sum::<f64>())
        .collect();
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
    assert_eq!(off, p.len(), "oracle consumed a different parameter count");
    lse - logits[y]
}

fn relu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

/// Central finite differences of [`oracle_loss`].
pub fn fd_grad(spec: &ModelSpec, p: &[f64], x: &[f64], y: usize, h: f64) -> Vec<f64> {
    let mut q = p.to_vec();
    (0..p.len())
        .map(|i| {
            q[i] = p[i] + h;
            let up = oracle_loss(spec, &q, x, y);
            q[i] = p[i] - h;
            let down = oracle_loss(spec, &q, x, y);
            q[i] = p[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Relative error with a small absolute floor for near-zero coordinates.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// `ln A_alpha` of the subsampled Gaussian mixture, by composite Simpson
/// integration of `mu0(z) * ((1 - q) + q * exp((2z - 1) / (2 s^2)))^alpha`
/// in log space over `[-30 s, alpha + 1 + 30 s]`.
pub fn log_a_quadrature(q: f64, s: f64, alpha: f64, points: usize) -> f64 {
    let lo = -30.0 * s;
    let hi = alpha + 1.0 + 30.0 * s;
    let n = if points.is_multiple_of(2) { points } else { points + 1 };
    let h = (hi - lo) / n as f64;
    let log_f = |z: f64| {
        let log_mu0 = -z * z / (2.0 * s * s) - (s * (2.0 * std::f64::consts::PI).sqrt()).ln();
        let e = (2.0 * z - 1.0) / (2.0 * s * s);
        // ln((1 - q) + q e^e), stable for large e
        let mix = if e > 0.0 {
            e + q.ln() + ((1.0 - q) * (-e).exp() / q).ln_1p()
        } else {
            (1.0 - q + q * e.exp()).ln()
        };
        log_mu0 + alpha * mix
    };
    let logs: Vec<f64> = (0..=n).map(|i| log_f(lo + i as f64 * h)).collect();
    let m = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut acc = 0.0;
    for (i, l) in logs.iter().enumerate() {
        let w = if i == 0 || i == n {
            1.0
        } else if i % 2 == 1 {
            4.0
        } else {
            2.0
        };
        acc += w * (l - m).exp();
    }
    m + (acc * h / 3.0).ln()
}

pub fn rdp_quadrature(q: f64, s: f64, alpha: f64) -> f64 {
    if q == 1.0 {
        return alpha / (2.0 * s * s);
    }
    (log_a_quadrature(q, s, alpha, 20_000) / (alpha - 1.0)).max(0.0)
}

pub fn oracle_alphas() -> Vec<f64> {
    let mut a = vec![1.25, 1.5, 1.75];
    a.extend((2..=256).map(|i| i as f64));
    a
}

/// `eps` of `steps` identical mechanisms with the same conversion formula as
/// the library, using quadrature RDP.
pub fn oracle_epsilon(q: f64, s: f64, steps: u64, delta: f64) -> f64 {
    oracle_alphas()
        .into_iter()
        .map(|a| {
            let r = steps as f64 * rdp_quadrature(q, s, a);
            r + ((a - 1.0) / a).ln() - (delta.ln() + a.ln()) / (a - 1.0)
        })
        .fold(f64::INFINITY, f64::min)
        .max(0.0)
}

/// Reference momentum SGD written out longhand.
pub fn reference_momentum(
    w0: &[f64],
    grads: &[Vec<f64>],
    trainable: &[bool],
    lrs: &[f64],
    factors: &[f64],
    mu: f64,
) -> Vec<f64> {
    let mut w = w0.to_vec();
    let mut v = vec![0.0; w.len()];
    for (g, f) in grads.iter().zip(factors) {
        for i in 0..w.len() {
            if trainable[i] {
                v[i] = mu * v[i] + g[i];
                w[i] -= lrs[i] * f * v[i];
            }
        }
    }
    w
}

/// Top-k by a full descending sort on (score, -index) pairs.
pub fn sort_top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut pairs: Vec<(f64, usize)> = scores.iter().cloned().zip(0..).collect();
    pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let mut out: Vec<usize> = pairs[..k].iter().map(|p| p.1).collect();
    out.sort();
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerFamily {
    Logistic,
    Dense,
    LayerNorm,
    Conv,
}

pub const FAMILIES: [LayerFamily; 4] = [LayerFamily::Logistic, LayerFamily::Dense, LayerFamily::LayerNorm, LayerFamily::Conv];

/// A small random model of the given family with random parameters (biases
/// and norm parameters perturbed away from their initial values) and a batch.
pub fn random_instance(family: LayerFamily, seed: u64, samples: usize) -> (dpsparse::Model, dpsparse::ParamVector, dpsparse::Batch) {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let classes = rng.random_range(2..5);
    let spec = match family {
        LayerFamily::Logistic => ModelSpec::logistic(rng.random_range(2..7), classes),
        LayerFamily::Dense => {
            let depth = rng.random_range(1..4);
            let hidden: Vec<usize> = (0..depth).map(|_| rng.random_range(2..7)).collect();
            ModelSpec::mlp(rng.random_range(2..7), &hidden, classes)
        }
        LayerFamily::LayerNorm => {
            let mut s = ModelSpec::mlp(rng.random_range(2..6), &[rng.random_range(3..7), rng.random_range(3..6)], classes);
            s.layer_norm = true;
            s
        }
        LayerFamily::Conv => {
            let (c, h, w) = (rng.random_range(1..3), rng.random_range(3..6), rng.random_range(3..6));
            let mut s = ModelSpec::mlp(c * h * w, &[rng.random_range(2..5)], classes);
            s.conv = Some(dpsparse::model::ConvSpec {
                channels: c,
                height: h,
                width: w,
                filters: rng.random_range(1..4),
                kernel: rng.random_range(1..3),
            });
            s
        }
    };
    let model = dpsparse::Model::new(spec).unwrap();
    let mut params = model.init_params(&mut rng);
    for v in params.as_mut_slice() {
        *v += 0.3 * (rng.random::<f64>() - 0.5);
    }
    let d = model.spec().input_dim;
    let x: Vec<f64> = (0..samples * d).map(|_| 2.0 * rng.random::<f64>() - 1.0).collect();
    let y: Vec<usize> = (0..samples).map(|_| rng.random_range(0..classes)).collect();
    let batch = dpsparse::Batch::new(x, d, y).unwrap();
    (model, params, batch)
}

/// Largest coordinate-wise relative error between the library's per-sample
/// gradients and finite differences of the oracle loss.
pub fn max_gradient_error(model: &dpsparse::Model, params: &dpsparse::ParamVector, batch: &dpsparse::Batch) -> f64 {
    let grads = model.per_sample_grads(params, batch).unwrap();
    let mut worst: f64 = 0.0;
    for (i, g) in grads.iter().enumerate() {
        let fd = fd_grad(model.spec(), params.as_slice(), batch.row(i), batch.labels[i], 1e-5);
        for (a, b) in g.as_slice().iter().zip(&fd) {
            worst = worst.max(rel_err(*a, *b));
        }
    }
    worst
}
