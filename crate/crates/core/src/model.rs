//! Small classifiers with exact per-sample gradients.
//!
//! Supported architectures: logistic regression (no hidden layers), MLPs with
//! up to three ReLU hidden layers (optionally layer-normalised), and an
//! optional single valid-padding convolution in front of the dense stack.
//! All maths is `f64`; gradients are computed by hand-written backprop.
//!
//! Dense weights are stored `in x out`, so row `i` of a dense weight segment
//! holds every weight leaving input unit `i`.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::params::{Layout, ParamVector, SegmentKind, SegmentSpec};

const NORM_EPS: f64 = 1e-5;
pub const MAX_HIDDEN_LAYERS: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub filters: usize,
    pub kernel: usize,
}

impl ConvSpec {
    fn out_hw(&self) -> (usize, usize) {
        (self.height + 1 - self.kernel, self.width + 1 - self.kernel)
    }

    fn out_len(&self) -> usize {
        let (h, w) = self.out_hw();
        self.filters * h * w
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub classes: usize,
    #[serde(default)]
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub layer_norm: bool,
    #[serde(default)]
    pub conv: Option<ConvSpec>,
}

impl ModelSpec {
    pub fn logistic(input_dim: usize, classes: usize) -> Self {
        ModelSpec {
            input_dim,
            classes,
            hidden: Vec::new(),
            layer_norm: false,
            conv: None,
        }
    }

    pub fn mlp(input_dim: usize, hidden: &[usize], classes: usize) -> Self {
        ModelSpec {
            input_dim,
            classes,
            hidden: hidden.to_vec(),
            layer_norm: false,
            conv: None,
        }
    }
}

/// A minibatch stored row-major. Empty batches are valid.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Vec<f64>,
    pub dim: usize,
    pub labels: Vec<usize>,
    pub sample_ids: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: Vec<f64>, dim: usize, labels: Vec<usize>) -> Result<Self> {
        let ids = (0..labels.len()).collect();
        Self::with_ids(inputs, dim, labels, ids)
    }

    pub fn with_ids(inputs: Vec<f64>, dim: usize, labels: Vec<usize>, sample_ids: Vec<usize>) -> Result<Self> {
        if inputs.len() != dim * labels.len() || sample_ids.len() != labels.len() {
            return Err(Error::Config(format!(
                "batch shape mismatch: {} inputs for {} labels of dim {}",
                inputs.len(),
                labels.len(),
                dim
            )));
        }
        Ok(Batch {
            inputs,
            dim,
            labels,
            sample_ids,
        })
    }

    pub fn empty(dim: usize) -> Self {
        Batch {
            inputs: Vec::new(),
            dim,
            labels: Vec::new(),
            sample_ids: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.dim..(i + 1) * self.dim]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    pub per_sample: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
struct DenseIdx {
    weight: usize,
    bias: usize,
    norm: Option<(usize, usize)>,
    fan_in: usize,
    fan_out: usize,
}

#[derive(Debug, Clone, Copy)]
struct ConvIdx {
    weight: usize,
    bias: usize,
}

#[derive(Debug, Clone)]
pub struct Model {
    spec: ModelSpec,
    layout: Arc<Layout>,
    conv: Option<ConvIdx>,
    hidden: Vec<DenseIdx>,
    head: DenseIdx,
}

/// Per-sample activations kept for the backward pass.
#[derive(Debug, Default, Clone)]
struct Trace {
    conv_out: Vec<f64>,
    /// Input to dense layer l (index 0 is the flattened input / conv output).
    inputs: Vec<Vec<f64>>,
    /// Pre-activation after optional normalisation.
    pre_relu: Vec<Vec<f64>>,
    zhat: Vec<Vec<f64>>,
    inv_std: Vec<f64>,
    logits: Vec<f64>,
    probs: Vec<f64>,
}

impl Model {
    pub fn new(spec: ModelSpec) -> Result<Self> {
        if spec.input_dim == 0 || spec.classes < 2 {
            return Err(Error::Config("model needs input_dim > 0 and at least 2 classes".into()));
        }
        if spec.hidden.len() > MAX_HIDDEN_LAYERS {
            return Err(Error::Config(format!(
                "at most {MAX_HIDDEN_LAYERS} hidden layers are supported"
            )));
        }
        if spec.hidden.contains(&0) {
            return Err(Error::Config("hidden layer width must be positive".into()));
        }
        let mut specs = Vec::new();
        let mut feat = spec.input_dim;
        if let Some(conv) = &spec.conv {
            if conv.kernel == 0 || conv.kernel > conv.height || conv.kernel > conv.width || conv.filters == 0 {
                return Err(Error::Config("invalid convolution geometry".into()));
            }
            if conv.channels * conv.height * conv.width != spec.input_dim {
                return Err(Error::Config(format!(
                    "conv input {}x{}x{} does not match input_dim {}",
                    conv.channels, conv.height, conv.width, spec.input_dim
                )));
            }
            specs.push(SegmentSpec {
                name: "conv.weight".into(),
                kind: SegmentKind::Weight {
                    rows: conv.filters,
                    cols: conv.channels * conv.kernel * conv.kernel,
                },
                head: false,
            });
            specs.push(SegmentSpec {
                name: "conv.bias".into(),
                kind: SegmentKind::Bias { len: conv.filters },
                head: false,
            });
            feat = conv.out_len();
        }
        for (l, &width) in spec.hidden.iter().enumerate() {
            specs.push(SegmentSpec {
                name: format!("fc{l}.weight"),
                kind: SegmentKind::Weight { rows: feat, cols: width },
                head: false,
            });
            specs.push(SegmentSpec {
                name: format!("fc{l}.bias"),
                kind: SegmentKind::Bias { len: width },
                head: false,
            });
            if spec.layer_norm {
                specs.push(SegmentSpec {
                    name: format!("fc{l}.norm.scale"),
                    kind: SegmentKind::NormScale { len: width },
                    head: false,
                });
                specs.push(SegmentSpec {
                    name: format!("fc{l}.norm.bias"),
                    kind: SegmentKind::Bias { len: width },
                    head: false,
                });
            }
            feat = width;
        }
        specs.push(SegmentSpec {
            name: "head.weight".into(),
            kind: SegmentKind::Weight {
                rows: feat,
                cols: spec.classes,
            },
            head: true,
        });
        specs.push(SegmentSpec {
            name: "head.bias".into(),
            kind: SegmentKind::Bias { len: spec.classes },
            head: true,
        });
        let layout = Arc::new(Layout::new(specs)?);

        let off = |name: &str| layout.segment(name).expect("segment exists").offset;
        let conv = spec.conv.as_ref().map(|_| ConvIdx {
            weight: off("conv.weight"),
            bias: off("conv.bias"),
        });
        let mut fan_in = spec.conv.as_ref().map_or(spec.input_dim, ConvSpec::out_len);
        let mut hidden = Vec::new();
        for (l, &width) in spec.hidden.iter().enumerate() {
            hidden.push(DenseIdx {
                weight: off(&format!("fc{l}.weight")),
                bias: off(&format!("fc{l}.bias")),
                norm: spec
                    .layer_norm
                    .then(|| (off(&format!("fc{l}.norm.scale")), off(&format!("fc{l}.norm.bias")))),
                fan_in,
                fan_out: width,
            });
            fan_in = width;
        }
        let head = DenseIdx {
            weight: off("head.weight"),
            bias: off("head.bias"),
            norm: None,
            fan_in,
            fan_out: spec.classes,
        };
        Ok(Model {
            spec,
            layout,
            conv,
            hidden,
            head,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn dim(&self) -> usize {
        self.layout.dim()
    }

    pub fn classes(&self) -> usize {
        self.spec.classes
    }

    /// He-normal weights, zero biases, unit norm scales.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamVector {
        let mut params = ParamVector::zeros(self.layout.clone());
        for seg in self.layout.segments() {
            let values = &mut params.as_mut_slice()[seg.range()];
            match seg.spec.kind {
                SegmentKind::Weight { rows, cols } => {
                    let fan_in = if seg.spec.name == "conv.weight" { cols } else { rows };
                    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
                    values.iter_mut().for_each(|v| *v = normal.sample(rng));
                }
                SegmentKind::NormScale { .. } => values.iter_mut().for_each(|v| *v = 1.0),
                SegmentKind::Bias { .. } => {}
            }
        }
        params
    }

    /// Re-draw the classifier head, as done when the label space changes.
    pub fn reinit_head<R: Rng + ?Sized>(&self, params: &mut ParamVector, rng: &mut R) {
        let std = (1.0 / self.head.fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        for seg in self.layout.segments().iter().filter(|s| s.spec.head) {
            let values = &mut params.as_mut_slice()[seg.range()];
            if seg.spec.kind.is_weight() {
                values.iter_mut().for_each(|v| *v = normal.sample(rng));
            } else {
                values.iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    fn check(&self, params: &ParamVector, batch: &Batch) -> Result<()> {
        if params.layout().as_ref() != self.layout.as_ref() {
            return Err(Error::Config("parameter layout does not match model".into()));
        }
        if batch.dim != self.spec.input_dim {
            return Err(Error::Config(format!(
                "batch feature dim {} does not match model input dim {}",
                batch.dim, self.spec.input_dim
            )));
        }
        if let Some(&bad) = batch.labels.iter().find(|&&y| y >= self.spec.classes) {
            return Err(Error::Config(format!("label {bad} outside {} classes", self.spec.classes)));
        }
        if !params.is_finite() {
            return Err(Error::Numeric("non-finite parameters".into()));
        }
        Ok(())
    }

    fn forward_one(&self, p: &[f64], x: &[f64], tr: &mut Trace) {
        let depth = self.hidden.len();
        tr.inputs.resize(depth + 1, Vec::new());
        tr.pre_relu.resize(depth, Vec::new());
        tr.zhat.resize(depth, Vec::new());
        tr.inv_std.resize(depth, 0.0);

        let first = &mut tr.inputs[0];
        first.clear();
        if let (Some(cv), Some(ci)) = (&self.spec.conv, self.conv) {
            conv_forward(cv, &p[ci.weight..], &p[ci.bias..ci.bias + cv.filters], x, &mut tr.conv_out);
            first.extend(tr.conv_out.iter().map(|&v| v.max(0.0)));
        } else {
            first.extend_from_slice(x);
        }

        for (l, layer) in self.hidden.iter().enumerate() {
            let (before, after) = tr.inputs.split_at_mut(l + 1);
            let input = &before[l];
            let pre = &mut tr.pre_relu[l];
            dense_forward(layer, p, input, pre);
            if let Some((scale, shift)) = layer.norm {
                let n = pre.len() as f64;
                let mean = pre.iter().sum::<f64>() / n;
                let var = pre.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                let inv_std = 1.0 / (var + NORM_EPS).sqrt();
                tr.inv_std[l] = inv_std;
                let zhat = &mut tr.zhat[l];
                zhat.clear();
                zhat.extend(pre.iter().map(|v| (v - mean) * inv_std));
                for (j, v) in pre.iter_mut().enumerate() {
                    *v = p[scale + j] * zhat[j] + p[shift + j];
                }
            }
            let out = &mut after[0];
            out.clear();
            out.extend(pre.iter().map(|&v| v.max(0.0)));
        }

        dense_forward(&self.head, p, &tr.inputs[depth], &mut tr.logits);
        let max = tr.logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        tr.probs.clear();
        tr.probs.extend(tr.logits.iter().map(|&z| (z - max).exp()));
        let total: f64 = tr.probs.iter().sum();
        tr.probs.iter_mut().for_each(|v| *v /= total);
    }

    fn sample_loss(tr: &Trace, y: usize) -> f64 {
        let max = tr.logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + tr.logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
        lse - tr.logits[y]
    }

    /// Backward pass for one sample; overwrites `grad` (length `dim`).
    fn backward_one(&self, p: &[f64], x: &[f64], y: usize, tr: &Trace, grad: &mut [f64]) {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let depth = self.hidden.len();
        let mut delta: Vec<f64> = tr.probs.clone();
        delta[y] -= 1.0;

        let mut upstream = dense_backward(&self.head, p, &tr.inputs[depth], &delta, grad, true);
        for l in (0..depth).rev() {
            let layer = &self.hidden[l];
            // through ReLU
            let mut d: Vec<f64> = upstream
                .iter()
                .zip(&tr.pre_relu[l])
                .map(|(&g, &z)| if z > 0.0 { g } else { 0.0 })
                .collect();
            if let Some((scale, shift)) = layer.norm {
                let zhat = &tr.zhat[l];
                let n = d.len() as f64;
                let mut dzhat = vec![0.0; d.len()];
                for j in 0..d.len() {
                    grad[scale + j] = d[j] * zhat[j];
                    grad[shift + j] = d[j];
                    dzhat[j] = d[j] * p[scale + j];
                }
                let mean_d = dzhat.iter().sum::<f64>() / n;
                let mean_dz = dzhat.iter().zip(zhat).map(|(a, b)| a * b).sum::<f64>() / n;
                for j in 0..d.len() {
                    d[j] = tr.inv_std[l] * (dzhat[j] - mean_d - zhat[j] * mean_dz);
                }
            }
            let need_input_grad = l > 0 || self.conv.is_some();
            upstream = dense_backward(layer, p, &tr.inputs[l], &d, grad, need_input_grad);
        }

        if let (Some(cv), Some(ci)) = (&self.spec.conv, self.conv) {
            let dout: Vec<f64> = upstream
                .iter()
                .zip(&tr.conv_out)
                .map(|(&g, &z)| if z > 0.0 { g } else { 0.0 })
                .collect();
            conv_backward(cv, x, &dout, ci, grad);
        }
    }

    pub fn forward_loss(&self, params: &ParamVector, batch: &Batch) -> Result<LossOutput> {
        self.check(params, batch)?;
        let p = params.as_slice();
        let mut tr = Trace::default();
        let per_sample: Vec<f64> = (0..batch.len())
            .map(|i| {
                self.forward_one(p, batch.row(i), &mut tr);
                Self::sample_loss(&tr, batch.labels[i])
            })
            .collect();
        if per_sample.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite loss".into()));
        }
        let loss = if per_sample.is_empty() {
            0.0
        } else {
            per_sample.iter().sum::<f64>() / per_sample.len() as f64
        };
        Ok(LossOutput { loss, per_sample })
    }

    /// Streams each per-sample gradient into `f(sample_index, loss, grad)`.
    /// The gradient buffer is reused between calls.
    pub fn for_each_sample_grad<F>(&self, params: &ParamVector, batch: &Batch, mut f: F) -> Result<()>
    where
        F: FnMut(usize, f64, &[f64]),
    {
        self.check(params, batch)?;
        let p = params.as_slice();
        let mut tr = Trace::default();
        let mut grad = vec![0.0; self.dim()];
        for i in 0..batch.len() {
            let x = batch.row(i);
            let y = batch.labels[i];
            self.forward_one(p, x, &mut tr);
            let loss = Self::sample_loss(&tr, y);
            self.backward_one(p, x, y, &tr, &mut grad);
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Numeric(format!("non-finite gradient for sample {i}")));
            }
            f(i, loss, &grad);
        }
        Ok(())
    }

    pub fn per_sample_grads(&self, params: &ParamVector, batch: &Batch) -> Result<Vec<ParamVector>> {
        let mut out = Vec::with_capacity(batch.len());
        self.for_each_sample_grad(params, batch, |_, _, g| {
            out.push(ParamVector::from_values(self.layout.clone(), g.to_vec()).expect("layout length"));
        })?;
        Ok(out)
    }

    /// Gradient of the mean loss over the batch.
    pub fn batch_grad(&self, params: &ParamVector, batch: &Batch) -> Result<ParamVector> {
        let mut sum = ParamVector::zeros(self.layout.clone());
        self.for_each_sample_grad(params, batch, |_, _, g| {
            for (s, v) in sum.as_mut_slice().iter_mut().zip(g) {
                *s += v;
            }
        })?;
        if !batch.is_empty() {
            sum.scale(1.0 / batch.len() as f64);
        }
        Ok(sum)
    }

    pub fn logits(&self, params: &ParamVector, batch: &Batch) -> Result<Vec<Vec<f64>>> {
        self.check(params, batch)?;
        let mut tr = Trace::default();
        Ok((0..batch.len())
            .map(|i| {
                self.forward_one(params.as_slice(), batch.row(i), &mut tr);
                tr.logits.clone()
            })
            .collect())
    }

    /// Argmax prediction, ties to the lowest class index.
    pub fn predict(&self, params: &ParamVector, batch: &Batch) -> Result<Vec<usize>> {
        Ok(self.logits(params, batch)?.iter().map(|z| argmax(z)).collect())
    }

    pub fn evaluate(&self, params: &ParamVector, data: &Dataset) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::Usage("cannot evaluate on an empty dataset".into()));
        }
        let batch = data.as_batch();
        let preds = self.predict(params, &batch)?;
        let correct = preds.iter().zip(&batch.labels).filter(|(p, y)| p == y).count();
        Ok(correct as f64 / batch.len() as f64)
    }
}

pub(crate) fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in z.iter().enumerate() {
        if v > z[best] {
            best = i;
        }
    }
    best
}

fn dense_forward(layer: &DenseIdx, p: &[f64], input: &[f64], out: &mut Vec<f64>) {
    let n = layer.fan_out;
    out.clear();
    out.extend_from_slice(&p[layer.bias..layer.bias + n]);
    for (i, &xi) in input.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        let row = &p[layer.weight + i * n..layer.weight + (i + 1) * n];
        for (o, w) in out.iter_mut().zip(row) {
            *o += xi * w;
        }
    }
}

/// Accumulates weight/bias gradients for `delta` and optionally returns the
/// gradient with respect to the layer input.
fn dense_backward(
    layer: &DenseIdx,
    p: &[f64],
    input: &[f64],
    delta: &[f64],
    grad: &mut [f64],
    input_grad: bool,
) -> Vec<f64> {
    let n = layer.fan_out;
    grad[layer.bias..layer.bias + n].copy_from_slice(delta);
    for (i, &xi) in input.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        let row = &mut grad[layer.weight + i * n..layer.weight + (i + 1) * n];
        for (g, d) in row.iter_mut().zip(delta) {
            *g = xi * d;
        }
    }
    if !input_grad {
        return Vec::new();
    }
    (0..layer.fan_in)
        .map(|i| {
            let row = &p[layer.weight + i * n..layer.weight + (i + 1) * n];
            row.iter().zip(delta).map(|(w, d)| w * d).sum()
        })
        .collect()
}

fn conv_forward(cv: &ConvSpec, kernel: &[f64], bias: &[f64], x: &[f64], out: &mut Vec<f64>) {
    let (oh, ow) = cv.out_hw();
    let k = cv.kernel;
    let row_len = cv.channels * k * k;
    out.clear();
    out.resize(cv.filters * oh * ow, 0.0);
    for f in 0..cv.filters {
        let kf = &kernel[f * row_len..(f + 1) * row_len];
        for i in 0..oh {
            for j in 0..ow {
                let mut acc = bias[f];
                for c in 0..cv.channels {
                    for u in 0..k {
                        let xrow = c * cv.height * cv.width + (i + u) * cv.width + j;
                        let krow = c * k * k + u * k;
                        for v in 0..k {
                            acc += kf[krow + v] * x[xrow + v];
                        }
                    }
                }
                out[f * oh * ow + i * ow + j] = acc;
            }
        }
    }
}

fn conv_backward(cv: &ConvSpec, x: &[f64], dout: &[f64], idx: ConvIdx, grad: &mut [f64]) {
    let (oh, ow) = cv.out_hw();
    let k = cv.kernel;
    let row_len = cv.channels * k * k;
    for f in 0..cv.filters {
        let d = &dout[f * oh * ow..(f + 1) * oh * ow];
        grad[idx.bias + f] = d.iter().sum();
        let gk = &mut grad[idx.weight + f * row_len..idx.weight + (f + 1) * row_len];
        for c in 0..cv.channels {
            for u in 0..k {
                for v in 0..k {
                    let mut acc = 0.0;
                    for i in 0..oh {
                        let xrow = c * cv.height * cv.width + (i + u) * cv.width + v;
                        for j in 0..ow {
                            acc += d[i * ow + j] * x[xrow + j];
                        }
                    }
                    gk[c * k * k + u * k + v] = acc;
                }
            }
        }
    }
}
