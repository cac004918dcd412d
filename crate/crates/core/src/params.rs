//! Flat parameter storage partitioned into named layer segments.
//!
//! Every tensor the optimizer touches (weights, gradients, scores, momentum)
//! is a [`ParamVector`] sharing one [`Layout`]. Weight matrices are stored
//! row-major as `rows x cols`; convolution kernels are reshaped to
//! `out_channels x (in_channels * kh * kw)` before they get here.

use std::fmt;
use std::ops::Range;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum SegmentKind {
    Weight { rows: usize, cols: usize },
    Bias { len: usize },
    NormScale { len: usize },
}

impl SegmentKind {
    pub fn len(&self) -> usize {
        match *self {
            SegmentKind::Weight { rows, cols } => rows * cols,
            SegmentKind::Bias { len } | SegmentKind::NormScale { len } => len,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_weight(&self) -> bool {
        matches!(self, SegmentKind::Weight { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SegmentSpec {
    pub name: String,
    pub kind: SegmentKind,
    /// Part of the classifier head (randomly re-initialised on transfer).
    #[serde(default)]
    pub head: bool,
}

impl SegmentSpec {
    /// Weight matrices outside the classifier head are the only mask candidates.
    pub fn is_maskable(&self) -> bool {
        self.kind.is_weight() && !self.head
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Segment {
    pub spec: SegmentSpec,
    pub offset: usize,
}

impl Segment {
    pub fn name(&self) -> &str {
        &self.spec.name
    }

    pub fn len(&self) -> usize {
        self.spec.kind.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Ordered segment table with the total dimension.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Layout {
    segments: Vec<Segment>,
    dim: usize,
}

impl Layout {
    pub fn new(specs: Vec<SegmentSpec>) -> Result<Self> {
        let mut segments = Vec::with_capacity(specs.len());
        let mut offset = 0;
        for spec in specs {
            if segments.iter().any(|s: &Segment| s.spec.name == spec.name) {
                return Err(Error::Config(format!("duplicate segment name {:?}", spec.name)));
            }
            let len = spec.kind.len();
            segments.push(Segment { spec, offset });
            offset += len;
        }
        Ok(Layout { segments, dim: offset })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn segment(&self, name: &str) -> Option<&Segment> {
        self.segments.iter().find(|s| s.spec.name == name)
    }

    pub fn maskable(&self) -> impl Iterator<Item = (usize, &Segment)> {
        self.segments.iter().enumerate().filter(|(_, s)| s.spec.is_maskable())
    }

    /// Number of maskable coordinates.
    pub fn maskable_dim(&self) -> usize {
        self.maskable().map(|(_, s)| s.len()).sum()
    }
}

/// Parameter-shaped dense vector.
#[derive(Clone, PartialEq)]
pub struct ParamVector {
    layout: Arc<Layout>,
    values: Vec<f64>,
}

impl fmt::Debug for ParamVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ParamVector")
            .field("dim", &self.values.len())
            .field("segments", &self.layout.segments.len())
            .finish()
    }
}

impl ParamVector {
    pub fn zeros(layout: Arc<Layout>) -> Self {
        let values = vec![0.0; layout.dim()];
        ParamVector { layout, values }
    }

    pub fn from_values(layout: Arc<Layout>, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.dim() {
            return Err(Error::Config(format!(
                "expected {} values for layout, got {}",
                layout.dim(),
                values.len()
            )));
        }
        Ok(ParamVector { layout, values })
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn segment(&self, name: &str) -> Option<&[f64]> {
        self.layout.segment(name).map(|s| &self.values[s.range()])
    }

    pub fn segment_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let range = self.layout.segment(name)?.range();
        Some(&mut self.values[range])
    }

    pub fn same_layout(&self, other: &ParamVector) -> bool {
        Arc::ptr_eq(&self.layout, &other.layout) || self.layout == other.layout
    }

    pub fn ensure_same_layout(&self, other: &ParamVector) -> Result<()> {
        if self.same_layout(other) {
            Ok(())
        } else {
            Err(Error::Config("parameter layouts differ".into()))
        }
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn fill(&mut self, value: f64) {
        self.values.iter_mut().for_each(|v| *v = value);
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, other: &ParamVector, scale: f64) -> Result<()> {
        self.ensure_same_layout(other)?;
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += scale * b;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        self.values.iter_mut().for_each(|v| *v *= factor);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layout() -> Arc<Layout> {
        Arc::new(
            Layout::new(vec![
                SegmentSpec {
                    name: "w".into(),
                    kind: SegmentKind::Weight { rows: 2, cols: 3 },
                    head: false,
                },
                SegmentSpec {
                    name: "b".into(),
                    kind: SegmentKind::Bias { len: 3 },
                    head: false,
                },
            ])
            .unwrap(),
        )
    }

    #[test]
    fn segment_lengths_sum_to_dim() {
        let l = layout();
        assert_eq!(l.dim(), 9);
        assert_eq!(l.segment("b").unwrap().range(), 6..9);
        assert_eq!(l.maskable_dim(), 6);
    }

    #[test]
    fn duplicate_names_rejected() {
        let spec = SegmentSpec {
            name: "x".into(),
            kind: SegmentKind::Bias { len: 1 },
            head: false,
        };
        assert!(Layout::new(vec![spec.clone(), spec]).is_err());
    }

    #[test]
    fn wrong_length_rejected() {
        assert!(ParamVector::from_values(layout(), vec![0.0; 4]).is_err());
    }
}
