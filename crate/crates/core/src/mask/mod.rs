//! Trainable-parameter masks, parameter groupings and top-k group selection.
//!
//! Only weight matrices outside the classifier head are maskable. Biases,
//! normalisation scales and the head form an "always trainable" set that each
//! [`Mask`] carries explicitly.
//!
//! Group scores may be sums or means over the scoring epoch: top-k selection
//! is invariant to positive rescaling, so the two give the same mask.

mod select;

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Layout, SegmentKind};

pub use select::{
    accumulate_dpsgd_gradients, accumulate_oracle, accumulate_scores, select_mask_bitfit,
    select_mask_dpsgd_gradients, select_mask_last_layer, select_mask_magnitude, select_mask_oracle,
    select_mask_random, select_mask_sparta, OracleScore, ScoringSetup,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum GroupingKind {
    Singleton,
    Row,
    Random { block_size: usize },
}

impl GroupingKind {
    pub fn label(&self) -> String {
        match self {
            GroupingKind::Singleton => "singleton".into(),
            GroupingKind::Row => "row".into(),
            GroupingKind::Random { block_size } => format!("random-{block_size}"),
        }
    }

    /// Inverse of [`GroupingKind::label`].
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "singleton" => Ok(GroupingKind::Singleton),
            "row" => Ok(GroupingKind::Row),
            other => other
                .strip_prefix("random-")
                .and_then(|b| b.parse().ok())
                .filter(|&b| b > 0)
                .map(|block_size| GroupingKind::Random { block_size })
                .ok_or_else(|| Error::Usage(format!("unknown grouping {other:?}"))),
        }
    }
}

/// Groups of one maskable weight segment.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGroups {
    pub segment: usize,
    pub name: String,
    /// Global parameter indices per group.
    pub groups: Vec<Vec<usize>>,
}

/// Partition of the maskable coordinates into disjoint groups, layer by layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Grouping {
    kind: GroupingKind,
    layers: Vec<LayerGroups>,
    /// Offset of each layer's first group in the flat group index.
    group_offsets: Vec<usize>,
}

impl Grouping {
    /// `rng` is only consumed by the random kind.
    pub fn new<R: Rng + ?Sized>(layout: &Layout, kind: GroupingKind, rng: &mut R) -> Result<Self> {
        let mut layers = Vec::new();
        for (idx, seg) in layout.maskable() {
            let SegmentKind::Weight { rows, cols } = seg.spec.kind else {
                unreachable!("maskable segments are weight matrices")
            };
            let base = seg.offset;
            let groups: Vec<Vec<usize>> = match kind {
                GroupingKind::Singleton => seg.range().map(|i| vec![i]).collect(),
                GroupingKind::Row => (0..rows)
                    .map(|r| (base + r * cols..base + (r + 1) * cols).collect())
                    .collect(),
                GroupingKind::Random { block_size } => {
                    if block_size == 0 {
                        return Err(Error::Usage("random grouping needs block_size > 0".into()));
                    }
                    let mut idx: Vec<usize> = seg.range().collect();
                    idx.shuffle(rng);
                    idx.chunks(block_size)
                        .map(|c| {
                            let mut g = c.to_vec();
                            g.sort_unstable();
                            g
                        })
                        .collect()
                }
            };
            layers.push(LayerGroups {
                segment: idx,
                name: seg.spec.name.clone(),
                groups,
            });
        }
        Ok(Self::from_layers(kind, layers))
    }

    fn from_layers(kind: GroupingKind, layers: Vec<LayerGroups>) -> Self {
        let mut group_offsets = Vec::with_capacity(layers.len());
        let mut acc = 0;
        for l in &layers {
            group_offsets.push(acc);
            acc += l.groups.len();
        }
        Grouping {
            kind,
            layers,
            group_offsets,
        }
    }

    pub fn kind(&self) -> GroupingKind {
        self.kind
    }

    pub fn layers(&self) -> &[LayerGroups] {
        &self.layers
    }

    /// Total number of groups `q`.
    pub fn len(&self) -> usize {
        self.layers.iter().map(|l| l.groups.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flat index range of the groups belonging to layer `l`.
    pub fn layer_range(&self, l: usize) -> std::ops::Range<usize> {
        let start = self.group_offsets[l];
        start..start + self.layers[l].groups.len()
    }

    pub fn groups(&self) -> impl Iterator<Item = &Vec<usize>> {
        self.layers.iter().flat_map(|l| l.groups.iter())
    }

    /// Checks that the groups are disjoint and cover exactly the maskable indices.
    pub fn validate(&self, layout: &Layout) -> Result<()> {
        let mut seen = vec![false; layout.dim()];
        for g in self.groups() {
            for &i in g {
                if i >= seen.len() || seen[i] {
                    return Err(Error::Config(format!("grouping index {i} repeated or out of range")));
                }
                seen[i] = true;
            }
        }
        for seg in layout.segments() {
            let want = seg.spec.is_maskable();
            if seg.range().any(|i| seen[i] != want) {
                return Err(Error::Config(format!(
                    "grouping does not cover segment {} exactly",
                    seg.spec.name
                )));
            }
        }
        Ok(())
    }
}

/// Which non-maskable segments train regardless of the mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AlwaysTrainable {
    pub bias: bool,
    pub norm: bool,
    pub head: bool,
}

impl AlwaysTrainable {
    pub const STANDARD: AlwaysTrainable = AlwaysTrainable {
        bias: true,
        norm: true,
        head: true,
    };
    pub const NONE: AlwaysTrainable = AlwaysTrainable {
        bias: false,
        norm: false,
        head: false,
    };
    pub const HEAD_ONLY: AlwaysTrainable = AlwaysTrainable {
        bias: false,
        norm: false,
        head: true,
    };
}

/// Group-level selection attached to a mask built from a grouping.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupSelection {
    pub grouping: Arc<Grouping>,
    pub z: Vec<bool>,
}

/// Binary trainable indicator over the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    layout: Arc<Layout>,
    /// One bit vector per segment; empty for non-maskable segments.
    bits: Vec<Vec<bool>>,
    always: AlwaysTrainable,
    selection: Option<GroupSelection>,
}

impl Mask {
    pub fn none(layout: Arc<Layout>, always: AlwaysTrainable) -> Self {
        let bits = layout
            .segments()
            .iter()
            .map(|s| if s.spec.is_maskable() { vec![false; s.len()] } else { Vec::new() })
            .collect();
        Mask {
            layout,
            bits,
            always,
            selection: None,
        }
    }

    /// Every parameter trainable: ordinary full fine-tuning.
    pub fn all(layout: Arc<Layout>) -> Self {
        let mut m = Self::none(layout, AlwaysTrainable::STANDARD);
        m.bits.iter_mut().for_each(|b| b.iter_mut().for_each(|v| *v = true));
        m
    }

    /// Expands a group indicator `z` into coordinate bits.
    pub fn from_groups(
        layout: Arc<Layout>,
        grouping: Arc<Grouping>,
        z: Vec<bool>,
        always: AlwaysTrainable,
    ) -> Result<Self> {
        if z.len() != grouping.len() {
            return Err(Error::Config(format!(
                "group indicator has {} entries for {} groups",
                z.len(),
                grouping.len()
            )));
        }
        let mut mask = Self::none(layout, always);
        for (l, layer) in grouping.layers().iter().enumerate() {
            let offset = mask.layout.segments()[layer.segment].offset;
            for (g, on) in layer.groups.iter().zip(&z[grouping.layer_range(l)]) {
                if *on {
                    for &i in g {
                        mask.bits[layer.segment][i - offset] = true;
                    }
                }
            }
        }
        mask.selection = Some(GroupSelection { grouping, z });
        Ok(mask)
    }

    /// Rebuilds a mask from per-segment bits (e.g. read from disk).
    pub fn from_bits(layout: Arc<Layout>, bits: Vec<Vec<bool>>, always: AlwaysTrainable) -> Result<Self> {
        if bits.len() != layout.segments().len() {
            return Err(Error::Config("mask segment count does not match layout".into()));
        }
        for (seg, b) in layout.segments().iter().zip(&bits) {
            let want = if seg.spec.is_maskable() { seg.len() } else { 0 };
            if b.len() != want {
                return Err(Error::Config(format!("mask bits for {} have wrong length", seg.spec.name)));
            }
        }
        Ok(Mask {
            layout,
            bits,
            always,
            selection: None,
        })
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn always(&self) -> AlwaysTrainable {
        self.always
    }

    pub fn selection(&self) -> Option<&GroupSelection> {
        self.selection.as_ref()
    }

    pub fn grouping_kind(&self) -> Option<GroupingKind> {
        self.selection.as_ref().map(|s| s.grouping.kind())
    }

    pub fn segment_bits(&self, segment: usize) -> &[bool] {
        &self.bits[segment]
    }

    fn segment_always(&self, segment: usize) -> bool {
        let spec = &self.layout.segments()[segment].spec;
        if spec.head {
            return self.always.head;
        }
        match spec.kind {
            SegmentKind::Weight { .. } => false,
            SegmentKind::Bias { .. } => self.always.bias,
            SegmentKind::NormScale { .. } => self.always.norm,
        }
    }

    /// Per-coordinate trainable flags over the full parameter vector.
    pub fn coordinate_flags(&self) -> Vec<bool> {
        let mut flags = Vec::with_capacity(self.layout.dim());
        for (s, seg) in self.layout.segments().iter().enumerate() {
            if seg.spec.is_maskable() {
                flags.extend_from_slice(&self.bits[s]);
            } else {
                flags.extend(std::iter::repeat_n(self.segment_always(s), seg.len()));
            }
        }
        flags
    }

    pub fn trainable_count(&self) -> usize {
        self.coordinate_flags().iter().filter(|&&b| b).count()
    }

    /// Trainable fraction of each maskable segment, in layout order.
    pub fn layer_density(&self) -> Vec<(String, f64)> {
        self.layout
            .maskable()
            .map(|(s, seg)| {
                let on = self.bits[s].iter().filter(|&&b| b).count();
                (seg.spec.name.clone(), if seg.is_empty() { 0.0 } else { on as f64 / seg.len() as f64 })
            })
            .collect()
    }

    /// Maskable coordinates switched on.
    pub fn maskable_selected(&self) -> usize {
        self.bits.iter().flatten().filter(|&&b| b).count()
    }

    /// Checks membership in the feasible set: every selected coordinate lies in
    /// a selected group and each layer stays within its group budget.
    pub fn check_feasible(&self, budget: &SparsityBudget) -> Result<()> {
        let Some(sel) = &self.selection else {
            return Ok(());
        };
        let grouping = &sel.grouping;
        for (l, layer) in grouping.layers().iter().enumerate() {
            let offset = self.layout.segments()[layer.segment].offset;
            let z = &sel.z[grouping.layer_range(l)];
            let k = budget.groups_for_layer(layer.groups.len());
            let chosen = z.iter().filter(|&&b| b).count();
            if chosen > k {
                return Err(Error::Config(format!(
                    "layer {} selects {chosen} groups, budget is {k}",
                    layer.name
                )));
            }
            for (g, &on) in layer.groups.iter().zip(z) {
                if !on && g.iter().any(|&i| self.bits[layer.segment][i - offset]) {
                    return Err(Error::Config(format!(
                        "layer {} has a trainable coordinate in an unselected group",
                        layer.name
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Per-layer fraction `s` of groups allowed to train.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SparsityBudget {
    fraction: f64,
}

impl SparsityBudget {
    pub fn new(fraction: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&fraction) {
            return Err(Error::Usage(format!("sparsity must lie in [0, 1], got {fraction}")));
        }
        Ok(SparsityBudget { fraction })
    }

    pub fn fraction(&self) -> f64 {
        self.fraction
    }

    /// `floor(s * q_layer)`; the tiny slack absorbs products like `0.29 * 100`.
    pub fn groups_for_layer(&self, groups: usize) -> usize {
        ((self.fraction * groups as f64 + 1e-9).floor() as usize).min(groups)
    }
}

/// Running sums of per-coordinate scores over the maskable coordinates.
///
/// Stored at full parameter length; non-maskable coordinates stay zero.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreAccumulator {
    pub values: Vec<f64>,
    pub batches_seen: u64,
}

impl ScoreAccumulator {
    pub fn new(layout: &Layout) -> Self {
        ScoreAccumulator {
            values: vec![0.0; layout.dim()],
            batches_seen: 0,
        }
    }
}

/// Sums accumulated scores within each group. With `average` the result is
/// divided by the number of batches seen, which does not change the selection.
pub fn group_scores(acc: &ScoreAccumulator, grouping: &Grouping, average: bool) -> Result<Vec<f64>> {
    let scale = if average && acc.batches_seen > 0 {
        1.0 / acc.batches_seen as f64
    } else {
        1.0
    };
    grouping
        .groups()
        .map(|g| {
            let mut s = 0.0;
            for &i in g {
                s += *acc
                    .values
                    .get(i)
                    .ok_or_else(|| Error::Config(format!("group index {i} outside accumulator")))?;
            }
            Ok(s * scale)
        })
        .collect()
}

/// Indices of the `k` largest entries, ties broken towards the lower index.
pub fn top_k_indices(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(k);
    order.sort_unstable();
    order
}

/// Per layer, switches on the `k_layer` groups with the largest score.
pub fn top_k_mask(
    scores: &[f64],
    layout: Arc<Layout>,
    grouping: Arc<Grouping>,
    budget: &SparsityBudget,
    always: AlwaysTrainable,
) -> Result<Mask> {
    if scores.len() != grouping.len() {
        return Err(Error::Config(format!(
            "{} scores for {} groups",
            scores.len(),
            grouping.len()
        )));
    }
    let mut z = vec![false; grouping.len()];
    for l in 0..grouping.layers().len() {
        let range = grouping.layer_range(l);
        let k = budget.groups_for_layer(range.len());
        for j in top_k_indices(&scores[range.clone()], k) {
            z[range.start + j] = true;
        }
    }
    Mask::from_groups(layout, grouping, z, always)
}
