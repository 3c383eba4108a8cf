//! Surrogate tree families: hard standard trees, soft (multivariate) trees
//! and univariate soft trees. All trees are complete binary trees stored
//! breadth first; node `j` has children `2j + 1` (left) and `2j + 2` (right),
//! and leaf `l` sits at node index `2^d - 1 + l`.
//!
//! Besides decoded trees, this module owns the flat parameter vector layout
//! (`ThetaLayout`) an I-Net head emits for each family, and a differentiable
//! evaluator over that vector used as the training signal.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{sigmoid, softmax_backward, softmax_in_place, Activation};

pub const TREE_FORMAT_VERSION: u32 = 1;
pub const DEFAULT_DEPTH: usize = 3;
pub const DEFAULT_GAMMA: f64 = 25.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TreeFamily {
    StandardDt,
    UnivariateSdt,
    StandardSdt,
}

impl TreeFamily {
    pub const ALL: [TreeFamily; 3] = [
        TreeFamily::StandardDt,
        TreeFamily::UnivariateSdt,
        TreeFamily::StandardSdt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TreeFamily::StandardDt => "standard_dt",
            TreeFamily::UnivariateSdt => "univariate_sdt",
            TreeFamily::StandardSdt => "standard_sdt",
        }
    }
}

impl std::str::FromStr for TreeFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TreeFamily::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::invalid("family", format!("unknown tree family `{s}`")))
    }
}

pub fn internal_count(depth: usize) -> usize {
    (1 << depth) - 1
}

pub fn leaf_count(depth: usize) -> usize {
    1 << depth
}

/// Length of the flat parameter vector for a family.
pub fn param_count(family: TreeFamily, n: usize, depth: usize) -> usize {
    let (inner, leaves) = (internal_count(depth), leaf_count(depth));
    match family {
        TreeFamily::StandardDt => inner * 2 * n + leaves,
        TreeFamily::StandardSdt => inner * (n + 1) + leaves * 2,
        TreeFamily::UnivariateSdt => inner * (2 * n + 1) + leaves * 2,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentKind {
    /// Per-node feature choice, one softmax block of `n` per node.
    Identifiers,
    /// Per-node split value for every feature.
    Splits,
    /// Per-node filter (all `n` entries).
    Filters,
    Biases,
    /// Standard trees: one class-1 probability per leaf.
    /// Soft trees: `(φ0, φ1)` per leaf.
    Leaves,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub kind: SegmentKind,
    pub offset: usize,
    pub len: usize,
    pub activation: Activation,
}

impl Segment {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThetaLayout {
    pub family: TreeFamily,
    pub n: usize,
    pub depth: usize,
    pub segments: Vec<Segment>,
}

impl ThetaLayout {
    pub fn new(family: TreeFamily, n: usize, depth: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("n", "must be at least 1"));
        }
        if depth == 0 || depth > 16 {
            return Err(Error::invalid("depth", "must lie in 1..=16"));
        }
        let (inner, leaves) = (internal_count(depth), leaf_count(depth));
        use Activation::*;
        use SegmentKind::*;
        let parts: Vec<(SegmentKind, usize, Activation)> = match family {
            TreeFamily::StandardDt => vec![
                (Identifiers, inner * n, Softmax),
                (Splits, inner * n, SqueezedSigmoid),
                (Leaves, leaves, Sigmoid),
            ],
            TreeFamily::StandardSdt => vec![
                (Filters, inner * n, Linear),
                (Biases, inner, Linear),
                (Leaves, leaves * 2, Linear),
            ],
            TreeFamily::UnivariateSdt => vec![
                (Identifiers, inner * n, Softmax),
                (Filters, inner * n, Linear),
                (Biases, inner, Linear),
                (Leaves, leaves * 2, Linear),
            ],
        };
        let mut offset = 0;
        let segments = parts
            .into_iter()
            .map(|(kind, len, activation)| {
                let s = Segment {
                    kind,
                    offset,
                    len,
                    activation,
                };
                offset += len;
                s
            })
            .collect();
        Ok(Self {
            family,
            n,
            depth,
            segments,
        })
    }

    pub fn len(&self) -> usize {
        self.segments.last().map_or(0, |s| s.offset + s.len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn segment(&self, kind: SegmentKind) -> Option<&Segment> {
        self.segments.iter().find(|s| s.kind == kind)
    }

    fn slice<'a>(&self, theta: &'a [f64], kind: SegmentKind) -> &'a [f64] {
        self.segment(kind).map_or(&[], |s| &theta[s.range()])
    }

    fn check_len(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.len() {
            return Err(Error::Dimension {
                expected: self.len(),
                actual: theta.len(),
            });
        }
        Ok(())
    }

    /// Apply the per-segment head activations to raw network outputs.
    pub fn activate(&self, raw: &[f64]) -> Result<Vec<f64>> {
        self.check_len(raw)?;
        let mut out = raw.to_vec();
        for seg in &self.segments {
            let part = &mut out[seg.range()];
            match seg.activation {
                Activation::Softmax => part.chunks_mut(self.n).for_each(softmax_in_place),
                Activation::Linear => {}
                kind => part.iter_mut().for_each(|v| *v = crate::nn::activate(kind, *v)),
            }
        }
        Ok(out)
    }

    /// Map ∂loss/∂activated to ∂loss/∂raw.
    pub fn activation_backward(&self, activated: &[f64], upstream: &[f64]) -> Vec<f64> {
        let mut out = upstream.to_vec();
        for seg in &self.segments {
            let r = seg.range();
            match seg.activation {
                Activation::Softmax => {
                    for ((a, g), o) in activated[r.clone()]
                        .chunks(self.n)
                        .zip(upstream[r.clone()].chunks(self.n))
                        .zip(out[r].chunks_mut(self.n))
                    {
                        softmax_backward(a, g, o);
                    }
                }
                Activation::Sigmoid => {
                    for i in r {
                        out[i] = upstream[i] * activated[i] * (1.0 - activated[i]);
                    }
                }
                Activation::SqueezedSigmoid => {
                    for i in r {
                        out[i] = upstream[i] * 3.0 * activated[i] * (1.0 - activated[i]);
                    }
                }
                Activation::Linear => {}
                other => unreachable!("no head segment uses {other:?}"),
            }
        }
        out
    }
}

fn argmax_first(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn check_x(n: usize, x: &[f64]) -> Result<()> {
    if x.len() != n {
        return Err(Error::Dimension {
            expected: n,
            actual: x.len(),
        });
    }
    Ok(())
}

/// Hard axis-aligned tree; left is the true branch of `x[feature] < split`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardTree {
    pub depth: usize,
    pub n_features: usize,
    pub features: Vec<usize>,
    pub splits: Vec<f64>,
    /// Class-1 probability per leaf.
    pub leaves: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftTree {
    pub depth: usize,
    pub n_features: usize,
    pub filters: Vec<Vec<f64>>,
    pub biases: Vec<f64>,
    /// `(φ0, φ1)` per leaf.
    pub leaves: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnivariateSoftTree {
    pub depth: usize,
    pub n_features: usize,
    pub features: Vec<usize>,
    pub filter_values: Vec<f64>,
    pub biases: Vec<f64>,
    pub leaves: Vec<[f64; 2]>,
}

/// Class-1 probability of a softmax leaf.
#[inline]
pub fn leaf_q1(phi: [f64; 2]) -> f64 {
    sigmoid(phi[1] - phi[0])
}

impl StandardTree {
    pub fn validate(&self) -> Result<()> {
        let (inner, leaves) = (internal_count(self.depth), leaf_count(self.depth));
        if self.features.len() != inner || self.splits.len() != inner || self.leaves.len() != leaves {
            return Err(Error::InvalidData(format!(
                "standard tree of depth {} has wrong node counts",
                self.depth
            )));
        }
        if self.features.iter().any(|&f| f >= self.n_features) {
            return Err(Error::InvalidData("feature index out of range".into()));
        }
        if self.splits.iter().any(|s| !s.is_finite()) {
            return Err(Error::InvalidData("non-finite split value".into()));
        }
        if self.leaves.iter().any(|p| !(*p > 0.0 && *p < 1.0)) {
            return Err(Error::InvalidData("leaf probability outside (0, 1)".into()));
        }
        Ok(())
    }

    pub fn leaf_index(&self, x: &[f64]) -> usize {
        let inner = internal_count(self.depth);
        let mut node = 0;
        while node < inner {
            node = if x[self.features[node]] < self.splits[node] {
                2 * node + 1
            } else {
                2 * node + 2
            };
        }
        node - inner
    }

    pub fn eval(&self, x: &[f64]) -> Result<f64> {
        check_x(self.n_features, x)?;
        Ok(self.leaves[self.leaf_index(x)])
    }
}

fn soft_route(
    depth: usize,
    x: &[f64],
    use_max_path: bool,
    right_prob: impl Fn(usize, &[f64]) -> f64,
    leaf: impl Fn(usize) -> f64,
) -> f64 {
    let inner = internal_count(depth);
    if use_max_path {
        let mut node = 0;
        while node < inner {
            // Ties at exactly 0.5 go left.
            node = if right_prob(node, x) > 0.5 {
                2 * node + 2
            } else {
                2 * node + 1
            };
        }
        leaf(node - inner)
    } else {
        path_probabilities(depth, |j| right_prob(j, x))
            .iter()
            .enumerate()
            .map(|(l, p)| p * leaf(l))
            .sum()
    }
}

/// Probability of reaching each leaf given right-branch probabilities.
pub fn path_probabilities(depth: usize, right_prob: impl Fn(usize) -> f64) -> Vec<f64> {
    let inner = internal_count(depth);
    let mut reach = vec![0.0; inner + leaf_count(depth)];
    reach[0] = 1.0;
    for j in 0..inner {
        let r = right_prob(j);
        reach[2 * j + 1] = reach[j] * (1.0 - r);
        reach[2 * j + 2] = reach[j] * r;
    }
    reach.split_off(inner)
}

impl SoftTree {
    pub fn validate(&self) -> Result<()> {
        let (inner, leaves) = (internal_count(self.depth), leaf_count(self.depth));
        if self.filters.len() != inner || self.biases.len() != inner || self.leaves.len() != leaves {
            return Err(Error::InvalidData(format!(
                "soft tree of depth {} has wrong node counts",
                self.depth
            )));
        }
        if self.filters.iter().any(|w| w.len() != self.n_features) {
            return Err(Error::InvalidData("filter length differs from feature count".into()));
        }
        let finite = self
            .filters
            .iter()
            .flatten()
            .chain(&self.biases)
            .chain(self.leaves.iter().flatten());
        if finite.into_iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidData("non-finite soft tree parameter".into()));
        }
        Ok(())
    }

    /// `P^j(x) = σ(x·w^j + b^j)`, the probability of branching right.
    pub fn right_prob(&self, node: usize, x: &[f64]) -> f64 {
        let dot: f64 = self.filters[node].iter().zip(x).map(|(w, x)| w * x).sum();
        sigmoid(dot + self.biases[node])
    }

    pub fn eval(&self, x: &[f64], use_max_path: bool) -> Result<f64> {
        check_x(self.n_features, x)?;
        Ok(soft_route(
            self.depth,
            x,
            use_max_path,
            |j, x| self.right_prob(j, x),
            |l| leaf_q1(self.leaves[l]),
        ))
    }
}

impl UnivariateSoftTree {
    pub fn validate(&self) -> Result<()> {
        let (inner, leaves) = (internal_count(self.depth), leaf_count(self.depth));
        if self.features.len() != inner
            || self.filter_values.len() != inner
            || self.biases.len() != inner
            || self.leaves.len() != leaves
        {
            return Err(Error::InvalidData(format!(
                "univariate soft tree of depth {} has wrong node counts",
                self.depth
            )));
        }
        if self.features.iter().any(|&f| f >= self.n_features) {
            return Err(Error::InvalidData("feature index out of range".into()));
        }
        Ok(())
    }

    pub fn right_prob(&self, node: usize, x: &[f64]) -> f64 {
        sigmoid(self.filter_values[node] * x[self.features[node]] + self.biases[node])
    }

    pub fn eval(&self, x: &[f64], use_max_path: bool) -> Result<f64> {
        check_x(self.n_features, x)?;
        Ok(soft_route(
            self.depth,
            x,
            use_max_path,
            |j, x| self.right_prob(j, x),
            |l| leaf_q1(self.leaves[l]),
        ))
    }

    /// The same tree with the single filter value scattered into a full filter.
    pub fn to_soft(&self) -> SoftTree {
        SoftTree {
            depth: self.depth,
            n_features: self.n_features,
            filters: self
                .features
                .iter()
                .zip(&self.filter_values)
                .map(|(&f, &v)| {
                    let mut w = vec![0.0; self.n_features];
                    w[f] = v;
                    w
                })
                .collect(),
            biases: self.biases.clone(),
            leaves: self.leaves.clone(),
        }
    }
}

/// A decoded surrogate of any family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum TreeModel {
    StandardDt(StandardTree),
    UnivariateSdt(UnivariateSoftTree),
    StandardSdt(SoftTree),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TreeDocument {
    format_version: u32,
    #[serde(flatten)]
    tree: TreeModel,
}

impl TreeModel {
    pub fn family(&self) -> TreeFamily {
        match self {
            TreeModel::StandardDt(_) => TreeFamily::StandardDt,
            TreeModel::UnivariateSdt(_) => TreeFamily::UnivariateSdt,
            TreeModel::StandardSdt(_) => TreeFamily::StandardSdt,
        }
    }

    pub fn n_features(&self) -> usize {
        match self {
            TreeModel::StandardDt(t) => t.n_features,
            TreeModel::UnivariateSdt(t) => t.n_features,
            TreeModel::StandardSdt(t) => t.n_features,
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            TreeModel::StandardDt(t) => t.depth,
            TreeModel::UnivariateSdt(t) => t.depth,
            TreeModel::StandardSdt(t) => t.depth,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            TreeModel::StandardDt(t) => t.validate(),
            TreeModel::UnivariateSdt(t) => t.validate(),
            TreeModel::StandardSdt(t) => t.validate(),
        }
    }

    /// Class-1 probability. Soft families follow the maximum-probability path.
    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        match self {
            TreeModel::StandardDt(t) => t.eval(x),
            TreeModel::UnivariateSdt(t) => t.eval(x, true),
            TreeModel::StandardSdt(t) => t.eval(x, true),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&TreeDocument {
            format_version: TREE_FORMAT_VERSION,
            tree: self.clone(),
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: TreeDocument = serde_json::from_str(text)?;
        if doc.format_version != TREE_FORMAT_VERSION {
            return Err(Error::FormatVersion {
                found: doc.format_version,
                expected: TREE_FORMAT_VERSION,
            });
        }
        doc.tree.validate()?;
        Ok(doc.tree)
    }

    pub fn to_dot(&self) -> String {
        let inner = internal_count(self.depth());
        let mut out = String::from("digraph tree {\n  node [fontname=\"Helvetica\"];\n");
        let fmt_vec = |w: &[f64]| w.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>().join(", ");
        for j in 0..inner {
            let label = match self {
                TreeModel::StandardDt(t) => format!("f{} < {:.4}", t.features[j], t.splits[j]),
                TreeModel::UnivariateSdt(t) => {
                    format!("f{}: w={:.4}\\nb={:.4}", t.features[j], t.filter_values[j], t.biases[j])
                }
                TreeModel::StandardSdt(t) => format!("w=[{}]\\nb={:.4}", fmt_vec(&t.filters[j]), t.biases[j]),
            };
            let _ = writeln!(out, "  n{j} [label=\"{label}\", shape=ellipse];");
        }
        for l in 0..leaf_count(self.depth()) {
            let p = match self {
                TreeModel::StandardDt(t) => t.leaves[l],
                TreeModel::UnivariateSdt(t) => leaf_q1(t.leaves[l]),
                TreeModel::StandardSdt(t) => leaf_q1(t.leaves[l]),
            };
            let class = u8::from(p >= 0.5);
            let _ = writeln!(out, "  n{} [label=\"p={p:.4}\\nclass {class}\", shape=box];", inner + l);
        }
        let (left, right) = match self {
            TreeModel::StandardDt(_) => ("true", "false"),
            _ => ("left", "right"),
        };
        for j in 0..inner {
            let _ = writeln!(out, "  n{j} -> n{} [label=\"{left}\"];", 2 * j + 1);
            let _ = writeln!(out, "  n{j} -> n{} [label=\"{right}\"];", 2 * j + 2);
        }
        out.push_str("}\n");
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExportFormat {
    Dot,
    Json,
}

impl std::str::FromStr for ExportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dot" => Ok(ExportFormat::Dot),
            "json" => Ok(ExportFormat::Json),
            other => Err(Error::invalid("format", format!("unknown format `{other}`"))),
        }
    }
}

pub fn export_tree(tree: &TreeModel, format: ExportFormat) -> Result<String> {
    match format {
        ExportFormat::Dot => Ok(tree.to_dot()),
        ExportFormat::Json => tree.to_json(),
    }
}

/// Decode an activated standard-DT head: feature = argmax of the node's
/// identifier block (lowest index on ties), split = that feature's slot.
pub fn decode_standard(theta: &[f64], layout: &ThetaLayout) -> Result<StandardTree> {
    if layout.family != TreeFamily::StandardDt {
        return Err(Error::invalid("layout", "not a standard_dt layout"));
    }
    layout.check_len(theta)?;
    let n = layout.n;
    let ids = layout.slice(theta, SegmentKind::Identifiers);
    let splits = layout.slice(theta, SegmentKind::Splits);
    let features: Vec<usize> = ids.chunks(n).map(argmax_first).collect();
    let splits = features.iter().zip(splits.chunks(n)).map(|(&f, s)| s[f]).collect();
    Ok(StandardTree {
        depth: layout.depth,
        n_features: n,
        features,
        splits,
        leaves: layout.slice(theta, SegmentKind::Leaves).to_vec(),
    })
}

/// Inverse direction of [`decode_standard`]: one-hot identifiers and the split
/// value copied into every feature slot.
pub fn encode_standard(tree: &StandardTree) -> Vec<f64> {
    let n = tree.n_features;
    let mut out = Vec::with_capacity(param_count(TreeFamily::StandardDt, n, tree.depth));
    for &f in &tree.features {
        out.extend((0..n).map(|i| if i == f { 1.0 } else { 0.0 }));
    }
    for &s in &tree.splits {
        out.extend(std::iter::repeat_n(s, n));
    }
    out.extend(&tree.leaves);
    out
}

fn leaf_pairs(values: &[f64]) -> Vec<[f64; 2]> {
    values.chunks(2).map(|c| [c[0], c[1]]).collect()
}

pub fn decode_soft(theta: &[f64], layout: &ThetaLayout) -> Result<SoftTree> {
    if layout.family != TreeFamily::StandardSdt {
        return Err(Error::invalid("layout", "not a standard_sdt layout"));
    }
    layout.check_len(theta)?;
    Ok(SoftTree {
        depth: layout.depth,
        n_features: layout.n,
        filters: layout
            .slice(theta, SegmentKind::Filters)
            .chunks(layout.n)
            .map(<[f64]>::to_vec)
            .collect(),
        biases: layout.slice(theta, SegmentKind::Biases).to_vec(),
        leaves: leaf_pairs(layout.slice(theta, SegmentKind::Leaves)),
    })
}

/// Univariate head: feature = argmax identifier, filter value = the filter
/// slot at that feature.
pub fn decode_univariate(theta: &[f64], layout: &ThetaLayout) -> Result<UnivariateSoftTree> {
    if layout.family != TreeFamily::UnivariateSdt {
        return Err(Error::invalid("layout", "not a univariate_sdt layout"));
    }
    layout.check_len(theta)?;
    let n = layout.n;
    let features: Vec<usize> = layout
        .slice(theta, SegmentKind::Identifiers)
        .chunks(n)
        .map(argmax_first)
        .collect();
    let filter_values = features
        .iter()
        .zip(layout.slice(theta, SegmentKind::Filters).chunks(n))
        .map(|(&f, w)| w[f])
        .collect();
    Ok(UnivariateSoftTree {
        depth: layout.depth,
        n_features: n,
        features,
        filter_values,
        biases: layout.slice(theta, SegmentKind::Biases).to_vec(),
        leaves: leaf_pairs(layout.slice(theta, SegmentKind::Leaves)),
    })
}

pub fn decode(theta: &[f64], layout: &ThetaLayout) -> Result<TreeModel> {
    Ok(match layout.family {
        TreeFamily::StandardDt => TreeModel::StandardDt(decode_standard(theta, layout)?),
        TreeFamily::UnivariateSdt => TreeModel::UnivariateSdt(decode_univariate(theta, layout)?),
        TreeFamily::StandardSdt => TreeModel::StandardSdt(decode_soft(theta, layout)?),
    })
}

/// Differentiable evaluation of an activated head vector, mixing over all
/// leaves. Standard trees are relaxed: each node's left probability is
/// `Σ_i id_i · σ(γ (split_i − x_i))`. Soft families use `σ(x·w + b)` as the
/// right probability, where the univariate filter is `id ⊙ filter`.
#[derive(Debug, Clone)]
pub struct HeadEvaluator {
    layout: ThetaLayout,
    gamma: f64,
    right: Vec<f64>,
    value: Vec<f64>,
    reach: Vec<f64>,
    leaf: Vec<f64>,
}

impl HeadEvaluator {
    pub fn new(layout: ThetaLayout, gamma: f64) -> Result<Self> {
        if !(gamma > 0.0) {
            return Err(Error::invalid("gamma", "must be positive"));
        }
        let nodes = internal_count(layout.depth) + leaf_count(layout.depth);
        Ok(Self {
            right: vec![0.0; internal_count(layout.depth)],
            value: vec![0.0; nodes],
            reach: vec![0.0; nodes],
            leaf: vec![0.0; leaf_count(layout.depth)],
            layout,
            gamma,
        })
    }

    pub fn layout(&self) -> &ThetaLayout {
        &self.layout
    }

    fn node_right(&self, theta: &[f64], j: usize, x: &[f64]) -> f64 {
        let n = self.layout.n;
        let l = &self.layout;
        match l.family {
            TreeFamily::StandardDt => {
                let ids = &l.slice(theta, SegmentKind::Identifiers)[j * n..(j + 1) * n];
                let splits = &l.slice(theta, SegmentKind::Splits)[j * n..(j + 1) * n];
                let left: f64 = ids
                    .iter()
                    .zip(splits)
                    .zip(x)
                    .map(|((s, t), x)| s * sigmoid(self.gamma * (t - x)))
                    .sum();
                1.0 - left
            }
            TreeFamily::StandardSdt => {
                let w = &l.slice(theta, SegmentKind::Filters)[j * n..(j + 1) * n];
                let b = l.slice(theta, SegmentKind::Biases)[j];
                sigmoid(w.iter().zip(x).map(|(w, x)| w * x).sum::<f64>() + b)
            }
            TreeFamily::UnivariateSdt => {
                let ids = &l.slice(theta, SegmentKind::Identifiers)[j * n..(j + 1) * n];
                let w = &l.slice(theta, SegmentKind::Filters)[j * n..(j + 1) * n];
                let b = l.slice(theta, SegmentKind::Biases)[j];
                sigmoid(ids.iter().zip(w).zip(x).map(|((s, w), x)| s * w * x).sum::<f64>() + b)
            }
        }
    }

    fn forward(&mut self, theta: &[f64], x: &[f64]) -> f64 {
        let inner = internal_count(self.layout.depth);
        let leaves = self.layout.slice(theta, SegmentKind::Leaves);
        for l in 0..self.leaf.len() {
            self.leaf[l] = match self.layout.family {
                TreeFamily::StandardDt => leaves[l],
                _ => leaf_q1([leaves[2 * l], leaves[2 * l + 1]]),
            };
        }
        for j in 0..inner {
            self.right[j] = self.node_right(theta, j, x);
        }
        for l in 0..self.leaf.len() {
            self.value[inner + l] = self.leaf[l];
        }
        for j in (0..inner).rev() {
            let r = self.right[j];
            self.value[j] = (1.0 - r) * self.value[2 * j + 1] + r * self.value[2 * j + 2];
        }
        self.value[0]
    }

    /// Tree output for one input row.
    pub fn eval(&mut self, theta: &[f64], x: &[f64]) -> Result<f64> {
        self.layout.check_len(theta)?;
        check_x(self.layout.n, x)?;
        Ok(self.forward(theta, x))
    }

    /// Tree output, with `scale · ∂output/∂theta` added into `grad`.
    pub fn eval_with_grad(&mut self, theta: &[f64], x: &[f64], scale: f64, grad: &mut [f64]) -> Result<f64> {
        self.layout.check_len(theta)?;
        check_x(self.layout.n, x)?;
        if grad.len() != theta.len() {
            return Err(Error::Dimension {
                expected: theta.len(),
                actual: grad.len(),
            });
        }
        let out = self.forward(theta, x);
        let inner = internal_count(self.layout.depth);
        let n = self.layout.n;
        self.reach[0] = 1.0;
        for j in 0..inner {
            let r = self.right[j];
            self.reach[2 * j + 1] = self.reach[j] * (1.0 - r);
            self.reach[2 * j + 2] = self.reach[j] * r;
        }

        let leaves = self
            .layout
            .segment(SegmentKind::Leaves)
            .expect("every layout has leaves")
            .offset;
        for l in 0..self.leaf.len() {
            let d = scale * self.reach[inner + l];
            match self.layout.family {
                TreeFamily::StandardDt => grad[leaves + l] += d,
                _ => {
                    let q = self.leaf[l];
                    grad[leaves + 2 * l] -= d * q * (1.0 - q);
                    grad[leaves + 2 * l + 1] += d * q * (1.0 - q);
                }
            }
        }

        let seg = |k| self.layout.segment(k).map_or(0, |s: &Segment| s.offset);
        let (ids_at, splits_at, filters_at, biases_at) = (
            seg(SegmentKind::Identifiers),
            seg(SegmentKind::Splits),
            seg(SegmentKind::Filters),
            seg(SegmentKind::Biases),
        );
        for j in 0..inner {
            // ∂out/∂(right probability of node j)
            let d_right = scale * self.reach[j] * (self.value[2 * j + 2] - self.value[2 * j + 1]);
            if d_right == 0.0 {
                continue;
            }
            let r = self.right[j];
            match self.layout.family {
                TreeFamily::StandardDt => {
                    for i in 0..n {
                        let s = theta[ids_at + j * n + i];
                        let t = theta[splits_at + j * n + i];
                        let sig = sigmoid(self.gamma * (t - x[i]));
                        grad[ids_at + j * n + i] -= d_right * sig;
                        grad[splits_at + j * n + i] -= d_right * s * self.gamma * sig * (1.0 - sig);
                    }
                }
                TreeFamily::StandardSdt => {
                    let dz = d_right * r * (1.0 - r);
                    for i in 0..n {
                        grad[filters_at + j * n + i] += dz * x[i];
                    }
                    grad[biases_at + j] += dz;
                }
                TreeFamily::UnivariateSdt => {
                    let dz = d_right * r * (1.0 - r);
                    for i in 0..n {
                        let s = theta[ids_at + j * n + i];
                        let w = theta[filters_at + j * n + i];
                        grad[ids_at + j * n + i] += dz * w * x[i];
                        grad[filters_at + j * n + i] += dz * s * x[i];
                    }
                    grad[biases_at + j] += dz;
                }
            }
        }
        Ok(out)
    }
}

/// Relaxed standard-tree output for one row; see [`HeadEvaluator`].
pub fn eval_standard_soft(theta: &[f64], layout: &ThetaLayout, x: &[f64], gamma: f64) -> Result<f64> {
    if layout.family != TreeFamily::StandardDt {
        return Err(Error::invalid("layout", "not a standard_dt layout"));
    }
    HeadEvaluator::new(layout.clone(), gamma)?.eval(theta, x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stump(feature: usize, split: f64, left: f64, right: f64, n: usize) -> StandardTree {
        StandardTree {
            depth: 1,
            n_features: n,
            features: vec![feature],
            splits: vec![split],
            leaves: vec![left, right],
        }
    }

    #[test]
    fn param_counts() {
        assert_eq!(param_count(TreeFamily::StandardDt, 2, 2), 16);
        assert_eq!(param_count(TreeFamily::StandardSdt, 2, 2), 17);
        assert_eq!(param_count(TreeFamily::UnivariateSdt, 2, 2), 23);
        for family in TreeFamily::ALL {
            for n in 1..6 {
                for d in 1..5 {
                    assert_eq!(ThetaLayout::new(family, n, d).unwrap().len(), param_count(family, n, d));
                }
            }
        }
    }

    #[test]
    fn decode_picks_argmax_split() {
        let layout = ThetaLayout::new(TreeFamily::StandardDt, 2, 1).unwrap();
        let tree = decode_standard(&[0.9, 0.1, 0.3, 0.8, 0.2, 0.7], &layout).unwrap();
        assert_eq!(tree, stump(0, 0.3, 0.2, 0.7, 2));
        let tie = decode_standard(&[0.5, 0.5, 0.3, 0.8, 0.2, 0.7], &layout).unwrap();
        assert_eq!(tie.features, vec![0]);
    }

    #[test]
    fn decode_encode_idempotent() {
        let layout = ThetaLayout::new(TreeFamily::StandardDt, 3, 2).unwrap();
        let theta: Vec<f64> = (0..layout.len()).map(|i| ((i * 37 % 11) as f64 + 0.5) / 12.0).collect();
        let once = decode_standard(&theta, &layout).unwrap();
        let twice = decode_standard(&encode_standard(&once), &layout).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn hard_routing() {
        let t = stump(0, 0.5, 0.2, 0.9, 1);
        assert_eq!(t.eval(&[0.3]).unwrap(), 0.2);
        assert_eq!(t.eval(&[0.5]).unwrap(), 0.9);
        let flat = StandardTree {
            depth: 2,
            n_features: 2,
            features: vec![0, 1, 0],
            splits: vec![0.4, 0.6, 0.1],
            leaves: vec![0.6; 4],
        };
        assert_eq!(flat.eval(&[0.99, 0.01]).unwrap(), 0.6);
        assert!(matches!(
            t.eval(&[0.1, 0.2]),
            Err(Error::Dimension { expected: 1, actual: 2 })
        ));
    }

    #[test]
    fn relaxed_tree_symmetric_case() {
        let layout = ThetaLayout::new(TreeFamily::StandardDt, 2, 2).unwrap();
        let mut theta = vec![0.5; 6];
        theta.extend([0.5; 6]);
        theta.extend([0.1, 0.2, 0.6, 0.9]);
        let out = eval_standard_soft(&theta, &layout, &[0.5, 0.5], 25.0).unwrap();
        assert!((out - 0.45).abs() < 1e-12);
    }

    #[test]
    fn soft_tree_values() {
        let sym = SoftTree {
            depth: 2,
            n_features: 2,
            filters: vec![vec![0.0; 2]; 3],
            biases: vec![0.0; 3],
            leaves: vec![[0.7, 0.7]; 4],
        };
        assert_eq!(sym.eval(&[0.3, 0.9], true).unwrap(), 0.5);
        assert_eq!(sym.eval(&[0.3, 0.9], false).unwrap(), 0.5);

        let one = SoftTree {
            depth: 1,
            n_features: 2,
            filters: vec![vec![10.0, 0.0]],
            biases: vec![-5.0],
            leaves: vec![[0.0, -2.0], [0.0, 3f64.ln()]],
        };
        assert!((one.right_prob(0, &[1.0, 0.0]) - 0.993_307_149_075_715_2).abs() < 1e-15);
        assert!((one.eval(&[1.0, 0.0], true).unwrap() - 0.75).abs() < 1e-15);
        assert!((leaf_q1([0.0, 3f64.ln()]) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn max_path_tie_goes_left() {
        let t = SoftTree {
            depth: 1,
            n_features: 1,
            filters: vec![vec![0.0]],
            biases: vec![0.0],
            leaves: vec![[1.0, 0.0], [0.0, 1.0]],
        };
        assert_eq!(t.eval(&[0.4], true).unwrap(), leaf_q1([1.0, 0.0]));
    }

    #[test]
    fn univariate_zero_filter_is_half() {
        let t = UnivariateSoftTree {
            depth: 1,
            n_features: 2,
            features: vec![0],
            filter_values: vec![0.0],
            biases: vec![0.0],
            leaves: vec![[0.0, 0.0]; 2],
        };
        for x in [[0.0, 0.0], [1.0, 0.3], [0.2, 0.9]] {
            assert_eq!(t.right_prob(0, &x), 0.5);
        }
    }

    #[test]
    fn dot_export_structure() {
        let dot = TreeModel::StandardDt(stump(0, 0.5, 0.2, 0.9, 1)).to_dot();
        assert_eq!(dot.matches("shape=").count(), 3);
        assert_eq!(dot.matches("->").count(), 2);
        assert!(dot.contains("label=\"true\"") && dot.contains("label=\"false\""));
        assert!(dot.contains("f0 < 0.5000"));

        let soft = TreeModel::StandardSdt(SoftTree {
            depth: 1,
            n_features: 3,
            filters: vec![vec![1.0, -2.0, 0.5]],
            biases: vec![0.25],
            leaves: vec![[0.0, 1.0], [1.0, 0.0]],
        })
        .to_dot();
        assert!(soft.contains("w=[1.0000, -2.0000, 0.5000]\\nb=0.2500"));
    }

    #[test]
    fn json_round_trip() {
        let trees = [
            TreeModel::StandardDt(stump(1, 0.123_456_789, 0.2, 0.9, 2)),
            TreeModel::UnivariateSdt(UnivariateSoftTree {
                depth: 1,
                n_features: 2,
                features: vec![1],
                filter_values: vec![-3.3],
                biases: vec![0.1],
                leaves: vec![[0.0, 1.0 / 3.0], [2.0, 0.0]],
            }),
        ];
        for t in trees {
            let text = export_tree(&t, ExportFormat::Json).unwrap();
            assert!(text.contains("\"format_version\": 1"));
            assert_eq!(TreeModel::from_json(&text).unwrap(), t);
        }
    }

    #[test]
    fn head_activations() {
        let layout = ThetaLayout::new(TreeFamily::StandardDt, 2, 2).unwrap();
        let raw: Vec<f64> = (0..16).map(|i| i as f64 * 0.37 - 2.0).collect();
        let act = layout.activate(&raw).unwrap();
        for block in act[..6].chunks(2) {
            assert!((block.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!(act[6..].iter().all(|v| *v > 0.0 && *v < 1.0));
        assert_eq!(act[6], crate::nn::squeezed_sigmoid(raw[6]));
    }
}
