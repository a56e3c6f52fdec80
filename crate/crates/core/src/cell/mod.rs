//! Search space: the operation set, supercells, genotypes and derivation.

mod network;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use network::{
    Architecture, ForwardPass, GateHandle, NetMode, Network, ParamStore, PrecisionPolicy, SupernetDesc,
};

use crate::autograd::ConvSpec;
use crate::error::{Error, Result};
use crate::nasgate::{path_weights, EdgeArch};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OperationKind {
    Zero,
    AvgPool3,
    MaxPool3,
    Identity,
    Conv1,
    Conv3,
    Conv5,
    DilConv1,
    DilConv3,
    DilConv5,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    Full,
    Binary,
}

impl OperationKind {
    pub const ALL: [OperationKind; 10] = [
        OperationKind::Zero,
        OperationKind::AvgPool3,
        OperationKind::MaxPool3,
        OperationKind::Identity,
        OperationKind::Conv1,
        OperationKind::Conv3,
        OperationKind::Conv5,
        OperationKind::DilConv1,
        OperationKind::DilConv3,
        OperationKind::DilConv5,
    ];

    /// Position in the ten-way operation table (`op0`..`op9`).
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn precision(self) -> Precision {
        if self.kernel().is_some() {
            Precision::Binary
        } else {
            Precision::Full
        }
    }

    /// Kernel extent of convolutional kinds.
    pub fn kernel(self) -> Option<usize> {
        use OperationKind::*;
        match self {
            Conv1 | DilConv1 => Some(1),
            Conv3 | DilConv3 => Some(3),
            Conv5 | DilConv5 => Some(5),
            _ => None,
        }
    }

    pub fn dilation(self) -> usize {
        use OperationKind::*;
        match self {
            DilConv1 | DilConv3 | DilConv5 => 2,
            _ => 1,
        }
    }

    pub fn is_conv(self) -> bool {
        self.kernel().is_some()
    }

    pub fn is_pool(self) -> bool {
        matches!(self, OperationKind::AvgPool3 | OperationKind::MaxPool3)
    }

    pub fn name(self) -> &'static str {
        use OperationKind::*;
        match self {
            Zero => "zero",
            AvgPool3 => "avg_pool_3x3",
            MaxPool3 => "max_pool_3x3",
            Identity => "identity",
            Conv1 => "conv_1x1",
            Conv3 => "conv_3x3",
            Conv5 => "conv_5x5",
            DilConv1 => "dil_conv_1x1",
            DilConv3 => "dil_conv_3x3",
            DilConv5 => "dil_conv_5x5",
        }
    }
}

impl fmt::Display for OperationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OperationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::UnknownOperation(s.to_string()))
    }
}

impl Serialize for OperationKind {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for OperationKind {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Channel and stride plan of one cell: `channels[j]` is the width of node
/// `j`, and backbone layer `j` (producing node `j`) has stride
/// `strides[j-1]` and kernel `kernels[j-1]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellPlan {
    pub channels: Vec<usize>,
    pub strides: Vec<usize>,
    pub kernels: Vec<usize>,
}

impl CellPlan {
    pub fn new(channels: Vec<usize>, strides: Vec<usize>, kernels: Vec<usize>) -> Result<Self> {
        let plan = Self {
            channels,
            strides,
            kernels,
        };
        plan.validate()?;
        Ok(plan)
    }

    /// `n_nodes` nodes of equal width, 3x3 backbone, optional stride 2 on the
    /// first layer.
    pub fn uniform(c_in: usize, c_out: usize, n_nodes: usize, downsample: bool) -> Result<Self> {
        if n_nodes < 2 {
            return Err(Error::invalid(format!("a cell needs at least 2 nodes, got {n_nodes}")));
        }
        let mut channels = vec![c_out; n_nodes];
        channels[0] = c_in;
        let mut strides = vec![1; n_nodes - 1];
        if downsample {
            strides[0] = 2;
        }
        Self::new(channels, strides, vec![3; n_nodes - 1])
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.channels.len();
        if n < 2 {
            return Err(Error::invalid(format!("a cell needs at least 2 nodes, got {n}")));
        }
        if self.strides.len() != n - 1 || self.kernels.len() != n - 1 {
            return Err(Error::invalid(format!(
                "inconsistent cell plan: {n} nodes need {} strides and kernels, got {} and {}",
                n - 1,
                self.strides.len(),
                self.kernels.len()
            )));
        }
        if self.channels.contains(&0) || self.strides.contains(&0) {
            return Err(Error::invalid("cell channels and strides must be positive"));
        }
        if self.kernels.iter().any(|&k| k == 0 || k % 2 == 0) {
            return Err(Error::invalid("backbone kernels must be odd"));
        }
        Ok(())
    }

    pub fn n_nodes(&self) -> usize {
        self.channels.len()
    }

    /// Spatial stride accumulated between node `i` and node `j > i`.
    pub fn stride_between(&self, i: usize, j: usize) -> usize {
        self.strides[i..j].iter().product()
    }

    pub fn total_stride(&self) -> usize {
        self.stride_between(0, self.n_nodes() - 1)
    }

    pub fn out_channels(&self) -> usize {
        *self.channels.last().expect("validated plan")
    }

    /// Whether the cell carries a downsampling projection from node 0.
    pub fn needs_projection(&self) -> bool {
        self.channels[0] != self.out_channels() || self.total_stride() != 1
    }

    /// Backbone layer producing node `j >= 1`.
    pub fn backbone_spec(&self, j: usize) -> ConvSpec {
        ConvSpec::square(self.channels[j - 1], self.channels[j], self.kernels[j - 1], self.strides[j - 1], 1)
    }

    pub fn projection_spec(&self) -> ConvSpec {
        ConvSpec::square(self.channels[0], self.out_channels(), 1, self.total_stride(), 1)
    }

    /// Convolution used by a conv-kind operation on edge `(i, j)`.
    pub fn op_conv_spec(&self, kind: OperationKind, i: usize, j: usize) -> Option<ConvSpec> {
        let k = kind.kernel()?;
        Some(ConvSpec::square(
            self.channels[i],
            self.channels[j],
            k,
            self.stride_between(i, j),
            kind.dilation(),
        ))
    }
}

/// Edge `(src, dst)` of a supercell and its architecture parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuperEdge {
    pub src: usize,
    pub dst: usize,
    pub arch: EdgeArch,
}

/// Backbone chain plus a DAG over all ordered node pairs, every edge
/// carrying the full candidate set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuperCell {
    pub plan: CellPlan,
    pub candidates: Vec<OperationKind>,
    pub edges: Vec<SuperEdge>,
}

impl SuperCell {
    /// All ten operations on every edge, `α = 0`.
    pub fn build(plan: CellPlan) -> Result<Self> {
        Self::with_candidates(plan, OperationKind::ALL.to_vec())
    }

    /// Restricted candidate set (e.g. without 3x3/5x5 convolutions).
    pub fn with_candidates(plan: CellPlan, candidates: Vec<OperationKind>) -> Result<Self> {
        plan.validate()?;
        if candidates.is_empty() {
            return Err(Error::invalid("candidate operation set is empty"));
        }
        let mut sorted = candidates.clone();
        sorted.sort();
        sorted.dedup();
        if sorted != candidates {
            return Err(Error::invalid("candidates must be distinct and in table order"));
        }
        let n = plan.n_nodes();
        let mut edges = Vec::with_capacity(n * (n - 1) / 2);
        for dst in 1..n {
            for src in 0..dst {
                edges.push(SuperEdge {
                    src,
                    dst,
                    arch: EdgeArch::zeros(candidates.len())?,
                });
            }
        }
        Ok(Self {
            plan,
            candidates,
            edges,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.plan.n_nodes()
    }

    /// Index of edge `(src, dst)` in [`SuperCell::edges`].
    pub fn edge_index(src: usize, dst: usize) -> usize {
        dst * (dst - 1) / 2 + src
    }

    pub fn edge(&self, src: usize, dst: usize) -> &SuperEdge {
        &self.edges[Self::edge_index(src, dst)]
    }

    /// Weighted operation instances across all edges.
    pub fn operation_count(&self) -> usize {
        self.edges.len() * self.candidates.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Nasb,
    V1,
    V2,
    V3,
    V4,
    V5,
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "nasb" => Variant::Nasb,
            "v1" | "nasbv1" => Variant::V1,
            "v2" | "nasbv2" => Variant::V2,
            "v3" | "nasbv3" => Variant::V3,
            "v4" | "nasbv4" => Variant::V4,
            "v5" | "nasbv5" => Variant::V5,
            other => return Err(Error::invalid(format!("unknown variant `{other}`"))),
        })
    }
}

/// Derivation rule of a variant.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RetainSpec {
    pub variant: Variant,
    pub ops_per_inner_node: usize,
    pub ops_per_output_node: usize,
    pub exclude_identity: bool,
    pub branches: usize,
}

impl RetainSpec {
    pub fn for_variant(variant: Variant) -> Self {
        let (inner, output, exclude_identity, branches) = match variant {
            Variant::Nasb | Variant::V1 => (1, 1, false, 1),
            Variant::V2 => (1, 4, false, 1),
            Variant::V3 => (1, 1, false, 2),
            Variant::V4 => (4, 4, true, 1),
            Variant::V5 => (6, 8, false, 1),
        };
        Self {
            variant,
            ops_per_inner_node: inner,
            ops_per_output_node: output,
            exclude_identity,
            branches,
        }
    }

    pub fn ops_for(&self, node: usize, n_nodes: usize) -> usize {
        if node == n_nodes - 1 {
            self.ops_per_output_node
        } else {
            self.ops_per_inner_node
        }
    }
}

/// First convolution (and optional max pool) ahead of the cells.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StemSpec {
    pub in_channels: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pool: bool,
}

impl StemSpec {
    pub fn conv_spec(&self) -> ConvSpec {
        ConvSpec::square(self.in_channels, self.channels, self.kernel, self.stride, 1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetainedOp {
    pub src: usize,
    pub kind: OperationKind,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenotypeNode {
    pub pred: usize,
    pub ops: Vec<RetainedOp>,
}

/// One derived cell. `nodes[j-1]` describes node `j`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenotypeCell {
    pub n_nodes: usize,
    pub nodes: Vec<GenotypeNode>,
    pub channels: Vec<usize>,
    pub strides: Vec<usize>,
    pub kernels: Vec<usize>,
}

impl GenotypeCell {
    pub fn plan(&self) -> CellPlan {
        CellPlan {
            channels: self.channels.clone(),
            strides: self.strides.clone(),
            kernels: self.kernels.clone(),
        }
    }

    /// Cell with no searched operations (a plain backbone chain).
    pub fn backbone_only(plan: &CellPlan) -> Self {
        Self::from_plan(plan, |j| GenotypeNode {
            pred: j - 1,
            ops: Vec::new(),
        })
    }

    pub fn from_plan(plan: &CellPlan, node: impl Fn(usize) -> GenotypeNode) -> Self {
        Self {
            n_nodes: plan.n_nodes(),
            nodes: (1..plan.n_nodes()).map(node).collect(),
            channels: plan.channels.clone(),
            strides: plan.strides.clone(),
            kernels: plan.kernels.clone(),
        }
    }

    pub fn ops(&self) -> impl Iterator<Item = (usize, &RetainedOp)> {
        self.nodes
            .iter()
            .enumerate()
            .flat_map(|(k, n)| n.ops.iter().map(move |op| (k + 1, op)))
    }
}

pub const GENOTYPE_VERSION: u32 = 1;

/// The derived discrete architecture.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Genotype {
    pub version: u32,
    pub variant: Variant,
    pub stem: StemSpec,
    pub classes: usize,
    pub cells: Vec<GenotypeCell>,
}

impl Genotype {
    /// Structural validity: shapes agree and every edge points backwards.
    pub fn validate(&self) -> Result<()> {
        if self.version != GENOTYPE_VERSION {
            return Err(Error::Version {
                what: "genotype",
                found: self.version,
                supported: GENOTYPE_VERSION,
            });
        }
        if self.classes < 2 {
            return Err(Error::InvalidGenotype("at least two classes required".into()));
        }
        let branches = RetainSpec::for_variant(self.variant).branches;
        if self.cells.is_empty() || !self.cells.len().is_multiple_of(branches) {
            return Err(Error::InvalidGenotype(format!(
                "{} cells cannot form {branches} branches",
                self.cells.len()
            )));
        }
        let mut width = self.stem.channels;
        for (c, cell) in self.cells.iter().enumerate() {
            let plan = cell.plan();
            plan.validate()
                .map_err(|e| Error::InvalidGenotype(format!("cell {c}: {e}")))?;
            if cell.n_nodes != plan.n_nodes() || cell.nodes.len() != cell.n_nodes - 1 {
                return Err(Error::InvalidGenotype(format!("cell {c}: node count disagrees with plan")));
            }
            if plan.channels[0] != width {
                return Err(Error::InvalidGenotype(format!(
                    "cell {c}: input width {} does not match preceding width {width}",
                    plan.channels[0]
                )));
            }
            for (k, node) in cell.nodes.iter().enumerate() {
                let j = k + 1;
                if node.pred >= j || node.ops.iter().any(|op| op.src >= j) {
                    return Err(Error::InvalidGenotype(format!(
                        "cell {c} node {j}: predecessor must precede the node"
                    )));
                }
            }
            if (c + 1) % branches == 0 {
                width = plan.out_channels();
            }
            if branches > 1 && c % branches != 0 && self.cells[c - 1].plan() != plan {
                return Err(Error::InvalidGenotype(format!("cell {c}: branch plans differ")));
            }
        }
        Ok(())
    }

    /// Checks the retain rule of `spec` on every cell: one predecessor per
    /// node and the per-variant operation counts.
    pub fn check_retain(&self, spec: &RetainSpec) -> Result<()> {
        for (c, cell) in self.cells.iter().enumerate() {
            for (k, node) in cell.nodes.iter().enumerate() {
                let j = k + 1;
                let want = spec.ops_for(j, cell.n_nodes);
                if node.ops.len() != want {
                    return Err(Error::InvalidGenotype(format!(
                        "cell {c} node {j}: {} operations retained, variant requires {want}",
                        node.ops.len()
                    )));
                }
                if node.ops.iter().any(|op| op.src != node.pred) {
                    return Err(Error::InvalidGenotype(format!(
                        "cell {c} node {j}: operations must all come from the single predecessor"
                    )));
                }
                if spec.exclude_identity && node.ops.iter().any(|op| op.kind == OperationKind::Identity) {
                    return Err(Error::InvalidGenotype(format!(
                        "cell {c} node {j}: identity is excluded in this variant"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Pretty JSON with a trailing newline; field order follows the structs.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("genotype serializes");
        s.push('\n');
        s
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let g: Genotype = serde_json::from_str(s)?;
        g.validate()?;
        Ok(g)
    }

    pub fn op_count(&self, kind: OperationKind) -> usize {
        self.cells
            .iter()
            .flat_map(|c| c.ops())
            .filter(|(_, op)| op.kind == kind)
            .count()
    }
}

/// Derives one cell: per node, the predecessor edge holding the strongest
/// single candidate, then the top-K operations on that edge.
///
/// Ties are broken by lower operation index, then by the nearer source node.
pub fn derive_cell(cell: &SuperCell, spec: &RetainSpec) -> Result<GenotypeCell> {
    let n = cell.n_nodes();
    let allowed: Vec<usize> = (0..cell.candidates.len())
        .filter(|&k| !(spec.exclude_identity && cell.candidates[k] == OperationKind::Identity))
        .collect();
    let mut nodes = Vec::with_capacity(n - 1);
    for j in 1..n {
        let want = spec.ops_for(j, n);
        if want > allowed.len() {
            return Err(Error::RetainTooLarge {
                requested: want,
                available: allowed.len(),
            });
        }
        // (p, op index, source) ranked: larger p, smaller op index, larger source
        let mut best: Option<(f64, usize, usize)> = None;
        for i in 0..j {
            let p = path_weights(&cell.edge(i, j).arch.alpha);
            for &k in &allowed {
                let cand = (p[k], cell.candidates[k].index(), i);
                let better = match best {
                    None => true,
                    Some((bp, bk, bi)) => {
                        cand.0 > bp || (cand.0 == bp && (cand.1 < bk || (cand.1 == bk && cand.2 > bi)))
                    }
                };
                if better {
                    best = Some(cand);
                }
            }
        }
        let (_, _, pred) = best.expect("at least one candidate");
        let p = path_weights(&cell.edge(pred, j).arch.alpha);
        let mut ranked = allowed.clone();
        ranked.sort_by(|&a, &b| {
            p[b].partial_cmp(&p[a])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(cell.candidates[a].index().cmp(&cell.candidates[b].index()))
        });
        let ops = ranked[..want]
            .iter()
            .map(|&k| RetainedOp {
                src: pred,
                kind: cell.candidates[k],
            })
            .collect();
        nodes.push(GenotypeNode { pred, ops });
    }
    Ok(GenotypeCell::from_plan(&cell.plan, |j| nodes[j - 1].clone()))
}

/// Derives a genotype from trained supercells.
pub fn derive(cells: &[SuperCell], spec: &RetainSpec, stem: StemSpec, classes: usize) -> Result<Genotype> {
    let cells = cells
        .iter()
        .map(|c| derive_cell(c, spec))
        .collect::<Result<Vec<_>>>()?;
    let g = Genotype {
        version: GENOTYPE_VERSION,
        variant: spec.variant,
        stem,
        classes,
        cells,
    };
    g.validate()?;
    Ok(g)
}
