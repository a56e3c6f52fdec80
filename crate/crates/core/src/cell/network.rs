use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Genotype, GenotypeCell, OperationKind, RetainSpec, StemSpec, SuperCell};
use crate::autograd::{BnMode, BnState, ConvSpec, Graph, PoolSpec, Tensor, Var, BN_EPS};
use crate::binarize::{binarize_weights, ScaleMode};
use crate::error::{Error, Result};
use crate::nasgate::{sample_gates, GateSample};

pub type ParamStore = BTreeMap<String, Tensor>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NetMode {
    /// Supernet: binarized weights and activations, no Relu, sampled gates.
    Search,
    /// `M_p`: real weights, tanh activations.
    Full,
    /// `M_f`: binarized weights and activations outside the exempt layers.
    Binary,
}

/// Which layers stay real-valued in binary and search modes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PrecisionPolicy {
    pub first_conv: bool,
    pub classifier: bool,
    pub downsample: bool,
    pub one_by_one: bool,
    pub scale_mode: ScaleMode,
}

impl Default for PrecisionPolicy {
    fn default() -> Self {
        Self {
            first_conv: true,
            classifier: true,
            downsample: true,
            one_by_one: false,
            scale_mode: ScaleMode::PerFilter,
        }
    }
}

impl PrecisionPolicy {
    pub fn with_one_by_one(mut self) -> Self {
        self.one_by_one = true;
        self
    }

    pub fn all_binary() -> Self {
        Self {
            first_conv: false,
            classifier: false,
            downsample: false,
            one_by_one: false,
            scale_mode: ScaleMode::PerFilter,
        }
    }
}

/// Architecture description stored alongside weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Architecture {
    Supernet(SupernetDesc),
    Genotype(Genotype),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SupernetDesc {
    pub stem: StemSpec,
    pub classes: usize,
    pub cells: Vec<SuperCell>,
}

#[derive(Clone, Debug, PartialEq)]
enum Layer {
    Conv { prefix: String, spec: ConvSpec, binary: bool },
    Bn { prefix: String, channels: usize },
    Linear { prefix: String, out: usize, inp: usize, binary: bool },
}

/// Handle to the gate multiplier of one sampled edge.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GateHandle {
    pub cell: usize,
    pub edge: usize,
    pub active: usize,
    pub var: Var,
}

/// Result of one forward pass: the tape, logits and parameter leaves.
pub struct ForwardPass {
    pub graph: Graph,
    pub logits: Var,
    pub params: BTreeMap<String, Var>,
    pub gates: Vec<GateHandle>,
}

/// A supernet or an instantiated genotype with its parameters and BN buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    arch: Architecture,
    mode: NetMode,
    policy: PrecisionPolicy,
    pub params: ParamStore,
    pub bn: BTreeMap<String, BnState>,
    binary: BTreeSet<String>,
}

fn conv_prefix_weight(prefix: &str) -> String {
    format!("{prefix}.weight")
}

impl Network {
    /// Builds the search model from supercells.
    pub fn supernet(desc: SupernetDesc, policy: PrecisionPolicy, seed: u64) -> Result<Self> {
        if desc.classes < 2 {
            return Err(Error::invalid("at least two classes required"));
        }
        let mut width = desc.stem.channels;
        for (c, cell) in desc.cells.iter().enumerate() {
            cell.plan.validate()?;
            if cell.plan.channels[0] != width {
                return Err(Error::invalid(format!(
                    "supercell {c}: input width {} does not match preceding width {width}",
                    cell.plan.channels[0]
                )));
            }
            if cell.edges.len() != cell.n_nodes() * (cell.n_nodes() - 1) / 2
                || cell.edges.iter().any(|e| e.arch.m() != cell.candidates.len())
            {
                return Err(Error::invalid(format!("supercell {c}: edge table is inconsistent")));
            }
            width = cell.plan.out_channels();
        }
        Self::build(Architecture::Supernet(desc), NetMode::Search, policy, seed)
    }

    /// Instantiates a derived genotype as `M_p` (full) or `M_f` (binary).
    pub fn instantiate(genotype: &Genotype, mode: NetMode, policy: PrecisionPolicy, seed: u64) -> Result<Self> {
        if mode == NetMode::Search {
            return Err(Error::invalid("genotypes instantiate in full or binary mode"));
        }
        genotype.validate()?;
        Self::build(Architecture::Genotype(genotype.clone()), mode, policy, seed)
    }

    pub fn from_architecture(arch: Architecture, mode: NetMode, policy: PrecisionPolicy, seed: u64) -> Result<Self> {
        match arch {
            Architecture::Supernet(d) => Self::supernet(d, policy, seed),
            Architecture::Genotype(g) => Self::instantiate(&g, mode, policy, seed),
        }
    }

    fn build(arch: Architecture, mode: NetMode, policy: PrecisionPolicy, seed: u64) -> Result<Self> {
        let mut net = Self {
            arch,
            mode,
            policy,
            params: ParamStore::new(),
            bn: BTreeMap::new(),
            binary: BTreeSet::new(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in net.layers() {
            match layer {
                Layer::Conv { prefix, spec, binary } => {
                    let fan_in = (spec.c_in * spec.kernel_h * spec.kernel_w) as f64;
                    let w = Tensor::randn(&spec.weight_shape(), (2.0 / fan_in).sqrt(), &mut rng);
                    let name = conv_prefix_weight(&prefix);
                    if binary {
                        net.binary.insert(name.clone());
                    }
                    net.params.insert(name, w);
                }
                Layer::Bn { prefix, channels } => {
                    net.params.insert(format!("{prefix}.gamma"), Tensor::ones(&[channels]));
                    net.params.insert(format!("{prefix}.beta"), Tensor::zeros(&[channels]));
                    net.bn.insert(prefix, BnState::new(channels));
                }
                Layer::Linear { prefix, out, inp, binary } => {
                    let w = Tensor::randn(&[out, inp], (1.0 / inp as f64).sqrt(), &mut rng);
                    let name = conv_prefix_weight(&prefix);
                    if binary {
                        net.binary.insert(name.clone());
                    }
                    net.params.insert(name, w);
                }
            }
        }
        Ok(net)
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn genotype(&self) -> Option<&Genotype> {
        match &self.arch {
            Architecture::Genotype(g) => Some(g),
            Architecture::Supernet(_) => None,
        }
    }

    pub fn mode(&self) -> NetMode {
        self.mode
    }

    pub fn policy(&self) -> PrecisionPolicy {
        self.policy
    }

    pub fn stem(&self) -> StemSpec {
        match &self.arch {
            Architecture::Supernet(d) => d.stem,
            Architecture::Genotype(g) => g.stem,
        }
    }

    pub fn classes(&self) -> usize {
        match &self.arch {
            Architecture::Supernet(d) => d.classes,
            Architecture::Genotype(g) => g.classes,
        }
    }

    /// Names of weight tensors that are binarized in the forward pass.
    pub fn binary_weights(&self) -> &BTreeSet<String> {
        &self.binary
    }

    pub fn supercells(&self) -> &[SuperCell] {
        match &self.arch {
            Architecture::Supernet(d) => &d.cells,
            Architecture::Genotype(_) => &[],
        }
    }

    pub fn supercells_mut(&mut self) -> &mut [SuperCell] {
        match &mut self.arch {
            Architecture::Supernet(d) => &mut d.cells,
            Architecture::Genotype(_) => &mut [],
        }
    }

    /// Conv layers in the path of the cell stack: stem, backbone, projection
    /// and every operation that owns weights, then the classifier.
    fn layers(&self) -> Vec<Layer> {
        let mode = self.mode;
        let pol = self.policy;
        let bin = |exempt: bool| mode != NetMode::Full && !exempt;
        let one = |spec: &ConvSpec| pol.one_by_one && spec.kernel_h == 1 && spec.kernel_w == 1;
        let mut out = Vec::new();
        let conv = |out: &mut Vec<Layer>, prefix: String, spec: ConvSpec, binary: bool| {
            out.push(Layer::Conv {
                prefix: prefix.clone(),
                spec,
                binary,
            });
            out.push(Layer::Bn {
                prefix: format!("{prefix}.bn"),
                channels: spec.c_out,
            });
        };
        let stem = self.stem();
        conv(&mut out, "stem".into(), stem.conv_spec(), bin(pol.first_conv));
        let mut width = stem.channels;
        let plans: Vec<_> = match &self.arch {
            Architecture::Supernet(d) => d.cells.iter().map(|c| c.plan.clone()).collect(),
            Architecture::Genotype(g) => g.cells.iter().map(|c| c.plan()).collect(),
        };
        for (c, plan) in plans.iter().enumerate() {
            for j in 1..plan.n_nodes() {
                let spec = plan.backbone_spec(j);
                conv(&mut out, format!("cells.{c}.backbone.{j}"), spec, bin(one(&spec)));
            }
            match &self.arch {
                Architecture::Supernet(d) => {
                    let cell = &d.cells[c];
                    for edge in &cell.edges {
                        for &kind in &cell.candidates {
                            let prefix = edge_prefix(c, edge.src, edge.dst, kind);
                            op_layers(&mut out, &prefix, kind, plan, edge.src, edge.dst, &bin, &one, &conv);
                        }
                    }
                }
                Architecture::Genotype(g) => {
                    for (k, node) in g.cells[c].nodes.iter().enumerate() {
                        let j = k + 1;
                        for (r, op) in node.ops.iter().enumerate() {
                            let prefix = node_op_prefix(c, j, r, op.kind);
                            op_layers(&mut out, &prefix, op.kind, plan, op.src, j, &bin, &one, &conv);
                        }
                    }
                }
            }
            if plan.needs_projection() {
                conv(&mut out, format!("cells.{c}.proj"), plan.projection_spec(), bin(pol.downsample));
            }
            width = plan.out_channels();
        }
        out.push(Layer::Linear {
            prefix: "fc".into(),
            out: self.classes(),
            inp: width,
            binary: bin(pol.classifier),
        });
        out
    }

    /// Draws one gate per edge of every supercell.
    pub fn sample_gates<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Vec<Vec<GateSample>>> {
        self.supercells()
            .iter()
            .map(|cell| {
                cell.edges
                    .iter()
                    .map(|e| sample_gates(&e.arch.path_weights(), rng))
                    .collect()
            })
            .collect()
    }

    /// Builds the tape for input `x[N, C, H, W]`. Supernets require one gate
    /// per edge; derived networks ignore `gates`.
    pub fn forward(&mut self, x: &Tensor, gates: Option<&[Vec<GateSample>]>, bn_mode: BnMode) -> Result<ForwardPass> {
        let (_, c, _, _) = x.dims4()?;
        let stem = self.stem();
        if c != stem.in_channels {
            return Err(Error::ShapeMismatch {
                context: "network input",
                dim: "channels",
                expected: stem.in_channels,
                actual: c,
            });
        }
        if let Architecture::Supernet(d) = &self.arch {
            let gates = gates.ok_or_else(|| Error::invalid("supernet forward needs gate samples"))?;
            if gates.len() != d.cells.len()
                || gates.iter().zip(&d.cells).any(|(g, cell)| g.len() != cell.edges.len())
            {
                return Err(Error::invalid("one gate sample per supercell edge required"));
            }
        }
        let mut ctx = Ctx {
            graph: Graph::new(),
            params: &self.params,
            bn: &mut self.bn,
            binary: &self.binary,
            vars: BTreeMap::new(),
            bn_mode,
            mode: self.mode,
            scale_mode: self.policy.scale_mode,
            gates: Vec::new(),
        };
        let input = ctx.graph.constant(x.clone());
        let mut h = ctx.conv_unit(input, "stem", stem.conv_spec(), false)?;
        if stem.pool {
            h = ctx.graph.max_pool(h, PoolSpec::new(2, 1))?;
        }
        match &self.arch {
            Architecture::Supernet(d) => {
                let gates = gates.expect("checked above");
                for (c, cell) in d.cells.iter().enumerate() {
                    h = ctx.supercell(c, cell, &gates[c], h)?;
                }
            }
            Architecture::Genotype(g) => {
                let branches = RetainSpec::for_variant(g.variant).branches;
                for (stage, cells) in g.cells.chunks(branches).enumerate() {
                    let mut acc: Option<Var> = None;
                    for (b, cell) in cells.iter().enumerate() {
                        let y = ctx.derived_cell(stage * branches + b, cell, h)?;
                        acc = Some(match acc {
                            None => y,
                            Some(a) => ctx.graph.add(a, y)?,
                        });
                    }
                    h = acc.expect("non-empty stage");
                }
            }
        }
        let pooled = ctx.graph.global_avg_pool(h)?;
        let w = ctx.weight("fc")?;
        let logits = ctx.graph.linear(pooled, w)?;
        Ok(ForwardPass {
            graph: ctx.graph,
            logits,
            params: ctx.vars,
            gates: ctx.gates,
        })
    }

    /// Eval-mode logits `[N, classes]` (derived networks only).
    pub fn predict(&mut self, x: &Tensor) -> Result<Tensor> {
        let pass = self.forward(x, None, BnMode::Eval)?;
        Ok(pass.graph.value(pass.logits).clone())
    }

    /// Effective forward weight of a named conv or linear layer.
    pub fn effective_weight(&self, name: &str) -> Result<Tensor> {
        let w = self
            .params
            .get(name)
            .ok_or_else(|| Error::invalid(format!("no parameter `{name}`")))?;
        if self.binary.contains(name) {
            Ok(binarize_weights(w, self.policy.scale_mode)?.effective())
        } else {
            Ok(w.clone())
        }
    }

    /// Layer depth along the backbone: stem, backbone convs, classifier.
    pub fn backbone_depth(&self) -> usize {
        let cells: usize = match &self.arch {
            Architecture::Supernet(d) => d.cells.iter().map(|c| c.n_nodes() - 1).sum(),
            Architecture::Genotype(g) => {
                let b = RetainSpec::for_variant(g.variant).branches;
                g.cells.iter().step_by(b).map(|c| c.n_nodes - 1).sum()
            }
        };
        cells + 2
    }

    /// Copies parameters and BN statistics with matching names and shapes;
    /// every tensor of `self` must be covered.
    pub fn load_state(&mut self, params: &ParamStore, bn: &BTreeMap<String, BnState>) -> Result<()> {
        for (name, t) in &mut self.params {
            let src = params
                .get(name)
                .ok_or_else(|| Error::ArchitectureMismatch(format!("missing tensor `{name}`")))?;
            if src.shape() != t.shape() {
                return Err(Error::ArchitectureMismatch(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    src.shape(),
                    t.shape()
                )));
            }
            *t = src.clone();
        }
        for (name, s) in &mut self.bn {
            let src = bn
                .get(name)
                .ok_or_else(|| Error::ArchitectureMismatch(format!("missing BN statistics `{name}`")))?;
            if src.channels() != s.channels() {
                return Err(Error::ArchitectureMismatch(format!("BN `{name}` width differs")));
            }
            *s = src.clone();
        }
        Ok(())
    }
}

fn edge_prefix(c: usize, i: usize, j: usize, kind: OperationKind) -> String {
    format!("cells.{c}.edge.{i}.{j}.{kind}")
}

fn node_op_prefix(c: usize, j: usize, r: usize, kind: OperationKind) -> String {
    format!("cells.{c}.node.{j}.op.{r}.{kind}")
}

#[allow(clippy::too_many_arguments)]
fn op_layers(
    out: &mut Vec<Layer>,
    prefix: &str,
    kind: OperationKind,
    plan: &super::CellPlan,
    src: usize,
    dst: usize,
    bin: &dyn Fn(bool) -> bool,
    one: &dyn Fn(&ConvSpec) -> bool,
    conv: &dyn Fn(&mut Vec<Layer>, String, ConvSpec, bool),
) {
    if let Some(spec) = plan.op_conv_spec(kind, src, dst) {
        conv(out, prefix.to_string(), spec, bin(one(&spec)));
    } else if kind.is_pool() {
        out.push(Layer::Bn {
            prefix: format!("{prefix}.bn"),
            channels: plan.channels[dst],
        });
    }
}

struct Ctx<'a> {
    graph: Graph,
    params: &'a ParamStore,
    bn: &'a mut BTreeMap<String, BnState>,
    binary: &'a BTreeSet<String>,
    vars: BTreeMap<String, Var>,
    bn_mode: BnMode,
    mode: NetMode,
    scale_mode: ScaleMode,
    gates: Vec<GateHandle>,
}

impl Ctx<'_> {
    fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.vars.get(name) {
            return Ok(v);
        }
        let t = self
            .params
            .get(name)
            .ok_or_else(|| Error::ArchitectureMismatch(format!("missing parameter `{name}`")))?;
        let v = self.graph.param(t.clone());
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    /// Weight leaf of `prefix`, binarized when the layer is binary.
    fn weight(&mut self, prefix: &str) -> Result<Var> {
        let name = conv_prefix_weight(prefix);
        let w = self.param(&name)?;
        if self.binary.contains(&name) {
            self.graph.binarize_weight(w, self.scale_mode)
        } else {
            Ok(w)
        }
    }

    fn batch_norm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let gamma = self.param(&format!("{prefix}.gamma"))?;
        let beta = self.param(&format!("{prefix}.beta"))?;
        let state = self
            .bn
            .get_mut(prefix)
            .ok_or_else(|| Error::ArchitectureMismatch(format!("missing BN statistics `{prefix}`")))?;
        self.graph.batch_norm(x, gamma, beta, state, self.bn_mode, BN_EPS)
    }

    /// `act(x) → conv → relu → BN`; `act` is sign for binary layers and tanh
    /// otherwise; Relu is dropped in search mode.
    fn conv_unit(&mut self, x: Var, prefix: &str, spec: ConvSpec, input_act: bool) -> Result<Var> {
        let binary = self.binary.contains(&conv_prefix_weight(prefix));
        let a = match (input_act, binary) {
            (false, _) => x,
            (true, true) => self.graph.sign_ste(x),
            (true, false) => self.graph.tanh(x),
        };
        let w = self.weight(prefix)?;
        let mut y = self.graph.conv2d(a, w, spec)?;
        if self.mode != NetMode::Search {
            y = self.graph.relu(y);
        }
        self.batch_norm(y, &format!("{prefix}.bn"))
    }

    /// Output of one operation on edge `(src, dst)`; `None` for Zero.
    fn operation(
        &mut self,
        x: Var,
        prefix: &str,
        kind: OperationKind,
        plan: &super::CellPlan,
        src: usize,
        dst: usize,
    ) -> Result<Option<Var>> {
        let stride = plan.stride_between(src, dst);
        let c_out = plan.channels[dst];
        let y = match kind {
            OperationKind::Zero => return Ok(None),
            OperationKind::Identity => self.graph.adapt(x, stride, c_out)?,
            OperationKind::MaxPool3 | OperationKind::AvgPool3 => {
                let spec = PoolSpec::new(stride, 1);
                let p = if kind == OperationKind::MaxPool3 {
                    self.graph.max_pool(x, spec)?
                } else {
                    self.graph.avg_pool(x, spec)?
                };
                let p = self.graph.adapt(p, 1, c_out)?;
                self.batch_norm(p, &format!("{prefix}.bn"))?
            }
            _ => {
                let spec = plan.op_conv_spec(kind, src, dst).expect("conv kind");
                self.conv_unit(x, prefix, spec, true)?
            }
        };
        Ok(Some(y))
    }

    fn projection(&mut self, c: usize, plan: &super::CellPlan, input: Var, out: Var) -> Result<Var> {
        if !plan.needs_projection() {
            return Ok(out);
        }
        let p = self.conv_unit(input, &format!("cells.{c}.proj"), plan.projection_spec(), true)?;
        self.graph.add(out, p)
    }

    fn supercell(&mut self, c: usize, cell: &SuperCell, gates: &[GateSample], x: Var) -> Result<Var> {
        let plan = &cell.plan;
        let mut nodes = vec![x];
        for j in 1..plan.n_nodes() {
            let mut h = self.conv_unit(nodes[j - 1], &format!("cells.{c}.backbone.{j}"), plan.backbone_spec(j), true)?;
            for i in 0..j {
                let e = SuperCell::edge_index(i, j);
                let active = gates[e].active();
                let kind = cell.candidates[active];
                let prefix = edge_prefix(c, i, j, kind);
                if let Some(y) = self.operation(nodes[i], &prefix, kind, plan, i, j)? {
                    let g = self.graph.param(Tensor::scalar(1.0));
                    self.gates.push(GateHandle {
                        cell: c,
                        edge: e,
                        active,
                        var: g,
                    });
                    let y = self.graph.mul_scalar(y, g)?;
                    h = self.graph.add(h, y)?;
                }
            }
            nodes.push(h);
        }
        self.projection(c, plan, x, nodes[plan.n_nodes() - 1])
    }

    fn derived_cell(&mut self, c: usize, cell: &GenotypeCell, x: Var) -> Result<Var> {
        let plan = cell.plan();
        let mut nodes = vec![x];
        for (k, node) in cell.nodes.iter().enumerate() {
            let j = k + 1;
            let mut h = self.conv_unit(nodes[j - 1], &format!("cells.{c}.backbone.{j}"), plan.backbone_spec(j), true)?;
            for (r, op) in node.ops.iter().enumerate() {
                let prefix = node_op_prefix(c, j, r, op.kind);
                if let Some(y) = self.operation(nodes[op.src], &prefix, op.kind, &plan, op.src, j)? {
                    h = self.graph.add(h, y)?;
                }
            }
            nodes.push(h);
        }
        self.projection(c, &plan, x, nodes[plan.n_nodes() - 1])
    }
}

