//! Analytic accounting of bitwise operations, binary parameters, real
//! multiply-accumulates and real parameters.

mod presets;

use serde::{Deserialize, Serialize};

pub use presets::{preset, PRESETS};

use crate::autograd::{ConvSpec, PoolSpec};
use crate::cell::{Genotype, OperationKind, PrecisionPolicy, RetainSpec};
use crate::error::{Error, Result};

/// Per-layer cost: bitwise and real operation counts, binary and real parameter counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCost {
    pub bitwise_ops: u64,
    pub binary_params: u64,
    pub real_ops: u64,
    pub real_params: u64,
}

impl OpCost {
    pub fn add(&mut self, o: &OpCost) {
        self.bitwise_ops += o.bitwise_ops;
        self.binary_params += o.binary_params;
        self.real_ops += o.real_ops;
        self.real_params += o.real_params;
    }
}

/// Cost of `kind` in binary form (pooling at bit width `d`) producing an
/// `out_h × out_w` map with `spec.c_out` channels, one image.
pub fn op_cost(kind: OperationKind, spec: &ConvSpec, out_h: usize, out_w: usize, d: u64) -> Result<OpCost> {
    if d == 0 {
        return Err(Error::invalid("pooling bit width d must be positive"));
    }
    let outputs = (spec.c_out * out_h * out_w) as u64;
    Ok(match kind {
        OperationKind::Zero | OperationKind::Identity => OpCost::default(),
        OperationKind::MaxPool3 => OpCost {
            bitwise_ops: 8 * d * outputs,
            ..OpCost::default()
        },
        OperationKind::AvgPool3 => OpCost {
            bitwise_ops: 16 * d * outputs,
            ..OpCost::default()
        },
        _ => {
            let k = kind.kernel().expect("conv kind") as u64;
            let taps = spec.c_in as u64 * k * k;
            OpCost {
                bitwise_ops: 2 * taps * outputs,
                binary_params: taps * spec.c_out as u64,
                ..OpCost::default()
            }
        }
    })
}

/// Precision assignment used for accounting.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum CostPolicy {
    /// Every layer real-valued.
    Full,
    /// Binary outside the exemptions.
    Binary(PrecisionPolicy),
}

impl CostPolicy {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "full" => Ok(CostPolicy::Full),
            "binary" => Ok(CostPolicy::Binary(PrecisionPolicy::default())),
            "binary-1x1" => Ok(CostPolicy::Binary(PrecisionPolicy::default().with_one_by_one())),
            other => Err(Error::invalid(format!(
                "unknown cost policy `{other}` (expected full, binary or binary-1x1)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostConfig {
    pub input_size: usize,
    /// Bit width of full-precision pooling operands.
    pub d: u64,
    /// Binary work executed per Flop.
    pub divisor: f64,
    /// Bitwise operations per binary multiply-accumulate (XNOR + popcount).
    pub bitwise_per_mac: f64,
}

impl Default for CostConfig {
    fn default() -> Self {
        Self {
            input_size: 224,
            d: 32,
            divisor: 64.0,
            bitwise_per_mac: 2.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerCost {
    pub name: String,
    pub kind: String,
    pub binary: bool,
    pub out_shape: [usize; 3],
    #[serde(flatten)]
    pub cost: OpCost,
    pub flops: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub memory_bits: u64,
    pub memory_saving: f64,
    pub flops: f64,
    pub speedup: f64,
    pub totals: OpCost,
    pub layers: Vec<LayerCost>,
}

impl CostReport {
    pub fn memory_mbit(&self) -> f64 {
        self.memory_bits as f64 / 1e6
    }
}

struct Acc<'a> {
    cfg: &'a CostConfig,
    policy: CostPolicy,
    layers: Vec<LayerCost>,
}

impl Acc<'_> {
    fn binary(&self, exempt: impl Fn(&PrecisionPolicy) -> bool) -> bool {
        match self.policy {
            CostPolicy::Full => false,
            CostPolicy::Binary(p) => !exempt(&p),
        }
    }

    fn push(&mut self, name: String, kind: &str, binary: bool, out_shape: [usize; 3], cost: OpCost, flops: f64) {
        self.layers.push(LayerCost {
            name,
            kind: kind.into(),
            binary,
            out_shape,
            cost,
            flops,
        });
    }

    /// Conv layer followed by its BN; binary layers add `C_out` scales.
    fn conv(&mut self, name: String, spec: ConvSpec, h: usize, w: usize, binary: bool) -> Result<(usize, usize)> {
        let (oh, ow) = spec.output_hw(h, w)?;
        let taps = (spec.c_in * spec.kernel_h * spec.kernel_w) as u64;
        let outputs = (spec.c_out * oh * ow) as u64;
        let shape = [spec.c_out, oh, ow];
        if binary {
            let c = OpCost {
                bitwise_ops: (self.cfg.bitwise_per_mac * (taps * outputs) as f64) as u64,
                binary_params: taps * spec.c_out as u64,
                real_ops: 0,
                real_params: spec.c_out as u64,
            };
            let flops = c.bitwise_ops as f64 / self.cfg.bitwise_per_mac / self.cfg.divisor;
            self.push(name.clone(), "binary_conv", true, shape, c, flops);
        } else {
            let c = OpCost {
                real_ops: taps * outputs,
                real_params: taps * spec.c_out as u64,
                ..OpCost::default()
            };
            self.push(name.clone(), "conv", false, shape, c, c.real_ops as f64);
        }
        self.bn(format!("{name}.bn"), shape);
        Ok((oh, ow))
    }

    fn bn(&mut self, name: String, shape: [usize; 3]) {
        let c = OpCost {
            real_params: 2 * shape[0] as u64,
            ..OpCost::default()
        };
        self.push(name, "bn", false, shape, c, 0.0);
    }

    fn pool(&mut self, name: String, kind: OperationKind, channels: usize, oh: usize, ow: usize) -> Result<()> {
        let spec = ConvSpec::square(channels, channels, 3, 1, 1);
        let c = op_cost(kind, &spec, oh, ow, self.cfg.d)?;
        let flops = c.bitwise_ops as f64 / self.cfg.divisor;
        self.push(name, kind.name(), false, [channels, oh, ow], c, flops);
        Ok(())
    }
}

fn is_one_by_one(spec: &ConvSpec) -> bool {
    spec.kernel_h == 1 && spec.kernel_w == 1
}

fn layer_costs(g: &Genotype, policy: CostPolicy, cfg: &CostConfig) -> Result<Vec<LayerCost>> {
    g.validate()?;
    if cfg.input_size == 0 || cfg.divisor <= 0.0 || cfg.bitwise_per_mac <= 0.0 {
        return Err(Error::invalid("input size, divisor and bitwise-per-MAC must be positive"));
    }
    let mut acc = Acc {
        cfg,
        policy,
        layers: Vec::new(),
    };
    let stem_bin = acc.binary(|p| p.first_conv);
    let (mut h, mut w) = acc.conv("stem".into(), g.stem.conv_spec(), cfg.input_size, cfg.input_size, stem_bin)?;
    if g.stem.pool {
        let (oh, ow) = PoolSpec::new(2, 1).output_hw(h, w)?;
        acc.pool("stem.pool".into(), OperationKind::MaxPool3, g.stem.channels, oh, ow)?;
        (h, w) = (oh, ow);
    }
    let branches = RetainSpec::for_variant(g.variant).branches;
    let mut width = g.stem.channels;
    for (si, stage) in g.cells.chunks(branches).enumerate() {
        let (mut out_h, mut out_w) = (h, w);
        for (b, cell) in stage.iter().enumerate() {
            let c = si * branches + b;
            let plan = cell.plan();
            let mut dims = vec![(h, w)];
            for j in 1..plan.n_nodes() {
                let spec = plan.backbone_spec(j);
                let bin = acc.binary(|p| p.one_by_one && is_one_by_one(&spec));
                let (ph, pw) = dims[j - 1];
                dims.push(acc.conv(format!("cells.{c}.backbone.{j}"), spec, ph, pw, bin)?);
            }
            for (j, op) in cell.ops() {
                let name = format!("cells.{c}.node.{j}.{}.from{}", op.kind, op.src);
                let (sh, sw) = dims[op.src];
                if let Some(spec) = plan.op_conv_spec(op.kind, op.src, j) {
                    let bin = acc.binary(|p| p.one_by_one && is_one_by_one(&spec));
                    acc.conv(name, spec, sh, sw, bin)?;
                } else if op.kind.is_pool() {
                    let (oh, ow) = PoolSpec::new(plan.stride_between(op.src, j), 1).output_hw(sh, sw)?;
                    acc.pool(name.clone(), op.kind, plan.channels[j], oh, ow)?;
                    acc.bn(format!("{name}.bn"), [plan.channels[j], oh, ow]);
                }
            }
            if plan.needs_projection() {
                let bin = acc.binary(|p| p.downsample);
                acc.conv(format!("cells.{c}.proj"), plan.projection_spec(), h, w, bin)?;
            }
            (out_h, out_w) = dims[plan.n_nodes() - 1];
            width = plan.out_channels();
        }
        (h, w) = (out_h, out_w);
    }
    let fc_bin = acc.binary(|p| p.classifier);
    let taps = (width * g.classes) as u64;
    let fc = if fc_bin {
        OpCost {
            bitwise_ops: (cfg.bitwise_per_mac * taps as f64) as u64,
            binary_params: taps,
            real_params: g.classes as u64,
            real_ops: 0,
        }
    } else {
        OpCost {
            real_ops: taps,
            real_params: taps,
            ..OpCost::default()
        }
    };
    let flops = fc.real_ops as f64 + fc.bitwise_ops as f64 / cfg.bitwise_per_mac / cfg.divisor;
    acc.push("fc".into(), "linear", fc_bin, [g.classes, 1, 1], fc, flops);
    Ok(acc.layers)
}

/// Genotype stripped of every searched operation.
pub fn backbone_reference(g: &Genotype) -> Genotype {
    let mut r = g.clone();
    for cell in &mut r.cells {
        for node in &mut cell.nodes {
            node.ops.clear();
        }
    }
    r
}

/// Totals, memory and Flops of `g`; saving and speedup are measured against
/// the all-real backbone of the same genotype.
pub fn model_cost(g: &Genotype, policy: CostPolicy, cfg: &CostConfig) -> Result<CostReport> {
    let layers = layer_costs(g, policy, cfg)?;
    let (totals, memory_bits, flops) = summarize(&layers);
    let reference = layer_costs(&backbone_reference(g), CostPolicy::Full, cfg)?;
    let (_, ref_bits, ref_flops) = summarize(&reference);
    Ok(CostReport {
        memory_bits,
        memory_saving: ref_bits as f64 / memory_bits as f64,
        flops,
        speedup: ref_flops / flops,
        totals,
        layers,
    })
}

fn summarize(layers: &[LayerCost]) -> (OpCost, u64, f64) {
    let mut totals = OpCost::default();
    let mut flops = 0.0;
    for l in layers {
        totals.add(&l.cost);
        flops += l.flops;
    }
    (totals, 32 * totals.real_params + totals.binary_params, flops)
}
