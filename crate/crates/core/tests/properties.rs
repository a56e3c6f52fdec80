mod common;

use common::rng;
use nasb::autograd::kernels::conv2d_forward;
use nasb::autograd::{BnMode, ConvSpec, Graph, PoolSpec, Tensor, Var};
use nasb::binarize::{binarize_weights, sign, PackedBitTensor, ScaleMode};
use nasb::cell::{
    derive, CellPlan, Genotype, GenotypeCell, GenotypeNode, NetMode, Network, OperationKind, PrecisionPolicy,
    RetainSpec, RetainedOp, StemSpec, SuperCell, SupernetDesc, Variant, GENOTYPE_VERSION,
};
use nasb::costmodel::{model_cost, op_cost, CostConfig, CostPolicy};
use nasb::io::{gen_synthetic, Difficulty, SynthSpec};
use nasb::nasgate::{path_weights, EdgeArch, GateSample};
use nasb::trainer::{binarize_pretrained, finetune_stage, pretrain_stage, search_stage, TrainConfig};
use proptest::prelude::*;
use rand::Rng;

fn stem(channels: usize) -> StemSpec {
    StemSpec {
        in_channels: 2,
        channels,
        kernel: 3,
        stride: 1,
        pool: false,
    }
}

fn kind_strategy() -> impl Strategy<Value = OperationKind> {
    (0usize..10).prop_map(|i| OperationKind::from_index(i).unwrap())
}

/// Random single-cell genotype: one to three ops per node from random sources.
fn genotype_strategy() -> impl Strategy<Value = Genotype> {
    (2usize..5, 2usize..5, 2usize..7, any::<bool>(), proptest::collection::vec((any::<u8>(), kind_strategy()), 12)).prop_map(
        |(c_in, c_out, n, down, picks)| {
            let plan = CellPlan::uniform(c_in, c_out, n, down).unwrap();
            let cell = GenotypeCell::from_plan(&plan, |j| {
                let take = 1 + (picks[j].0 as usize % 3);
                let src = picks[j].0 as usize % j;
                GenotypeNode {
                    pred: src,
                    ops: (0..take).map(|t| RetainedOp { src: (src + t) % j, kind: picks[(j + 3 * t) % 12].1 }).collect(),
                }
            });
            Genotype {
                version: GENOTYPE_VERSION,
                variant: Variant::V5,
                stem: stem(c_in),
                classes: 3,
                cells: vec![cell],
            }
        },
    )
}

struct Oracle<'a> {
    g: Graph,
    net: &'a Network,
}

impl Oracle<'_> {
    fn leaf(&mut self, name: &str) -> Var {
        self.g.constant(self.net.params[name].clone())
    }

    fn bn(&mut self, x: Var, prefix: &str) -> Var {
        let gamma = self.leaf(&format!("{prefix}.gamma"));
        let beta = self.leaf(&format!("{prefix}.beta"));
        let mut state = self.net.bn[prefix].clone();
        self.g.batch_norm(x, gamma, beta, &mut state, BnMode::Eval, 1e-5).unwrap()
    }

    fn unit(&mut self, x: Var, prefix: &str, spec: ConvSpec, act: bool) -> Var {
        let a = if act { self.g.tanh(x) } else { x };
        let w = self.leaf(&format!("{prefix}.weight"));
        let y = self.g.conv2d(a, w, spec).unwrap();
        let y = self.g.relu(y);
        self.bn(y, &format!("{prefix}.bn"))
    }
}

/// Full-precision eval forward of a single-cell genotype composed by hand.
fn oracle_logits(net: &Network, g: &Genotype, x: &Tensor) -> Tensor {
    let mut o = Oracle { g: Graph::new(), net };
    let input = o.g.constant(x.clone());
    let s = g.stem;
    let h = o.unit(input, "stem", ConvSpec::square(s.in_channels, s.channels, s.kernel, s.stride, 1), false);
    let cell = &g.cells[0];
    let ch = &cell.channels;
    let stride = |i: usize, j: usize| cell.strides[i..j].iter().product::<usize>();
    let mut nodes = vec![h];
    for j in 1..cell.n_nodes {
        let spec = ConvSpec::square(ch[j - 1], ch[j], cell.kernels[j - 1], cell.strides[j - 1], 1);
        let mut acc = o.unit(nodes[j - 1], &format!("cells.0.backbone.{j}"), spec, true);
        for (r, op) in cell.nodes[j - 1].ops.iter().enumerate() {
            let prefix = format!("cells.0.node.{j}.op.{r}.{}", op.kind);
            let src = nodes[op.src];
            let st = stride(op.src, j);
            let y = match op.kind {
                OperationKind::Zero => continue,
                OperationKind::Identity => o.g.adapt(src, st, ch[j]).unwrap(),
                OperationKind::MaxPool3 | OperationKind::AvgPool3 => {
                    let p = if op.kind == OperationKind::MaxPool3 {
                        o.g.max_pool(src, PoolSpec::new(st, 1))
                    } else {
                        o.g.avg_pool(src, PoolSpec::new(st, 1))
                    }
                    .unwrap();
                    let p = o.g.adapt(p, 1, ch[j]).unwrap();
                    o.bn(p, &format!("{prefix}.bn"))
                }
                k => {
                    let spec = ConvSpec::square(ch[op.src], ch[j], k.kernel().unwrap(), st, k.dilation());
                    o.unit(src, &prefix, spec, true)
                }
            };
            acc = o.g.add(acc, y).unwrap();
        }
        nodes.push(acc);
    }
    let mut out = *nodes.last().unwrap();
    if ch[0] != *ch.last().unwrap() || stride(0, cell.n_nodes - 1) != 1 {
        let spec = ConvSpec::square(ch[0], *ch.last().unwrap(), 1, stride(0, cell.n_nodes - 1), 1);
        let p = o.unit(nodes[0], "cells.0.proj", spec, true);
        out = o.g.add(out, p).unwrap();
    }
    let pooled = o.g.global_avg_pool(out).unwrap();
    let w = o.leaf("fc.weight");
    let logits = o.g.linear(pooled, w).unwrap();
    o.g.value(logits).clone()
}

/// Direct six-loop cross-correlation.
fn naive_conv(x: &Tensor, w: &Tensor, s: &ConvSpec) -> Tensor {
    let (n, c, h, wd) = x.dims4().unwrap();
    let (oh, ow) = s.output_hw(h, wd).unwrap();
    let mut out = vec![0.0; n * s.c_out * oh * ow];
    for b in 0..n {
        for o in 0..s.c_out {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        for ky in 0..s.kernel_h {
                            for kx in 0..s.kernel_w {
                                let iy = (y * s.stride + ky * s.dilation) as i64 - s.padding as i64;
                                let ix = (xx * s.stride + kx * s.dilation) as i64 - s.padding as i64;
                                if iy < 0 || ix < 0 || iy >= h as i64 || ix >= wd as i64 {
                                    continue;
                                }
                                acc += x.data()[((b * c + ci) * h + iy as usize) * wd + ix as usize]
                                    * w.data()[((o * c + ci) * s.kernel_h + ky) * s.kernel_w + kx];
                            }
                        }
                    }
                    out[((b * s.c_out + o) * oh + y) * ow + xx] = acc;
                }
            }
        }
    }
    Tensor::new(vec![n, s.c_out, oh, ow], out).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::with_cases(48) })]

    #[test]
    fn conv_matches_direct_sum_and_is_linear(
        seed in any::<u64>(), c in 1usize..4, co in 1usize..4, k in prop::sample::select(vec![1usize, 3, 5]),
        stride in 1usize..3, dil in 1usize..3, size in 5usize..9, a in -2.0f64..2.0, b in -2.0f64..2.0,
    ) {
        let mut r = rng(seed);
        let spec = ConvSpec::square(c, co, k, stride, dil);
        let x = Tensor::randn(&[2, c, size, size], 1.0, &mut r);
        let y = Tensor::randn(&[2, c, size, size], 1.0, &mut r);
        let w = Tensor::randn(&[co, c, k, k], 1.0, &mut r);
        let fx = conv2d_forward(&x, &w, &spec).unwrap();
        prop_assert!(fx.max_abs_diff(&naive_conv(&x, &w, &spec)) < 1e-12);
        let mix = x.zip_map(&y, |u, v| a * u + b * v).unwrap();
        let lhs = conv2d_forward(&mix, &w, &spec).unwrap();
        let fy = conv2d_forward(&y, &w, &spec).unwrap();
        let rhs = fx.zip_map(&fy, |u, v| a * u + b * v).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs) < 1e-10);
    }

    #[test]
    fn pack_round_trip_is_sign(seed in any::<u64>(), n in 1usize..3, c in 1usize..140, h in 1usize..4, w in 1usize..4) {
        let mut x = Tensor::randn(&[n, c, h, w], 1.0, &mut rng(seed));
        x.data_mut()[0] = 0.0;
        prop_assert_eq!(PackedBitTensor::pack(&x).unpack(), x.map(sign));
    }

    #[test]
    fn path_weights_normalized_and_shift_invariant(alpha in proptest::collection::vec(-30.0f64..30.0, 1..12), c in -50.0f64..50.0) {
        let p = path_weights(&alpha);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
        let shifted: Vec<f64> = alpha.iter().map(|a| a + c).collect();
        for (u, v) in p.iter().zip(path_weights(&shifted)) {
            prop_assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn genotype_json_round_trip(g in genotype_strategy()) {
        let json = g.to_json();
        let back = Genotype::from_json(&json).unwrap();
        prop_assert_eq!(&back, &g);
        prop_assert_eq!(back.to_json(), json);
    }

    #[test]
    fn dilation_and_kernel_laws(c in 1usize..300, co in 1usize..300, h in 1usize..60, w in 1usize..60, s in 1usize..3) {
        use OperationKind::*;
        let cost = |k: OperationKind| op_cost(k, &ConvSpec::square(c, co, k.kernel().unwrap(), s, k.dilation()), h, w, 32).unwrap();
        prop_assert_eq!(cost(DilConv1), cost(Conv1));
        prop_assert_eq!(cost(DilConv3), cost(Conv3));
        prop_assert_eq!(cost(DilConv5), cost(Conv5));
        prop_assert_eq!(9 * cost(Conv5).bitwise_ops, 25 * cost(Conv3).bitwise_ops);
        prop_assert_eq!(9 * cost(Conv1).binary_params, cost(Conv3).binary_params);
    }

    #[test]
    fn adding_an_operation_never_lowers_cost(g in genotype_strategy(), j_pick in any::<usize>(), kind in kind_strategy(), full in any::<bool>()) {
        let policy = if full { CostPolicy::Full } else { CostPolicy::Binary(PrecisionPolicy::default()) };
        let cfg = CostConfig { input_size: 16, ..CostConfig::default() };
        let before = model_cost(&g, policy, &cfg).unwrap();
        let mut bigger = g.clone();
        let cell = &mut bigger.cells[0];
        let j = 1 + j_pick % (cell.n_nodes - 1);
        let src = cell.nodes[j - 1].pred;
        cell.nodes[j - 1].ops.push(RetainedOp { src, kind });
        let after = model_cost(&bigger, policy, &cfg).unwrap();
        prop_assert!(after.totals.bitwise_ops >= before.totals.bitwise_ops);
        prop_assert!(after.totals.binary_params >= before.totals.binary_params);
        prop_assert!(after.totals.real_ops >= before.totals.real_ops);
        prop_assert!(after.totals.real_params >= before.totals.real_params);
        prop_assert!(after.memory_bits >= before.memory_bits && after.flops >= before.flops);
    }

    #[test]
    fn all_real_cost_counts_every_parameter(g in genotype_strategy()) {
        let r = model_cost(&g, CostPolicy::Full, &CostConfig { input_size: 16, ..CostConfig::default() }).unwrap();
        prop_assert_eq!(r.totals.binary_params, 0);
        let net = Network::instantiate(&g, NetMode::Full, PrecisionPolicy::default(), 1).unwrap();
        let count: usize = net.params.values().map(Tensor::len).sum();
        prop_assert_eq!(r.memory_bits / 32, count as u64);
        prop_assert_eq!(r.memory_bits % 32, 0);
    }

    #[test]
    fn derived_forward_matches_hand_composition(g in genotype_strategy(), seed in any::<u64>()) {
        let mut net = Network::instantiate(&g, NetMode::Full, PrecisionPolicy::default(), seed).unwrap();
        let x = Tensor::randn(&[2, 2, 6, 6], 1.0, &mut rng(seed ^ 1));
        let expected = oracle_logits(&net, &g, &x);
        prop_assert!(net.predict(&x).unwrap().max_abs_diff(&expected) < 1e-12);
    }

    #[test]
    fn every_op_adapts_shape(kind in kind_strategy(), c_in in 1usize..6, c_out in 1usize..6, down in any::<bool>(), size in 4usize..8) {
        let plan = CellPlan::uniform(c_in, c_out, 3, down).unwrap();
        let cell = SuperCell::build(plan).unwrap();
        let desc = SupernetDesc { stem: stem(c_in), classes: 2, cells: vec![cell] };
        let mut net = Network::supernet(desc, PrecisionPolicy::default(), 5).unwrap();
        let gates: Vec<Vec<GateSample>> = net.supercells().iter().map(|c| {
            c.edges.iter().map(|e| GateSample::fixed(kind.index(), e.arch.path_weights())).collect()
        }).collect();
        let x = Tensor::randn(&[2, 2, size, size], 1.0, &mut rng(size as u64));
        let pass = net.forward(&x, Some(&gates), BnMode::Train).unwrap();
        prop_assert_eq!(pass.graph.value(pass.logits).shape(), &[2, 2]);
        let active = if kind == OperationKind::Zero { 0 } else { 3 };
        prop_assert_eq!(pass.gates.len(), active);
    }
}

fn small_genotype(variant: Variant, seed: u64) -> (Vec<SuperCell>, Genotype) {
    let spec = RetainSpec::for_variant(variant);
    let mut r = rng(seed);
    let plan = CellPlan::uniform(4, 4, 4, false).unwrap();
    let mut cells: Vec<SuperCell> = (0..spec.branches).map(|_| SuperCell::build(plan.clone()).unwrap()).collect();
    for c in &mut cells {
        for e in &mut c.edges {
            e.arch = EdgeArch::from_alpha((0..10).map(|_| r.random_range(-2.0..2.0)).collect()).unwrap();
        }
    }
    let g = derive(&cells, &spec, stem(4), 2).unwrap();
    (cells, g)
}

#[test]
fn all_zero_supernet_equals_backbone_chain() {
    let plan = CellPlan::uniform(3, 4, 3, true).unwrap();
    let desc = SupernetDesc {
        stem: stem(3),
        classes: 2,
        cells: vec![SuperCell::build(plan.clone()).unwrap()],
    };
    let mut sup = Network::supernet(desc, PrecisionPolicy::default(), 9).unwrap();
    let zero: Vec<Vec<GateSample>> = sup
        .supercells()
        .iter()
        .map(|c| c.edges.iter().map(|e| GateSample::fixed(0, e.arch.path_weights())).collect())
        .collect();
    let x = Tensor::randn(&[2, 2, 6, 6], 1.0, &mut rng(2));
    let pass = sup.forward(&x, Some(&zero), BnMode::Eval).unwrap();

    // Hand composition in search mode: no relu, sign in front of binary convs.
    let mut g = Graph::new();
    let bin = sup.binary_weights().clone();
    let params = sup.params.clone();
    let mut bn = sup.bn.clone();
    let mut unit = |g: &mut Graph, x: Var, prefix: &str, spec: ConvSpec, act: bool| {
        let name = format!("{prefix}.weight");
        let binary = bin.contains(&name);
        let a = match (act, binary) {
            (false, _) => x,
            (true, true) => g.sign_ste(x),
            (true, false) => g.tanh(x),
        };
        let mut w = params[&name].clone();
        if binary {
            w = binarize_weights(&w, ScaleMode::PerFilter).unwrap().effective();
        }
        let w = g.constant(w);
        let y = g.conv2d(a, w, spec).unwrap();
        let gamma = g.constant(params[&format!("{prefix}.bn.gamma")].clone());
        let beta = g.constant(params[&format!("{prefix}.bn.beta")].clone());
        g.batch_norm(y, gamma, beta, bn.get_mut(&format!("{prefix}.bn")).unwrap(), BnMode::Eval, 1e-5).unwrap()
    };
    let input = g.constant(x);
    let h0 = unit(&mut g, input, "stem", stem(3).conv_spec(), false);
    let h1 = unit(&mut g, h0, "cells.0.backbone.1", plan.backbone_spec(1), true);
    let h2 = unit(&mut g, h1, "cells.0.backbone.2", plan.backbone_spec(2), true);
    let p = unit(&mut g, h0, "cells.0.proj", plan.projection_spec(), true);
    let out = g.add(h2, p).unwrap();
    let pooled = g.global_avg_pool(out).unwrap();
    let w = g.constant(params["fc.weight"].clone());
    let logits = g.linear(pooled, w).unwrap();
    assert!(pass.graph.value(pass.logits).max_abs_diff(g.value(logits)) < 1e-12);
    assert!(pass.gates.is_empty());
    assert!(bin.contains("cells.0.backbone.1.weight"));
    assert!(!bin.contains("stem.weight") && !bin.contains("fc.weight") && !bin.contains("cells.0.proj.weight"));
}

#[test]
fn binary_mode_keeps_exempt_layers_real() {
    let (_, g) = small_genotype(Variant::V4, 3);
    let net = Network::instantiate(&g, NetMode::Binary, PrecisionPolicy::default(), 4).unwrap();
    for name in net.params.keys().filter(|n| n.ends_with(".weight")) {
        let eff = net.effective_weight(name).unwrap();
        let latent = &net.params[name];
        if name == "stem.weight" || name == "fc.weight" {
            assert!(!net.binary_weights().contains(name));
            assert_eq!(&eff, latent);
        } else {
            assert!(net.binary_weights().contains(name), "{name}");
            let per = latent.len() / latent.shape()[0];
            for o in 0..latent.shape()[0] {
                let rows = &latent.data()[o * per..(o + 1) * per];
                let s = rows.iter().map(|v| v.abs()).sum::<f64>() / per as f64;
                for (e, l) in eff.data()[o * per..(o + 1) * per].iter().zip(rows) {
                    assert_eq!(*e, s * sign(*l));
                }
            }
        }
    }
    let with_1x1 = Network::instantiate(&g, NetMode::Binary, PrecisionPolicy::default().with_one_by_one(), 4).unwrap();
    assert!(with_1x1.binary_weights().iter().all(|n| !n.contains("conv_1x1")));
}

#[test]
fn seeds_fix_initialization_and_depth_is_preserved() {
    for variant in [Variant::Nasb, Variant::V2, Variant::V3, Variant::V4, Variant::V5] {
        let (cells, g) = small_genotype(variant, 8);
        let a = Network::instantiate(&g, NetMode::Full, PrecisionPolicy::default(), 11).unwrap();
        let b = Network::instantiate(&g, NetMode::Full, PrecisionPolicy::default(), 11).unwrap();
        let c = Network::instantiate(&g, NetMode::Full, PrecisionPolicy::default(), 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.params, c.params);
        let sup = Network::supernet(
            SupernetDesc {
                stem: stem(4),
                classes: 2,
                cells: cells[..1].to_vec(),
            },
            PrecisionPolicy::default(),
            1,
        )
        .unwrap();
        assert_eq!(sup.backbone_depth(), a.backbone_depth(), "{variant:?}");
    }
}

fn tiny_data() -> nasb::io::Dataset {
    gen_synthetic(&SynthSpec {
        classes: 2,
        samples: 48,
        size: 8,
        channels: 2,
        difficulty: Difficulty::Easy,
        seed: 2,
    })
    .unwrap()
}

fn tiny_supernet() -> Network {
    let plan = CellPlan::uniform(4, 4, 3, false).unwrap();
    let desc = SupernetDesc {
        stem: stem(4),
        classes: 2,
        cells: vec![SuperCell::build(plan).unwrap()],
    };
    Network::supernet(desc, PrecisionPolicy::default(), 6).unwrap()
}

fn alphas(net: &Network) -> Vec<Vec<f64>> {
    net.supercells().iter().flat_map(|c| c.edges.iter().map(|e| e.arch.alpha.clone())).collect()
}

#[test]
fn search_alternation_contracts() {
    let data = tiny_data();
    let base = TrainConfig {
        epochs: 2,
        batch_size: 12,
        ..TrainConfig::default()
    };
    let init = tiny_supernet();

    let frozen = search_stage(init.clone(), &data, &TrainConfig { update_arch: false, ..base.clone() }, 1, None).unwrap();
    assert_eq!(alphas(&frozen.net), alphas(&init));
    assert_ne!(frozen.net.params, init.params);
    assert!(frozen.log.records.iter().all(|r| r.split == "train"));

    let still = TrainConfig {
        lr: 0.0,
        weight_decay: 0.0,
        ..base.clone()
    };
    let arch_only = search_stage(init.clone(), &data, &still, 1, None).unwrap();
    assert_eq!(arch_only.net.params, init.params);
    assert_ne!(alphas(&arch_only.net), alphas(&init));
    assert_eq!(arch_only.log.alpha.len(), 2);
}

#[test]
fn zero_epochs_return_the_initialization() {
    let (_, g) = small_genotype(Variant::Nasb, 1);
    let data = tiny_data();
    let cfg = TrainConfig {
        epochs: 0,
        ..TrainConfig::default()
    };
    let mp = pretrain_stage(&g, PrecisionPolicy::default(), &data, &cfg, 21, None).unwrap();
    assert_eq!(mp.net, Network::instantiate(&g, NetMode::Full, PrecisionPolicy::default(), 21).unwrap());
    assert!(mp.log.records.is_empty());
}

#[test]
fn finetune_starts_from_and_trains_latent_weights() {
    let (_, g) = small_genotype(Variant::V2, 5);
    let data = tiny_data();
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 12,
        ..TrainConfig::default()
    };
    let mp = pretrain_stage(&g, PrecisionPolicy::default(), &data, &cfg, 2, None).unwrap();
    let start = binarize_pretrained(&mp.net).unwrap();
    assert_eq!(start.params, mp.net.params);
    assert_eq!(start.bn, mp.net.bn);
    let mf = finetune_stage(&mp.net, &data, &cfg, 2, None).unwrap();
    for name in mf.net.binary_weights() {
        let latent = &mf.net.params[name];
        assert_ne!(latent, &mp.net.params[name], "{name}");
        // latent weights stay real-valued rather than collapsing to ±s
        let mags: Vec<f64> = latent.data().iter().map(|v| v.abs()).collect();
        assert!(mags.iter().any(|&m| m != mags[0]), "{name}");
    }
    assert_eq!(mf.net.params["stem.weight"].shape(), mp.net.params["stem.weight"].shape());
}
