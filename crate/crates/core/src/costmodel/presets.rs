use crate::cell::{
    CellPlan, Genotype, GenotypeCell, GenotypeNode, OperationKind, RetainedOp, StemSpec, Variant, GENOTYPE_VERSION,
};
use crate::error::{Error, Result};

pub const PRESETS: [&str; 9] = [
    "resnet18",
    "resnet34",
    "resnet50",
    "bireal-resnet18",
    "bireal-resnet34",
    "bireal-resnet50",
    "nasb-resnet18",
    "nasb-resnet34",
    "nasb-resnet50",
];

const WIDTHS: [usize; 4] = [64, 128, 256, 512];

/// One cell per residual group; stride 2 on the first layer of groups 1-3.
fn group_plans(depth: usize) -> Result<Vec<CellPlan>> {
    let (blocks, bottleneck) = match depth {
        18 => ([2, 2, 2, 2], false),
        34 => ([3, 4, 6, 3], false),
        50 => ([3, 4, 6, 3], true),
        _ => return Err(Error::UnknownArchitecture(format!("resnet{depth}"))),
    };
    let mut c_in = 64;
    let mut plans = Vec::new();
    for (g, (&n, &c)) in blocks.iter().zip(&WIDTHS).enumerate() {
        let mut channels = vec![c_in];
        let mut kernels = Vec::new();
        for _ in 0..n {
            if bottleneck {
                channels.extend([c, c, 4 * c]);
                kernels.extend([1, 3, 1]);
            } else {
                channels.extend([c, c]);
                kernels.extend([3, 3]);
            }
        }
        let mut strides = vec![1; kernels.len()];
        if g > 0 {
            strides[0] = 2;
        }
        c_in = *channels.last().expect("non-empty group");
        plans.push(CellPlan::new(channels, strides, kernels)?);
    }
    Ok(plans)
}

/// Per-group counts (identity, dil_conv_1x1, max pool) of the searched cells.
fn nasb_counts(depth: usize) -> [(usize, usize, usize); 4] {
    match depth {
        18 => [(1, 0, 3); 4],
        34 => [(2, 0, 4), (3, 0, 5), (5, 0, 7), (2, 0, 4)],
        _ => [(1, 0, 8), (2, 0, 10), (2, 1, 15), (1, 0, 8)],
    }
}

fn single(j: usize, kind: OperationKind) -> GenotypeNode {
    GenotypeNode {
        pred: j - 1,
        ops: vec![RetainedOp { src: j - 1, kind }],
    }
}

/// Built-in architectures at ImageNet geometry: the full-precision ResNets,
/// their Bi-Real form (identity from every preceding node) and NASB cells
/// with the reported operation composition.
pub fn preset(name: &str, classes: usize) -> Result<Genotype> {
    let (family, depth) = match name.split_once('-') {
        Some((f, rest)) => (f, rest),
        None => ("plain", name),
    };
    let depth: usize = depth
        .strip_prefix("resnet")
        .and_then(|d| d.parse().ok())
        .ok_or_else(|| Error::UnknownArchitecture(name.into()))?;
    let plans = group_plans(depth).map_err(|_| Error::UnknownArchitecture(name.into()))?;
    let counts = nasb_counts(depth);
    let cells = plans
        .iter()
        .enumerate()
        .map(|(g, plan)| match family {
            "plain" => Ok(GenotypeCell::backbone_only(plan)),
            "bireal" => Ok(GenotypeCell::from_plan(plan, |j| single(j, OperationKind::Identity))),
            "nasb" => {
                let (ids, dils, _) = counts[g];
                Ok(GenotypeCell::from_plan(plan, |j| {
                    let kind = if j <= ids {
                        OperationKind::Identity
                    } else if j <= ids + dils {
                        OperationKind::DilConv1
                    } else {
                        OperationKind::MaxPool3
                    };
                    single(j, kind)
                }))
            }
            _ => Err(Error::UnknownArchitecture(name.into())),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Genotype {
        version: GENOTYPE_VERSION,
        variant: Variant::Nasb,
        stem: StemSpec {
            in_channels: 3,
            channels: 64,
            kernel: 7,
            stride: 2,
            pool: true,
        },
        classes,
        cells,
    })
}
