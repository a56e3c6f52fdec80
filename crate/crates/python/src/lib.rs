//! Python module `nasb`: cost reports, synthetic data, genotype derivation,
//! checkpoint evaluation and a few numeric kernels.

use std::path::Path;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use engine::autograd::Tensor;
use engine::binarize::{binarize_weights, ScaleMode};
use engine::cell::{derive, Genotype, RetainSpec, Variant};
use engine::costmodel::{model_cost, preset, CostConfig, CostPolicy, CostReport};
use engine::io::{gen_synthetic, load_dataset, Checkpoint, Difficulty, SynthSpec};
use engine::trainer::evaluate;

fn py_err(e: engine::Error) -> PyErr {
    match e {
        engine::Error::Io { .. } => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn cost_of(arch: &str, policy: &str, input_size: usize, d: u64, divisor: f64, classes: usize) -> PyResult<CostReport> {
    let g = if Path::new(arch).is_file() {
        let text = std::fs::read_to_string(arch).map_err(|e| PyIOError::new_err(format!("{arch}: {e}")))?;
        Genotype::from_json(&text).map_err(py_err)?
    } else {
        preset(arch, classes).map_err(py_err)?
    };
    let cfg = CostConfig {
        input_size,
        d,
        divisor,
        ..CostConfig::default()
    };
    model_cost(&g, CostPolicy::parse(policy).map_err(py_err)?, &cfg).map_err(py_err)
}

/// `(memory_mbit, flops)` of a built-in architecture or genotype file.
#[pyfunction]
#[pyo3(signature = (arch, policy="binary", input_size=224, d=32, divisor=64.0, classes=1000))]
fn cost(arch: &str, policy: &str, input_size: usize, d: u64, divisor: f64, classes: usize) -> PyResult<(f64, f64)> {
    let r = cost_of(arch, policy, input_size, d, divisor, classes)?;
    Ok((r.memory_mbit(), r.flops))
}

/// Full cost report, per-layer rows included, as a JSON string.
#[pyfunction]
#[pyo3(signature = (arch, policy="binary", input_size=224, d=32, divisor=64.0, classes=1000))]
fn cost_json(arch: &str, policy: &str, input_size: usize, d: u64, divisor: f64, classes: usize) -> PyResult<String> {
    let r = cost_of(arch, policy, input_size, d, divisor, classes)?;
    serde_json::to_string(&r).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Returns `(pixels, shape, labels)`; pixels are row-major `[N, C, H, W]`.
#[pyfunction]
#[pyo3(signature = (classes=2, samples=2000, size=8, channels=1, difficulty="easy", seed=0))]
fn synthetic(
    classes: usize,
    samples: usize,
    size: usize,
    channels: usize,
    difficulty: &str,
    seed: u64,
) -> PyResult<(Vec<f64>, Vec<usize>, Vec<usize>)> {
    let difficulty: Difficulty = difficulty.parse().map_err(py_err)?;
    let d = gen_synthetic(&SynthSpec {
        classes,
        samples,
        size,
        channels,
        difficulty,
        seed,
    })
    .map_err(py_err)?;
    let shape = d.images.shape().to_vec();
    Ok((d.images.into_data(), shape, d.labels))
}

/// Writes a synthetic dataset to tensor and label files.
#[pyfunction]
#[pyo3(signature = (images, labels, classes=2, samples=2000, size=8, channels=1, difficulty="easy", seed=0))]
#[allow(clippy::too_many_arguments)]
fn write_synthetic(
    images: &str,
    labels: &str,
    classes: usize,
    samples: usize,
    size: usize,
    channels: usize,
    difficulty: &str,
    seed: u64,
) -> PyResult<()> {
    let difficulty: Difficulty = difficulty.parse().map_err(py_err)?;
    gen_synthetic(&SynthSpec {
        classes,
        samples,
        size,
        channels,
        difficulty,
        seed,
    })
    .and_then(|d| d.save(Path::new(images), Path::new(labels)))
    .map_err(py_err)
}

/// Genotype JSON derived from a search checkpoint.
#[pyfunction]
#[pyo3(signature = (checkpoint, variant="nasb"))]
fn derive_genotype(checkpoint: &str, variant: &str) -> PyResult<String> {
    let variant: Variant = variant.parse().map_err(py_err)?;
    let net = Checkpoint::load(Path::new(checkpoint))
        .and_then(|c| c.to_network())
        .map_err(py_err)?;
    if net.supercells().is_empty() {
        return Err(PyValueError::new_err(format!("{checkpoint} does not hold a supernet")));
    }
    let g = derive(net.supercells(), &RetainSpec::for_variant(variant), net.stem(), net.classes()).map_err(py_err)?;
    Ok(g.to_json())
}

/// `(loss, top1, topk)` of a checkpoint on a dataset.
#[pyfunction]
#[pyo3(signature = (checkpoint, images, labels, top_k=1, batch_size=64))]
fn evaluate_checkpoint(checkpoint: &str, images: &str, labels: &str, top_k: usize, batch_size: usize) -> PyResult<(f64, f64, f64)> {
    let mut net = Checkpoint::load(Path::new(checkpoint))
        .and_then(|c| c.to_network())
        .map_err(py_err)?;
    let data = load_dataset(Path::new(images), Path::new(labels), Some(net.classes())).map_err(py_err)?;
    let e = evaluate(&mut net, &data, batch_size, top_k).map_err(py_err)?;
    Ok((e.loss, e.top1, e.topk))
}

/// Softmax of architecture parameters.
#[pyfunction]
fn path_weights(alpha: Vec<f64>) -> PyResult<Vec<f64>> {
    if alpha.is_empty() {
        return Err(PyValueError::new_err("alpha must not be empty"));
    }
    Ok(engine::nasgate::path_weights(&alpha))
}

/// `(signs, scales)` for weights of the given shape (first axis = filters).
#[pyfunction]
#[pyo3(signature = (weights, shape, per_filter=true))]
fn binarize(weights: Vec<f64>, shape: Vec<usize>, per_filter: bool) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let w = Tensor::new(shape, weights).map_err(py_err)?;
    let mode = if per_filter { ScaleMode::PerFilter } else { ScaleMode::PerTensor };
    let b = binarize_weights(&w, mode).map_err(py_err)?;
    Ok((b.signs.into_data(), b.scale))
}

#[pymodule]
fn nasb(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_function(wrap_pyfunction!(cost, m)?)?;
    m.add_function(wrap_pyfunction!(cost_json, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(write_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(derive_genotype, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_checkpoint, m)?)?;
    m.add_function(wrap_pyfunction!(path_weights, m)?)?;
    m.add_function(wrap_pyfunction!(binarize, m)?)?;
    Ok(())
}
