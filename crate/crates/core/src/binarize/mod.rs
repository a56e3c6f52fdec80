//! Weight and activation binarization with straight-through backward rules,
//! plus a bit-packed XNOR/popcount convolution for inference.

mod packed;

use serde::{Deserialize, Serialize};

pub use packed::{xnor_conv2d, PackedBitTensor};

use crate::autograd::Tensor;
use crate::error::{Error, Result};

/// Granularity of the weight scaling coefficient.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScaleMode {
    #[default]
    PerFilter,
    PerTensor,
}

/// `sign` with `sign(0) = +1`.
#[inline]
pub fn sign(x: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// Latent weights together with their binary forward value.
#[derive(Clone, Debug, PartialEq)]
pub struct BinarizedWeight {
    pub latent: Tensor,
    /// One coefficient per output filter (repeated under [`ScaleMode::PerTensor`]).
    pub scale: Vec<f64>,
    pub signs: Tensor,
}

impl BinarizedWeight {
    /// `s[o] · sign(W[o, ·])`.
    pub fn effective(&self) -> Tensor {
        let per = self.signs.len() / self.scale.len();
        let d = self.signs.data();
        Tensor::from_fn(self.signs.shape(), |i| self.scale[i / per] * d[i])
    }
}

pub fn binarize_weights(w: &Tensor, mode: ScaleMode) -> Result<BinarizedWeight> {
    if w.rank() < 1 {
        return Err(Error::invalid("weights must have at least one axis"));
    }
    let filters = w.shape()[0];
    let per = w.len() / filters;
    let d = w.data();
    let scale = match mode {
        ScaleMode::PerFilter => (0..filters)
            .map(|o| d[o * per..(o + 1) * per].iter().map(|v| v.abs()).sum::<f64>() / per as f64)
            .collect(),
        ScaleMode::PerTensor => {
            let s = d.iter().map(|v| v.abs()).sum::<f64>() / d.len() as f64;
            vec![s; filters]
        }
    };
    Ok(BinarizedWeight {
        latent: w.clone(),
        scale,
        signs: w.map(sign),
    })
}

/// `∂L/∂W[o,·] ≈ s[o] · ∂L/∂b^W[o,·]`; the `∂s/∂W` path is dropped.
pub fn binarize_weights_backward(grad_effective: &Tensor, scale: &[f64]) -> Result<Tensor> {
    let filters = grad_effective.shape().first().copied().unwrap_or(0);
    if filters != scale.len() {
        return Err(Error::ShapeMismatch {
            context: "binarize_weights_backward",
            dim: "filters",
            expected: scale.len(),
            actual: filters,
        });
    }
    let per = grad_effective.len() / filters;
    let d = grad_effective.data();
    Ok(Tensor::from_fn(grad_effective.shape(), |i| scale[i / per] * d[i]))
}

pub fn binarize_activations(input: &Tensor) -> Tensor {
    input.map(sign)
}

/// Derivative surrogate of the activation sign: `2 + 2x` on `[-1, 0)`,
/// `2 - 2x` on `[0, 1)`, zero elsewhere.
#[inline]
pub fn activation_grad_factor(x: f64) -> f64 {
    if (-1.0..0.0).contains(&x) {
        2.0 + 2.0 * x
    } else if (0.0..1.0).contains(&x) {
        2.0 - 2.0 * x
    } else {
        0.0
    }
}

pub fn binarize_activations_backward(grad_out: &Tensor, input: &Tensor) -> Result<Tensor> {
    grad_out.zip_map(input, |g, x| g * activation_grad_factor(x))
}
