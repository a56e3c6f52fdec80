//! Architecture parameters, path weights and binary gates.
//!
//! Each edge keeps `M` real parameters `α`. The forward pass turns them into
//! path weights `p = softmax(α)`, draws one active operation from `p`, and
//! the backward pass maps the gate gradient back onto `α` through the
//! softmax Jacobian, treating `∂L/∂p ≈ ∂L/∂g`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeArch {
    pub alpha: Vec<f64>,
}

impl EdgeArch {
    /// `m` zero-initialized parameters (uniform path weights).
    pub fn zeros(m: usize) -> Result<Self> {
        if m == 0 {
            return Err(Error::invalid("an edge needs at least one candidate operation"));
        }
        Ok(Self { alpha: vec![0.0; m] })
    }

    pub fn from_alpha(alpha: Vec<f64>) -> Result<Self> {
        if alpha.is_empty() {
            return Err(Error::invalid("an edge needs at least one candidate operation"));
        }
        if alpha.iter().any(|a| !a.is_finite()) {
            return Err(Error::invalid("architecture parameters must be finite"));
        }
        Ok(Self { alpha })
    }

    pub fn m(&self) -> usize {
        self.alpha.len()
    }

    pub fn path_weights(&self) -> Vec<f64> {
        path_weights(&self.alpha)
    }
}

/// A one-hot gate together with the distribution it was drawn from.
#[derive(Clone, Debug, PartialEq)]
pub struct GateSample {
    pub g: Vec<f64>,
    pub p: Vec<f64>,
}

impl GateSample {
    /// Index of the active operation.
    pub fn active(&self) -> usize {
        self.g.iter().position(|&v| v == 1.0).expect("gate has one active entry")
    }

    /// Deterministic gate selecting operation `index`.
    pub fn fixed(index: usize, p: Vec<f64>) -> Self {
        let mut g = vec![0.0; p.len()];
        g[index] = 1.0;
        Self { g, p }
    }
}

/// Softmax with max subtraction.
pub fn path_weights(alpha: &[f64]) -> Vec<f64> {
    let m = alpha.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = alpha.iter().map(|a| (a - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Draws one categorical index from `p` and one-hot encodes it.
pub fn sample_gates<R: Rng + ?Sized>(p: &[f64], rng: &mut R) -> Result<GateSample> {
    let total: f64 = p.iter().sum();
    if p.is_empty() || (total - 1.0).abs() > 1e-6 || p.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::Unnormalized(total));
    }
    let u: f64 = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut pick = None;
    for (i, &pi) in p.iter().enumerate() {
        acc += pi;
        if pi > 0.0 && u < acc {
            pick = Some(i);
            break;
        }
    }
    // rounding can leave u >= acc; fall back to the last supported index
    let idx = pick.unwrap_or_else(|| p.iter().rposition(|&v| v > 0.0).unwrap_or(0));
    Ok(GateSample::fixed(idx, p.to_vec()))
}

/// `∂L/∂α_i = Σ_j ∂L/∂g_j · p_j · (δ_ij − p_i)`.
pub fn gate_grad_to_alpha(grad_g: &[f64], p: &[f64]) -> Result<Vec<f64>> {
    if grad_g.len() != p.len() {
        return Err(Error::ShapeMismatch {
            context: "gate_grad_to_alpha",
            dim: "candidate count",
            expected: p.len(),
            actual: grad_g.len(),
        });
    }
    let weighted: f64 = grad_g.iter().zip(p).map(|(g, pj)| g * pj).sum();
    Ok(p.iter()
        .zip(grad_g)
        .map(|(pi, gi)| gi * pi - pi * weighted)
        .collect())
}

/// Gate gradient for a single sampled operation: only the active entry is
/// populated.
pub fn single_sample_grad(m: usize, active: usize, grad_active: f64) -> Vec<f64> {
    let mut g = vec![0.0; m];
    g[active] = grad_active;
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn symmetric_and_stable_softmax() {
        assert_eq!(path_weights(&[0.0, 0.0]), vec![0.5, 0.5]);
        let p = path_weights(&[1000.0, 0.0]);
        assert!((p[0] - 1.0).abs() < 1e-15 && p[1] < 1e-300);
        let p = path_weights(&[1.0, 2.0, 3.0]);
        for (a, b) in p.iter().zip([0.0900, 0.2447, 0.6652]) {
            assert!((a - b).abs() < 5e-5, "{p:?}");
        }
    }

    #[test]
    fn degenerate_distribution_always_hits() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            assert_eq!(sample_gates(&[1.0, 0.0, 0.0], &mut rng).unwrap().g, vec![1.0, 0.0, 0.0]);
        }
    }

    #[test]
    fn unnormalized_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(sample_gates(&[0.5, 0.6], &mut rng), Err(Error::Unnormalized(_))));
    }

    #[test]
    fn fixed_seed_reproduces_sequence() {
        let p = path_weights(&[0.3, -0.2, 1.1, 0.0]);
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..50).map(|_| sample_gates(&p, &mut rng).unwrap().active()).collect::<Vec<_>>()
        };
        assert_eq!(draw(7), draw(7));
    }

    #[test]
    fn fair_coin_frequency() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let hits = (0..10_000)
            .filter(|_| sample_gates(&[0.5, 0.5], &mut rng).unwrap().active() == 0)
            .count();
        let f = hits as f64 / 10_000.0;
        assert!((f - 0.5).abs() <= 0.015, "{f}");
    }

    #[test]
    fn eq6_examples() {
        assert_eq!(gate_grad_to_alpha(&[1.0, 0.0], &[0.5, 0.5]).unwrap(), vec![0.25, -0.25]);
        assert_eq!(gate_grad_to_alpha(&[3.0, -2.0], &[1.0, 0.0]).unwrap(), vec![0.0, 0.0]);
        assert!(gate_grad_to_alpha(&[1.0], &[0.5, 0.5]).is_err());
    }
}
