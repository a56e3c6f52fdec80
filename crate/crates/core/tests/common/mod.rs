#![allow(dead_code)]

use std::io::Write;

use nasb::autograd::{ConvSpec, Graph, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Writes straight to stderr so the line shows without `--nocapture`.
pub fn report(n: usize, title: &str, detail: &str, failures: &[String]) {
    let status = if failures.is_empty() { "PASS" } else { "FAIL" };
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "criterion {n} [{status}] {title}: {detail}");
    for f in failures {
        let _ = writeln!(err, "    - {f}");
    }
    assert!(failures.is_empty(), "criterion {n} ({title}) failed: {failures:?}");
}

/// Reduces any tensor to a scalar through fixed random weights, so that
/// gradients differ across elements.
pub struct Probe {
    weights: Tensor,
}

impl Probe {
    pub fn for_shape(shape: &[usize], seed: u64) -> Self {
        let mut r = rng(seed);
        let wshape: Vec<usize> = match shape.len() {
            4 => vec![1, shape[1], shape[2], shape[3]],
            2 => vec![1, shape[1]],
            _ => vec![1],
        };
        Self {
            weights: Tensor::uniform(&wshape, -1.0, 1.0, &mut r),
        }
    }

    pub fn apply(&self, g: &mut Graph, y: Var) -> Var {
        let shape = g.value(y).shape().to_vec();
        let w = g.constant(self.weights.clone());
        let z = match shape.len() {
            4 => {
                let spec = ConvSpec {
                    c_in: shape[1],
                    c_out: 1,
                    kernel_h: shape[2],
                    kernel_w: shape[3],
                    stride: 1,
                    padding: 0,
                    dilation: 1,
                };
                g.conv2d(y, w, spec).unwrap()
            }
            2 => g.linear(y, w).unwrap(),
            _ => y,
        };
        g.sum(z)
    }
}

/// Worst norm-wise relative error between backward and central differences
/// over all inputs.
pub fn grad_check(inputs: &[Tensor], f: &dyn Fn(&mut Graph, &[Var]) -> Var) -> f64 {
    let eval = |ins: &[Tensor]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.param(t.clone())).collect();
        let l = f(&mut g, &vars);
        g.value(l).item()
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars);
    let grads = g.backward(loss).unwrap();
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for (k, t) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[k]);
        let mut num = Vec::with_capacity(t.len());
        for i in 0..t.len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= h;
            num.push((eval(&plus) - eval(&minus)) / (2.0 * h));
        }
        let num = Tensor::new(t.shape().to_vec(), num).unwrap();
        let diff = analytic.zip_map(&num, |a, b| a - b).unwrap().norm();
        let scale = analytic.norm().max(num.norm()).max(1e-12);
        worst = worst.max(diff / scale);
    }
    worst
}
