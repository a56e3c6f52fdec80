use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

fn check_lr(lr: f64) -> Result<()> {
    if !(lr >= 0.0) || !lr.is_finite() {
        return Err(Error::invalid(format!("learning rate must be finite and nonnegative, got {lr}")));
    }
    Ok(())
}

/// Momentum SGD with L2 weight decay folded into the gradient.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdMomentum {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub velocity: BTreeMap<String, Vec<f64>>,
}

impl SgdMomentum {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Result<Self> {
        check_lr(lr)?;
        Ok(Self {
            lr,
            momentum,
            weight_decay,
            velocity: BTreeMap::new(),
        })
    }

    pub fn step(&mut self, name: &str, param: &mut Tensor, grad: &Tensor) -> Result<()> {
        param.expect_same_shape(grad, "sgd step")?;
        let v = self
            .velocity
            .entry(name.to_string())
            .or_insert_with(|| vec![0.0; param.len()]);
        for ((p, &g), vi) in param.data_mut().iter_mut().zip(grad.data()).zip(v.iter_mut()) {
            let g = g + self.weight_decay * *p;
            *vi = self.momentum * *vi + g;
            *p -= self.lr * *vi;
        }
        Ok(())
    }
}

/// Adam with bias correction. `t` counts completed steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub t: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Result<Self> {
        check_lr(lr)?;
        Ok(Self {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        })
    }

    /// Advances the shared step counter; call once per optimization step,
    /// before the per-parameter updates.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    pub fn step(&mut self, name: &str, param: &mut Tensor, grad: &Tensor) -> Result<()> {
        param.expect_same_shape(grad, "adam step")?;
        if self.t == 0 {
            return Err(Error::invalid("adam step requires t >= 1; call begin_step first"));
        }
        let n = param.len();
        let m = self.m.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
        let v = self.v.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, (p, &g)) in param.data_mut().iter_mut().zip(grad.data()).enumerate() {
            let g = g + self.weight_decay * *p;
            m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
            v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            *p -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_sgd_step() {
        let mut opt = SgdMomentum::new(0.5, 0.0, 0.0).unwrap();
        let mut p = Tensor::full(&[2], 1.0);
        opt.step("p", &mut p, &Tensor::new(vec![2], vec![0.2, -0.4]).unwrap()).unwrap();
        assert_eq!(p.data(), &[1.0 - 0.5 * 0.2, 1.0 + 0.5 * 0.4]);
    }

    #[test]
    fn rejects_non_positive_lr() {
        assert!(SgdMomentum::new(f64::NAN, 0.9, 0.0).is_err());
        assert!(SgdMomentum::new(0.0, 0.9, 0.0).is_ok());
        assert!(Adam::new(-1e-3, 0.9, 0.999, 1e-8, 0.0).is_err());
    }

    #[test]
    fn adam_first_step_is_lr_sized() {
        let mut opt = Adam::new(0.01, 0.9, 0.999, 1e-8, 0.0).unwrap();
        let mut p = Tensor::zeros(&[3]);
        opt.begin_step();
        opt.step("p", &mut p, &Tensor::new(vec![3], vec![3.0, -0.5, 100.0]).unwrap()).unwrap();
        for (&v, s) in p.data().iter().zip([-1.0, 1.0, -1.0]) {
            assert!((v - s * 0.01).abs() < 1e-8, "{v}");
        }
    }

    #[test]
    fn adam_requires_begin_step() {
        let mut opt = Adam::new(0.01, 0.9, 0.999, 1e-8, 0.0).unwrap();
        let mut p = Tensor::zeros(&[1]);
        assert!(opt.step("p", &mut p, &Tensor::ones(&[1])).is_err());
    }

    #[test]
    fn momentum_sgd_converges_on_quadratic() {
        // independent scalar recurrence for ½x²: v ← μv + x, x ← x − ηv
        let (mut x, mut v) = (1.0f64, 0.0f64);
        for _ in 0..100 {
            v = 0.9 * v + x;
            x -= 0.1 * v;
        }
        let mut opt = SgdMomentum::new(0.1, 0.9, 0.0).unwrap();
        let mut p = Tensor::ones(&[1]);
        for _ in 0..100 {
            let g = p.clone();
            opt.step("x", &mut p, &g).unwrap();
        }
        assert_eq!(p.item(), x);
        // the recurrence contracts at sqrt(0.9) per step: |x_100| = 3.74e-3
        assert!((p.item() - 3.7387333112974064e-3).abs() < 1e-15);
    }
}
