use super::kernels::{self, ConvSpec, PoolSpec};
use super::Tensor;
use crate::binarize::{self, ScaleMode};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Running statistics of one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BnState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
}

impl BnState {
    pub fn new(channels: usize) -> Self {
        Self {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: 0.1,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }
}

pub const BN_EPS: f64 = 1e-5;

enum Op {
    Leaf,
    Add(Var, Var),
    Scale(Var, f64),
    MulScalar { x: Var, s: Var },
    Conv2d { x: Var, w: Var, spec: ConvSpec },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, invstd: Vec<f64>, train: bool },
    MaxPool { x: Var, argmax: Vec<usize> },
    AvgPool { x: Var, spec: PoolSpec },
    Linear { x: Var, w: Var },
    Relu(Var),
    Tanh(Var),
    SignSte(Var),
    BinarizeWeight { w: Var, scale: Vec<f64> },
    GlobalAvgPool(Var),
    Adapt { x: Var, stride: usize },
    SoftmaxCe { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    Sum(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Tape of tensor operations for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order and [`Graph::backward`] walks it once in reverse.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of `v`, zeros when `v` does not reach the loss.
    pub fn get(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn try_get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).scale(c);
        self.push(out, Op::Scale(a, c), &[a])
    }

    /// `x * s` for a single-element `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if !self.value(s).is_scalar() {
            return Err(Error::invalid("mul_scalar expects a single-element factor"));
        }
        let c = self.value(s).item();
        let out = self.value(x).scale(c);
        Ok(self.push(out, Op::MulScalar { x, s }, &[x, s]))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, spec: ConvSpec) -> Result<Var> {
        let out = kernels::conv2d_forward(self.value(x), self.value(w), &spec)?;
        Ok(self.push(out, Op::Conv2d { x, w, spec }, &[x, w]))
    }

    /// Per-channel normalization over `(N, H, W)`.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        state: &mut BnState,
        mode: BnMode,
        eps: f64,
    ) -> Result<Var> {
        if eps < 0.0 {
            return Err(Error::invalid(format!("batch_norm eps must be nonnegative, got {eps}")));
        }
        let (n, c, h, w) = self.value(x).dims4()?;
        for (t, what) in [(gamma, "gamma length"), (beta, "beta length")] {
            if self.value(t).len() != c {
                return Err(Error::ShapeMismatch {
                    context: "batch_norm",
                    dim: what,
                    expected: c,
                    actual: self.value(t).len(),
                });
            }
        }
        if state.channels() != c {
            return Err(Error::ShapeMismatch {
                context: "batch_norm",
                dim: "running statistics",
                expected: c,
                actual: state.channels(),
            });
        }
        let hw = h * w;
        let count = (n * hw) as f64;
        let xd = self.value(x).data();
        let (mean, var) = match mode {
            BnMode::Train => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for b in 0..n {
                        s += xd[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter().sum::<f64>();
                    }
                    let m = s / count;
                    let mut v = 0.0;
                    for b in 0..n {
                        for &e in &xd[(b * c + ch) * hw..(b * c + ch + 1) * hw] {
                            v += (e - m) * (e - m);
                        }
                    }
                    mean[ch] = m;
                    var[ch] = v / count;
                }
                let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
                let mom = state.momentum;
                for ch in 0..c {
                    state.running_mean[ch] = (1.0 - mom) * state.running_mean[ch] + mom * mean[ch];
                    state.running_var[ch] = (1.0 - mom) * state.running_var[ch] + mom * var[ch] * unbias;
                }
                (mean, var)
            }
            BnMode::Eval => (state.running_mean.clone(), state.running_var.clone()),
        };
        let invstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * hw;
                for k in off..off + hw {
                    let xh = (xd[k] - mean[ch]) * invstd[ch];
                    xhat[k] = xh;
                    out[k] = g[ch] * xh + bt[ch];
                }
            }
        }
        let out = Tensor::new(vec![n, c, h, w], out)?;
        Ok(self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                invstd,
                train: mode == BnMode::Train,
            },
            &[x, gamma, beta],
        ))
    }

    pub fn max_pool(&mut self, x: Var, spec: PoolSpec) -> Result<Var> {
        let (out, argmax) = kernels::max_pool_forward(self.value(x), &spec)?;
        Ok(self.push(out, Op::MaxPool { x, argmax }, &[x]))
    }

    pub fn avg_pool(&mut self, x: Var, spec: PoolSpec) -> Result<Var> {
        let out = kernels::avg_pool_forward(self.value(x), &spec)?;
        Ok(self.push(out, Op::AvgPool { x, spec }, &[x]))
    }

    /// `x[N,F] · w[O,F]ᵀ`, no bias.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if xs.len() != 2 || ws.len() != 2 {
            return Err(Error::invalid("linear expects rank-2 input and weight"));
        }
        let (n, f, o) = (xs[0], xs[1], ws[0]);
        if ws[1] != f {
            return Err(Error::ShapeMismatch {
                context: "linear",
                dim: "in features",
                expected: f,
                actual: ws[1],
            });
        }
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let mut out = vec![0.0; n * o];
        for b in 0..n {
            let row = &xd[b * f..(b + 1) * f];
            for j in 0..o {
                out[b * o + j] = row.iter().zip(&wd[j * f..(j + 1) * f]).map(|(a, c)| a * c).sum();
            }
        }
        let out = Tensor::new(vec![n, o], out)?;
        Ok(self.push(out, Op::Linear { x, w }, &[x, w]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push(out, Op::Relu(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::tanh);
        self.push(out, Op::Tanh(x), &[x])
    }

    /// Activation binarization with the piecewise-polynomial backward.
    pub fn sign_ste(&mut self, x: Var) -> Var {
        let out = binarize::binarize_activations(self.value(x));
        self.push(out, Op::SignSte(x), &[x])
    }

    /// Weight binarization `s · sign(W)` with the scaled straight-through backward.
    pub fn binarize_weight(&mut self, w: Var, mode: ScaleMode) -> Result<Var> {
        let bw = binarize::binarize_weights(self.value(w), mode)?;
        let out = bw.effective();
        Ok(self.push(out, Op::BinarizeWeight { w, scale: bw.scale }, &[w]))
    }

    /// Mean over spatial extents: `[N,C,H,W] → [N,C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let hw = h * w;
        let xd = self.value(x).data();
        let out: Vec<f64> = (0..n * c)
            .map(|p| xd[p * hw..(p + 1) * hw].iter().sum::<f64>() / hw as f64)
            .collect();
        let out = Tensor::new(vec![n, c], out)?;
        Ok(self.push(out, Op::GlobalAvgPool(x), &[x]))
    }

    /// Spatial subsampling by `stride` and channel zero-padding (growth) or
    /// truncation (reduction) to `c_out`.
    pub fn adapt(&mut self, x: Var, stride: usize, c_out: usize) -> Result<Var> {
        if stride == 0 {
            return Err(Error::invalid("adapt stride must be positive"));
        }
        let (n, c, h, w) = self.value(x).dims4()?;
        if stride == 1 && c == c_out {
            return Ok(x);
        }
        let (oh, ow) = (h.div_ceil(stride), w.div_ceil(stride));
        let xd = self.value(x).data();
        let mut out = vec![0.0; n * c_out * oh * ow];
        for b in 0..n {
            for ch in 0..c.min(c_out) {
                for oy in 0..oh {
                    for ox in 0..ow {
                        out[((b * c_out + ch) * oh + oy) * ow + ox] =
                            xd[((b * c + ch) * h + oy * stride) * w + ox * stride];
                    }
                }
            }
        }
        let out = Tensor::new(vec![n, c_out, oh, ow], out)?;
        Ok(self.push(out, Op::Adapt { x, stride }, &[x]))
    }

    /// Mean softmax cross-entropy of `logits[N,K]` against integer labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.value(logits).shape().to_vec();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(Error::invalid(format!(
                "cross-entropy expects [N,K] logits with N = {} labels, got {shape:?}",
                labels.len()
            )));
        }
        let (n, k) = (shape[0], shape[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::LabelOutOfRange { label: bad, classes: k });
        }
        let ld = self.value(logits).data();
        let mut probs = vec![0.0; n * k];
        let mut loss = 0.0;
        for b in 0..n {
            let row = &ld[b * k..(b + 1) * k];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            for j in 0..k {
                probs[b * k + j] = (row[j] - m).exp() / z;
            }
            loss -= row[labels[b]] - m - z.ln();
        }
        let out = Tensor::scalar(loss / n as f64);
        Ok(self.push(
            out,
            Op::SoftmaxCe {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x), &[x])
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        let mut send = |v: Var, t: Tensor| -> Result<()> {
            if !self.nodes[v.0].requires_grad {
                return Ok(());
            }
            match &mut grads[v.0] {
                Some(acc) => acc.add_assign(&t),
                slot => {
                    *slot = Some(t);
                    Ok(())
                }
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                send(*a, g.clone())?;
                send(*b, g.clone())?;
            }
            Op::Scale(a, c) => send(*a, g.scale(*c))?,
            Op::MulScalar { x, s } => {
                let c = self.value(*s).item();
                send(*x, g.scale(c))?;
                let dot: f64 = g.data().iter().zip(self.value(*x).data()).map(|(a, b)| a * b).sum();
                send(*s, Tensor::new(self.value(*s).shape().to_vec(), vec![dot])?)?;
            }
            Op::Conv2d { x, w, spec } => {
                let (gx, gw) = kernels::conv2d_backward(self.value(*x), self.value(*w), spec, g)?;
                send(*x, gx)?;
                send(*w, gw)?;
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                invstd,
                train,
            } => {
                let (n, c, h, w) = g.dims4()?;
                let hw = h * w;
                let count = (n * hw) as f64;
                let gd = g.data();
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for b in 0..n {
                    for ch in 0..c {
                        let off = (b * c + ch) * hw;
                        for k in off..off + hw {
                            dgamma[ch] += gd[k] * xhat[k];
                            dbeta[ch] += gd[k];
                        }
                    }
                }
                let mut dx = vec![0.0; gd.len()];
                for b in 0..n {
                    for ch in 0..c {
                        let off = (b * c + ch) * hw;
                        for k in off..off + hw {
                            dx[k] = if *train {
                                gam[ch] * invstd[ch] / count
                                    * (count * gd[k] - dbeta[ch] - xhat[k] * dgamma[ch])
                            } else {
                                gam[ch] * invstd[ch] * gd[k]
                            };
                        }
                    }
                }
                send(*x, Tensor::new(g.shape().to_vec(), dx)?)?;
                send(*gamma, Tensor::new(vec![c], dgamma)?)?;
                send(*beta, Tensor::new(vec![c], dbeta)?)?;
            }
            Op::MaxPool { x, argmax } => {
                send(*x, kernels::max_pool_backward(self.value(*x).shape(), argmax, g)?)?;
            }
            Op::AvgPool { x, spec } => {
                send(*x, kernels::avg_pool_backward(self.value(*x).shape(), spec, g)?)?;
            }
            Op::Linear { x, w } => {
                let xs = self.value(*x);
                let ws = self.value(*w);
                let (n, f) = (xs.shape()[0], xs.shape()[1]);
                let o = ws.shape()[0];
                let (xd, wd, gd) = (xs.data(), ws.data(), g.data());
                let mut gx = vec![0.0; n * f];
                let mut gw = vec![0.0; o * f];
                for b in 0..n {
                    for j in 0..o {
                        let gv = gd[b * o + j];
                        for k in 0..f {
                            gx[b * f + k] += gv * wd[j * f + k];
                            gw[j * f + k] += gv * xd[b * f + k];
                        }
                    }
                }
                send(*x, Tensor::new(vec![n, f], gx)?)?;
                send(*w, Tensor::new(vec![o, f], gw)?)?;
            }
            Op::Relu(x) => {
                let gx = g.zip_map(self.value(*x), |gv, xv| if xv > 0.0 { gv } else { 0.0 })?;
                send(*x, gx)?;
            }
            Op::Tanh(x) => {
                let gx = g.zip_map(&node.value, |gv, y| gv * (1.0 - y * y))?;
                send(*x, gx)?;
            }
            Op::SignSte(x) => send(*x, binarize::binarize_activations_backward(g, self.value(*x))?)?,
            Op::BinarizeWeight { w, scale } => {
                send(*w, binarize::binarize_weights_backward(g, scale)?)?;
            }
            Op::GlobalAvgPool(x) => {
                let (n, c, h, w) = self.value(*x).dims4()?;
                let hw = h * w;
                let gd = g.data();
                let gx = Tensor::from_fn(&[n, c, h, w], |k| gd[k / hw] / hw as f64);
                send(*x, gx)?;
            }
            Op::Adapt { x, stride } => {
                let (n, c, h, w) = self.value(*x).dims4()?;
                let (_, c_out, oh, ow) = g.dims4()?;
                let gd = g.data();
                let mut gx = vec![0.0; n * c * h * w];
                for b in 0..n {
                    for ch in 0..c.min(c_out) {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                gx[((b * c + ch) * h + oy * stride) * w + ox * stride] +=
                                    gd[((b * c_out + ch) * oh + oy) * ow + ox];
                            }
                        }
                    }
                }
                send(*x, Tensor::new(vec![n, c, h, w], gx)?)?;
            }
            Op::SoftmaxCe { logits, labels, probs } => {
                let shape = self.value(*logits).shape().to_vec();
                let (n, k) = (shape[0], shape[1]);
                let scale = g.item() / n as f64;
                let mut gl = probs.clone();
                for (b, &l) in labels.iter().enumerate() {
                    gl[b * k + l] -= 1.0;
                }
                for v in &mut gl {
                    *v *= scale;
                }
                send(*logits, Tensor::new(shape, gl)?)?;
            }
            Op::Sum(x) => {
                let c = g.item();
                send(*x, Tensor::full(self.value(*x).shape(), c))?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_fn(&[2, 3], |i| i as f64));
        let l = g.sum(x);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(x), Tensor::ones(&[2, 3]));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.param(Tensor::ones(&[2]));
        let y = g.relu(x);
        assert!(matches!(g.backward(y), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn unreachable_param_gets_zero() {
        let mut g = Graph::new();
        let x = g.param(Tensor::ones(&[3]));
        let unused = g.param(Tensor::ones(&[2, 2]));
        let l = g.sum(x);
        let grads = g.backward(l).unwrap();
        assert!(grads.try_get(unused).is_none());
        assert_eq!(grads.get(unused), Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn conv_weight_grad_counts_taps() {
        // all-ones 1x1x4x4 input, 3x3 kernel, padding 1: each tap touches
        // the output positions whose shifted input lies inside the image
        let mut g = Graph::new();
        let x = g.constant(Tensor::ones(&[1, 1, 4, 4]));
        let w = g.param(Tensor::ones(&[1, 1, 3, 3]));
        let y = g.conv2d(x, w, ConvSpec::square(1, 1, 3, 1, 1)).unwrap();
        let l = g.sum(y);
        let gw = g.backward(l).unwrap().get(w);
        let mut expected = [0.0; 9];
        for ky in 0..3i64 {
            for kx in 0..3i64 {
                let mut count = 0;
                for oy in 0..4i64 {
                    for ox in 0..4i64 {
                        let (iy, ix) = (oy + ky - 1, ox + kx - 1);
                        if (0..4).contains(&iy) && (0..4).contains(&ix) {
                            count += 1;
                        }
                    }
                }
                expected[(ky * 3 + kx) as usize] = count as f64;
            }
        }
        assert_eq!(gw.data(), &expected[..]);
    }

    #[test]
    fn batch_norm_constant_channel_gives_beta() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[2, 1, 3, 3], 4.2));
        let gamma = g.param(Tensor::ones(&[1]));
        let beta = g.param(Tensor::full(&[1], 0.7));
        let mut st = BnState::new(1);
        let y = g.batch_norm(x, gamma, beta, &mut st, BnMode::Train, BN_EPS).unwrap();
        assert!(g.value(y).data().iter().all(|&v| (v - 0.7).abs() < 1e-12));
        assert!((st.running_mean[0] - 0.42).abs() < 1e-12);
    }

    #[test]
    fn batch_norm_rejects_negative_eps() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::ones(&[1, 1, 2, 2]));
        let gamma = g.param(Tensor::ones(&[1]));
        let beta = g.param(Tensor::zeros(&[1]));
        let mut st = BnState::new(1);
        assert!(g.batch_norm(x, gamma, beta, &mut st, BnMode::Train, -1.0).is_err());
    }

    #[test]
    fn adapt_pads_and_subsamples() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_fn(&[1, 1, 4, 4], |i| i as f64));
        let y = g.adapt(x, 2, 2).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 2, 2, 2]);
        assert_eq!(g.value(y).data(), &[0.0, 2.0, 8.0, 10.0, 0.0, 0.0, 0.0, 0.0]);
        let l = g.sum(y);
        let gx = g.backward(l).unwrap().get(x);
        assert_eq!(gx.sum(), 4.0);
    }
}
