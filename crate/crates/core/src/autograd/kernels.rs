//! Direct-loop convolution and pooling kernels. Cross-correlation, no bias.

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvSpec {
    /// Square kernel with "same"-style padding `dilation * (k - 1) / 2`.
    pub fn square(c_in: usize, c_out: usize, kernel: usize, stride: usize, dilation: usize) -> Self {
        Self {
            c_in,
            c_out,
            kernel_h: kernel,
            kernel_w: kernel,
            stride,
            padding: dilation * (kernel - 1) / 2,
            dilation,
        }
    }

    pub fn with_padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if self.stride == 0 || self.dilation == 0 {
            return Err(Error::invalid("stride and dilation must be positive"));
        }
        let oh = output_extent(h, self.kernel_h, self.stride, self.padding, self.dilation);
        let ow = output_extent(w, self.kernel_w, self.stride, self.padding, self.dilation);
        if oh < 1 || ow < 1 {
            return Err(Error::EmptyOutput {
                op: "conv2d",
                extent: oh.min(ow),
            });
        }
        Ok((oh as usize, ow as usize))
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.c_out, self.c_in, self.kernel_h, self.kernel_w]
    }
}

/// `floor((len + 2p - d(k-1) - 1) / s) + 1`, possibly non-positive.
pub fn output_extent(len: usize, kernel: usize, stride: usize, padding: usize, dilation: usize) -> i64 {
    let num = len as i64 + 2 * padding as i64 - (dilation * (kernel - 1)) as i64 - 1;
    if num < 0 {
        // floor division for negative numerators
        return (num - (stride as i64 - 1)) / stride as i64 + 1;
    }
    num / stride as i64 + 1
}

/// Range of output indices `o` whose input index `o*s + off` lies in `[0, len)`.
#[inline]
fn valid_range(len: usize, out: usize, stride: usize, off: i64) -> (usize, usize) {
    let s = stride as i64;
    let lo = if off >= 0 { 0 } else { (-off + s - 1) / s };
    let hi = (len as i64 - 1 - off).div_euclid(s) + 1;
    let lo = lo.max(0) as usize;
    let hi = hi.clamp(0, out as i64) as usize;
    (lo, hi.max(lo))
}

pub(crate) fn check_conv(input: &Tensor, weight: &Tensor, spec: &ConvSpec) -> Result<(usize, usize, usize, usize, usize)> {
    let (n, c, h, w) = input.dims4()?;
    if c != spec.c_in {
        return Err(Error::ShapeMismatch {
            context: "conv2d",
            dim: "input channels",
            expected: spec.c_in,
            actual: c,
        });
    }
    let ws = weight.shape();
    let expected = spec.weight_shape();
    let names = ["weight out channels", "weight in channels", "kernel height", "kernel width"];
    if ws.len() != 4 {
        return Err(Error::InvalidShape {
            shape: ws.to_vec(),
            reason: "conv2d weight must be rank 4".into(),
        });
    }
    for i in 0..4 {
        if ws[i] != expected[i] {
            return Err(Error::ShapeMismatch {
                context: "conv2d",
                dim: names[i],
                expected: expected[i],
                actual: ws[i],
            });
        }
    }
    let (oh, ow) = spec.output_hw(h, w)?;
    Ok((n, h, w, oh, ow))
}

pub fn conv2d_forward(input: &Tensor, weight: &Tensor, spec: &ConvSpec) -> Result<Tensor> {
    let (n, h, w, oh, ow) = check_conv(input, weight, spec)?;
    let (ci, co, kh, kw) = (spec.c_in, spec.c_out, spec.kernel_h, spec.kernel_w);
    let (s, p, d) = (spec.stride, spec.padding as i64, spec.dilation);
    let x = input.data();
    let wt = weight.data();
    let mut out = vec![0.0; n * co * oh * ow];
    for b in 0..n {
        for o in 0..co {
            let out_plane = &mut out[(b * co + o) * oh * ow..(b * co + o + 1) * oh * ow];
            for i in 0..ci {
                let in_plane = &x[(b * ci + i) * h * w..(b * ci + i + 1) * h * w];
                for ky in 0..kh {
                    let offy = (ky * d) as i64 - p;
                    let (y0, y1) = valid_range(h, oh, s, offy);
                    for kx in 0..kw {
                        let wv = wt[((o * ci + i) * kh + ky) * kw + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let offx = (kx * d) as i64 - p;
                        let (x0, x1) = valid_range(w, ow, s, offx);
                        for oy in y0..y1 {
                            let iy = (oy * s) as i64 + offy;
                            let row = &in_plane[iy as usize * w..];
                            let orow = &mut out_plane[oy * ow..(oy + 1) * ow];
                            for ox in x0..x1 {
                                let ix = ((ox * s) as i64 + offx) as usize;
                                orow[ox] += wv * row[ix];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, co, oh, ow], out)
}

/// Returns `(grad_input, grad_weight)`.
pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    spec: &ConvSpec,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let (n, h, w, oh, ow) = check_conv(input, weight, spec)?;
    let (ci, co, kh, kw) = (spec.c_in, spec.c_out, spec.kernel_h, spec.kernel_w);
    let (s, p, d) = (spec.stride, spec.padding as i64, spec.dilation);
    if grad_out.shape() != [n, co, oh, ow] {
        return Err(Error::InvalidShape {
            shape: grad_out.shape().to_vec(),
            reason: "conv2d grad_out does not match the forward output".into(),
        });
    }
    let x = input.data();
    let wt = weight.data();
    let g = grad_out.data();
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; wt.len()];
    for b in 0..n {
        for o in 0..co {
            let g_plane = &g[(b * co + o) * oh * ow..(b * co + o + 1) * oh * ow];
            for i in 0..ci {
                let base = (b * ci + i) * h * w;
                for ky in 0..kh {
                    let offy = (ky * d) as i64 - p;
                    let (y0, y1) = valid_range(h, oh, s, offy);
                    for kx in 0..kw {
                        let widx = ((o * ci + i) * kh + ky) * kw + kx;
                        let wv = wt[widx];
                        let offx = (kx * d) as i64 - p;
                        let (x0, x1) = valid_range(w, ow, s, offx);
                        let mut acc = 0.0;
                        for oy in y0..y1 {
                            let iy = ((oy * s) as i64 + offy) as usize;
                            let grow = &g_plane[oy * ow..(oy + 1) * ow];
                            let rbase = base + iy * w;
                            for ox in x0..x1 {
                                let ix = ((ox * s) as i64 + offx) as usize;
                                let gv = grow[ox];
                                acc += x[rbase + ix] * gv;
                                gx[rbase + ix] += wv * gv;
                            }
                        }
                        gw[widx] += acc;
                    }
                }
            }
        }
    }
    Ok((
        Tensor::new(input.shape().to_vec(), gx)?,
        Tensor::new(weight.shape().to_vec(), gw)?,
    ))
}

/// 3x3 pooling window geometry.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolSpec {
    pub stride: usize,
    pub padding: usize,
}

pub const POOL_WINDOW: usize = 3;

impl PoolSpec {
    pub fn new(stride: usize, padding: usize) -> Self {
        Self { stride, padding }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if self.stride == 0 {
            return Err(Error::invalid("pool stride must be positive"));
        }
        let oh = output_extent(h, POOL_WINDOW, self.stride, self.padding, 1);
        let ow = output_extent(w, POOL_WINDOW, self.stride, self.padding, 1);
        if oh < 1 || ow < 1 {
            return Err(Error::EmptyOutput {
                op: "pool",
                extent: oh.min(ow),
            });
        }
        Ok((oh as usize, ow as usize))
    }
}

/// Max pooling. Padding cells never win; ties go to the first cell in scan
/// order. Returns the output and the flat input index of each winner.
pub fn max_pool_forward(input: &Tensor, spec: &PoolSpec) -> Result<(Tensor, Vec<usize>)> {
    let (n, c, h, w) = input.dims4()?;
    let (oh, ow) = spec.output_hw(h, w)?;
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = usize::MAX;
                for ky in 0..POOL_WINDOW {
                    let iy = (oy * spec.stride + ky) as i64 - spec.padding as i64;
                    if iy < 0 || iy >= h as i64 {
                        continue;
                    }
                    for kx in 0..POOL_WINDOW {
                        let ix = (ox * spec.stride + kx) as i64 - spec.padding as i64;
                        if ix < 0 || ix >= w as i64 {
                            continue;
                        }
                        let idx = base + iy as usize * w + ix as usize;
                        if best_idx == usize::MAX || x[idx] > best {
                            best = x[idx];
                            best_idx = idx;
                        }
                    }
                }
                if best_idx == usize::MAX {
                    return Err(Error::invalid("max_pool window covers only padding"));
                }
                out.push(best);
                arg.push(best_idx);
            }
        }
    }
    Ok((Tensor::new(vec![n, c, oh, ow], out)?, arg))
}

pub fn max_pool_backward(input_shape: &[usize], argmax: &[usize], grad_out: &Tensor) -> Result<Tensor> {
    let mut gx = Tensor::zeros(input_shape);
    let d = gx.data_mut();
    for (&idx, &g) in argmax.iter().zip(grad_out.data()) {
        d[idx] += g;
    }
    Ok(gx)
}

/// Average pooling; padding cells are excluded from the divisor.
pub fn avg_pool_forward(input: &Tensor, spec: &PoolSpec) -> Result<Tensor> {
    let (n, c, h, w) = input.dims4()?;
    let (oh, ow) = spec.output_hw(h, w)?;
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let (ys, xs) = pool_window(oy, ox, h, w, spec);
                let mut acc = 0.0;
                for iy in ys.clone() {
                    for ix in xs.clone() {
                        acc += x[base + iy * w + ix];
                    }
                }
                out.push(acc / (ys.len() * xs.len()) as f64);
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], out)
}

pub fn avg_pool_backward(input_shape: &[usize], spec: &PoolSpec, grad_out: &Tensor) -> Result<Tensor> {
    let (h, w) = (input_shape[2], input_shape[3]);
    let (oh, ow) = spec.output_hw(h, w)?;
    let planes = input_shape[0] * input_shape[1];
    let mut gx = Tensor::zeros(input_shape);
    let d = gx.data_mut();
    let g = grad_out.data();
    for plane in 0..planes {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let (ys, xs) = pool_window(oy, ox, h, w, spec);
                let share = g[(plane * oh + oy) * ow + ox] / (ys.len() * xs.len()) as f64;
                for iy in ys.clone() {
                    for ix in xs.clone() {
                        d[base + iy * w + ix] += share;
                    }
                }
            }
        }
    }
    Ok(gx)
}

fn pool_window(
    oy: usize,
    ox: usize,
    h: usize,
    w: usize,
    spec: &PoolSpec,
) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
    let clip = |o: usize, len: usize| {
        let start = (o * spec.stride) as i64 - spec.padding as i64;
        let lo = start.max(0) as usize;
        let hi = ((start + POOL_WINDOW as i64).min(len as i64)).max(0) as usize;
        lo..hi.max(lo)
    };
    (clip(oy, h), clip(ox, w))
}
