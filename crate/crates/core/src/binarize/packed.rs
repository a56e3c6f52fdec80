use crate::autograd::{ConvSpec, Tensor};
use crate::error::{Error, Result};

/// Sign tensor packed into 64-bit words, bit set ↔ `+1`.
///
/// Rank-4 tensors `[A, C, H, W]` are packed channel-minor: every `(a, y, x)`
/// position owns one lane of `C` bits, which is what the popcount
/// convolution consumes. Any other rank is packed as a single flat lane.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PackedBitTensor {
    shape: Vec<usize>,
    lane_len: usize,
    words_per_lane: usize,
    words: Vec<u64>,
}

impl PackedBitTensor {
    pub fn pack(t: &Tensor) -> Self {
        let shape = t.shape().to_vec();
        let d = t.data();
        match shape[..] {
            [a, c, h, w] => {
                let wpl = c.div_ceil(64);
                let mut words = vec![0u64; a * h * w * wpl];
                for ai in 0..a {
                    for ch in 0..c {
                        for y in 0..h {
                            for x in 0..w {
                                if d[((ai * c + ch) * h + y) * w + x] >= 0.0 {
                                    let lane = (ai * h + y) * w + x;
                                    words[lane * wpl + ch / 64] |= 1u64 << (ch % 64);
                                }
                            }
                        }
                    }
                }
                Self {
                    shape,
                    lane_len: c,
                    words_per_lane: wpl,
                    words,
                }
            }
            _ => {
                let n = d.len();
                let wpl = n.div_ceil(64);
                let mut words = vec![0u64; wpl];
                for (i, &v) in d.iter().enumerate() {
                    if v >= 0.0 {
                        words[i / 64] |= 1u64 << (i % 64);
                    }
                }
                Self {
                    shape,
                    lane_len: n,
                    words_per_lane: wpl,
                    words,
                }
            }
        }
    }

    pub fn unpack(&self) -> Tensor {
        let bit = |lane: usize, i: usize| -> f64 {
            if self.words[lane * self.words_per_lane + i / 64] >> (i % 64) & 1 == 1 {
                1.0
            } else {
                -1.0
            }
        };
        match self.shape[..] {
            [_, c, h, w] => Tensor::from_fn(&self.shape, |k| {
                let x = k % w;
                let y = (k / w) % h;
                let ch = (k / (w * h)) % c;
                let a = k / (w * h * c);
                bit((a * h + y) * w + x, ch)
            }),
            _ => Tensor::from_fn(&self.shape, |k| bit(0, k)),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    /// Bits per lane.
    pub fn lane_len(&self) -> usize {
        self.lane_len
    }

    /// Valid bits in the last word of each lane.
    pub fn tail_bits(&self) -> usize {
        match self.lane_len % 64 {
            0 if self.lane_len > 0 => 64,
            r => r,
        }
    }

    fn lane(&self, idx: usize) -> &[u64] {
        &self.words[idx * self.words_per_lane..(idx + 1) * self.words_per_lane]
    }

    fn tail_mask(&self) -> u64 {
        match self.tail_bits() {
            64 => u64::MAX,
            r => (1u64 << r) - 1,
        }
    }
}

/// `±1` dot product over one lane pair: `2·popcount(XNOR) − n`.
#[inline]
fn lane_dot(a: &[u64], b: &[u64], n: usize, tail_mask: u64) -> i64 {
    let last = a.len() - 1;
    let mut matches = 0u32;
    for i in 0..last {
        matches += (!(a[i] ^ b[i])).count_ones();
    }
    matches += (!(a[last] ^ b[last]) & tail_mask).count_ones();
    2 * matches as i64 - n as i64
}

/// Binary convolution on packed signs. Equals
/// `conv2d(unpack(input), s · unpack(weight))` with zero padding.
pub fn xnor_conv2d(
    input: &PackedBitTensor,
    weight: &PackedBitTensor,
    scale: &[f64],
    spec: &ConvSpec,
) -> Result<Tensor> {
    let [n, c, h, w] = input.shape[..] else {
        return Err(Error::invalid("xnor_conv2d input must be rank 4"));
    };
    let [co, wc, kh, kw] = weight.shape[..] else {
        return Err(Error::invalid("xnor_conv2d weight must be rank 4"));
    };
    if c != wc || c != spec.c_in || input.lane_len != weight.lane_len {
        return Err(Error::ShapeMismatch {
            context: "xnor_conv2d",
            dim: "packed channel length",
            expected: spec.c_in,
            actual: if c != spec.c_in { c } else { wc },
        });
    }
    if co != spec.c_out || kh != spec.kernel_h || kw != spec.kernel_w {
        return Err(Error::ShapeMismatch {
            context: "xnor_conv2d",
            dim: "weight geometry",
            expected: spec.c_out * spec.kernel_h * spec.kernel_w,
            actual: co * kh * kw,
        });
    }
    if scale.len() != co {
        return Err(Error::ShapeMismatch {
            context: "xnor_conv2d",
            dim: "scale length",
            expected: co,
            actual: scale.len(),
        });
    }
    let (oh, ow) = spec.output_hw(h, w)?;
    let mask = input.tail_mask();
    let (s, p, d) = (spec.stride as i64, spec.padding as i64, spec.dilation as i64);
    let mut out = vec![0.0; n * co * oh * ow];
    for b in 0..n {
        for o in 0..co {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0i64;
                    for ky in 0..kh {
                        let iy = oy as i64 * s + ky as i64 * d - p;
                        if iy < 0 || iy >= h as i64 {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = ox as i64 * s + kx as i64 * d - p;
                            if ix < 0 || ix >= w as i64 {
                                continue;
                            }
                            let a = input.lane((b * h + iy as usize) * w + ix as usize);
                            let wl = weight.lane((o * kh + ky) * kw + kx);
                            acc += lane_dot(a, wl, c, mask);
                        }
                    }
                    out[((b * co + o) * oh + oy) * ow + ox] = scale[o] * acc as f64;
                }
            }
        }
    }
    Tensor::new(vec![n, co, oh, ow], out)
}
