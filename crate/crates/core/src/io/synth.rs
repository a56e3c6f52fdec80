use std::f64::consts::PI;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::autograd::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    /// One constant intensity per class, no noise.
    Trivial,
    /// Oriented stripes with small phase jitter and mild noise.
    Easy,
    /// Oriented stripes with uniform phase and strong noise.
    Hard,
}

impl FromStr for Difficulty {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "trivial" => Ok(Difficulty::Trivial),
            "easy" => Ok(Difficulty::Easy),
            "hard" => Ok(Difficulty::Hard),
            other => Err(Error::invalid(format!("unknown difficulty `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub classes: usize,
    pub samples: usize,
    pub size: usize,
    pub channels: usize,
    pub difficulty: Difficulty,
    pub seed: u64,
}

pub const MIN_IMAGE_SIZE: usize = 8;
const PERIOD: f64 = 4.0;

/// Class-conditional textures, labels cycling `0, 1, ..., classes-1`.
///
/// Class `c` uses horizontal or vertical stripes (`c` even/odd) with period
/// `PERIOD · (1 + c/2)`, so every class is closed under horizontal flips.
/// Values are rounded to `f32` so the on-disk copy is exact.
pub fn gen_synthetic(spec: &SynthSpec) -> Result<Dataset> {
    if spec.classes < 2 {
        return Err(Error::invalid("gen_synthetic needs at least two classes"));
    }
    if spec.samples == 0 || spec.channels == 0 {
        return Err(Error::invalid("samples and channels must be positive"));
    }
    let longest = PERIOD * (1 + (spec.classes - 1) / 2) as f64;
    if spec.size < MIN_IMAGE_SIZE || (spec.difficulty != Difficulty::Trivial && (spec.size as f64) < longest) {
        return Err(Error::invalid(format!(
            "image size {} too small for the pattern scale (need at least {})",
            spec.size,
            MIN_IMAGE_SIZE.max(longest as usize)
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (noise, jitter) = match spec.difficulty {
        Difficulty::Trivial => (0.0, 0.0),
        Difficulty::Easy => (0.3, PI / 4.0),
        Difficulty::Hard => (0.8, PI),
    };
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let s = spec.size;
    let per = spec.channels * s * s;
    let mut data = Vec::with_capacity(spec.samples * per);
    let mut labels = Vec::with_capacity(spec.samples);
    for i in 0..spec.samples {
        let c = i % spec.classes;
        labels.push(c);
        if spec.difficulty == Difficulty::Trivial {
            let v = 2.0 * (c as f64 + 0.5) / spec.classes as f64 - 1.0;
            data.extend(std::iter::repeat_n(v as f32 as f64, per));
            continue;
        }
        let phase = rng.random_range(-jitter..=jitter);
        let period = PERIOD * (1 + c / 2) as f64;
        let vertical = c % 2 == 1;
        for _ in 0..spec.channels {
            for y in 0..s {
                for x in 0..s {
                    let t = if vertical { y } else { x } as f64;
                    let v = (2.0 * PI * t / period + phase).cos() + noise * normal.sample(&mut rng);
                    data.push(v as f32 as f64);
                }
            }
        }
    }
    let images = Tensor::new(vec![spec.samples, spec.channels, s, s], data)?;
    Dataset::new(images, labels, spec.classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(d: Difficulty) -> SynthSpec {
        SynthSpec {
            classes: 2,
            samples: 40,
            size: 8,
            channels: 1,
            difficulty: d,
            seed: 9,
        }
    }

    #[test]
    fn deterministic() {
        assert_eq!(gen_synthetic(&spec(Difficulty::Easy)).unwrap(), gen_synthetic(&spec(Difficulty::Easy)).unwrap());
    }

    #[test]
    fn trivial_is_mean_separable() {
        let d = gen_synthetic(&spec(Difficulty::Trivial)).unwrap();
        let per = 64;
        for (i, &l) in d.labels.iter().enumerate() {
            let v = d.images.data()[i * per];
            assert_eq!(v, if l == 0 { -0.5 } else { 0.5 });
        }
    }

    #[test]
    fn rejects_bad_specs() {
        let mut s = spec(Difficulty::Easy);
        s.size = 6;
        assert!(gen_synthetic(&s).is_err());
        s.size = 8;
        s.classes = 1;
        assert!(gen_synthetic(&s).is_err());
        s.classes = 6;
        assert!(gen_synthetic(&s).is_err());
    }
}
