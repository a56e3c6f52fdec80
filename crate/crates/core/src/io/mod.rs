//! Binary file formats, datasets, run configuration and synthetic data.

mod checkpoint;
mod config;
mod synth;

use std::fs;
use std::path::{Path, PathBuf};

pub use checkpoint::{Checkpoint, CheckpointMeta, OptimizerState, RngState, CHECKPOINT_VERSION};
pub use config::{DataPaths, RunConfig, SupernetConfig};
pub use synth::{gen_synthetic, Difficulty, SynthSpec};

use crate::autograd::Tensor;
use crate::error::{Error, Result};

pub const TENSOR_MAGIC: [u8; 4] = *b"NTSR";
pub const LABEL_MAGIC: [u8; 4] = *b"NLBL";
pub const TENSOR_VERSION: u8 = 1;

/// Element type tag of a serialized tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32 = 0,
    F64 = 1,
}

/// Writes via a sibling temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Bounds-checked little-endian cursor.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.saturating_add(n);
        if end > self.buf.len() {
            return Err(Error::Truncated {
                offset: self.pos as u64,
                needed: end - self.buf.len(),
            });
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn magic(&mut self, expected: [u8; 4], path: &Path) -> Result<()> {
        let avail = self.buf.len().min(4);
        let found = &self.buf[..avail];
        if found != expected {
            return Err(Error::BadMagic {
                path: path.to_path_buf(),
                expected,
                found: found.to_vec(),
            });
        }
        self.pos = 4;
        Ok(())
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }

    pub fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::invalid(format!(
                "{} trailing bytes after offset {}",
                self.buf.len() - self.pos,
                self.pos
            )));
        }
        Ok(())
    }

    /// `dtype, rank, extents, payload`.
    pub fn tensor_body(&mut self) -> Result<Tensor> {
        let dtype = self.u8()?;
        let rank = self.u8()? as usize;
        let shape = (0..rank)
            .map(|_| self.u32().map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = match dtype {
            0 => self
                .take(n * 4)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect(),
            1 => self
                .take(n * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
            other => return Err(Error::invalid(format!("unknown tensor dtype tag {other}"))),
        };
        Tensor::new(shape, data)
    }
}

pub(crate) fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    put_u32(out, b.len() as u32);
    out.extend_from_slice(b);
}

pub(crate) fn put_tensor_body(out: &mut Vec<u8>, t: &Tensor, dtype: Dtype) {
    out.push(dtype as u8);
    out.push(t.rank() as u8);
    for &e in t.shape() {
        put_u32(out, e as u32);
    }
    match dtype {
        Dtype::F32 => t.data().iter().for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
        Dtype::F64 => t.data().iter().for_each(|&v| out.extend_from_slice(&v.to_le_bytes())),
    }
}

pub fn encode_tensor(t: &Tensor, dtype: Dtype) -> Vec<u8> {
    let mut out = TENSOR_MAGIC.to_vec();
    out.push(TENSOR_VERSION);
    put_tensor_body(&mut out, t, dtype);
    out
}

pub fn save_tensor(path: &Path, t: &Tensor) -> Result<()> {
    write_atomic(path, &encode_tensor(t, Dtype::F32))
}

pub fn load_tensor(path: &Path) -> Result<Tensor> {
    let buf = read_file(path)?;
    let mut r = Reader::new(&buf);
    r.magic(TENSOR_MAGIC, path)?;
    let v = r.u8()?;
    if v != TENSOR_VERSION {
        return Err(Error::Version {
            what: "tensor file",
            found: v as u32,
            supported: TENSOR_VERSION as u32,
        });
    }
    let t = r.tensor_body()?;
    r.finish()?;
    Ok(t)
}

pub fn save_labels(path: &Path, labels: &[usize]) -> Result<()> {
    let mut out = LABEL_MAGIC.to_vec();
    put_u32(&mut out, labels.len() as u32);
    for &l in labels {
        put_u32(&mut out, l as u32);
    }
    write_atomic(path, &out)
}

pub fn load_labels(path: &Path) -> Result<Vec<usize>> {
    let buf = read_file(path)?;
    let mut r = Reader::new(&buf);
    r.magic(LABEL_MAGIC, path)?;
    let n = r.u32()? as usize;
    let labels = (0..n).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
    r.finish()?;
    Ok(labels)
}

/// Images `[N, C, H, W]` with one label per image.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        let (n, _, _, _) = images.dims4()?;
        if n != labels.len() {
            return Err(Error::Dataset(format!("{n} images but {} labels", labels.len())));
        }
        if classes < 2 {
            return Err(Error::Dataset("at least two classes required".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange { label: bad, classes });
        }
        Ok(Self { images, labels, classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(C, H, W)` of every image.
    pub fn image_shape(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        Ok(Self {
            images: self.images.gather_rows(idx)?,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        })
    }

    pub fn save(&self, images: &Path, labels: &Path) -> Result<()> {
        save_tensor(images, &self.images)?;
        save_labels(labels, &self.labels)
    }
}

/// Loads an NTSR/NLBL pair. `classes` defaults to `max label + 1`.
pub fn load_dataset(images: &Path, labels: &Path, classes: Option<usize>) -> Result<Dataset> {
    let t = load_tensor(images)?;
    let l = load_labels(labels)?;
    if t.rank() != 4 {
        return Err(Error::Dataset(format!("image tensor must be rank 4, got {:?}", t.shape())));
    }
    let classes = classes.unwrap_or_else(|| l.iter().max().map_or(0, |m| m + 1));
    Dataset::new(t, l, classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_and_label_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let t = Tensor::from_fn(&[2, 1, 3, 3], |i| i as f64 * 0.5 - 2.0);
        let p = dir.path().join("x.ntsr");
        save_tensor(&p, &t).unwrap();
        assert_eq!(load_tensor(&p).unwrap(), t);
        let lp = dir.path().join("y.nlbl");
        save_labels(&lp, &[0, 1]).unwrap();
        assert_eq!(load_labels(&lp).unwrap(), vec![0, 1]);
        let d = load_dataset(&p, &lp, None).unwrap();
        assert_eq!(d.classes, 2);
    }

    #[test]
    fn tensor_header_layout() {
        let b = encode_tensor(&Tensor::ones(&[2, 3]), Dtype::F32);
        assert_eq!(&b[..4], b"NTSR");
        assert_eq!(b[4..7], [1, 0, 2]);
        assert_eq!(b[7..11], 2u32.to_le_bytes());
        assert_eq!(b[11..15], 3u32.to_le_bytes());
        assert_eq!(b.len(), 15 + 6 * 4);
        assert_eq!(b[15..19], 1.0f32.to_le_bytes());
    }

    #[test]
    fn structured_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad");
        fs::write(&p, b"XXXX\x01").unwrap();
        assert!(matches!(load_tensor(&p), Err(Error::BadMagic { .. })));
        let full = encode_tensor(&Tensor::ones(&[4]), Dtype::F32);
        fs::write(&p, &full[..full.len() - 3]).unwrap();
        assert!(matches!(load_tensor(&p), Err(Error::Truncated { offset: 11, needed: 3 })));
        let mut v2 = full.clone();
        v2[4] = 9;
        fs::write(&p, &v2).unwrap();
        assert!(matches!(load_tensor(&p), Err(Error::Version { found: 9, .. })));
    }

    #[test]
    fn label_count_mismatch() {
        let e = Dataset::new(Tensor::zeros(&[3, 1, 2, 2]), vec![0, 1], 2);
        assert!(matches!(e, Err(Error::Dataset(_))));
        let e = Dataset::new(Tensor::zeros(&[2, 1, 2, 2]), vec![0, 2], 2);
        assert!(matches!(e, Err(Error::LabelOutOfRange { label: 2, classes: 2 })));
    }
}
