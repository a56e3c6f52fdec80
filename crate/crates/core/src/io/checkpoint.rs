use std::collections::BTreeMap;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use super::{put_bytes, put_tensor_body, put_u32, read_file, write_atomic, Dtype, Reader};
use crate::autograd::{Adam, BnState, SgdMomentum, Tensor};
use crate::cell::{Architecture, NetMode, Network, PrecisionPolicy};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"NCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

const RUNNING_MEAN: &str = ".running_mean";
const RUNNING_VAR: &str = ".running_var";
const BN_PREFIX: &str = "bn:";

/// Position of a ChaCha8 generator.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum OptimizerState {
    Sgd(SgdMomentum),
    Adam(Adam),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub stage: String,
    pub mode: NetMode,
    pub policy: PrecisionPolicy,
    pub seed: u64,
    pub epochs: usize,
}

/// Architecture, weights, BN statistics, optimizer and RNG state.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub arch: Architecture,
    pub meta: CheckpointMeta,
    pub tensors: BTreeMap<String, Tensor>,
    pub optimizers: BTreeMap<String, OptimizerState>,
    pub rng: RngState,
}

impl Checkpoint {
    pub fn from_network(
        net: &Network,
        meta: CheckpointMeta,
        optimizers: BTreeMap<String, OptimizerState>,
        rng: RngState,
    ) -> Self {
        let mut tensors = net.params.clone();
        for (name, s) in &net.bn {
            let c = s.channels();
            tensors.insert(
                format!("{BN_PREFIX}{name}{RUNNING_MEAN}"),
                Tensor::new(vec![c], s.running_mean.clone()).expect("bn width"),
            );
            tensors.insert(
                format!("{BN_PREFIX}{name}{RUNNING_VAR}"),
                Tensor::new(vec![c], s.running_var.clone()).expect("bn width"),
            );
        }
        Self {
            arch: net.architecture().clone(),
            meta,
            tensors,
            optimizers,
            rng,
        }
    }

    /// Rebuilds the network and loads every tensor.
    pub fn to_network(&self) -> Result<Network> {
        let mut net = Network::from_architecture(self.arch.clone(), self.meta.mode, self.meta.policy, self.meta.seed)?;
        let mut params = BTreeMap::new();
        let mut bn: BTreeMap<String, BnState> = BTreeMap::new();
        for (name, t) in &self.tensors {
            if let Some(rest) = name.strip_prefix(BN_PREFIX) {
                let (key, is_mean) = if let Some(k) = rest.strip_suffix(RUNNING_MEAN) {
                    (k, true)
                } else if let Some(k) = rest.strip_suffix(RUNNING_VAR) {
                    (k, false)
                } else {
                    return Err(Error::ArchitectureMismatch(format!("unexpected tensor `{name}`")));
                };
                let s = bn.entry(key.to_string()).or_insert_with(|| BnState::new(t.len()));
                if is_mean {
                    s.running_mean = t.data().to_vec();
                } else {
                    s.running_var = t.data().to_vec();
                }
            } else {
                params.insert(name.clone(), t.clone());
            }
        }
        if params.len() != net.params.len() || bn.len() != net.bn.len() {
            return Err(Error::ArchitectureMismatch(format!(
                "checkpoint holds {} parameters and {} BN layers, architecture needs {} and {}",
                params.len(),
                bn.len(),
                net.params.len(),
                net.bn.len()
            )));
        }
        net.load_state(&params, &bn)?;
        Ok(net)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = CHECKPOINT_MAGIC.to_vec();
        put_u32(&mut out, CHECKPOINT_VERSION);
        put_bytes(&mut out, &serde_json::to_vec(&self.arch)?);
        put_bytes(&mut out, &serde_json::to_vec(&self.meta)?);
        put_u32(&mut out, self.tensors.len() as u32);
        for (name, t) in &self.tensors {
            put_bytes(&mut out, name.as_bytes());
            put_tensor_body(&mut out, t, Dtype::F64);
        }
        put_bytes(&mut out, &serde_json::to_vec(&self.optimizers)?);
        out.extend_from_slice(&self.rng.seed);
        out.extend_from_slice(&self.rng.stream.to_le_bytes());
        out.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        Ok(out)
    }

    pub fn decode(buf: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader::new(buf);
        r.magic(CHECKPOINT_MAGIC, path)?;
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                what: "checkpoint",
                found: version,
                supported: CHECKPOINT_VERSION,
            });
        }
        let arch = serde_json::from_slice(r.bytes()?)?;
        let meta = serde_json::from_slice(r.bytes()?)?;
        let n = r.u32()? as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..n {
            let name = String::from_utf8(r.bytes()?.to_vec())
                .map_err(|_| Error::invalid("tensor name is not UTF-8"))?;
            let t = r.tensor_body()?;
            tensors.insert(name, t);
        }
        let optimizers = serde_json::from_slice(r.bytes()?)?;
        let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let stream = r.u64()?;
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
        r.finish()?;
        Ok(Self {
            arch,
            meta,
            tensors,
            optimizers,
            rng: RngState { seed, stream, word_pos },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&read_file(path)?, path)
    }
}
