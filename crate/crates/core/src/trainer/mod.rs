//! Search, pretraining and finetuning stages, plus evaluation.

mod log;

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use log::{AlphaSnapshot, EpochRecord, StageLog};

use crate::autograd::{Adam, BnMode, SgdMomentum, Tensor};
use crate::cell::{Architecture, Genotype, NetMode, Network, PrecisionPolicy};
use crate::error::{Error, Result};
use crate::io::{Checkpoint, CheckpointMeta, Dataset, OptimizerState, RngState};
use crate::nasgate::{gate_grad_to_alpha, single_sample_grad};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    #[default]
    Constant,
    Cosine,
}

impl Schedule {
    pub fn lr(self, base: f64, epoch: usize, epochs: usize) -> f64 {
        match self {
            Schedule::Constant => base,
            Schedule::Cosine => 0.5 * base * (1.0 + (std::f64::consts::PI * epoch as f64 / epochs.max(1) as f64).cos()),
        }
    }
}

/// Optimizer and loop settings of the three stages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Momentum SGD on weights (search and pretrain).
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Adam on architecture parameters.
    pub arch_lr: f64,
    pub arch_beta1: f64,
    pub arch_beta2: f64,
    pub arch_weight_decay: f64,
    /// When false the search stage never touches `α`.
    pub update_arch: bool,
    /// Adam on latent weights during finetuning; weight decay is always 0.
    pub finetune_lr: f64,
    pub schedule: Schedule,
    /// Random flip and shift by up to `crop_pad` pixels.
    pub augment: bool,
    pub crop_pad: usize,
    pub top_k: usize,
    /// Epoch interval of intermediate checkpoints; 0 keeps only the last.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            arch_lr: 0.2,
            arch_beta1: 0.5,
            arch_beta2: 0.999,
            arch_weight_decay: 0.0,
            update_arch: true,
            finetune_lr: 1e-3,
            schedule: Schedule::Constant,
            augment: true,
            crop_pad: 1,
            top_k: 1,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    fn check(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        if self.top_k == 0 {
            return Err(Error::invalid("top-k must be positive"));
        }
        Ok(())
    }
}

impl OptimizerState {
    fn begin_step(&mut self) {
        if let OptimizerState::Adam(a) = self {
            a.begin_step();
        }
    }

    fn step(&mut self, name: &str, p: &mut Tensor, g: &Tensor) -> Result<()> {
        match self {
            OptimizerState::Sgd(o) => o.step(name, p, g),
            OptimizerState::Adam(o) => o.step(name, p, g),
        }
    }

    fn set_lr(&mut self, lr: f64) {
        match self {
            OptimizerState::Sgd(o) => o.lr = lr,
            OptimizerState::Adam(o) => o.lr = lr,
        }
    }
}

/// Anything producing `[N, K]` logits.
pub trait Classifier {
    fn logits(&mut self, x: &Tensor) -> Result<Tensor>;
}

impl Classifier for Network {
    fn logits(&mut self, x: &Tensor) -> Result<Tensor> {
        self.predict(x)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub loss: f64,
    pub top1: f64,
    pub topk: f64,
    pub k: usize,
}

/// Rank of `label` in `row`; equal logits rank the lower class first.
fn label_rank(row: &[f64], label: usize) -> usize {
    let v = row[label];
    row.iter()
        .enumerate()
        .filter(|&(j, &x)| x > v || (x == v && j < label))
        .count()
}

fn batch_stats(logits: &Tensor, labels: &[usize], k: usize) -> Result<(f64, usize, usize)> {
    let s = logits.shape();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(Error::invalid(format!("logits shape {s:?} does not match {} labels", labels.len())));
    }
    let classes = s[1];
    let (mut loss, mut c1, mut ck) = (0.0, 0, 0);
    for (b, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::LabelOutOfRange { label: l, classes });
        }
        let row = &logits.data()[b * classes..(b + 1) * classes];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
        loss += z.ln() + m - row[l];
        let r = label_rank(row, l);
        c1 += usize::from(r == 0);
        ck += usize::from(r < k);
    }
    Ok((loss, c1, ck))
}

/// Single-pass accuracy over `data` in order; deterministic.
pub fn evaluate<C: Classifier + ?Sized>(model: &mut C, data: &Dataset, batch: usize, k: usize) -> Result<Evaluation> {
    if data.is_empty() || batch == 0 || k == 0 {
        return Err(Error::invalid("evaluation needs data, a positive batch size and k"));
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let (mut loss, mut c1, mut ck) = (0.0, 0, 0);
    for chunk in idx.chunks(batch) {
        let x = data.images.gather_rows(chunk)?;
        let labels: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
        let (l, a, b) = batch_stats(&model.logits(&x)?, &labels, k)?;
        loss += l;
        c1 += a;
        ck += b;
    }
    let n = data.len() as f64;
    Ok(Evaluation {
        loss: loss / n,
        top1: c1 as f64 / n,
        topk: ck as f64 / n,
        k,
    })
}

/// Random horizontal flip and shift with zero fill, per image.
pub fn augment<R: Rng + ?Sized>(x: &Tensor, pad: usize, rng: &mut R) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    let p = pad as i64;
    for b in 0..n {
        let flip = rng.random::<bool>();
        let dy = if p > 0 { rng.random_range(-p..=p) } else { 0 };
        let dx = if p > 0 { rng.random_range(-p..=p) } else { 0 };
        for ch in 0..c {
            let base = (b * c + ch) * h * w;
            for y in 0..h {
                let sy = y as i64 + dy;
                if sy < 0 || sy >= h as i64 {
                    continue;
                }
                for xx in 0..w {
                    let fx = if flip { w - 1 - xx } else { xx };
                    let sx = fx as i64 + dx;
                    if sx < 0 || sx >= w as i64 {
                        continue;
                    }
                    out[base + y * w + xx] = src[base + sy as usize * w + sx as usize];
                }
            }
        }
    }
    Tensor::new(vec![n, c, h, w], out)
}

/// Trained network together with everything needed to checkpoint it.
#[derive(Clone, Debug)]
pub struct StageOutput {
    pub net: Network,
    pub log: StageLog,
    pub optimizers: BTreeMap<String, OptimizerState>,
    pub rng: RngState,
    pub seed: u64,
}

impl StageOutput {
    pub fn checkpoint(&self) -> Checkpoint {
        snapshot(&self.net, &self.log, self.optimizers.clone(), self.rng, self.seed)
    }
}

fn snapshot(
    net: &Network,
    log: &StageLog,
    optimizers: BTreeMap<String, OptimizerState>,
    rng: RngState,
    seed: u64,
) -> Checkpoint {
    let meta = CheckpointMeta {
        stage: log.stage.clone(),
        mode: net.mode(),
        policy: net.policy(),
        seed,
        epochs: log.epochs(),
    };
    Checkpoint::from_network(net, meta, optimizers, rng)
}

/// State visible to the per-epoch hook.
pub struct EpochView<'a> {
    pub epoch: usize,
    pub net: &'a Network,
    pub log: &'a StageLog,
    optimizers: Vec<(&'static str, &'a OptimizerState)>,
    rng: &'a ChaCha8Rng,
    seed: u64,
}

impl EpochView<'_> {
    /// Checkpoint of the stage as of the end of this epoch.
    pub fn checkpoint(&self) -> Checkpoint {
        let opts = self.optimizers.iter().map(|(k, o)| (k.to_string(), (*o).clone())).collect();
        snapshot(self.net, self.log, opts, RngState::capture(self.rng), self.seed)
    }
}

/// Called after every epoch.
pub type EpochHook<'a> = &'a mut dyn FnMut(&EpochView) -> Result<()>;

const SEARCH_STREAM: u64 = 1;
const PRETRAIN_STREAM: u64 = 2;
const FINETUNE_STREAM: u64 = 3;

fn stage_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn labels_of(data: &Dataset, idx: &[usize]) -> Vec<usize> {
    idx.iter().map(|&i| data.labels[i]).collect()
}

fn check_data(net: &Network, data: &Dataset) -> Result<()> {
    if data.classes > net.classes() {
        return Err(Error::Dataset(format!(
            "dataset has {} classes, model predicts {}",
            data.classes,
            net.classes()
        )));
    }
    let (c, _, _) = data.image_shape();
    if c != net.stem().in_channels {
        return Err(Error::Dataset(format!(
            "dataset images have {c} channels, model expects {}",
            net.stem().in_channels
        )));
    }
    Ok(())
}

/// Alternating search on a half/half split of `data`: per batch, `α` is
/// updated on a validation batch (Adam via the gate estimator), then the
/// weights on a training batch (momentum SGD). Gates are resampled for
/// every forward pass.
pub fn search_stage(
    mut net: Network,
    data: &Dataset,
    cfg: &TrainConfig,
    seed: u64,
    mut hook: Option<EpochHook>,
) -> Result<StageOutput> {
    cfg.check()?;
    if net.mode() != NetMode::Search {
        return Err(Error::invalid("search stage needs a supernet"));
    }
    check_data(&net, data)?;
    let mut rng = stage_rng(seed, SEARCH_STREAM);
    let mut perm: Vec<usize> = (0..data.len()).collect();
    perm.shuffle(&mut rng);
    let half = data.len() / 2;
    let (mut train, mut val) = (perm[..half].to_vec(), perm[half..].to_vec());
    if train.is_empty() || val.is_empty() {
        return Err(Error::Dataset("search split is empty; need at least two samples".into()));
    }
    let mut weights = OptimizerState::Sgd(SgdMomentum::new(cfg.lr, cfg.momentum, cfg.weight_decay)?);
    let mut arch = OptimizerState::Adam(Adam::new(cfg.arch_lr, cfg.arch_beta1, cfg.arch_beta2, 1e-8, cfg.arch_weight_decay)?);
    let mut log = StageLog::new("search");
    let bs = cfg.batch_size;
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        weights.set_lr(cfg.schedule.lr(cfg.lr, epoch, cfg.epochs));
        train.shuffle(&mut rng);
        val.shuffle(&mut rng);
        let val_batches: Vec<&[usize]> = val.chunks(bs).collect();
        let (mut tr, mut va) = ([0.0; 2], [0.0; 2]);
        for (t, tb) in train.chunks(bs).enumerate() {
            if cfg.update_arch {
                let vb = val_batches[t % val_batches.len()];
                let (loss, correct) = arch_step(&mut net, data, vb, &mut arch, &mut rng)?;
                va[0] += loss * vb.len() as f64;
                va[1] += correct as f64;
            }
            let gates = net.sample_gates(&mut rng)?;
            let x = data.images.gather_rows(tb)?;
            let labels = labels_of(data, tb);
            let mut pass = net.forward(&x, Some(&gates), BnMode::Train)?;
            let loss = pass.graph.softmax_cross_entropy(pass.logits, &labels)?;
            let (_, correct, _) = batch_stats(pass.graph.value(pass.logits), &labels, 1)?;
            tr[0] += pass.graph.value(loss).item() * tb.len() as f64;
            tr[1] += correct as f64;
            let grads = pass.graph.backward(loss)?;
            weights.begin_step();
            for (name, &v) in &pass.params {
                let p = net.params.get_mut(name).expect("bound parameter");
                weights.step(name, p, &grads.get(v))?;
            }
        }
        let nt = train.len() as f64;
        log.push(epoch, "train", tr[0] / nt, tr[1] / nt);
        if cfg.update_arch {
            let steps = train.len().div_ceil(bs);
            let seen: f64 = (0..steps).map(|t| val_batches[t % val_batches.len()].len() as f64).sum();
            log.push(epoch, "val", va[0] / seen, va[1] / seen);
        }
        log.push_alpha(epoch, &net);
        log.wall_clock.push(start.elapsed().as_secs_f64());
        if let Some(h) = hook.as_mut() {
            h(&EpochView {
                epoch,
                net: &net,
                log: &log,
                optimizers: vec![("weights", &weights), ("arch", &arch)],
                rng: &rng,
                seed,
            })?;
        }
    }
    Ok(StageOutput {
        net,
        log,
        optimizers: BTreeMap::from([("weights".into(), weights), ("arch".into(), arch)]),
        rng: RngState::capture(&rng),
        seed,
    })
}

/// One architecture update on validation batch `idx`; returns the batch
/// loss and the number of correct predictions.
fn arch_step(
    net: &mut Network,
    data: &Dataset,
    idx: &[usize],
    opt: &mut OptimizerState,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, usize)> {
    let gates = net.sample_gates(rng)?;
    let x = data.images.gather_rows(idx)?;
    let labels = labels_of(data, idx);
    let mut pass = net.forward(&x, Some(&gates), BnMode::Train)?;
    let loss = pass.graph.softmax_cross_entropy(pass.logits, &labels)?;
    let (_, correct, _) = batch_stats(pass.graph.value(pass.logits), &labels, 1)?;
    let grads = pass.graph.backward(loss)?;
    let mut grad_g: Vec<Vec<Vec<f64>>> = net
        .supercells()
        .iter()
        .map(|c| vec![vec![0.0; c.candidates.len()]; c.edges.len()])
        .collect();
    for h in &pass.gates {
        let m = grad_g[h.cell][h.edge].len();
        grad_g[h.cell][h.edge] = single_sample_grad(m, h.active, grads.get(h.var).item());
    }
    opt.begin_step();
    for (c, cell) in net.supercells_mut().iter_mut().enumerate() {
        for (e, edge) in cell.edges.iter_mut().enumerate() {
            let g = gate_grad_to_alpha(&grad_g[c][e], &gates[c][e].p)?;
            let mut a = Tensor::new(vec![g.len()], edge.arch.alpha.clone())?;
            opt.step(&format!("alpha.{c}.{e}"), &mut a, &Tensor::new(vec![g.len()], g)?)?;
            edge.arch.alpha = a.into_data();
        }
    }
    Ok((pass.graph.value(loss).item(), correct))
}

fn supervised(
    mut net: Network,
    data: &Dataset,
    cfg: &TrainConfig,
    mut opt: OptimizerState,
    base_lr: f64,
    mut rng: ChaCha8Rng,
    stage: &str,
    seed: u64,
    mut hook: Option<EpochHook>,
) -> Result<StageOutput> {
    cfg.check()?;
    check_data(&net, data)?;
    let mut log = StageLog::new(stage);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        opt.set_lr(cfg.schedule.lr(base_lr, epoch, cfg.epochs));
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for b in order.chunks(cfg.batch_size) {
            let mut x = data.images.gather_rows(b)?;
            if cfg.augment {
                x = augment(&x, cfg.crop_pad, &mut rng)?;
            }
            let labels = labels_of(data, b);
            let mut pass = net.forward(&x, None, BnMode::Train)?;
            let loss = pass.graph.softmax_cross_entropy(pass.logits, &labels)?;
            correct += batch_stats(pass.graph.value(pass.logits), &labels, 1)?.1;
            loss_sum += pass.graph.value(loss).item() * b.len() as f64;
            let grads = pass.graph.backward(loss)?;
            opt.begin_step();
            for (name, &v) in &pass.params {
                let p = net.params.get_mut(name).expect("bound parameter");
                opt.step(name, p, &grads.get(v))?;
            }
        }
        let n = data.len() as f64;
        log.push(epoch, "train", loss_sum / n, correct as f64 / n);
        let ev = evaluate(&mut net, data, cfg.batch_size, 1)?;
        log.push(epoch, "eval", ev.loss, ev.top1);
        log.wall_clock.push(start.elapsed().as_secs_f64());
        if let Some(h) = hook.as_mut() {
            h(&EpochView {
                epoch,
                net: &net,
                log: &log,
                optimizers: vec![("weights", &opt)],
                rng: &rng,
                seed,
            })?;
        }
    }
    Ok(StageOutput {
        net,
        log,
        optimizers: BTreeMap::from([("weights".into(), opt)]),
        rng: RngState::capture(&rng),
        seed,
    })
}

/// Trains `M_p`: the genotype in full precision with momentum SGD.
pub fn pretrain_stage(
    genotype: &Genotype,
    policy: PrecisionPolicy,
    data: &Dataset,
    cfg: &TrainConfig,
    seed: u64,
    hook: Option<EpochHook>,
) -> Result<StageOutput> {
    let net = Network::instantiate(genotype, NetMode::Full, policy, seed)?;
    let opt = OptimizerState::Sgd(SgdMomentum::new(cfg.lr, cfg.momentum, cfg.weight_decay)?);
    supervised(net, data, cfg, opt, cfg.lr, stage_rng(seed, PRETRAIN_STREAM), "pretrain", seed, hook)
}

/// `M_f` before any update: the binary instantiation carrying `M_p`'s
/// latent weights and BN statistics.
pub fn binarize_pretrained(mp: &Network) -> Result<Network> {
    let g = mp
        .genotype()
        .ok_or_else(|| Error::invalid("finetuning needs a derived network, not a supernet"))?;
    let seed = 0;
    let mut net = Network::instantiate(g, NetMode::Binary, mp.policy(), seed)?;
    net.load_state(&mp.params, &mp.bn)?;
    Ok(net)
}

/// Loads `M_p` from a checkpoint and checks it was built from `genotype`.
pub fn load_pretrained(ckpt: &Checkpoint, genotype: &Genotype) -> Result<Network> {
    match &ckpt.arch {
        Architecture::Genotype(g) if g == genotype => ckpt.to_network(),
        _ => Err(Error::ArchitectureMismatch(
            "checkpoint was not trained from the given genotype".into(),
        )),
    }
}

/// Binarizes `M_p` and trains the latent weights with Adam (no weight decay).
pub fn finetune_stage(mp: &Network, data: &Dataset, cfg: &TrainConfig, seed: u64, hook: Option<EpochHook>) -> Result<StageOutput> {
    let net = binarize_pretrained(mp)?;
    let opt = OptimizerState::Adam(Adam::new(cfg.finetune_lr, 0.9, 0.999, 1e-8, 0.0)?);
    supervised(net, data, cfg, opt, cfg.finetune_lr, stage_rng(seed, FINETUNE_STREAM), "finetune", seed, hook)
}
