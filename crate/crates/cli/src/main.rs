use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use nasb::cell::{derive, Genotype, NetMode, Network, RetainSpec, Variant};
use nasb::costmodel::{model_cost, preset, CostPolicy, CostReport};
use nasb::io::{gen_synthetic, write_atomic, Checkpoint, DataPaths, Dataset, Difficulty, RunConfig, SynthSpec};
use nasb::trainer::{evaluate, finetune_stage, load_pretrained, pretrain_stage, search_stage, EpochView, StageOutput};

#[derive(Parser)]
#[command(name = "nasb", version, about = "Binary architecture search, training and cost reports")]
struct Cli {
    /// Run configuration (JSON); flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic texture dataset.
    GenData(GenData),
    /// Train the supernet weights and architecture parameters.
    Search(Search),
    /// Extract a genotype from a search checkpoint.
    Derive(DeriveArgs),
    /// Train the derived network in full precision.
    Pretrain(Pretrain),
    /// Binarize a pretrained network and finetune it.
    Finetune(Finetune),
    /// Report loss and accuracy of a checkpoint.
    Eval(Eval),
    /// Memory and Flops of a genotype or built-in architecture.
    Cost(Cost),
}

#[derive(Args)]
struct GenData {
    #[arg(long)]
    images: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    #[arg(long, default_value_t = 2)]
    classes: usize,
    #[arg(long, default_value_t = 2000)]
    samples: usize,
    #[arg(long, default_value_t = 8)]
    size: usize,
    #[arg(long, default_value_t = 1)]
    channels: usize,
    #[arg(long, default_value = "easy")]
    difficulty: Difficulty,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct DataArgs {
    /// Image tensor file; overrides the configured dataset.
    #[arg(long, requires = "labels")]
    images: Option<PathBuf>,
    #[arg(long, requires = "images")]
    labels: Option<PathBuf>,
}

impl DataArgs {
    fn paths(&self) -> Option<DataPaths> {
        match (&self.images, &self.labels) {
            (Some(i), Some(l)) => Some(DataPaths {
                images: i.clone(),
                labels: l.clone(),
            }),
            _ => None,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    arch_lr: Option<f64>,
    #[arg(long)]
    finetune_lr: Option<f64>,
    /// Save `<out>.epoch<N>.ckpt` every N epochs (0 disables).
    #[arg(long)]
    checkpoint_every: Option<usize>,
}

impl TrainArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        let t = &mut cfg.train;
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.epochs {
            t.epochs = v;
        }
        if let Some(v) = self.batch_size {
            t.batch_size = v;
        }
        if let Some(v) = self.lr {
            t.lr = v;
        }
        if let Some(v) = self.arch_lr {
            t.arch_lr = v;
        }
        if let Some(v) = self.finetune_lr {
            t.finetune_lr = v;
        }
        if let Some(v) = self.checkpoint_every {
            t.checkpoint_every = v;
        }
    }
}

#[derive(Args)]
struct Search {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    train: TrainArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DeriveArgs {
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Pretrain {
    #[arg(long)]
    genotype: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    train: TrainArgs,
    /// Also keep 1x1 convolutions real-valued.
    #[arg(long)]
    real_one_by_one: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Finetune {
    /// Pretrained checkpoint.
    #[arg(long = "in")]
    input: PathBuf,
    /// Reject the checkpoint unless it was trained from this genotype.
    #[arg(long)]
    genotype: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    train: TrainArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Eval {
    #[arg(long = "in")]
    input: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 5)]
    top_k: usize,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    /// Write the result as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Cost {
    /// Built-in name (resnet18, bireal-resnet34, nasb-resnet50, ...) or a genotype file.
    #[arg(long)]
    arch: String,
    #[arg(long, default_value = "binary")]
    policy: String,
    #[arg(long)]
    input_size: Option<usize>,
    /// Bit width of full-precision pooling operands.
    #[arg(long)]
    d: Option<u64>,
    #[arg(long)]
    divisor: Option<f64>,
    /// Classifier width for built-in architectures.
    #[arg(long, default_value_t = 1000)]
    classes: usize,
    /// Write the full report (with per-layer rows) as JSON; `-` for stdout.
    #[arg(long, value_name = "FILE")]
    json: Option<PathBuf>,
    /// Print per-layer rows in the table.
    #[arg(long)]
    layers: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", one_line(&e));
            ExitCode::FAILURE
        }
    }
}

/// Context chain on one line, skipping causes the outer message already quotes.
fn one_line(e: &anyhow::Error) -> String {
    let mut msg = String::new();
    for cause in e.chain() {
        let text = cause.to_string().replace('\n', " ");
        if msg.contains(&text) {
            continue;
        }
        if !msg.is_empty() {
            msg.push_str(": ");
        }
        msg.push_str(&text);
    }
    msg
}

fn run(cli: Cli) -> Result<()> {
    let cfg = match &cli.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading config {}", p.display()))?,
        None => RunConfig::default(),
    };
    let mut cfg = Ctx { cfg, path: cli.config };
    match cli.cmd {
        Command::GenData(a) => gen_data(a, &cfg),
        Command::Search(a) => {
            a.train.apply(&mut cfg.cfg);
            search(a, &cfg)
        }
        Command::Derive(a) => derive_cmd(a, &cfg),
        Command::Pretrain(a) => {
            a.train.apply(&mut cfg.cfg);
            pretrain(a, &cfg)
        }
        Command::Finetune(a) => {
            a.train.apply(&mut cfg.cfg);
            finetune(a, &cfg)
        }
        Command::Eval(a) => eval(a, &cfg),
        Command::Cost(a) => cost(a, &cfg),
    }
}

struct Ctx {
    cfg: RunConfig,
    path: Option<PathBuf>,
}

impl std::ops::Deref for Ctx {
    type Target = RunConfig;

    fn deref(&self) -> &RunConfig {
        &self.cfg
    }
}

/// Refuses to write over any of the command's inputs, the config included.
fn guard_outputs(ctx: &Ctx, inputs: &[&Path], outputs: &[&Path]) -> Result<()> {
    for o in outputs {
        let o_abs = std::path::absolute(o)?;
        for i in inputs.iter().copied().chain(ctx.path.as_deref()) {
            let same = match (i.canonicalize(), o.canonicalize()) {
                (Ok(a), Ok(b)) => a == b,
                _ => std::path::absolute(i)? == o_abs,
            };
            if same {
                bail!("output {} would overwrite an input", o.display());
            }
        }
    }
    Ok(())
}

fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let stem = out.file_stem().unwrap_or_default().to_string_lossy();
    out.with_file_name(format!("{stem}{suffix}"))
}

fn load_data(flags: &DataArgs, configured: &Option<DataPaths>, what: &str, classes: Option<usize>) -> Result<(Dataset, DataPaths)> {
    let paths = flags
        .paths()
        .or_else(|| configured.clone())
        .with_context(|| format!("no {what} dataset: pass --images/--labels or set it in the config"))?;
    let data = paths
        .load(classes)
        .with_context(|| format!("loading {}", paths.images.display()))?;
    Ok((data, paths))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_atomic(path, s.as_bytes())?;
    Ok(())
}

/// Writes the checkpoint plus its CSV log and summary next to it.
fn write_stage(out: &Path, stage: &StageOutput) -> Result<()> {
    stage.checkpoint().save(out)?;
    write_atomic(&sibling(out, ".csv"), stage.log.to_csv().as_bytes())?;
    write_atomic(&sibling(out, ".summary.json"), stage.log.summary_json().as_bytes())?;
    Ok(())
}

fn stage_outputs(out: &Path) -> [PathBuf; 3] {
    [out.to_path_buf(), sibling(out, ".csv"), sibling(out, ".summary.json")]
}

fn periodic<'a>(out: &'a Path, every: usize) -> impl FnMut(&EpochView) -> nasb::Result<()> + 'a {
    move |v: &EpochView| {
        if every > 0 && (v.epoch + 1).is_multiple_of(every) {
            v.checkpoint().save(&sibling(out, &format!(".epoch{}.ckpt", v.epoch + 1)))?;
        }
        Ok(())
    }
}

fn gen_data(a: GenData, cfg: &Ctx) -> Result<()> {
    let spec = SynthSpec {
        classes: a.classes,
        samples: a.samples,
        size: a.size,
        channels: a.channels,
        difficulty: a.difficulty,
        seed: a.seed.unwrap_or(cfg.seed),
    };
    guard_outputs(cfg, &[], &[&a.images, &a.labels])?;
    if a.images == a.labels {
        bail!("--images and --labels must differ");
    }
    let data = gen_synthetic(&spec)?;
    data.save(&a.images, &a.labels)?;
    println!(
        "wrote {} samples ({} classes, {}x{}x{}) to {} and {}",
        data.len(),
        data.classes,
        a.channels,
        a.size,
        a.size,
        a.images.display(),
        a.labels.display()
    );
    Ok(())
}

fn search(a: Search, cfg: &Ctx) -> Result<()> {
    let (data, paths) = load_data(&a.data, &cfg.search_data, "search", cfg.classes)?;
    let outs = stage_outputs(&a.out);
    guard_outputs(cfg, &[&paths.images, &paths.labels], &outs.each_ref().map(PathBuf::as_path))?;
    let desc = cfg.supernet.build(data.classes)?;
    let net = Network::supernet(desc, cfg.policy, cfg.seed)?;
    let mut hook = periodic(&a.out, cfg.train.checkpoint_every);
    let stage = search_stage(net, &data, &cfg.train, cfg.seed, Some(&mut hook))?;
    write_stage(&a.out, &stage)?;
    report_stage(&stage, &a.out);
    Ok(())
}

fn report_stage(stage: &StageOutput, out: &Path) {
    let last = stage.log.records.last();
    match last {
        Some(r) => println!(
            "{}: {} epochs, last {} loss {:.4} top-1 {:.4}; wrote {}",
            stage.log.stage,
            stage.log.epochs(),
            r.split,
            r.loss,
            r.top1,
            out.display()
        ),
        None => println!("{}: 0 epochs; wrote {}", stage.log.stage, out.display()),
    }
}

fn derive_cmd(a: DeriveArgs, cfg: &Ctx) -> Result<()> {
    guard_outputs(cfg, &[&a.input], &[&a.out])?;
    let ckpt = Checkpoint::load(&a.input)?;
    let net = ckpt.to_network()?;
    if net.supercells().is_empty() {
        bail!("{} does not hold a supernet", a.input.display());
    }
    let variant = a.variant.unwrap_or(cfg.variant);
    let g = derive(net.supercells(), &RetainSpec::for_variant(variant), net.stem(), net.classes())?;
    write_atomic(&a.out, g.to_json().as_bytes())?;
    let ops: usize = g.cells.iter().map(|c| c.ops().count()).sum();
    println!("derived {ops} operations ({variant:?}); wrote {}", a.out.display());
    Ok(())
}

fn read_genotype(path: &Path) -> Result<Genotype> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Genotype::from_json(&text).with_context(|| format!("parsing {}", path.display()))
}

fn pretrain(a: Pretrain, cfg: &Ctx) -> Result<()> {
    let g = read_genotype(&a.genotype)?;
    let (data, paths) = load_data(&a.data, &cfg.train_data, "training", Some(g.classes))?;
    let outs = stage_outputs(&a.out);
    guard_outputs(cfg, &[&a.genotype, &paths.images, &paths.labels], &outs.each_ref().map(PathBuf::as_path))?;
    let policy = if a.real_one_by_one { cfg.policy.with_one_by_one() } else { cfg.policy };
    let mut hook = periodic(&a.out, cfg.train.checkpoint_every);
    let stage = pretrain_stage(&g, policy, &data, &cfg.train, cfg.seed, Some(&mut hook))?;
    write_stage(&a.out, &stage)?;
    report_stage(&stage, &a.out);
    Ok(())
}

fn finetune(a: Finetune, cfg: &Ctx) -> Result<()> {
    let ckpt = Checkpoint::load(&a.input)?;
    let mp = match &a.genotype {
        Some(p) => load_pretrained(&ckpt, &read_genotype(p)?)?,
        None => ckpt.to_network()?,
    };
    if mp.mode() != NetMode::Full {
        bail!("{} is not a full-precision checkpoint", a.input.display());
    }
    let (data, paths) = load_data(&a.data, &cfg.train_data, "training", Some(mp.classes()))?;
    let mut inputs: Vec<&Path> = vec![&a.input, &paths.images, &paths.labels];
    if let Some(p) = &a.genotype {
        inputs.push(p);
    }
    let outs = stage_outputs(&a.out);
    guard_outputs(cfg, &inputs, &outs.each_ref().map(PathBuf::as_path))?;
    let mut hook = periodic(&a.out, cfg.train.checkpoint_every);
    let stage = finetune_stage(&mp, &data, &cfg.train, cfg.seed, Some(&mut hook))?;
    write_stage(&a.out, &stage)?;
    report_stage(&stage, &a.out);
    Ok(())
}

#[derive(Serialize)]
struct EvalReport {
    checkpoint: String,
    stage: String,
    samples: usize,
    loss: f64,
    top1: f64,
    topk: f64,
    k: usize,
}

fn eval(a: Eval, cfg: &Ctx) -> Result<()> {
    let ckpt = Checkpoint::load(&a.input)?;
    let mut net = ckpt.to_network()?;
    let configured = cfg.eval_data.clone().or_else(|| cfg.train_data.clone());
    let (data, paths) = load_data(&a.data, &configured, "evaluation", Some(net.classes()))?;
    if let Some(o) = &a.out {
        guard_outputs(cfg, &[&a.input, &paths.images, &paths.labels], &[o])?;
    }
    let k = a.top_k.min(net.classes());
    let e = evaluate(&mut net, &data, a.batch_size, k)?;
    let report = EvalReport {
        checkpoint: a.input.display().to_string(),
        stage: ckpt.meta.stage.clone(),
        samples: data.len(),
        loss: e.loss,
        top1: e.top1,
        topk: e.topk,
        k: e.k,
    };
    println!(
        "{}: {} samples, loss {:.4}, top-1 {:.4}, top-{} {:.4}",
        report.stage, report.samples, report.loss, report.top1, report.k, report.topk
    );
    if let Some(o) = &a.out {
        write_json(o, &report)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct CostOutput<'a> {
    arch: &'a str,
    policy: &'a str,
    memory_mbit: f64,
    #[serde(flatten)]
    report: &'a CostReport,
}

fn cost(a: Cost, cfg: &Ctx) -> Result<()> {
    let path = Path::new(&a.arch);
    let g = if path.is_file() {
        read_genotype(path)?
    } else {
        preset(&a.arch, a.classes)?
    };
    let policy = CostPolicy::parse(&a.policy)?;
    let mut cc = cfg.cost;
    if let Some(v) = a.input_size {
        cc.input_size = v;
    }
    if let Some(v) = a.d {
        cc.d = v;
    }
    if let Some(v) = a.divisor {
        cc.divisor = v;
    }
    let report = model_cost(&g, policy, &cc)?;
    print!("{}", cost_table(&a.arch, &a.policy, &report, a.layers));
    if let Some(j) = &a.json {
        let out = CostOutput {
            arch: &a.arch,
            policy: &a.policy,
            memory_mbit: report.memory_mbit(),
            report: &report,
        };
        if j.as_os_str() == "-" {
            println!("{}", serde_json::to_string_pretty(&out)?);
        } else {
            if path.is_file() {
                guard_outputs(cfg, &[path], &[j])?;
            }
            write_json(j, &out)?;
        }
    }
    Ok(())
}

fn cost_table(arch: &str, policy: &str, r: &CostReport, layers: bool) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "architecture   {arch} ({policy})");
    let _ = writeln!(s, "memory         {:.2} Mbit ({:.1}x saving)", r.memory_mbit(), r.memory_saving);
    let _ = writeln!(s, "flops          {:.3e} ({:.1}x speedup)", r.flops, r.speedup);
    let t = &r.totals;
    let _ = writeln!(
        s,
        "totals         real params {}  binary params {}  real ops {}  bitwise ops {}",
        t.real_params, t.binary_params, t.real_ops, t.bitwise_ops
    );
    if layers {
        let _ = writeln!(
            s,
            "\n{:<28} {:<14} {:>3} {:>16} {:>12} {:>12} {:>14} {:>14} {:>12}",
            "layer", "kind", "bin", "out", "real_par", "bin_par", "real_ops", "bitwise", "flops"
        );
        for l in &r.layers {
            let out = format!("{}x{}x{}", l.out_shape[0], l.out_shape[1], l.out_shape[2]);
            let _ = writeln!(
                s,
                "{:<28} {:<14} {:>3} {:>16} {:>12} {:>12} {:>14} {:>14} {:>12.4e}",
                l.name,
                l.kind,
                if l.binary { "y" } else { "n" },
                out,
                l.cost.real_params,
                l.cost.binary_params,
                l.cost.real_ops,
                l.cost.bitwise_ops,
                l.flops
            );
        }
    }
    s
}
