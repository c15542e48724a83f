//! The `milfcn` command line. [`run`] parses arguments, dispatches to one
//! subcommand and maps the outcome to an exit code: 0 on success, 1 for
//! usage and validation errors, 2 for I/O failures.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use milfcn::data::pnm::{decode_ppm, encode_color_mask, encode_pgm};
use milfcn::data::synth::SPEC_FILE;
use milfcn::data::{generate_dataset, load_split, DatasetSpec, Sample, Split};
use milfcn::gradcheck::{check_network, sample_instance, LossKind};
use milfcn::mil::infer_mask;
use milfcn::train::{
    evaluate, load_checkpoint, pretrain_classifier, save_checkpoint, train, MetricsWriter,
    Objective, OptimHyper, OptimState, TrainOptions,
};
use milfcn::{build_network, transfer_classifier_weights, Error, Network, NetworkConfig, Result};

pub const FINAL_CKPT: &str = "final.ckpt";
pub const TRANSFERRED_CKPT: &str = "transferred.ckpt";
pub const METRICS_CSV: &str = "metrics.csv";

#[derive(Parser, Debug)]
#[command(
    name = "milfcn",
    version,
    about = "Weakly supervised segmentation with a multi-class MIL loss"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic shape dataset (train and val splits).
    GenData(GenDataArgs),
    /// Train on image-level labels, then write the background zero-initialized transfer.
    Pretrain(PretrainArgs),
    /// Fine-tune with the MIL loss, or with full masks under --supervised.
    Train(TrainArgs),
    /// Report mean IU of a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Predict a class mask for one PPM image.
    Infer(InferArgs),
    /// Compare network gradients against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    /// Dataset spec file (key=value lines); defaults are used when omitted.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the seed in the spec.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct HyperArgs {
    /// Number of optimization steps (one image each).
    #[arg(long, default_value_t = OptimHyper::default().iterations)]
    iters: usize,
    /// Learning rate.
    #[arg(long, default_value_t = OptimHyper::default().lr)]
    lr: f64,
    /// Momentum coefficient.
    #[arg(long, default_value_t = OptimHyper::default().momentum)]
    momentum: f64,
    /// L2 weight decay folded into the gradient.
    #[arg(long, default_value_t = OptimHyper::default().weight_decay)]
    weight_decay: f64,
}

impl HyperArgs {
    fn hyper(&self) -> OptimHyper {
        OptimHyper {
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            iterations: self.iters,
        }
    }
}

#[derive(Args, Debug)]
struct PretrainArgs {
    /// Dataset directory written by gen-data.
    #[arg(long)]
    data: PathBuf,
    /// Start from this checkpoint instead of a fresh network.
    #[arg(long)]
    init: Option<PathBuf>,
    #[command(flatten)]
    hyper: HyperArgs,
    /// Seeds network initialization and the sample order.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for final.ckpt, transferred.ckpt and metrics.csv.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Dataset directory written by gen-data.
    #[arg(long)]
    data: PathBuf,
    /// Starting checkpoint; a fresh network is built from --seed when omitted.
    #[arg(long)]
    init: Option<PathBuf>,
    #[command(flatten)]
    hyper: HyperArgs,
    /// Seeds the sample order (and initialization without --init).
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for final.ckpt and metrics.csv.
    #[arg(long)]
    out: PathBuf,
    /// Train on ground-truth masks with per-pixel cross-entropy.
    #[arg(long)]
    supervised: bool,
    /// Validate every this many steps; 0 disables validation.
    #[arg(long, default_value_t = 100)]
    val_every: usize,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Val,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Dataset directory written by gen-data.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint to evaluate.
    #[arg(long)]
    init: PathBuf,
    /// Which split to score.
    #[arg(long, value_enum, default_value_t = SplitArg::Val)]
    split: SplitArg,
}

#[derive(Args, Debug)]
struct InferArgs {
    /// Checkpoint to run.
    #[arg(long)]
    init: PathBuf,
    /// Input image (binary PPM).
    #[arg(long)]
    image: PathBuf,
    /// Output prefix; writes <out>.pgm and <out>_color.ppm.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Seeds the random network, image and label bag.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-4)]
    step: f64,
    /// Largest accepted relative error.
    #[arg(long, default_value_t = 1e-5)]
    tolerance: f64,
    /// Side of the square input image; a multiple of the downsample factor.
    #[arg(long, default_value_t = 8)]
    size: usize,
}

/// Parses `argv` (program name first) and runs the command.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Pretrain(a) => pretrain(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval(a),
        Command::Infer(a) => infer(a),
        Command::Gradcheck(a) => gradcheck(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_io() {
                2
            } else {
                1
            }
        }
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))
}

fn read_spec(data: &Path) -> Result<DatasetSpec> {
    let path = data.join(SPEC_FILE);
    let text = String::from_utf8(read(&path)?)
        .map_err(|_| Error::Config(format!("{} is not UTF-8", path.display())))?;
    DatasetSpec::parse(&text)
}

fn load(data: &Path, split: Split, spec: &DatasetSpec) -> Result<Vec<Sample>> {
    load_split(&data.join(split.dir_name()), spec.num_fg_classes)
}

fn starting_network(init: Option<&Path>, spec: &DatasetSpec, seed: u64) -> Result<(Network, OptimState)> {
    match init {
        Some(path) => {
            let (net, state) = load_checkpoint(path)?;
            if net.config().num_fg_classes != spec.num_fg_classes {
                return Err(Error::Config(format!(
                    "checkpoint has {} foreground classes, dataset has {}",
                    net.config().num_fg_classes,
                    spec.num_fg_classes
                )));
            }
            Ok((net, state))
        }
        None => {
            let net = build_network(NetworkConfig::with_classes(spec.num_fg_classes), seed)?;
            let state = OptimState::for_network(&net);
            Ok((net, state))
        }
    }
}

fn gen_data(a: GenDataArgs) -> Result<i32> {
    let mut spec = match &a.spec {
        Some(path) => {
            let text = String::from_utf8(read(path)?)
                .map_err(|_| Error::Config(format!("{} is not UTF-8", path.display())))?;
            DatasetSpec::parse(&text)?
        }
        None => DatasetSpec::default(),
    };
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    generate_dataset(&spec, &a.out)?;
    println!(
        "wrote {} train and {} val samples to {}",
        spec.num_train,
        spec.num_val,
        a.out.display()
    );
    Ok(0)
}

fn pretrain(a: PretrainArgs) -> Result<i32> {
    let hyper = a.hyper.hyper();
    hyper.validate()?;
    let spec = read_spec(&a.data)?;
    let train_set = load(&a.data, Split::Train, &spec)?;
    let (start, _) = starting_network(a.init.as_deref(), &spec, a.seed)?;
    create_dir(&a.out)?;
    let mut metrics = MetricsWriter::create(&a.out.join(METRICS_CSV))?;
    let outcome = pretrain_classifier(start.clone(), &train_set, &hyper, a.seed, Some(&mut metrics))?;
    save_checkpoint(&outcome.net, &outcome.state, &a.out.join(FINAL_CKPT))?;
    let transferred = transfer_classifier_weights(&start, &outcome.net)?;
    save_checkpoint(
        &transferred,
        &OptimState::for_network(&transferred),
        &a.out.join(TRANSFERRED_CKPT),
    )?;
    println!(
        "pretrain final loss {:.6}",
        outcome.losses.last().copied().unwrap_or(f64::NAN)
    );
    Ok(0)
}

fn train_cmd(a: TrainArgs) -> Result<i32> {
    let hyper = a.hyper.hyper();
    hyper.validate()?;
    let spec = read_spec(&a.data)?;
    let train_set = load(&a.data, Split::Train, &spec)?;
    let val = if a.val_every > 0 {
        load(&a.data, Split::Val, &spec)?
    } else {
        Vec::new()
    };
    let (net, state) = starting_network(a.init.as_deref(), &spec, a.seed)?;
    create_dir(&a.out)?;
    let mut metrics = MetricsWriter::create(&a.out.join(METRICS_CSV))?;
    let objective = if a.supervised {
        Objective::Supervised
    } else {
        Objective::Mil
    };
    let options = TrainOptions {
        hyper,
        seed: a.seed,
        val_every: a.val_every,
    };
    let outcome = train(net, state, &train_set, &val, objective, &options, Some(&mut metrics))?;
    save_checkpoint(&outcome.net, &outcome.state, &a.out.join(FINAL_CKPT))?;
    match outcome.val_history.last() {
        Some((iter, miu)) => println!("iter {iter} val mean_iu {miu:.6}"),
        None => println!(
            "final loss {:.6}",
            outcome.losses.last().copied().unwrap_or(f64::NAN)
        ),
    }
    Ok(0)
}

fn eval(a: EvalArgs) -> Result<i32> {
    let spec = read_spec(&a.data)?;
    let (net, _) = starting_network(Some(&a.init), &spec, 0)?;
    let split = match a.split {
        SplitArg::Train => Split::Train,
        SplitArg::Val => Split::Val,
    };
    let samples = load(&a.data, split, &spec)?;
    let report = evaluate(&net, &samples)?;
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "mean_iu {:.6}", report.mean);
    for (class, iu) in report.per_class.iter().enumerate() {
        match iu {
            Some(v) => {
                let _ = writeln!(out, "class {class} iu {v:.6}");
            }
            None => {
                let _ = writeln!(out, "class {class} iu n/a");
            }
        }
    }
    Ok(0)
}

fn infer(a: InferArgs) -> Result<i32> {
    let (net, _) = load_checkpoint(&a.init)?;
    let image = decode_ppm(&read(&a.image)?)?;
    let (_, h, w) = image.dims3()?;
    let start = Instant::now();
    let scores = net.predict(&image)?;
    let mask = infer_mask(&scores, h, w)?;
    let elapsed = start.elapsed();

    let mut pgm = a.out.clone().into_os_string();
    pgm.push(".pgm");
    let mut color = a.out.into_os_string();
    color.push("_color.ppm");
    write(Path::new(&pgm), &encode_pgm(&mask))?;
    write(Path::new(&color), &encode_color_mask(&mask))?;
    println!("inference {:.3} ms", elapsed.as_secs_f64() * 1e3);
    Ok(0)
}

fn gradcheck(a: GradcheckArgs) -> Result<i32> {
    let inst = sample_instance(a.seed, a.size, 1e-3, 100_000)?;
    let mut all_pass = true;
    for (name, kind) in [("mil_loss", LossKind::Mil), ("image_label_loss", LossKind::ImageLabel)] {
        let report = check_network(&inst, kind, a.step, a.tolerance)?;
        all_pass &= report.pass;
        println!(
            "{name} max relative error {:.3e} {}",
            report.overall_max(),
            if report.pass { "PASS" } else { "FAIL" }
        );
        if let Some(at) = report.non_finite {
            println!("{name} non-finite value at parameter {} element {}", at.param, at.element);
        }
    }
    Ok(if all_pass { 0 } else { 1 })
}
