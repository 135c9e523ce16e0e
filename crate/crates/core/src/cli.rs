//! `coembed` command line: synth, inspect, train, eval, project.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or validation error,
//! 3 numeric failure (non-finite loss or gradient).

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::embedstore::{read_dataset, split_dataset, PairDataset, EMBD_MAGIC};
use crate::error::{Error, Result};
use crate::evalkit::evaluate;
use crate::projhead::{load_head, ProjectionHead, PRJW_MAGIC};
use crate::synthgen::{generate, SynthConfig};
use crate::trainer::{fit_with, ActivationName, HeadPair, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "coembed", version, about = "Train and evaluate projection heads that co-embed two frozen embedding spaces")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic EMBD dataset from a shared latent space
    Synth(SynthArgs),
    /// Print the header and label summary of an EMBD (or PRJW) file
    Inspect {
        /// File to inspect
        path: PathBuf,
    },
    /// Train projection heads on an EMBD dataset
    Train(TrainArgs),
    /// Score a trained head on the validation split
    Eval(EvalArgs),
    /// Export jointly projected 2-D points of the validation split as CSV
    Project(ProjectArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Output EMBD path
    #[arg(long)]
    out: PathBuf,
    /// Shared latent dimension
    #[arg(long, default_value_t = 16)]
    latent_dim: usize,
    /// Modality A dimension
    #[arg(long, default_value_t = 32)]
    dim_a: usize,
    /// Modality B dimension
    #[arg(long, default_value_t = 64)]
    dim_b: usize,
    /// Number of classes
    #[arg(long, default_value_t = 8)]
    classes: usize,
    /// Number of pairs
    #[arg(long, default_value_t = 2000)]
    pairs: usize,
    /// Standard deviation of latent points around their class center
    #[arg(long, default_value_t = 0.3)]
    within_sigma: f64,
    /// Standard deviation of additive noise on each modality
    #[arg(long, default_value_t = 0.0)]
    noise_sigma: f64,
    /// Apply tanh to modality A vectors
    #[arg(long)]
    nonlinear: bool,
    /// Random seed
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write the latent-to-A map as PRJW here (latent-to-B goes to PATH.b)
    #[arg(long)]
    truth: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Input EMBD dataset
    #[arg(long)]
    data: PathBuf,
    /// Output PRJW path for head A (head B, if trained, goes to PATH.b)
    #[arg(long)]
    out: PathBuf,
    /// Number of epochs
    #[arg(long, default_value_t = 300)]
    epochs: usize,
    /// Batch size
    #[arg(long, default_value_t = 4096)]
    batch: usize,
    /// Adam learning rate
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    /// Fraction of pairs used for training
    #[arg(long, default_value_t = 0.67)]
    split: f64,
    /// Contrastive temperature
    #[arg(long, default_value_t = 0.07)]
    tau: f64,
    /// Learn the temperature (1/tau capped at 100)
    #[arg(long)]
    learnable_tau: bool,
    /// Width of a single relu hidden layer; omit for one affine layer
    #[arg(long)]
    hidden: Option<usize>,
    /// Train a head on modality B as well
    #[arg(long)]
    two_sided: bool,
    /// Random seed
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Run report path [default: OUT.report.toml]
    #[arg(long)]
    report: Option<PathBuf>,
    /// Write OUT.<epoch> every N epochs (0 = never)
    #[arg(long, default_value_t = 0)]
    checkpoint_every: usize,
}

#[derive(Debug, Args)]
struct ModelArgs {
    /// Input EMBD dataset
    #[arg(long)]
    data: PathBuf,
    /// Head A checkpoint (PRJW)
    #[arg(long)]
    model: PathBuf,
    /// Head B checkpoint for two-sided models
    #[arg(long)]
    model_b: Option<PathBuf>,
    /// Training fraction used to recover the validation split
    #[arg(long, default_value_t = 0.67)]
    split: f64,
    /// Seed used to recover the validation split
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Comma-separated recall cutoffs
    #[arg(long, default_value = "1,5,10", value_delimiter = ',')]
    k: Vec<usize>,
    /// Also write the report here
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ProjectArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Output CSV path
    #[arg(long)]
    out: PathBuf,
}

/// Runs the CLI with process stdout/stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    run_with(args, &mut stdout.lock(), &mut stderr.lock())
}

/// Runs the CLI writing to the given streams; returns the exit code.
pub fn run_with<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let rendered = e.render().to_string();
            let _ = if e.use_stderr() {
                err.write_all(rendered.as_bytes())
            } else {
                out.write_all(rendered.as_bytes())
            };
            return code;
        }
    };
    match dispatch(cli.command, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            if e.is_numeric() {
                EXIT_NUMERIC
            } else {
                EXIT_DATA
            }
        }
    }
}

fn dispatch(command: Command, out: &mut dyn Write) -> Result<()> {
    match command {
        Command::Synth(args) => synth(args, out),
        Command::Inspect { path } => inspect(&path, out),
        Command::Train(args) => train(args, out),
        Command::Eval(args) => eval(args, out),
        Command::Project(args) => project(args, out),
    }
}

/// Names the offending file in I/O errors.
fn at(path: &Path) -> impl Fn(Error) -> Error + '_ {
    move |e| match e {
        Error::Io(io) => Error::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
        other => other,
    }
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn synth(args: SynthArgs, out: &mut dyn Write) -> Result<()> {
    let config = SynthConfig {
        latent_dim: args.latent_dim,
        dim_a: args.dim_a,
        dim_b: args.dim_b,
        n_classes: args.classes,
        n_pairs: args.pairs,
        within_class_sigma: args.within_sigma,
        noise_sigma: args.noise_sigma,
        nonlinear: args.nonlinear,
        seed: args.seed,
    };
    let (dataset, truth) = generate(&config)?;
    let bytes = dataset.save(&args.out)?;
    writeln!(out, "wrote {} ({} pairs, {} bytes)", args.out.display(), dataset.len(), bytes)?;
    if let Some(path) = args.truth {
        truth.mix_a_head().save(&path)?;
        truth.mix_b_head().save(with_suffix(&path, ".b"))?;
        writeln!(out, "wrote ground-truth maps to {} and {}.b", path.display(), path.display())?;
    }
    Ok(())
}

fn inspect(path: &Path, out: &mut dyn Write) -> Result<()> {
    let mut file = BufReader::new(File::open(path).map_err(|e| at(path)(e.into()))?);
    let mut magic = [0u8; 4];
    file.read_exact(&mut magic)
        .map_err(|_| Error::Truncated("magic".into()))?;
    let stream = std::io::Cursor::new(magic).chain(file);
    match magic {
        EMBD_MAGIC => describe_dataset(path, &read_dataset(stream)?, out),
        PRJW_MAGIC => describe_head(path, &load_head(stream)?, out),
        found => Err(Error::BadMagic {
            expected: EMBD_MAGIC,
            found,
        }),
    }
}

fn describe_dataset(path: &Path, d: &PairDataset, out: &mut dyn Write) -> Result<()> {
    writeln!(
        out,
        "{}: EMBD v1, dims {}/{}, {} records, {}",
        path.display(),
        d.dim_a,
        d.dim_b,
        d.len(),
        if d.labeled { "labeled" } else { "unlabeled" }
    )?;
    if d.labeled {
        let mut counts = std::collections::BTreeMap::new();
        for r in &d.records {
            *counts.entry(r.label).or_insert(0usize) += 1;
        }
        let summary: Vec<String> = counts.iter().map(|(l, c)| format!("{l}:{c}")).collect();
        writeln!(out, "classes {}: {}", counts.len(), summary.join(" "))?;
    }
    Ok(())
}

fn describe_head(path: &Path, h: &ProjectionHead, out: &mut dyn Write) -> Result<()> {
    let dims: Vec<String> = std::iter::once(h.in_dim())
        .chain(h.layers.iter().map(|l| l.out_dim()))
        .map(|d| d.to_string())
        .collect();
    writeln!(
        out,
        "{}: PRJW v1, {} layer(s), dims {}, tau {}{}",
        path.display(),
        h.layers.len(),
        dims.join("->"),
        h.tau(),
        if h.learnable_temperature { " (learnable)" } else { "" }
    )?;
    Ok(())
}

fn train(args: TrainArgs, out: &mut dyn Write) -> Result<()> {
    let dataset = PairDataset::load(&args.data).map_err(at(&args.data))?;
    let (layer_dims, activation) = match args.hidden {
        Some(h) => (vec![dataset.dim_a, h, dataset.dim_b], ActivationName::Relu),
        None => (Vec::new(), ActivationName::Identity),
    };
    let config = TrainConfig {
        epochs: args.epochs,
        batch_size: args.batch,
        lr: args.lr,
        train_fraction: args.split,
        tau: args.tau,
        learnable_tau: args.learnable_tau,
        layer_dims,
        activation,
        seed: args.seed,
        two_sided: args.two_sided,
        checkpoint_every: args.checkpoint_every,
    };
    config.validate()?;
    writeln!(
        out,
        "config: epochs={} batch={} lr={} split={} tau={} seed={}",
        config.epochs, config.batch_size, config.lr, config.train_fraction, config.tau, config.seed
    )?;

    let (heads, report) = fit_with(&dataset, &config, |ev| {
        writeln!(
            out,
            "epoch {:>4}  train {:.6}  val {:.6}  {:.3}s",
            ev.epoch, ev.train_loss, ev.val_loss, ev.seconds
        )?;
        if ev.checkpoint_due {
            let path = with_suffix(&args.out, &format!(".{}", ev.epoch));
            save_heads(ev.heads, &path)?;
        }
        Ok(())
    })?;
    save_heads(&heads, &args.out)?;

    let report_path = args.report.unwrap_or_else(|| with_suffix(&args.out, ".report.toml"));
    std::fs::write(&report_path, report.to_toml()?)?;
    writeln!(out, "wrote {} and {}", args.out.display(), report_path.display())?;
    Ok(())
}

fn save_heads(heads: &HeadPair, path: &Path) -> Result<()> {
    heads.a.save(path)?;
    if let Some(b) = &heads.b {
        b.save(with_suffix(path, ".b"))?;
    }
    Ok(())
}

fn load_for_eval(args: &ModelArgs) -> Result<(PairDataset, HeadPair, crate::embedstore::SplitIndices)> {
    let dataset = PairDataset::load(&args.data).map_err(at(&args.data))?;
    let heads = HeadPair {
        a: ProjectionHead::load(&args.model).map_err(at(&args.model))?,
        b: args
            .model_b
            .as_ref()
            .map(|p| ProjectionHead::load(p).map_err(at(p)))
            .transpose()?,
    };
    heads.check_dims(&dataset)?;
    let split = split_dataset(&dataset, args.split, args.seed)?;
    Ok((dataset, heads, split))
}

fn eval(args: EvalArgs, out: &mut dyn Write) -> Result<()> {
    let (dataset, heads, split) = load_for_eval(&args.model)?;
    let (report, _) = evaluate(&dataset, &heads, &split, &args.k)?;
    let text = report.to_toml()?;
    out.write_all(text.as_bytes())?;
    if let Some(path) = args.report {
        std::fs::write(path, &text)?;
    }
    Ok(())
}

fn project(args: ProjectArgs, out: &mut dyn Write) -> Result<()> {
    let (dataset, heads, split) = load_for_eval(&args.model)?;
    let (_, points) = evaluate(&dataset, &heads, &split, &[1])?;
    std::fs::write(&args.out, points.to_csv())?;
    writeln!(out, "wrote {} ({} points)", args.out.display(), points.rows.len())?;
    Ok(())
}
