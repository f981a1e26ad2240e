use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use tcrn::checkpoint::load_checkpoint;
use tcrn::data::{build_corpus, synth_corpus_with, Manifest};
use tcrn::gradcheck::{run_suite, TARGETS};
use tcrn::pipeline::{enhance_path, evaluate, train, Enhancer, RunConfig, DEFAULT_SUFFIX};
use tcrn::{DType, Real};

/// Time-domain speech enhancement with temporal convolutional recurrent networks.
#[derive(Parser)]
#[command(name = "tcrn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus of speech-like clean files and textured noise.
    Synth(SynthArgs),
    /// Enumerate clean x noise x SNR x repeats into a manifest.
    BuildCorpus(BuildArgs),
    /// Train a model from a manifest.
    Train(TrainArgs),
    /// Enhance a WAV file or a directory of WAV files.
    Enhance(EnhanceArgs),
    /// Score mixtures and enhanced audio against the clean references.
    Evaluate(EvalArgs),
    /// Compare analytic and finite-difference gradients for every layer and loss.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10)]
    n_clean: usize,
    #[arg(long, default_value_t = 2)]
    n_noise: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct BuildArgs {
    #[arg(long)]
    clean: PathBuf,
    #[arg(long)]
    noise: PathBuf,
    /// Output manifest path.
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated mixing SNRs in dB.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_value = "-5,0")]
    snrs: Vec<f64>,
    #[arg(long, default_value_t = 2)]
    repeats: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// Key-value config file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    run_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    max_steps: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    precision: Option<String>,
    /// Any other config key, as `key=value`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Continue from `last.tcrn` in the run directory.
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct EnhanceArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// A WAV file or a directory of WAV files.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value = DEFAULT_SUFFIX)]
    suffix: String,
    #[arg(long, default_value = "f32")]
    precision: String,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, required_unless_present = "oracle")]
    checkpoint: Option<PathBuf>,
    /// Use the clean reference as the enhanced signal.
    #[arg(long, conflicts_with = "checkpoint")]
    oracle: bool,
    /// Directory for per_file.tsv, table.tsv and summary.txt.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long, default_value = "f32")]
    precision: String,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Scale this target's analytic gradient by 1.5 (the row should then fail).
    #[arg(long)]
    corrupt: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// A failure with its exit status: 1 usage, 2 data, 3 numerical.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<tcrn::Error>() {
        Some(err) if err.is_numerical() => 3,
        Some(err) if err.is_data() => 2,
        Some(tcrn::Error::InvalidArgument(_)) => 1,
        Some(_) => 3,
        None => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: Cli) -> std::result::Result<(), Failure> {
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::BuildCorpus(a) => build(a),
        Command::Train(a) => train_cmd(a),
        Command::Enhance(a) => enhance(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Gradcheck(a) => {
            return gradcheck(a);
        }
    };
    result.map_err(|error| Failure {
        code: exit_code(&error),
        error,
    })
}

fn synth(a: SynthArgs) -> Result<()> {
    let s = synth_corpus_with(&a.out, a.n_clean, a.n_noise, a.seed)?;
    println!(
        "wrote {} clean files to {} and {} noise files to {}",
        s.clean.len(),
        s.clean_dir.display(),
        s.noise.len(),
        s.noise_dir.display()
    );
    Ok(())
}

fn build(a: BuildArgs) -> Result<()> {
    let b = build_corpus(&a.clean, &a.noise, &a.snrs, a.repeats, a.seed)?;
    for d in &b.diagnostics {
        eprintln!("warning: {d}");
    }
    if let Some(parent) = a.out.parent() {
        std::fs::create_dir_all(parent)?;
    }
    b.manifest.write(&a.out)?;
    println!("wrote {} mixtures to {}", b.manifest.len(), a.out.display());
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let mut overrides: Vec<(String, String)> = Vec::new();
    let mut push = |k: &str, v: Option<String>| {
        if let Some(v) = v {
            overrides.push((k.to_string(), v));
        }
    };
    push("manifest", a.manifest.map(|p| p.display().to_string()));
    push("run_dir", a.run_dir.map(|p| p.display().to_string()));
    push("seed", a.seed.map(|v| v.to_string()));
    push("epochs", a.epochs.map(|v| v.to_string()));
    push("max_steps", a.max_steps.map(|v| v.to_string()));
    push("batch_size", a.batch_size.map(|v| v.to_string()));
    push("lr", a.lr.map(|v| v.to_string()));
    push("alpha", a.alpha.map(|v| v.to_string()));
    push("precision", a.precision);
    for kv in &a.set {
        let Some((k, v)) = kv.split_once('=') else {
            return Err(tcrn::Error::InvalidArgument(format!("--set expects key=value, got `{kv}`")).into());
        };
        overrides.push((k.trim().to_string(), v.trim().to_string()));
    }
    let config = RunConfig::resolve(a.config.as_deref(), &overrides)?;
    let outcome = match config.precision {
        DType::F32 => train::<f32>(&config, a.resume)?,
        DType::F64 => train::<f64>(&config, a.resume)?,
    };
    if let (Some(first), Some(last)) = (outcome.first, outcome.last) {
        println!("step {}: {}", first.step, first.loss);
        println!("step {}: {}", last.step, last.loss);
    }
    println!(
        "{} steps, {} epochs, run directory {}",
        outcome.steps,
        outcome.epochs,
        outcome.run_dir.display()
    );
    Ok(())
}

fn precision(s: &str) -> Result<DType> {
    Ok(s.parse::<DType>()?)
}

fn enhance(a: EnhanceArgs) -> Result<()> {
    fn go<T: Real>(a: &EnhanceArgs) -> Result<()> {
        let mut model = load_checkpoint::<T>(&a.checkpoint)?.model;
        let report = enhance_path(&mut model, &a.input, &a.out_dir, &a.suffix)?;
        for w in &report.warnings {
            eprintln!("warning: {w}");
        }
        println!("wrote {} files to {}", report.outputs.len(), a.out_dir.display());
        Ok(())
    }
    match precision(&a.precision)? {
        DType::F32 => go::<f32>(&a),
        DType::F64 => go::<f64>(&a),
    }
}

fn evaluate_cmd(a: EvalArgs) -> Result<()> {
    fn go<T: Real>(a: &EvalArgs, manifest: Manifest) -> Result<()> {
        let report = match &a.checkpoint {
            Some(path) => {
                let mut model = load_checkpoint::<T>(path)?.model;
                evaluate(Enhancer::Model(&mut model), manifest)?
            }
            None => evaluate::<T>(Enhancer::Oracle, manifest)?,
        };
        for m in &report.missing {
            eprintln!("missing: {}", m.display());
        }
        print!("{}", report.table_tsv());
        if let Some(dir) = &a.out_dir {
            report.write(dir)?;
        }
        Ok(())
    }
    let manifest = Manifest::read(&a.manifest)?;
    match precision(&a.precision)? {
        DType::F32 => go::<f32>(&a, manifest),
        DType::F64 => go::<f64>(&a, manifest),
    }
}

fn gradcheck(a: GradcheckArgs) -> std::result::Result<(), Failure> {
    if let Some(t) = a.corrupt.as_deref().filter(|t| !TARGETS.contains(t)) {
        return Err(Failure {
            code: 1,
            error: anyhow::anyhow!("unknown target `{t}`; expected one of {}", TARGETS.join(", ")),
        });
    }
    let report = run_suite(a.corrupt.as_deref(), a.seed).map_err(|e| {
        let error = anyhow::Error::from(e);
        Failure {
            code: exit_code(&error),
            error,
        }
    })?;
    print!("{report}");
    if report.all_passed() {
        println!("all {} targets below {:e}", report.rows.len(), report.tolerance);
        Ok(())
    } else {
        let names: Vec<_> = report.failures().iter().map(|r| r.target.clone()).collect();
        Err(Failure {
            code: 3,
            error: anyhow::anyhow!("gradient check failed for {}", names.join(", ")),
        })
    }
}
