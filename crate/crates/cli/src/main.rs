use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use predann::config::PipelineConfig;
use predann::evaluation::{contingency, mcnemar_exact, significance_stars, PredictionCache};
use predann::par::Execution;
use predann::pipeline::Pipeline;
use predann::Error;

/// EEG song identification with masked teacher-sequence pretraining.
#[derive(Parser)]
#[command(name = "predann", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct StageArgs {
    /// Pipeline config (TOML). Relative paths in it resolve against its directory.
    #[arg(short, long)]
    config: PathBuf,
    /// Run data-parallel loops on one thread.
    #[arg(long)]
    sequential: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Write a preset config file.
    Init {
        /// `desk` (shrunken, synthetic) or `paper` (full-scale values).
        #[arg(long, default_value = "desk")]
        preset: String,
        /// Output path.
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Generate synthetic recordings, songs and a token model.
    Synth(StageArgs),
    /// Truncate recordings, cut excerpts and write the train/validation split.
    Prep(StageArgs),
    /// Build acoustic, surprisal and entropy teacher sequences.
    Features(StageArgs),
    /// Pretrain one model per configured teacher and seed.
    Pretrain(StageArgs),
    /// Fine-tune every pretrained model on song classification.
    Finetune(StageArgs),
    /// Train classifiers from scratch, one per seed.
    Fullscratch(StageArgs),
    /// Write prediction caches for every trained model on the validation split.
    Evaluate(StageArgs),
    /// Average class probabilities of the configured model groups.
    Ensemble(StageArgs),
    /// Accuracy table and McNemar comparisons.
    Report(StageArgs),
    /// Every stage in order.
    Run(StageArgs),
    /// Exact two-sided McNemar test, from discordant counts or two caches.
    Mcnemar {
        /// Samples only model A classified correctly.
        #[arg(long, requires = "c", conflicts_with_all = ["cache_a", "cache_b"])]
        b: Option<u64>,
        /// Samples only model B classified correctly.
        #[arg(long, requires = "b")]
        c: Option<u64>,
        /// Prediction cache of model A.
        #[arg(long, requires = "cache_b")]
        cache_a: Option<PathBuf>,
        /// Prediction cache of model B.
        #[arg(long, requires = "cache_a")]
        cache_b: Option<PathBuf>,
    },
}

fn pipeline(args: &StageArgs) -> predann::Result<Pipeline> {
    let config = PipelineConfig::load(&args.config)?;
    let exec = if args.sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    };
    Pipeline::new(config, exec)
}

fn run(cli: Cli) -> predann::Result<()> {
    match cli.command {
        Command::Init { preset, out } => {
            let cfg = PipelineConfig::preset(&preset)?;
            predann::io::write_bytes(&out, cfg.to_toml()?.as_bytes())?;
            println!("wrote {}", out.display());
        }
        Command::Mcnemar { b, c, cache_a, cache_b } => {
            let (b, c) = match (b, c, cache_a, cache_b) {
                (Some(b), Some(c), None, None) => (b, c),
                (None, None, Some(x), Some(y)) => {
                    let t = contingency(&PredictionCache::load(&x)?, &PredictionCache::load(&y)?);
                    println!("a={} b={} c={} d={}", t.a, t.b, t.c, t.d);
                    (t.b, t.c)
                }
                _ => return Err(Error::invalid("give either --b and --c, or --cache-a and --cache-b")),
            };
            let p = mcnemar_exact(b, c);
            println!("{p}");
            let stars = significance_stars(p);
            if !stars.is_empty() {
                eprintln!("significance: {stars}");
            }
        }
        Command::Run(args) => {
            let report = pipeline(&args)?.run_all()?;
            print!("{}", report.to_text());
        }
        Command::Report(args) => {
            let report = pipeline(&args)?.report()?;
            print!("{}", report.to_text());
        }
        Command::Synth(a) => pipeline(&a)?.run_stage("synth")?,
        Command::Prep(a) => pipeline(&a)?.run_stage("prep")?,
        Command::Features(a) => pipeline(&a)?.run_stage("features")?,
        Command::Pretrain(a) => pipeline(&a)?.run_stage("pretrain")?,
        Command::Finetune(a) => pipeline(&a)?.run_stage("finetune")?,
        Command::Fullscratch(a) => pipeline(&a)?.run_stage("fullscratch")?,
        Command::Evaluate(a) => pipeline(&a)?.run_stage("evaluate")?,
        Command::Ensemble(a) => pipeline(&a)?.run_stage("ensemble")?,
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
