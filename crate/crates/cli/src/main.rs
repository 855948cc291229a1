use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use dcrf_cli::commands::{
    cmd_bench_filter, cmd_eval, cmd_gradcheck, cmd_infer, cmd_synth, emit, SynthArgs,
    BENCH_HEADER,
};
use dcrf_cli::train::{cmd_train, TrainArgs};
use dcrf_cli::{init_threads, CliError, CliResult, RunConfig, Stage};

/// Dense CRF segmentation trained end to end through mean-field inference.
#[derive(Parser)]
#[command(name = "dcrf", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    Unary,
    Joint,
}

#[derive(Subcommand)]
enum Command {
    /// Train one stage and write checkpoints plus a per-epoch CSV log.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Training manifest.
        #[arg(long)]
        data: PathBuf,
        /// Validation manifest for per-epoch loss and mean IoU.
        #[arg(long)]
        val: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Start from this checkpoint's parameters and optimizer state.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "joint")]
        stage: StageArg,
    },
    /// Label one image: writes <out>_labels.pgm, <out>_confidence.pgm and
    /// <out>_overlay.ppm.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-class IoU over a manifest as CSV.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Write the CSV here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare analytic gradients with central differences on a random
    /// 8x8 instance; exits with status 3 on any mismatch.
    Gradcheck {
        /// Run configuration; the built-in defaults otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Check every n-th scalar of each parameter array.
        #[arg(long, default_value_t = 1)]
        stride: usize,
    },
    /// Time exact and lattice bilateral filtering at the given image sizes.
    BenchFilter {
        /// Square image sizes in pixels.
        #[arg(required = true)]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 3)]
        reps: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic shapes dataset with train.tsv and val.tsv.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        train: usize,
        #[arg(long, default_value_t = 50)]
        val: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 4)]
        labels: usize,
        #[arg(long, default_value_t = 25.0)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    init_threads()?;
    match cli.command {
        Command::Train { config, data, val, out, resume, stage } => {
            let stage = match stage {
                StageArg::Unary => Stage::Unary,
                StageArg::Joint => Stage::Joint,
            };
            let args = TrainArgs { config, train: data, val, out, resume, stage };
            cmd_train(&args)?;
        }
        Command::Infer { checkpoint, image, out } => {
            let o = cmd_infer(&checkpoint, &image, &out)?;
            for p in [o.labels, o.confidence, o.overlay] {
                println!("{}", p.display());
            }
        }
        Command::Eval { checkpoint, data, out } => {
            emit(&cmd_eval(&checkpoint, &data)?, out.as_deref())?;
        }
        Command::Gradcheck { config, seed, stride } => {
            let cfg = match config {
                Some(p) => RunConfig::load(&p)?,
                None => RunConfig::default(),
            };
            let report = cmd_gradcheck(&cfg, seed, stride)?;
            print!("{}", report.table());
            if report.failures() > 0 {
                return Err(CliError::Check(format!(
                    "{} coordinates exceed the tolerance",
                    report.failures()
                )));
            }
        }
        Command::BenchFilter { sizes, reps, out } => {
            let rows = cmd_bench_filter(&sizes, reps)?;
            let mut csv = format!("{BENCH_HEADER}\n");
            for r in rows {
                csv.push_str(&r.csv());
                csv.push('\n');
            }
            emit(&csv, out.as_deref())?;
        }
        Command::Synth { out, train, val, size, labels, noise, seed } => {
            let args = SynthArgs { train, val, size, labels, noise_sd: noise, seed };
            for m in cmd_synth(&out, &args)? {
                println!("{} {} samples", m.split, m.len());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
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
            eprintln!("dcrf: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
