mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use lpmc::config::RunConfig;
use lpmc::Error;

#[derive(Parser)]
#[command(
    name = "lpmc",
    version,
    about = "Variable-rate learned image codec with per-rate prompt sets"
)]
struct Cli {
    /// Run configuration (TOML). Built-in defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain the backbone at λ0 and write backbone.lpmk.
    Train {
        /// Overrides train.stage1_steps.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Tune the prompt set of one λ against the frozen backbone.
    Tune {
        #[arg(long)]
        lambda_id: u8,
        /// Overrides train.stage2_steps.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Compress a PPM image.
    Encode {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Prompt set to code with; the bare backbone when omitted.
        #[arg(long)]
        promptset: Option<u8>,
    },
    /// Decompress a stream to PPM. The prompt set is chosen by the header.
    Decode {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rate-distortion points of every PPM in a directory at every
    /// available rate (bare backbone plus each prompt set on disk).
    Eval {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long, default_value = "rd_points.csv")]
        out: PathBuf,
    },
    /// Bjøntegaard delta rate of one rd_points CSV against another.
    Bdrate {
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        anchor: PathBuf,
        #[arg(long, value_enum, default_value_t = Metric::Psnr)]
        metric: Metric,
    },
    /// Bit-allocation and prompt-attention maps of one image.
    Maps {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        promptset: Option<u8>,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
    /// Scalar counts of the backbone and a prompt set.
    Params {
        /// Report the paper-scale architecture instead of the configured one.
        #[arg(long)]
        paper_scale: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Metric {
    Psnr,
    Msssim,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::ModelMismatch { .. } | Error::PromptMismatch { .. } => 2,
        Error::CorruptStream(_) => 3,
        Error::Config(_) => 4,
        _ => 1,
    }
}

fn report(kind: &str, message: &str, code: u8) -> ExitCode {
    eprintln!("error kind={kind} code={code} message={message:?}");
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text
                .lines()
                .next()
                .unwrap_or("")
                .trim_start_matches("error: ");
            return report("usage", first, 4);
        }
    };
    let result = cli
        .config
        .as_deref()
        .map_or_else(|| Ok(RunConfig::default()), RunConfig::load)
        .and_then(|run| commands::run(&run, cli.command));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report(e.kind(), &e.to_string(), exit_code(&e)),
    }
}
