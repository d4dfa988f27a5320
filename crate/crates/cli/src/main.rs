mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{parse_overrides, RunConfig, SEED_ENV};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            Self::Usage(_) => 1,
            Self::Data(_) => 2,
            Self::Numeric(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Self::Usage(m) | Self::Data(m) | Self::Numeric(m) => m,
        }
    }
}

impl From<sidecar_mtl::Error> for CliError {
    fn from(e: sidecar_mtl::Error) -> Self {
        use sidecar_mtl::Error as E;
        match e {
            E::Config(_) => Self::Usage(e.to_string()),
            E::Diverged { .. } => Self::Numeric(e.to_string()),
            _ => Self::Data(e.to_string()),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "sidecar-mtl", version, about = "Multi-talker ASR and diarization with a Sidecar separator on a frozen CTC encoder")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
#[command(after_help = RunConfig::defaults_help())]
struct Common {
    /// JSON config file; keys as listed below.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `--key value` overrides for any config key.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic corpus (manifest, audio, RTTM) to `data`.
    GenData(Common),
    /// Train a single-talker backbone on `data`, save to `checkpoint`.
    Pretrain(Common),
    /// Freeze the backbone at `init_checkpoint` and train a Sidecar on `data`.
    TrainSidecar(Common),
    /// Adapt the diarization path of `init_checkpoint` on long recordings.
    AdaptDiar(Common),
    /// Permuted token error rate of `checkpoint` on `data`.
    EvalAsr(Common),
    /// Collar DER of `checkpoint` on `data`.
    EvalDer(Common),
    /// RTTM for one `audio` recording.
    Diarize(Common),
    /// Parameter counts for the configured backbone and Sidecar.
    ParamReport(Common),
}

fn run(cli: Cli) -> Result<(), CliError> {
    let (cmd, common) = match cli.command {
        Command::GenData(c) => (commands::gen_data as commands::Handler, c),
        Command::Pretrain(c) => (commands::pretrain as commands::Handler, c),
        Command::TrainSidecar(c) => (commands::train_sidecar as commands::Handler, c),
        Command::AdaptDiar(c) => (commands::adapt_diar as commands::Handler, c),
        Command::EvalAsr(c) => (commands::eval_asr as commands::Handler, c),
        Command::EvalDer(c) => (commands::eval_der as commands::Handler, c),
        Command::Diarize(c) => (commands::diarize as commands::Handler, c),
        Command::ParamReport(c) => (commands::param_report as commands::Handler, c),
    };
    let overrides = parse_overrides(&common.overrides)?;
    let env = std::env::var(SEED_ENV).ok();
    let config = RunConfig::resolve(common.config.as_deref(), env.as_deref(), &overrides)?;
    config.validate()?;
    cmd(&config)
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
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}
