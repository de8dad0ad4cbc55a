use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use owseg::config::{RunConfig, KEYS};
use owseg::runner::{self, Command};
use owseg::Error;

#[derive(Parser)]
#[command(
    name = "owseg",
    version,
    about = "Open-world semantic segmentation on synthetic scenes"
)]
struct Cli {
    /// key=value configuration file; every key has a default.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,

    /// Override one configuration key, applied after the file.
    #[arg(short = 's', long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render the synthetic dataset into dataset_dir.
    Gen,
    /// Train both decoders and write the checkpoint.
    Train,
    /// Score the test split with the configured strategy.
    Eval,
    /// Group flagged unknown pixels into discovered classes.
    Discover,
    /// Most similar known class of every flagged unknown pixel.
    Similarity,
    /// Finite-difference check of every loss and the full objective.
    Gradcheck {
        /// Scale the ReLU backward rule by this factor.
        #[arg(long, hide = true)]
        inject_fault: Option<f64>,
    },
    /// Every strategy with and without the contrastive decoder.
    Ablate,
    /// Print the effective configuration.
    Config,
}

fn config(cli: &Cli) -> owseg::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    for o in &cli.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {o:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> owseg::Result<()> {
    let cfg = config(cli)?;
    let cmd = match &cli.command {
        Cmd::Gen => Command::Gen,
        Cmd::Train => Command::Train,
        Cmd::Eval => Command::Eval,
        Cmd::Discover => Command::Discover,
        Cmd::Similarity => Command::Similarity,
        Cmd::Gradcheck { inject_fault } => Command::Gradcheck {
            fault: *inject_fault,
        },
        Cmd::Ablate => Command::Ablate,
        Cmd::Config => {
            print!("{}", cfg.to_text());
            return Ok(());
        }
    };
    let report = runner::run(cmd, &cfg)?;
    for (k, v) in report.results.entries() {
        if !KEYS.contains(&k.as_str()) {
            println!("{k}={v}");
        }
    }
    for line in &report.table {
        println!("{line}");
    }
    println!("wrote {}", report.path.display());
    match report.failure {
        Some(e) => Err(e),
        None => Ok(()),
    }
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
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
