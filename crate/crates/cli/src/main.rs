use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

use tso_lab::{exit_code, load_config, parse_overrides, run_command, CommandKind};

#[derive(Parser)]
#[command(
    name = "tso-lab",
    about = "Preference-optimization laboratory on exactly enumerable tabular policies",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Path to the TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Overrides as `--key value` pairs; short aliases (`--T 1`, `--lr 0.01`)
    /// or dotted paths (`--train.loss.gamma_l 1.0`).
    #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Build the synthetic world and write its policies and datasets.
    Synth(RunArgs),
    /// Run the full multi-stage training study.
    Train(RunArgs),
    /// Sweep the negative-response source over every grid entry.
    AblateNegsrc(RunArgs),
    /// Compare multi-shard and single-shard training on identical data.
    AblateMinibatch(RunArgs),
    /// Compare the four preference losses on identical data.
    AblateLoss(RunArgs),
    /// Score-distribution moments per prompt.
    Stats(RunArgs),
    /// Finite-difference verification of the analytic gradients.
    Gradcheck(RunArgs),
}

fn run(kind: CommandKind, args: &RunArgs) -> tso_core::Result<()> {
    let overrides = parse_overrides(&args.overrides)?;
    let cfg = load_config(&args.config, &overrides)?;
    let report = run_command(&cfg, kind)?;
    println!(
        "{}: wrote {} (flags: {})",
        kind.name(),
        cfg.output_root().join(kind.name()).join("report.json").display(),
        if report.acceptance_flags.is_empty() {
            "none".to_string()
        } else {
            report
                .acceptance_flags
                .iter()
                .map(|(k, v)| format!("{k}={v}"))
                .collect::<Vec<_>>()
                .join(", ")
        }
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (kind, args) = match &cli.command {
        Command::Synth(a) => (CommandKind::Synth, a),
        Command::Train(a) => (CommandKind::Train, a),
        Command::AblateNegsrc(a) => (CommandKind::AblateNegsrc, a),
        Command::AblateMinibatch(a) => (CommandKind::AblateMinibatch, a),
        Command::AblateLoss(a) => (CommandKind::AblateLoss, a),
        Command::Stats(a) => (CommandKind::Stats, a),
        Command::Gradcheck(a) => (CommandKind::Gradcheck, a),
    };
    match run(kind, args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(error) => {
            eprintln!("error: {error}");
            let mut source = std::error::Error::source(&error);
            while let Some(cause) = source {
                eprintln!("  caused by: {cause}");
                source = cause.source();
            }
            ExitCode::from(exit_code(&error) as u8)
        }
    }
}
