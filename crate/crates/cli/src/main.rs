//! `fedsoup`: run federated experiments from a JSON config.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fedsoup_core::config::parse_config;
use fedsoup_core::experiment::{apply_overrides, execute, Command, Overrides};

#[derive(Parser)]
#[command(
    name = "fedsoup",
    version,
    about = "Federated learning simulator with temporal model soups"
)]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides `training.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Write the per-round trace as JSON lines to this path.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Overrides `outputs.dir`.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Sub {
    /// Train every configured method and write report.json and table1.csv.
    Run(Common),
    /// Per-client sharpness of each method's final models; writes sharpness.csv.
    Sharpness {
        #[command(flatten)]
        common: Common,
        /// Local fine-tuning epochs applied before measuring (0 = final models).
        #[arg(long, default_value_t = 0)]
        fine_tune: usize,
    },
    /// Fine-tuning sweep over `training.fine_tune_iters`; writes tradeoff.csv.
    Tradeoff(Common),
    /// Leave-one-client-out unseen-domain study; writes loo.csv.
    Loo(Common),
    /// Write the generated federation to federation.json.
    ExportData(Common),
}

fn run(common: &Common, command: Command) -> fedsoup_core::Result<()> {
    let spec = parse_config(&common.config)?;
    let spec = apply_overrides(
        spec,
        &Overrides {
            seed: common.seed,
            trace: common
                .trace
                .as_deref()
                .map(std::path::absolute)
                .transpose()?,
            out_dir: common.out_dir.clone(),
        },
    );
    let report = execute(&spec, command)?;
    eprintln!(
        "{} finished in {} ms, outputs in {}",
        report.canonical.command,
        report.envelope.duration_ms,
        spec.outputs.dir.display()
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Sub::Run(c) => run(c, Command::Run),
        Sub::Sharpness { common, fine_tune } => run(
            common,
            Command::Sharpness {
                fine_tune: *fine_tune,
            },
        ),
        Sub::Tradeoff(c) => run(c, Command::Tradeoff),
        Sub::Loo(c) => run(c, Command::Loo),
        Sub::ExportData(c) => run(c, Command::ExportData),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
