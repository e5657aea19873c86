use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use visuomotor_core::pipeline::{self, Overrides, PipelineConfig, RunRecord, OUT_ENV};
use visuomotor_core::Error;

#[derive(Parser, Debug)]
#[command(
    name = "visuomotor",
    version,
    about = "Affordance-driven visuomotor reaching pipeline"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Pipeline TOML file. Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed; every stage seed derives from it.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads. Artifacts do not depend on this value.
    #[arg(long)]
    workers: Option<usize>,
    /// Output root. Beats the VISUOMOTOR_OUT variable and the config file.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dataset size for `gen-data`.
    #[arg(long)]
    n: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the synthetic dataset.
    GenData(CommonArgs),
    /// Train one stage.
    Train {
        stage: StageArg,
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate the trained stack and write reports and plots.
    Evaluate(CommonArgs),
    /// Print a checkpoint summary.
    Inspect { checkpoint: PathBuf },
    /// Redraw plots from an existing evaluation report.
    Plot(CommonArgs),
    /// Print the resolved configuration as TOML.
    ShowConfig(CommonArgs),
}

#[derive(Args, Debug)]
struct CommonArgs {
    #[command(flatten)]
    common: Common,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum StageArg {
    Vaed,
    Trajvae,
    Policy,
}

fn resolve(c: &Common) -> Result<PipelineConfig, Error> {
    let env_out = std::env::var_os(OUT_ENV).map(PathBuf::from);
    let overrides = Overrides {
        seed: c.seed,
        workers: c.workers,
        out: c.out.clone(),
        n: c.n,
    };
    PipelineConfig::resolve(c.config.as_deref(), env_out, &overrides)
}

fn report(record: RunRecord) {
    println!(
        "{} done in {:.1} s (seed {})",
        record.stage, record.wall_time_s, record.seed
    );
    for (path, hash) in &record.outputs {
        println!("  {path}  {hash}");
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::GenData(a) => report(pipeline::cmd_gen_data(&resolve(&a.common)?)?),
        Command::Train { stage, common } => {
            let cfg = resolve(&common)?;
            report(match stage {
                StageArg::Vaed => pipeline::cmd_train_vaed(&cfg)?,
                StageArg::Trajvae => pipeline::cmd_train_trajvae(&cfg)?,
                StageArg::Policy => pipeline::cmd_train_policy(&cfg)?,
            })
        }
        Command::Evaluate(a) => report(pipeline::cmd_evaluate(&resolve(&a.common)?)?),
        Command::Inspect { checkpoint } => print!("{}", pipeline::cmd_inspect(&checkpoint)?),
        Command::Plot(a) => report(pipeline::cmd_plot(&resolve(&a.common)?)?),
        Command::ShowConfig(a) => print!("{}", resolve(&a.common)?.to_toml()?),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
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
