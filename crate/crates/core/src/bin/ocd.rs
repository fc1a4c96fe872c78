//! Command-line driver for the staged pipeline.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 stage failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ocd::harness::{Pipeline, PipelineConfig, Stage};

#[derive(Parser)]
#[command(name = "ocd", version, about = "Per-sample weight generation with a conditional diffusion hypernetwork")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the base model.
    TrainBase(Common),
    /// Score layers by perturbed-loss entropy and pick one.
    SelectLayer(Common),
    /// Overfit every training sample and store the weight deltas.
    Collect(Common),
    /// Train the diffusion hypernetwork on the stored deltas.
    TrainDiffusion(Common),
    /// Train the scale estimator.
    TrainScale(Common),
    /// Evaluate every configured variant and write the report.
    Eval(Common),
    /// Regenerate the report (runs missing stages first).
    Report(Common),
    /// Run every stage.
    All(Common),
}

#[derive(Args)]
struct Common {
    /// TOML config file; unspecified keys take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output root; the run directory is named by the config hash.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    /// Comma-separated seeds, overriding the config.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Dotted overrides such as `diffusion.epochs=5` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Print the resolved config and exit.
    #[arg(long)]
    print_config: bool,
}

fn resolve(c: &Common) -> ocd::Result<PipelineConfig> {
    let base = match &c.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    let mut cfg = base.with_overrides(&c.set)?;
    if let Some(s) = &c.seeds {
        cfg.seeds = s.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let (stage, common) = match &cli.command {
        Command::TrainBase(c) => (Stage::TrainBase, c),
        Command::SelectLayer(c) => (Stage::SelectLayer, c),
        Command::Collect(c) => (Stage::Collect, c),
        Command::TrainDiffusion(c) => (Stage::TrainDiffusion, c),
        Command::TrainScale(c) => (Stage::TrainScale, c),
        Command::Eval(c) => (Stage::Eval, c),
        Command::Report(c) | Command::All(c) => (Stage::Report, c),
    };
    let cfg = match resolve(common) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    if common.print_config {
        match cfg.to_toml() {
            Ok(t) => {
                print!("{t}");
                return ExitCode::SUCCESS;
            }
            Err(e) => {
                eprintln!("error: {e}");
                return ExitCode::from(1);
            }
        }
    }
    let pipeline = match Pipeline::new(cfg, &common.out) {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    match pipeline.run_until(stage) {
        Ok(Some((report, files))) => {
            print!("{}", report.to_markdown());
            println!("\nwritten: {}", files.markdown.display());
            ExitCode::SUCCESS
        }
        Ok(None) => {
            println!("{} complete under {}", stage.name(), pipeline.root.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
