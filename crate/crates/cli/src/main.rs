use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use saq_core::harness::{self, RunError, RunKind};

/// Sampling-aware quantization experiments on toy diffusion models.
#[derive(Debug, Parser)]
#[command(name = "saq", version)]
struct Cli {
    /// train | calibrate-ptq | finetune-qlora | sample | analyze-error | evaluate | ablate
    command: String,

    /// JSON run configuration; defaults are used for missing keys.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Root seed (overrides `seed`).
    #[arg(long)]
    seed: Option<u64>,

    /// Output directory (overrides `output_dir`).
    #[arg(long)]
    out: Option<PathBuf>,

    /// `dotted.key=value`, value parsed as JSON or taken as a string. Repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    /// Print the resolved configuration and exit.
    #[arg(long)]
    print_config: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn execute(cli: &Cli) -> Result<(), RunError> {
    let kind = RunKind::parse(&cli.command).map_err(RunError::config)?;
    let mut overrides = vec![format!("kind=\"{}\"", kind.label())];
    if let Some(seed) = cli.seed {
        overrides.push(format!("seed={seed}"));
    }
    if let Some(out) = &cli.out {
        overrides.push(format!("output_dir={}", serde_json::to_string(out).expect("path serialises")));
    }
    overrides.extend(cli.overrides.iter().cloned());
    let config = harness::resolve_config(cli.config.as_deref(), &overrides)?;
    if cli.print_config {
        println!("{}", config.to_json().map_err(RunError::config)?);
        return Ok(());
    }
    config.validate().map_err(RunError::config)?;
    let manifest = harness::run(&config)?;
    for s in &manifest.stages {
        log::info!("{:<24} {:?} {:.2}s", s.name, s.status, s.seconds);
    }
    println!("{}", config.output_dir.join("manifest.json").display());
    Ok(())
}
