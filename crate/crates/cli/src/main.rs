use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use bsde_cli::{example_config, list_presets, run, ExperimentConfig};

#[derive(Parser)]
#[command(name = "bsde", version, about = "BSDE Monte Carlo solver and inequality verifier")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment described by a TOML config.
    Run {
        config: PathBuf,
        /// Directory for manifest.json and data artifacts.
        #[arg(long)]
        output_dir: Option<PathBuf>,
        /// Override the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Cap the worker thread count (default: all cores).
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Print the registry of generators, moduli, and presets.
    ListPresets,
    /// Parse and validate a config without running it.
    Validate { config: PathBuf },
    /// Print a starter config to stdout.
    ExampleConfig,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(passed) => {
            if passed {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(cli: Cli) -> anyhow::Result<bool> {
    match cli.command {
        Command::Run {
            config,
            output_dir,
            seed,
            threads,
        } => {
            let mut cfg = ExperimentConfig::from_file(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let out_dir = output_dir.unwrap_or_else(|| {
                config
                    .parent()
                    .unwrap_or_else(|| std::path::Path::new("."))
                    .join("out")
            });
            let manifest = if let Some(n) = threads {
                let pool = rayon::ThreadPoolBuilder::new().num_threads(n).build()?;
                pool.install(|| run(&cfg, &out_dir))?
            } else {
                run(&cfg, &out_dir)?
            };
            println!(
                "{}: {} (manifest: {})",
                serde_json::to_value(cfg.kind)?.as_str().unwrap_or("run"),
                if manifest.passed { "pass" } else { "FAIL" },
                out_dir.join("manifest.json").display()
            );
            Ok(manifest.passed)
        }
        Command::ListPresets => {
            print!("{}", list_presets());
            Ok(true)
        }
        Command::Validate { config } => {
            ExperimentConfig::from_file(&config)?;
            println!("ok");
            Ok(true)
        }
        Command::ExampleConfig => {
            print!("{}", example_config());
            Ok(true)
        }
    }
}
