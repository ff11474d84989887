use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use delay_smp::config::LoadedConfig;
use delay_smp::scenarios::REGISTRY;
use delay_smp::{run_experiment, Error};

#[derive(Parser)]
#[command(name = "delay-smp", version, about = "Delay SPDE control experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the scenario named in the config
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// `section.key=value`, repeatable
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Print the scenario registry
    ListScenarios,
    /// Parse and check a config without running it
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
}

fn fail(e: &Error) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(e.exit_code() as u8)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::ListScenarios => {
            for s in REGISTRY {
                println!("{:<18} {}", s.name, s.description);
                println!("{:<18} keys: {}", "", s.keys);
            }
            ExitCode::SUCCESS
        }
        Command::Validate { config } => match LoadedConfig::from_path(&config, &[]) {
            Ok(c) => {
                println!(
                    "ok: scenario {} (config {})",
                    c.config.scenario,
                    &c.hash()[..12]
                );
                ExitCode::SUCCESS
            }
            Err(e) => fail(&e.into()),
        },
        Command::Run {
            config,
            seed,
            out,
            mut overrides,
        } => {
            if let Some(s) = seed {
                overrides.push(format!("seed={s}"));
            }
            let cfg = match LoadedConfig::from_path(&config, &overrides) {
                Ok(c) => c,
                Err(e) => return fail(&e.into()),
            };
            let dir = out
                .or_else(|| cfg.config.output.clone())
                .unwrap_or_else(|| PathBuf::from("out").join(&cfg.config.scenario));
            match run_experiment(&cfg, &dir) {
                Ok(files) => {
                    println!("wrote {} files to {}", files.len(), dir.display());
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    if e.exit_code() == 1 {
                        eprintln!(
                            "diagnostics written to {}",
                            dir.join("diagnostics.json").display()
                        );
                    }
                    fail(&e)
                }
            }
        }
    }
}
