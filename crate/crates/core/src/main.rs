use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fedfixer::config::{preset, ExperimentConfig, PRESETS};
use fedfixer::harness::{compare_methods, format_table, run_experiment, ComparisonRow};
use fedfixer::{FedError, Result};

/// Federated learning simulator for client-dependent label noise.
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    /// Output directory (overrides the config's out_dir).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Master seed (overrides the config's seed).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for client updates. Results do not depend on it.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a JSON config (or a preset name).
    Run { config: String },
    /// Run several methods on identical data, partitions and noise.
    Compare {
        config: String,
        /// Comma-separated, e.g. fedfixer,fedfixer:no_cr,fedavg,fedprox:0.01
        #[arg(long, value_delimiter = ',', required = true)]
        methods: Vec<String>,
    },
    /// List or print the built-in configurations.
    Presets {
        #[command(subcommand)]
        action: PresetAction,
    },
}

#[derive(Subcommand)]
enum PresetAction {
    List,
    Show { name: String },
}

fn load(cli: &Cli, source: &str) -> Result<ExperimentConfig> {
    let path = PathBuf::from(source);
    let mut config = if !path.exists() && PRESETS.contains(&source) {
        preset(source).expect("listed preset")
    } else {
        ExperimentConfig::load(&path)?
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(out) = &cli.out {
        config.out_dir = out.clone();
    }
    Ok(config)
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Run { config } => {
            let config = load(cli, config)?;
            let summary = run_experiment(&config, &config.out_dir, cli.threads)?;
            let row = ComparisonRow {
                method: summary.method.clone(),
                config_hash: summary.config_hash.clone(),
                trials: summary.trials.len(),
                failed: summary.failed_trials(),
                accuracy_mean: summary.accuracy.map(|a| a.mean),
                accuracy_std: summary.accuracy.map(|a| a.std),
                f_score_mean: summary.f_score.map(|f| f.mean),
                accuracies: String::new(),
            };
            print!("{}", format_table(&[row]));
            println!("artifacts: {} (config {})", config.out_dir.display(), summary.config_hash);
            if summary.failed_trials() > 0 {
                return Err(FedError::Numeric(format!(
                    "{} of {} trials diverged",
                    summary.failed_trials(),
                    summary.trials.len()
                )));
            }
        }
        Command::Compare { config, methods } => {
            let config = load(cli, config)?;
            let rows = compare_methods(&config, methods, &config.out_dir, cli.threads)?;
            print!("{}", format_table(&rows));
            println!("artifacts: {}", config.out_dir.display());
        }
        Command::Presets { action } => match action {
            PresetAction::List => {
                for name in PRESETS {
                    println!("{name}");
                }
            }
            PresetAction::Show { name } => {
                let config = preset(name)
                    .ok_or_else(|| FedError::config("preset", format!("unknown preset `{name}`")))?;
                println!("{}", config.to_json());
            }
        },
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
