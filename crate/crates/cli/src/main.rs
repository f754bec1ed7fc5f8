use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use sane_cli::commands::{self, BaselineKind, BaselineResult, CliError};
use sane_cli::RunConfig;

#[derive(Parser)]
#[command(name = "sane", version, about = "Differentiable search over GNN aggregators")]
struct Cli {
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a configuration value, e.g. `--set search.epochs=50`.
    #[arg(long = "set", value_name = "KEY.PATH=VALUE", global = true)]
    overrides: Vec<String>,
    /// Worker threads for parallel trials (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the seeded architecture searches and write the winning genotype.
    Search,
    /// Tune and retrain a genotype, reporting test metrics.
    Retrain {
        #[arg(long)]
        genotype: PathBuf,
    },
    /// Run a baseline: random search, MLP search or the ε sweep.
    Baseline {
        #[arg(long, value_enum)]
        kind: BaselineKind,
        /// With `--kind epsilon`: sweep the layer count instead of ε.
        #[arg(long)]
        k_sweep: bool,
    },
    /// Print the size of the K-layer search space.
    Enumerate {
        #[arg(long = "k")]
        k: usize,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let text = match &cli.config {
        Some(path) => std::fs::read_to_string(path).map_err(|source| CliError::Io {
            path: path.clone(),
            source,
        })?,
        None => "{}".to_string(),
    };
    let mut overrides = cli.overrides.clone();
    if let Some(w) = cli.workers {
        overrides.push(format!("workers={w}"));
    }
    Ok(RunConfig::parse(&text, &overrides)?)
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Command::Enumerate { k } = cli.command {
        println!("{}", commands::cmd_enumerate(k)?);
        return Ok(());
    }
    let cfg = load_config(&cli)?;
    match cli.command {
        Command::Search => {
            let summary = commands::cmd_search(&cfg)?;
            let best = &summary.runs[summary.winner];
            println!(
                "winner: seed {} {} (val {:.4}); outputs in {}",
                best.seed,
                best.genotype.short(),
                best.final_val_metric,
                cfg.output_dir.display()
            );
        }
        Command::Retrain { genotype } => {
            let out = commands::cmd_retrain(&cfg, &genotype)?;
            println!("test {:?}: {:.4} ± {:.4}", out.report.metric, out.report.mean, out.report.std);
        }
        Command::Baseline { kind, k_sweep } => match commands::cmd_baseline(&cfg, kind, k_sweep)? {
            BaselineResult::Trials(out) => {
                let b = out.best();
                println!("best trial {}: val {:.4}, test {:.4}", b.index, b.val_metric, b.test_metric);
            }
            BaselineResult::Sweep(rows) => {
                for r in rows {
                    println!("{}: {:.4} ± {:.4}", r.value, r.report.mean, r.report.std);
                }
            }
        },
        Command::Enumerate { .. } => unreachable!(),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
