use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cose_loop::experiment::commands::format_traces;
use cose_loop::experiment::config::OUT_ENV;
use cose_loop::experiment::{
    cmd_ablate, cmd_plot, cmd_run, cmd_sweep, cmd_trace, Overrides, RunConfig, SweepAxis,
};
use cose_loop::orchestrator::AblationMode;
use cose_loop::{Error, Result};

#[derive(Parser)]
#[command(name = "cose-loop", version, about = "Confidence-weighted self-evolution over a synthetic world")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train once and write metrics, buffer snapshot, policy and resolved config.
    Run(RunArgs),
    /// Compare ablation variants over several seeds.
    Ablate {
        #[command(flatten)]
        common: CommonArgs,
        /// Variants to run (default: all four).
        #[arg(long, value_delimiter = ',')]
        variants: Vec<AblationMode>,
    },
    /// Sweep the Solver batch size or the confidence signal.
    Sweep {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        axis: SweepAxis,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
    /// Plot probe accuracy from one or more metrics streams.
    Plot {
        #[arg(required = true)]
        metrics: Vec<PathBuf>,
        /// Output stem; writes `<stem>.svg` and `<stem>.csv`.
        #[arg(long, default_value = "accuracy")]
        out: PathBuf,
    },
    /// Print per-sample weights for one step of a traced run.
    Trace {
        run_dir: PathBuf,
        #[arg(long)]
        step: usize,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    ablation: Option<AblationMode>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    trace_samples: bool,
}

#[derive(Args)]
struct CommonArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2, 3, 4])]
    seeds: Vec<u64>,
    #[arg(long)]
    steps: Option<usize>,
    /// Directory for the result table.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn load(path: Option<&PathBuf>, overrides: Overrides) -> Result<RunConfig> {
    let mut config = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::desk(),
    };
    config.apply(&overrides.with_env_out(std::env::var_os(OUT_ENV)));
    config.validate()?;
    Ok(config)
}

fn common_config(common: &CommonArgs) -> Result<RunConfig> {
    load(
        common.config.as_ref(),
        Overrides {
            steps: common.steps,
            out: common.out.clone(),
            ..Overrides::default()
        },
    )
}

fn save_table(config: &RunConfig, name: &str, table: &cose_loop::experiment::ComparisonTable) -> Result<()> {
    std::fs::create_dir_all(&config.out_dir).map_err(|e| Error::InvalidInput(format!(
        "cannot create {}: {e}",
        config.out_dir.display()
    )))?;
    let path = config.out_dir.join(name);
    table.write_csv(&path)?;
    println!("{table}");
    println!("table written to {}", path.display());
    Ok(())
}

fn dispatch(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Run(a) => {
            let config = load(
                a.config.as_ref(),
                Overrides {
                    seed: a.seed,
                    ablation: a.ablation,
                    steps: a.steps,
                    out: a.out,
                    trace_samples: a.trace_samples,
                },
            )?;
            let summary = cmd_run(&config)?;
            println!(
                "{} steps, probe accuracy {:.4} -> {:.4}; artifacts in {}",
                summary.steps_completed,
                summary.initial_accuracy,
                summary.final_accuracy,
                summary.out_dir.display()
            );
            if let Some(fault) = summary.fault {
                eprintln!("run stopped early: {fault}");
                return Ok(false);
            }
        }
        Command::Ablate { common, variants } => {
            let config = common_config(&common)?;
            let variants = if variants.is_empty() {
                AblationMode::ALL.to_vec()
            } else {
                variants
            };
            let table = cmd_ablate(&config, &variants, &common.seeds)?;
            save_table(&config, "ablation.csv", &table)?;
            return Ok(table.rows.iter().all(|r| !r.failed()));
        }
        Command::Sweep {
            common,
            axis,
            values,
        } => {
            let config = common_config(&common)?;
            let table = cmd_sweep(&config, axis, &values, &common.seeds)?;
            save_table(&config, &format!("sweep_{}.csv", axis.as_str()), &table)?;
            return Ok(table.rows.iter().all(|r| !r.failed()));
        }
        Command::Plot { metrics, out } => {
            let svg = out.with_extension("svg");
            let csv = out.with_extension("csv");
            let summary = cmd_plot(&metrics, &svg, &csv)?;
            for (label, n) in &summary.series {
                println!("{label}: {n} records");
            }
            println!("wrote {} and {} ({} rows)", svg.display(), csv.display(), summary.csv_rows);
        }
        Command::Trace { run_dir, step } => {
            let traces = cmd_trace(&run_dir, step)?;
            print!("{}", format_traces(&traces));
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match dispatch(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e @ Error::Config { .. }) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
