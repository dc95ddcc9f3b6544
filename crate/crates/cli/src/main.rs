//! `metalearn` command-line entry point.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use metalearn_cli::config::{FileConfig, Overrides, RunConfig};
use metalearn_cli::plot::{emit_plot, PlotKind};
use metalearn_cli::runner::{run_gradcheck, run_sweep_lr, run_sweep_query, run_train, CliError};

#[derive(Parser)]
#[command(name = "metalearn", about = "Meta-learning experiment harness", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct RunArgs {
    /// Flat TOML config file; flags override its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// maml | weightgen | uncertainty
    #[arg(long)]
    mode: Option<String>,
    /// Meta-gradient order: 1 (first-order) or 2 (exact).
    #[arg(long)]
    order: Option<u8>,
    #[arg(long)]
    inner_lr: Option<f64>,
    #[arg(long)]
    outer_lr: Option<f64>,
    #[arg(long)]
    inner_steps: Option<usize>,
    #[arg(long)]
    meta_batch: Option<usize>,
    #[arg(long)]
    iterations: Option<u64>,
    /// sinusoid | synthcls | dataset:<path>
    #[arg(long)]
    task: Option<String>,
    /// Output directory for metrics, checkpoints, and the config echo.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Meta-train and write metrics.csv plus a final checkpoint.
    Train(RunArgs),
    /// Train per inner learning rate and mode; emit summary.csv with spreads.
    SweepLr {
        #[command(flatten)]
        args: RunArgs,
        /// Comma-separated inner learning rates.
        #[arg(long, value_delimiter = ',', default_value = "0.001,0.01,0.1")]
        alphas: Vec<f64>,
    },
    /// Train per query count and mode; emit summary.csv with accuracy CIs.
    SweepQuery {
        #[command(flatten)]
        args: RunArgs,
        /// Comma-separated query-per-class counts.
        #[arg(long, value_delimiter = ',', default_value = "1,5,15")]
        n_queries: Vec<usize>,
    },
    /// Verify gradients against finite differences; exit 0 iff all pass.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Optional directory for the report file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render a metrics or summary CSV as a deterministic SVG.
    Plot {
        /// Input CSV file.
        input: PathBuf,
        #[arg(long, value_enum)]
        kind: PlotKindArg,
        /// Output SVG file.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum PlotKindArg {
    LossCurve,
    SweepBars,
}

fn resolve(args: &RunArgs) -> Result<RunConfig, CliError> {
    let file = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| CliError::Io {
                path: path.clone(),
                source: e,
            })?;
            toml::from_str::<FileConfig>(&text)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
        }
        None => FileConfig::default(),
    };
    let flags = Overrides {
        task: args.task.clone(),
        seed: args.seed,
        out: args.out.clone(),
        mode: args.mode.clone(),
        order: args.order,
        inner_lr: args.inner_lr,
        outer_lr: args.outer_lr,
        inner_steps: args.inner_steps,
        meta_batch: args.meta_batch,
        iterations: args.iterations,
    };
    RunConfig::resolve(&file, &flags).map_err(CliError::Config)
}

fn run(cmd: &Cmd) -> Result<(), CliError> {
    match cmd {
        Cmd::Train(args) => {
            let cfg = resolve(args)?;
            let out = run_train(&cfg)?;
            if let Some(row) = out.result.rows.last() {
                println!(
                    "final iteration {}: post-adaptation eval loss {:.6}",
                    row.iteration, row.post_adapt_eval_loss
                );
            }
            Ok(())
        }
        Cmd::SweepLr { args, alphas } => {
            let cfg = resolve(args)?;
            run_sweep_lr(&cfg, alphas)
        }
        Cmd::SweepQuery { args, n_queries } => {
            let cfg = resolve(args)?;
            run_sweep_query(&cfg, n_queries)
        }
        Cmd::Gradcheck { seed, out } => {
            let (report, all_ok) = run_gradcheck(*seed, out.as_deref())?;
            print!("{report}");
            if all_ok {
                Ok(())
            } else {
                Err(CliError::CheckFailed(
                    "at least one check exceeded its tolerance".to_string(),
                ))
            }
        }
        Cmd::Plot { input, kind, out } => {
            let text = fs::read_to_string(input).map_err(|e| CliError::Io {
                path: input.clone(),
                source: e,
            })?;
            let kind = match kind {
                PlotKindArg::LossCurve => PlotKind::LossCurve,
                PlotKindArg::SweepBars => PlotKind::SweepBars,
            };
            let svg = emit_plot(&text, kind).map_err(|e| CliError::Config(e.to_string()))?;
            fs::write(out, svg).map_err(|e| CliError::Io {
                path: out.clone(),
                source: e,
            })
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
