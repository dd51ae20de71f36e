use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use driftdecomp_cli::{
    cmd_evaluate, cmd_export_plots, cmd_fit, cmd_simulate, exit, fit_exit_code, CliError, EvaluateArgs, FitArgs,
    SimulateArgs,
};

/// Coupled flexible PARAFAC2 decomposition of 4-way chromatography tensors.
#[derive(Parser, Debug)]
#[command(name = "driftdecomp", version)]
struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic data set with ground truth.
    Simulate(SimulateCmd),
    /// Fit the coupled model to a tensor.
    Fit(FitCmd),
    /// Compare a fitted model with ground truth.
    Evaluate(EvaluateCmd),
    /// Write elution surfaces and spectra as CSV and SVG.
    ExportPlots(ExportCmd),
}

#[derive(Args, Debug)]
struct SimulateCmd {
    #[arg(long)]
    output: PathBuf,
    /// JSON config with a `synth` section.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct FitCmd {
    /// Tensor file, or a directory containing data.dtf.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// JSON config with a `fit` section.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    starts: Option<usize>,
    #[arg(long)]
    burn_iters: Option<usize>,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    omega: Option<f64>,
    #[arg(long)]
    max_iters: Option<usize>,
    /// Constrained factors: d (amplitudes), bd (+ scores), bda (+ spectra), none.
    #[arg(long)]
    nonneg: Option<String>,
    /// Worker threads; 0 uses all available cores.
    #[arg(long, env = "DRIFTDECOMP_THREADS", default_value_t = 0)]
    threads: usize,
}

#[derive(Args, Debug)]
struct EvaluateCmd {
    /// Model directory written by `fit`.
    #[arg(long)]
    input: PathBuf,
    /// Truth directory (or truth.json) written by `simulate`.
    #[arg(long)]
    truth: PathBuf,
    /// Data tensor; defaults to data.dtf next to the truth.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Also write the evaluation JSON here.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ExportCmd {
    /// Model directory written by `fit`.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
}

fn run(cli: Cli) -> Result<i32, CliError> {
    match cli.command {
        Command::Simulate(c) => {
            let summary = cmd_simulate(&SimulateArgs {
                output: c.output,
                config: c.config,
                rank: c.rank,
                seed: c.seed,
            })?;
            for w in &summary.warnings {
                eprintln!("warning: {w}");
            }
            let [i, j, k, l] = summary.dims;
            println!(
                "simulated I={i} J={j} K={k} L={l}, R={}, seed={}, noise sd {:.4e}, offset {:.4e}",
                summary.rank, summary.seed, summary.noise_sd, summary.offset
            );
            Ok(exit::CONVERGED)
        }
        Command::Fit(c) => {
            let report = cmd_fit(&FitArgs {
                input: c.input,
                output: c.output,
                config: c.config,
                rank: c.rank,
                seed: c.seed,
                starts: c.starts,
                burn_iters: c.burn_iters,
                eps: c.eps,
                omega: c.omega,
                max_iters: c.max_iters,
                nonneg: c.nonneg,
                threads: c.threads,
            })?;
            println!(
                "{:?} after {} iterations: %VAR {:.4}, objective {:.6e}, start {} selected, {:.1} s",
                report.status,
                report.iterations,
                report.percent_var,
                report.objective_trace.last().copied().unwrap_or(f64::NAN),
                report.selected_start,
                report.wall_time_s
            );
            for w in &report.diagnostics.condition_warnings {
                eprintln!("warning: {w}");
            }
            if !report.diagnostics.dead_components.is_empty() {
                eprintln!("warning: dead components {:?}", report.diagnostics.dead_components);
            }
            Ok(fit_exit_code(&report))
        }
        Command::Evaluate(c) => {
            let report = cmd_evaluate(&EvaluateArgs {
                model: c.input,
                truth: c.truth,
                data: c.data,
                output: c.output,
            })?;
            let json = serde_json::to_string_pretty(&report).map_err(driftdecomp::Error::from)?;
            println!("{json}");
            Ok(exit::CONVERGED)
        }
        Command::ExportPlots(c) => {
            let files = cmd_export_plots(&c.input, &c.output)?;
            println!("wrote {} files to {}", files.len(), c.output.display());
            Ok(exit::CONVERGED)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { exit::CONFIG } else { exit::CONVERGED };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
