//! Command-line experiment runner for test-time prompt calibration.
//!
//! Exit codes: 0 on success, 1 for configuration or validation problems,
//! 2 when a run's numeric failures exceed the configured budget or compute
//! fails after validation passed.

use promptcal_cli::{config, experiment, grid, plots};

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "promptcal",
    about = "Attribute-aware test-time prompt calibration experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every configured method over every seed and write result files.
    Run {
        config: PathBuf,
        /// Override the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Grid-search (alpha, beta) for the first configured method.
    Grid {
        config: PathBuf,
        /// Alpha values, comma separated.
        #[arg(long, value_delimiter = ',', required = true)]
        alpha: Vec<f64>,
        /// Beta values, comma separated.
        #[arg(long, value_delimiter = ',', required = true)]
        beta: Vec<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Emit reliability, PCA, and scatter tables from a results directory.
    Plots { results_dir: PathBuf },
    /// Check a config and print its resolved form.
    Validate { config: PathBuf },
}

const EXIT_VALIDATION: u8 = 1;
const EXIT_RUNTIME: u8 = 2;

struct Failure {
    code: u8,
    message: String,
}

fn validation(e: promptcal::Error) -> Failure {
    Failure {
        code: EXIT_VALIDATION,
        message: e.to_string(),
    }
}

fn runtime(e: promptcal::Error) -> Failure {
    Failure {
        code: EXIT_RUNTIME,
        message: e.to_string(),
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("NaN".to_string(), |x| format!("{x:.6}"))
}

fn load_config(path: &Path, out: Option<PathBuf>) -> Result<config::ResolvedConfig, Failure> {
    let mut cfg = config::load(path).map_err(validation)?;
    if let Some(out) = out {
        cfg.output_dir = out;
    }
    Ok(cfg)
}

fn cmd_run(path: PathBuf, out: Option<PathBuf>) -> Result<(), Failure> {
    let cfg = load_config(&path, out)?;
    let prepared = experiment::prepare(&cfg).map_err(validation)?;
    let computed = experiment::compute(&cfg, &prepared).map_err(runtime)?;
    experiment::write_outputs(&cfg, &computed).map_err(runtime)?;

    println!("method\tseed\tn_scored\tn_failed\taccuracy\tece\tmean_atfd\tmean_mtas");
    for r in &computed.rows {
        println!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.method,
            r.seed,
            r.n_scored,
            r.n_failed,
            fmt_opt(r.accuracy),
            fmt_opt(r.ece),
            fmt_opt(r.mean_atfd),
            fmt_opt(r.mean_mtas)
        );
    }
    println!("results written to {}", cfg.output_dir.display());
    if computed.total_failed > cfg.failure_budget {
        return Err(Failure {
            code: EXIT_RUNTIME,
            message: format!(
                "{} numeric failures exceed the budget of {}",
                computed.total_failed, cfg.failure_budget
            ),
        });
    }
    Ok(())
}

fn cmd_grid(
    path: PathBuf,
    alphas: Vec<f64>,
    betas: Vec<f64>,
    out: Option<PathBuf>,
) -> Result<(), Failure> {
    let cfg = load_config(&path, out)?;
    grid::validate_inputs(&alphas, &betas, &cfg).map_err(validation)?;
    let prepared = experiment::prepare(&cfg).map_err(validation)?;
    let outcome = grid::search_prepared(&cfg, &prepared, &alphas, &betas).map_err(runtime)?;
    grid::write_grid(&cfg, &outcome).map_err(runtime)?;
    println!("alpha\tbeta\tmean_ece\tmean_accuracy");
    for r in &outcome.rows {
        println!(
            "{}\t{}\t{}\t{}",
            r.alpha,
            r.beta,
            fmt_opt(r.mean_ece),
            fmt_opt(r.mean_accuracy)
        );
    }
    println!(
        "best alpha={} beta={}",
        outcome.best_alpha, outcome.best_beta
    );
    println!("grid written to {}", cfg.output_dir.display());
    Ok(())
}

fn cmd_plots(results_dir: PathBuf) -> Result<(), Failure> {
    let written = plots::emit_plot_data(&results_dir).map_err(|e| match e {
        promptcal::Error::InvalidArgument(_) => validation(e),
        other => runtime(other),
    })?;
    for path in written {
        println!("{}", path.display());
    }
    Ok(())
}

fn cmd_validate(path: PathBuf) -> Result<(), Failure> {
    let cfg = load_config(&path, None)?;
    let manifest = cfg.manifest_toml().map_err(validation)?;
    print!("{manifest}");
    println!("# output_dir: {}", cfg.output_dir.display());
    println!("# config ok");
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Usage problems share the validation exit code; --help and
            // --version exit cleanly.
            let usage_error = e.use_stderr();
            let _ = e.print();
            return if usage_error {
                ExitCode::from(EXIT_VALIDATION)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Run { config, out } => cmd_run(config, out),
        Command::Grid {
            config,
            alpha,
            beta,
            out,
        } => cmd_grid(config, alpha, beta, out),
        Command::Plots { results_dir } => cmd_plots(results_dir),
        Command::Validate { config } => cmd_validate(config),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
