//! `bnn`: command-line driver for the experiment pipeline.
//!
//! Exit codes: 0 success, 2 config error, 3 run failure, 4 partial aggregation.

use std::path::PathBuf;
use std::process::ExitCode;

use bnn_core::experiment::{run_diagnostics, run_energy_analysis, run_stage, ExperimentConfig, Stage};
use bnn_core::predictive::Method;
use bnn_core::BnnError;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "bnn", version, about = "Bayesian neural network experiments for radio galaxy classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train point estimates (map, dropout or ensemble configs).
    TrainMap(Common),
    /// Run HMC chains.
    RunHmc(Common),
    /// Train mean-field variational posteriors.
    TrainVi(Common),
    /// Fit last-layer Laplace approximations.
    FitLaplace(Common),
    /// Write predictive dumps from existing checkpoints.
    Predict(Common),
    /// Fit missing runs, then write predictive dumps, metrics and the aggregate.
    Evaluate(Common),
    /// Energy scores of the test set and the configured shift sets.
    Energy(Common),
    /// Gelman-Rubin and trace diagnostics of HMC chains.
    Diagnose(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Runs executed in parallel.
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Overrides `output.dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

const EXIT_CONFIG: u8 = 2;
const EXIT_RUN: u8 = 3;

fn fail(e: &BnnError) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(match e {
        BnnError::Config(_) => EXIT_CONFIG,
        _ => EXIT_RUN,
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let (common, fit_methods): (&Common, Option<&[Method]>) = match &cli.command {
        Command::TrainMap(c) => (c, Some(&[Method::Map, Method::Dropout, Method::Ensemble])),
        Command::RunHmc(c) => (c, Some(&[Method::Hmc])),
        Command::TrainVi(c) => (c, Some(&[Method::Vi])),
        Command::FitLaplace(c) => (c, Some(&[Method::Lla])),
        Command::Predict(c) | Command::Evaluate(c) | Command::Energy(c) | Command::Diagnose(c) => (c, None),
    };
    let mut exp = match ExperimentConfig::from_file(&common.config) {
        Ok(e) => e,
        Err(e) => return fail(&e),
    };
    if let Some(out) = &common.out {
        exp.output_dir = out.clone();
    }
    if let Some(methods) = fit_methods {
        if !methods.contains(&exp.method) {
            let names: Vec<String> = methods.iter().map(Method::to_string).collect();
            return fail(&BnnError::Config(format!(
                "this command fits {} models, the config method is {}",
                names.join("/"),
                exp.method
            )));
        }
    }
    let workers = common.workers.max(1);

    match &cli.command {
        Command::Energy(_) => match run_energy_analysis(&exp, workers) {
            Ok(out) => {
                for (tag, n, m) in &out.medians {
                    println!("{tag}: {n} items, median energy {m:.4}");
                }
                ExitCode::SUCCESS
            }
            Err(e) => fail(&e),
        },
        Command::Diagnose(_) => match run_diagnostics(&exp) {
            Ok(d) => {
                println!(
                    "{} parameters, fraction with R-hat >= {}: {:.4}",
                    d.parameters.len(),
                    d.threshold,
                    d.fraction_above
                );
                ExitCode::SUCCESS
            }
            Err(e) => fail(&e),
        },
        cmd => {
            let stage = match cmd {
                Command::Predict(_) => Stage::Predict,
                Command::Evaluate(_) => Stage::Evaluate,
                _ => Stage::Fit,
            };
            match run_stage(&exp, stage, workers) {
                Ok(report) => {
                    if let Some(a) = &report.aggregate {
                        println!(
                            "{}: {} runs, error {:.2} ± {:.2}%, UCE {:.2} ± {:.2}%",
                            a.method, a.n_runs, a.error_mean, a.error_std, a.uce_mean, a.uce_std
                        );
                    }
                    for f in &report.failures {
                        eprintln!("error: {f}");
                    }
                    ExitCode::from(report.exit_code() as u8)
                }
                Err(e) => fail(&e),
            }
        }
    }
}
