use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};

use localpg::config;

#[derive(Parser)]
#[command(
    name = "localpg",
    about = "Networked multi-agent policy gradients for occupancy-measure utilities",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the training loop and write a run directory (config copy,
    /// metrics log, checkpoints, summary). Exits nonzero if any invariant
    /// violation was logged.
    Train {
        config: PathBuf,
        /// Override the output root from the config.
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Compute the influence matrix, search the beta grid for the best decay
    /// certificate, measure the exact Q-decay per agent and radius, and dump
    /// the report. Exits nonzero if a held certificate's bound is violated.
    VerifyDecay {
        config: PathBuf,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Check the exact policy gradient against central finite differences of
    /// the objective on the configured instance (pass: relative error 1e-5).
    GradientCheck {
        config: PathBuf,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Compare the sampled estimators (occupancy, TD Q-tables, truncated
    /// gradient) against their exact oracle counterparts.
    OracleCompare {
        config: PathBuf,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(2)
        }
    }
}

fn run() -> anyhow::Result<ExitCode> {
    let cli = Cli::parse();
    match cli.command {
        Command::Train { config, output_dir } => {
            let (cfg, text) = config::load_config(&config)
                .with_context(|| format!("loading {}", config.display()))?;
            let base = config.parent().unwrap_or(std::path::Path::new("."));
            let outcome = config::run_train(&cfg, &text, base, output_dir.as_deref())?;
            println!("run directory: {}", outcome.run_dir.display());
            if let Some(f) = outcome.final_f_exact {
                println!("final objective: {f}");
            }
            if outcome.violations > 0 {
                println!("invariant violations logged: {}", outcome.violations);
                return Ok(ExitCode::FAILURE);
            }
            println!("no invariant violations");
            Ok(ExitCode::SUCCESS)
        }
        Command::VerifyDecay { config, output_dir } => {
            let (cfg, _) = config::load_config(&config)?;
            let base = config.parent().unwrap_or(std::path::Path::new("."));
            let (report, path) = config::run_verify_decay(&cfg, base, output_dir.as_deref())?;
            println!("report: {}", path.display());
            let cert = &report.certificate;
            println!(
                "certificate: beta = {}, rho = {:.6}, holds = {}",
                cert.beta, cert.rho, cert.holds
            );
            if cert.holds {
                println!("c0 = {:.6}, phi0 = {:.6}", cert.c0, cert.phi0);
                if report.dominated {
                    println!("measured decay is dominated by the certified bound");
                    Ok(ExitCode::SUCCESS)
                } else {
                    println!("BOUND VIOLATION: measured decay exceeds the certificate");
                    Ok(ExitCode::FAILURE)
                }
            } else {
                println!("no certificate on the beta grid; decay table written for inspection");
                Ok(ExitCode::SUCCESS)
            }
        }
        Command::GradientCheck { config, output_dir } => {
            let (cfg, _) = config::load_config(&config)?;
            let base = config.parent().unwrap_or(std::path::Path::new("."));
            let (report, path) = config::run_gradient_check(&cfg, base, output_dir.as_deref())?;
            println!("report: {}", path.display());
            println!(
                "relative error {:.3e} (gradient norm {:.3e}, h = {:.0e})",
                report.relative_error, report.exact_norm, report.fd_step
            );
            if report.pass {
                println!("gradient check passed");
                Ok(ExitCode::SUCCESS)
            } else {
                println!("gradient check FAILED");
                Ok(ExitCode::FAILURE)
            }
        }
        Command::OracleCompare { config, output_dir } => {
            let (cfg, _) = config::load_config(&config)?;
            let base = config.parent().unwrap_or(std::path::Path::new("."));
            let (report, path) = config::run_oracle_compare(&cfg, base, output_dir.as_deref())?;
            println!("report: {}", path.display());
            println!(
                "occupancy error per agent: {:?} (bound {:.4})",
                report.occupancy_error, report.occupancy_bound
            );
            println!("TD Q sup error per agent: {:?}", report.q_sup_error);
            println!("gradient error per agent: {:?}", report.gradient_error);
            Ok(ExitCode::SUCCESS)
        }
    }
}
