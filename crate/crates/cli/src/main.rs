//! `metadr`: run continual protocols from a JSON config, verify gradients,
//! inspect transform sets and aggregate reports.
//!
//! Exit codes: 0 success, 1 failed check or I/O error, 2 invalid input
//! (schema, config values, unknown set, mixed reports), 3 divergence.

mod report;
mod run;
mod transforms;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use metadr_core::continual::composite_check;
use metadr_core::gradcore::{run_suite, GradCheckConfig};

/// Error carrying the process exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn invalid(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }

    pub fn io(path: &std::path::Path, e: impl std::fmt::Display) -> Self {
        Self { code: 1, message: format!("{}: {e}", path.display()) }
    }
}

#[derive(Parser)]
#[command(name = "metadr", version, about = "Continual domain adaptation lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Format {
    Json,
    Csv,
    Table,
}

#[derive(Subcommand)]
enum Command {
    /// Run every method and seed of a config; flags override the file.
    Run(run::RunArgs),
    /// Finite-difference checks of gradients, HVPs and the meta objective.
    Gradcheck {
        /// Random MLP/CNN instances to compare.
        #[arg(long, default_value_t = 50)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Negate analytic gradients; the check must then fail.
        #[arg(long, hide = true)]
        inject_sign_flip: bool,
    },
    /// Write sampled transformed copies of an image plus a manifest.
    Transforms(transforms::TransformArgs),
    /// Aggregate report files into a table, curves CSV or JSON.
    Report {
        #[arg(required = true)]
        files: Vec<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
        /// Write here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn gradcheck(instances: usize, seed: u64, inject_sign_flip: bool) -> Result<(), Failure> {
    let started = Instant::now();
    let cfg = GradCheckConfig { inject_sign_flip, ..GradCheckConfig::default() };
    let fail = |e: metadr_core::gradcore::GradError| Failure { code: 1, message: e.to_string() };
    let suite = run_suite(instances, seed, &cfg).map_err(fail)?;
    println!(
        "gradcheck: {} instances, max grad rel {:.3e} (tol {:.0e}), max hvp rel {:.3e} (tol {:.0e})",
        suite.checked.len(),
        suite.max_grad_rel,
        cfg.grad_tol,
        suite.max_hvp_rel,
        cfg.hvp_tol
    );
    if suite.excluded.is_empty() {
        println!("  kink exclusions: none");
    }
    for r in &suite.excluded {
        println!("  excluded {} (relu margin {:.2e}, pool margin {:.2e})", r.label, r.relu_margin, r.pool_margin);
    }
    for r in suite.checked.iter().filter(|r| !r.passed) {
        println!("  FAILED {} grad rel {:.3e} hvp rel {:.3e}", r.label, r.max_grad_rel, r.max_hvp_rel);
    }
    let tol = 1e-5;
    let comp = composite_check(seed, 1e-5, tol, cfg.kink_tol, inject_sign_flip).map_err(fail)?;
    println!(
        "composite objective: {} params, max rel {:.3e} (tol {tol:.0e}), zero-weight reduction exact: {}",
        comp.params, comp.max_rel, comp.reduction_exact
    );
    for s in &comp.excluded {
        println!("  excluded composite instance {s} (relu kink)");
    }
    let passed = suite.passed && comp.passed;
    println!("{} in {:.1}s", if passed { "PASS" } else { "FAIL" }, started.elapsed().as_secs_f64());
    if passed {
        Ok(())
    } else {
        Err(Failure { code: 1, message: "gradient check failed".into() })
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => run::cmd_run(args),
        Command::Gradcheck { instances, seed, inject_sign_flip } => gradcheck(instances, seed, inject_sign_flip),
        Command::Transforms(args) => transforms::cmd_transforms(args),
        Command::Report { files, format, out } => report::cmd_report(&files, format, out.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
