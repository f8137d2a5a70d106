//! `kamred`: run, audit and inspect KAM reductions from JSON configs.
//!
//! Exit codes: 0 reduced or passed, 1 unreadable input, 2 stalled, failed
//! or numerical error, 3 precondition failure.

mod commands;
mod config;

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rayon::prelude::*;

use commands::{
    cmd_audit, cmd_check_arith, cmd_rotnum, cmd_run, parent_dir, EXIT_FAILED, EXIT_PARSE,
};

#[derive(Debug, Parser)]
#[command(
    name = "kamred",
    version,
    about = "KAM reduction of quasi-periodic sl(2,R) cocycles"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the KAM iteration; writes trace.csv, certificate.json, run_meta.json.
    Run {
        /// Scenario config; repeat for a batch.
        #[arg(long = "config", required = true)]
        configs: Vec<PathBuf>,
        /// Output directory (default: next to each config). With several
        /// configs each gets a subdirectory named after its file stem.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads for a batch.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Non-resonance scan, fitted G table, Brjuno integrals.
    CheckArith {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "N")]
        n: u32,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-check a recorded trace against its config.
    Audit {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Certificate for the additivity check (default: next to the trace).
        #[arg(long)]
        certificate: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rotation number of A + F by direct integration, printed as JSON.
    Rotnum {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "T")]
        t: Option<f64>,
        #[arg(long)]
        h: Option<f64>,
    },
}

fn run_batch(configs: &[PathBuf], out: Option<&Path>, jobs: usize) -> i32 {
    let target = |c: &PathBuf| match out {
        Some(o) if configs.len() > 1 => o.join(c.file_stem().unwrap_or_default()),
        Some(o) => o.to_path_buf(),
        None => parent_dir(c),
    };
    let pool = match rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
    {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_FAILED;
        }
    };
    let codes: Vec<i32> =
        pool.install(|| configs.par_iter().map(|c| cmd_run(c, &target(c))).collect());
    codes.into_iter().max().unwrap_or(0)
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_PARSE } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    let code = match cli.command {
        Command::Run { configs, out, jobs } => run_batch(&configs, out.as_deref(), jobs),
        Command::CheckArith { config, n, out } => {
            let dir = out.unwrap_or_else(|| parent_dir(&config));
            cmd_check_arith(&config, n, &dir)
        }
        Command::Audit {
            trace,
            config,
            certificate,
            out,
        } => {
            let dir = out.unwrap_or_else(|| parent_dir(&trace));
            cmd_audit(&trace, &config, certificate.as_deref(), &dir)
        }
        Command::Rotnum { config, t, h } => cmd_rotnum(&config, t, h),
    };
    std::process::exit(code);
}
