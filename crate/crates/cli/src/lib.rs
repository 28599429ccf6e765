//! `m2cl` command-line driver: pool and problem generation, training,
//! discussion runs, bound verification and reporting.

// Negated float comparisons are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod error;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use m2cl_core::context::SelectionMode;
use m2cl_core::engine::DiscrepancyMetric;
use tracing::info;

pub use config::{Backend, RunConfig};
pub use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "m2cl", version, about = "Multi-agent discussion with learned, evolving instructions")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a seeded synthetic instruction pool.
    InitPool {
        #[arg(long, default_value_t = m2cl_core::config::POOL_SIZE)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a seeded synthetic multiple-choice problem set.
    InitProblems {
        #[arg(long, default_value_t = 20)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the projection, distilled projector and per-agent generators.
    Train(RunArgs),
    /// Run discussions over every problem.
    Discuss {
        #[command(flatten)]
        run: RunArgs,
        /// Baseline: the first N pool entries as fixed instructions.
        #[arg(long)]
        fixed_context: bool,
        /// Checkpoint directory; defaults to `<out>/checkpoints`.
        #[arg(long)]
        checkpoints: Option<PathBuf>,
    },
    /// Check the attention bounds on random instances.
    VerifyBounds {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        samples: usize,
        /// Skip input rescaling so the Lipschitz premises may fail.
        #[arg(long)]
        adversarial: bool,
        /// JSONL report path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Aggregate run directories into CSV tables.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Flags shared by `train` and `discuss`; each overrides the config file.
#[derive(Debug, Default, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub pool: Option<PathBuf>,
    #[arg(long)]
    pub problems: Option<PathBuf>,
    #[arg(long)]
    pub agents: Option<usize>,
    #[arg(long)]
    pub rounds: Option<usize>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub backend: Option<Backend>,
    #[arg(long)]
    pub endpoint: Option<String>,
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub jobs: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long, value_enum)]
    pub selection: Option<SelectionArg>,
    #[arg(long, value_enum)]
    pub discrepancy: Option<DiscrepancyArg>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum SelectionArg {
    Greedy,
    Exhaustive,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum DiscrepancyArg {
    Activation,
    Embedding,
}

impl RunArgs {
    /// Config file (or defaults) with flags applied on top. Relative paths in
    /// the file resolve against the file's directory.
    pub fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.config {
            Some(path) => {
                let mut cfg = RunConfig::load(path)?;
                let base = path.parent().map(PathBuf::from).unwrap_or_default();
                for p in [&mut cfg.pool_path, &mut cfg.problems_path].into_iter().flatten() {
                    if p.is_relative() {
                        *p = base.join(&*p);
                    }
                }
                cfg
            }
            None => RunConfig::default(),
        };
        macro_rules! over {
            ($flag:ident => $field:ident) => {
                if let Some(v) = &self.$flag {
                    cfg.$field = v.clone().into();
                }
            };
        }
        over!(pool => pool_path);
        over!(problems => problems_path);
        over!(agents => n_agents);
        over!(rounds => max_rounds);
        over!(beta => beta);
        over!(seed => seed);
        over!(backend => backend);
        over!(model => model);
        over!(jobs => jobs);
        over!(epochs => training_epochs);
        over!(out => output_dir);
        if let Some(e) = &self.endpoint {
            cfg.endpoint = Some(e.clone());
        }
        if let Some(s) = self.selection {
            cfg.selection = match s {
                SelectionArg::Greedy => SelectionMode::Greedy,
                SelectionArg::Exhaustive => SelectionMode::Exhaustive,
            };
        }
        if let Some(d) = self.discrepancy {
            cfg.discrepancy = match d {
                DiscrepancyArg::Activation => DiscrepancyMetric::Activation,
                DiscrepancyArg::Embedding => DiscrepancyMetric::Embedding,
            };
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Runs one command and returns the process exit code.
pub fn run(cli: Cli) -> u8 {
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::InitPool { size, seed, out } => {
            let pool = commands::cmd_init_pool(size, seed, &out)?;
            println!("wrote {} pool entries to {}", pool.len(), out.display());
        }
        Command::InitProblems { count, seed, out } => {
            let ps = commands::cmd_init_problems(count, seed, &out)?;
            println!("wrote {} problems to {}", ps.len(), out.display());
        }
        Command::Train(args) => {
            let cfg = args.resolve()?;
            let outcome = commands::cmd_train(&cfg)?;
            println!("{}", outcome.diagnostics());
            if !outcome.improved() {
                return Err(CliError::Verification(format!("training did not reduce every loss: {}", outcome.diagnostics())));
            }
            info!(dir = %cfg.output_dir.display(), "checkpoints written");
        }
        Command::Discuss { run, fixed_context, checkpoints } => {
            let cfg = run.resolve()?;
            let s = commands::cmd_discuss(&cfg, fixed_context, checkpoints.as_deref())?;
            println!("{}: {}/{} correct (accuracy {:.4})", s.mode, s.correct, s.total, s.accuracy);
        }
        Command::VerifyBounds { seed, samples, adversarial, out } => {
            let (records, jsonl) = commands::cmd_verify_bounds(seed, samples, adversarial)?;
            match &out {
                Some(path) => {
                    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                        std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
                    }
                    std::fs::write(path, &jsonl).map_err(|e| CliError::io(path, e))?;
                }
                None => print!("{jsonl}"),
            }
            let failures = commands::verification_failures(&records);
            if !failures.is_empty() {
                return Err(CliError::Verification(failures.join("; ")));
            }
            eprintln!("all {} checks hold", records.len());
        }
        Command::Report { runs, out } => {
            commands::cmd_report(&runs, &out)?;
            println!("wrote reports to {}", out.display());
        }
    }
    Ok(())
}
