//! Command-line runner: pretraining, adaptation runs, standalone solving,
//! gradient checks and the hard-limit oracle sweep.

pub mod commands;
pub mod config;
pub mod csv;
pub mod error;

use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use spegc::dgcs::{CostMode, ORACLE_MAX_ITER};
use spegc::gradcheck::GradcheckConfig;
use spegc::ot::SinkhornSettings;

use crate::commands::{
    cmd_adapt, cmd_gradcheck, cmd_oracle, cmd_pretrain, cmd_solve, gradcheck_table,
    load_checkpoint, oracle_table, sidecar, write_json, OracleOptions, SolveOptions,
};
use crate::config::RunConfig;
pub use crate::error::{CliError, CliResult, EXIT_CHECK, EXIT_INPUT, EXIT_MISMATCH, EXIT_OK};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CostArg {
    Linear,
    Squared,
}

impl From<CostArg> for CostMode {
    fn from(c: CostArg) -> Self {
        match c {
            CostArg::Linear => CostMode::Linear,
            CostArg::Squared => CostMode::Squared,
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "spegc",
    version,
    about = "Graph-clustering test-time adaptation on synthetic segmentation streams"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the source model and write a checkpoint.
    Pretrain {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides `pretrain.epochs`.
        #[arg(long)]
        epochs: Option<usize>,
        /// Overrides `seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Adapt along the configured stream; writes a JSONL step log and a summary.
    Adapt {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Step log (JSON lines).
        #[arg(long)]
        out: PathBuf,
        /// Summary JSON; defaults to `<out>.summary.json`.
        #[arg(long)]
        summary: Option<PathBuf>,
        /// Overrides `adapt.rounds`.
        #[arg(long)]
        rounds: Option<usize>,
        /// Shuffle all domains into one mixed stream.
        #[arg(long)]
        shuffle: bool,
        /// Also write the adapted model as a checkpoint.
        #[arg(long)]
        save: Option<PathBuf>,
    },
    /// Refine a square affinity matrix (headerless CSV) with the OT solver.
    Solve {
        #[arg(long)]
        affinity: PathBuf,
        /// Number of components `Z`; the edge budget is `V - Z`.
        #[arg(long)]
        z: usize,
        #[arg(long, default_value_t = 0.05)]
        theta: f64,
        #[arg(long, value_enum, default_value = "squared")]
        cost_mode: CostArg,
        #[arg(long, default_value_t = 1e-6)]
        tol: f64,
        #[arg(long, default_value_t = 200)]
        max_iter: usize,
        #[arg(long)]
        out: PathBuf,
        /// Diagnostics JSON; defaults to `<out>.json`.
        #[arg(long)]
        diagnostics: Option<PathBuf>,
    },
    /// Compare taped gradients with finite differences on a small instance.
    Gradcheck {
        /// Graph nodes V (6 to 16).
        #[arg(long, default_value_t = 12)]
        size: usize,
        #[arg(long, default_value_t = 5)]
        iters: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Sweep theta and compare the solver's top-k edges with the hard selection.
    Oracle {
        #[arg(long, default_value_t = 50)]
        e: usize,
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(
            long,
            value_delimiter = ',',
            default_value = "0.001,0.01,0.05,0.5,1000"
        )]
        theta_sweep: Vec<f64>,
        #[arg(long, default_value_t = 20)]
        instances: usize,
        #[arg(long, value_enum, default_value = "squared")]
        cost_mode: CostArg,
        #[arg(long, default_value_t = ORACLE_MAX_ITER)]
        max_iter: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        json: Option<PathBuf>,
    },
}

fn settings(theta: f64, tol: f64, max_iter: usize) -> CliResult<SinkhornSettings> {
    if !(theta.is_finite() && theta > 0.0) || !(tol.is_finite() && tol > 0.0) || max_iter == 0 {
        return Err(CliError::Input(format!(
            "need theta > 0, tol > 0, max_iter > 0; got {theta}, {tol}, {max_iter}"
        )));
    }
    Ok(SinkhornSettings {
        theta,
        tol,
        max_iter,
    })
}

fn emit(out: &mut dyn Write, text: &str) -> CliResult<()> {
    out.write_all(text.as_bytes())
        .map_err(CliError::io("<stdout>"))
}

/// Executes one command, writing human-readable output to `out`.
pub fn run(cli: Cli, out: &mut dyn Write) -> CliResult<()> {
    match cli.command {
        Command::Pretrain {
            config,
            out: path,
            epochs,
            seed,
        } => {
            let mut cfg = RunConfig::load(config.as_deref())?;
            if let Some(e) = epochs {
                cfg.pretrain.epochs = e;
            }
            if let Some(s) = seed {
                cfg.seed = s;
                cfg.adapt.seed = s;
            }
            let o = cmd_pretrain(&cfg, &path)?;
            emit(
                out,
                &format!(
                    "pretrained seed={} epochs={} loss {:.6} -> {:.6} source_dsc={:.4} -> {}\n",
                    o.seed,
                    o.epochs,
                    o.initial_loss,
                    o.final_loss,
                    o.source_dice,
                    path.display()
                ),
            )
        }
        Command::Adapt {
            config,
            checkpoint,
            out: path,
            summary,
            rounds,
            shuffle,
            save,
        } => {
            let mut cfg = RunConfig::load(config.as_deref())?;
            if let Some(r) = rounds {
                cfg.adapt.rounds = r;
            }
            cfg.stream.shuffle |= shuffle;
            cfg.validate()?;
            let ckpt = load_checkpoint(&checkpoint)?;
            let summary_path = summary.unwrap_or_else(|| sidecar(&path, ".summary.json"));
            let o = cmd_adapt(&cfg, &ckpt, &path, &summary_path, save.as_deref())?;
            let s = &o.summary;
            let mut text = format!(
                "steps={} rounds={} adapted_dsc={:.4} no_adapt_dsc={:.4} aborted={} max_residual={:.3e}\n",
                s.steps, s.rounds, s.adapted_dice, s.baseline_dice, s.aborted_steps, s.max_residual
            );
            for (id, d) in &s.per_domain {
                text.push_str(&format!(
                    "  {id}: adapted {:.4} no_adapt {:.4} ({} steps)\n",
                    d.adapted_dice, d.baseline_dice, d.steps
                ));
            }
            emit(out, &text)
        }
        Command::Solve {
            affinity,
            z,
            theta,
            cost_mode,
            tol,
            max_iter,
            out: path,
            diagnostics,
        } => {
            let opts = SolveOptions {
                components: z,
                cost_mode: cost_mode.into(),
                settings: settings(theta, tol, max_iter)?,
            };
            let diag_path = diagnostics.unwrap_or_else(|| sidecar(&path, ".json"));
            let d = cmd_solve(&affinity, &path, &diag_path, opts)?;
            emit(
                out,
                &format!(
                    "V={} k={}{} iterations={} residual={:.3e}\n",
                    d.nodes,
                    d.k,
                    if d.k_clamped { " (clamped)" } else { "" },
                    d.iterations,
                    d.residual
                ),
            )
        }
        Command::Gradcheck {
            size,
            iters,
            seed,
            json,
        } => {
            let config = GradcheckConfig {
                nodes: size,
                iters,
                seed,
                ..GradcheckConfig::default()
            };
            let report = cmd_gradcheck(&config)?;
            emit(out, &gradcheck_table(&report))?;
            if let Some(p) = json {
                write_json(&p, &report)?;
            }
            if report.passed() {
                Ok(())
            } else {
                Err(CliError::Check(format!(
                    "gradient mismatch in {}",
                    report.failing().join(", ")
                )))
            }
        }
        Command::Oracle {
            e,
            k,
            theta_sweep,
            instances,
            cost_mode,
            max_iter,
            seed,
            json,
        } => {
            let opts = OracleOptions {
                edges: e,
                k,
                thetas: theta_sweep,
                instances,
                cost_mode: cost_mode.into(),
                max_iter,
                seed,
                ..OracleOptions::default()
            };
            let report = cmd_oracle(&opts)?;
            emit(out, &oracle_table(&report))?;
            if let Some(p) = json {
                write_json(&p, &report)?;
            }
            Ok(())
        }
    }
}

/// Parses `args` and runs; returns the process exit code.
pub fn main_with<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            if e.use_stderr() {
                let _ = write!(err, "{e}");
                return EXIT_INPUT;
            }
            let _ = write!(out, "{e}");
            return EXIT_OK;
        }
    };
    match run(cli, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}
