use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use spegc::adapt::{run_stream_from, AdaptState, RunSummary, StepReport};
use spegc::backbone::{pretrain, Backbone};
use spegc::checkpoint::Checkpoint;
use spegc::dgcs::{solve_edges, topk_oracle, CostMode, ORACLE_MAX_ITER};
use spegc::gradcheck::{gradcheck, GradcheckConfig, GradcheckReport};
use spegc::ot::SinkhornSettings;
use spegc::stream::{generate_stream, source_samples};
use spegc::{Purpose, Rng};

use crate::config::RunConfig;
use crate::csv::{format_matrix, parse_matrix};
use crate::error::{CliError, CliResult};

fn write_file(path: &Path, contents: &str) -> CliResult<()> {
    std::fs::write(path, contents).map_err(CliError::io(path))
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("plain data serializes")
}

/// `<path>` with `suffix` appended to the full file name.
pub fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(suffix);
    PathBuf::from(name)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainOutcome {
    pub seed: u64,
    pub epochs: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub source_dice: f64,
}

pub fn cmd_pretrain(config: &RunConfig, out: &Path) -> CliResult<PretrainOutcome> {
    config.validate()?;
    let p = &config.pretrain;
    let samples = source_samples(config.seed, p.source_images, config.stream.image_size)?;
    let mut model = Backbone::new(
        p.backbone.clone(),
        &mut Rng::new(config.seed, Purpose::Init),
    )?;
    let report = pretrain(&mut model, &samples, p, config.seed)?;
    let outcome = PretrainOutcome {
        seed: config.seed,
        epochs: p.epochs,
        initial_loss: report.initial_loss,
        final_loss: report.final_loss,
        source_dice: report.source_dice,
    };
    let checkpoint = Checkpoint::new(config.seed, p.clone(), model, Some(report));
    write_file(out, &checkpoint.to_json()?)?;
    Ok(outcome)
}

pub fn load_checkpoint(path: &Path) -> CliResult<Checkpoint> {
    let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
    Ok(Checkpoint::from_json(&text)?)
}

/// One line of the adaptation log. The first line carries the effective
/// configuration; every other line is one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LogLine {
    Config {
        seed: u64,
        checkpoint_seed: u64,
        config: Box<RunConfig>,
    },
    Step(Box<StepReport>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptOutcome {
    pub checkpoint_seed: u64,
    pub config: RunConfig,
    pub summary: RunSummary,
}

/// Runs the stream from `checkpoint`, writing the log to `out` and the
/// summary to `summary_path`. With `save`, the adapted model is written as a
/// checkpoint that later runs resume from.
pub fn cmd_adapt(
    config: &RunConfig,
    checkpoint: &Checkpoint,
    out: &Path,
    summary_path: &Path,
    save: Option<&Path>,
) -> CliResult<AdaptOutcome> {
    config.validate()?;
    let s = &config.stream;
    let stream = generate_stream(
        config.seed,
        &s.domains,
        s.steps_per_domain,
        s.shuffle,
        s.image_size,
    )?;
    let state = match &checkpoint.adapter {
        None => AdaptState::new(checkpoint.backbone.clone(), &config.adapt)?,
        Some(a) => AdaptState::resume(checkpoint.backbone.clone(), a.clone(), &config.adapt)?,
    };

    let file = File::create(out).map_err(CliError::io(out))?;
    let mut log = BufWriter::new(file);
    let header = LogLine::Config {
        seed: config.seed,
        checkpoint_seed: checkpoint.seed,
        config: Box::new(config.clone()),
    };
    let mut write_err = writeln!(log, "{}", to_json(&header)).err();
    let run = run_stream_from(state, &stream, &config.adapt, |r| {
        if write_err.is_none() {
            let line = LogLine::Step(Box::new(r.clone()));
            write_err = writeln!(log, "{}", to_json(&line)).err();
        }
    })?;
    if let Some(e) = write_err {
        return Err(CliError::Io {
            path: out.to_path_buf(),
            source: e,
        });
    }
    log.flush().map_err(CliError::io(out))?;

    let outcome = AdaptOutcome {
        checkpoint_seed: checkpoint.seed,
        config: config.clone(),
        summary: run.summary,
    };
    write_file(summary_path, &(to_json(&outcome) + "\n"))?;
    if let Some(path) = save {
        let mut adapted = checkpoint.clone();
        adapted.backbone = run.state.backbone;
        adapted.adapter = Some(run.state.adapter);
        write_file(path, &adapted.to_json()?)?;
    }
    Ok(outcome)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveDiagnostics {
    pub nodes: usize,
    pub edges: usize,
    pub components: usize,
    pub k: usize,
    pub k_clamped: bool,
    pub theta: f64,
    pub cost_mode: CostMode,
    pub tol: f64,
    pub max_iter: usize,
    pub iterations: usize,
    pub residual: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveOptions {
    pub components: usize,
    pub cost_mode: CostMode,
    pub settings: SinkhornSettings,
}

/// Refines a square affinity matrix read from CSV text. Returns the refined
/// matrix as CSV text and the diagnostics.
pub fn solve_csv(text: &str, opts: SolveOptions) -> CliResult<(String, SolveDiagnostics)> {
    let affinity = parse_matrix(text)?;
    let (v, c) = affinity.shape();
    if v != c {
        return Err(CliError::Input(format!(
            "affinity must be square, got {v}x{c}"
        )));
    }
    if v < 2 {
        return Err(CliError::Input("affinity needs at least 2 nodes".into()));
    }
    let plan = solve_edges(
        affinity.data(),
        v as i64 - opts.components as i64,
        opts.cost_mode,
        opts.settings,
    )?;
    let refined = plan.refined(v)?;
    let diagnostics = SolveDiagnostics {
        nodes: v,
        edges: v * v,
        components: opts.components,
        k: plan.k,
        k_clamped: plan.clamped,
        theta: opts.settings.theta,
        cost_mode: opts.cost_mode,
        tol: opts.settings.tol,
        max_iter: opts.settings.max_iter,
        iterations: plan.iterations,
        residual: plan.residual,
        converged: plan.residual <= opts.settings.tol,
    };
    Ok((format_matrix(&refined), diagnostics))
}

pub fn cmd_solve(
    affinity: &Path,
    out: &Path,
    diagnostics: &Path,
    opts: SolveOptions,
) -> CliResult<SolveDiagnostics> {
    let text = std::fs::read_to_string(affinity).map_err(CliError::io(affinity))?;
    let (csv, diag) = solve_csv(&text, opts)?;
    write_file(out, &csv)?;
    write_file(diagnostics, &(to_json(&diag) + "\n"))?;
    Ok(diag)
}

/// Runs the gradient check; a failing group is a check failure naming it.
pub fn cmd_gradcheck(config: &GradcheckConfig) -> CliResult<GradcheckReport> {
    Ok(gradcheck(config)?)
}

pub fn gradcheck_table(report: &GradcheckReport) -> String {
    let mut out = format!(
        "V={} iterations={} loss={:.6}\n{:<12} {:>10} {:>10} {:>10}  status\n",
        report.nodes, report.iterations, report.loss, "group", "rel_err", "|analytic|", "|numeric|"
    );
    for g in &report.groups {
        out.push_str(&format!(
            "{:<12} {:>10.3e} {:>10.3e} {:>10.3e}  {}\n",
            g.group,
            g.rel_error,
            g.max_abs_analytic,
            g.max_abs_numeric,
            if g.passed { "pass" } else { "FAIL" }
        ));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleOptions {
    pub edges: usize,
    pub k: usize,
    pub thetas: Vec<f64>,
    pub instances: usize,
    pub cost_mode: CostMode,
    pub max_iter: usize,
    pub tol: f64,
    pub seed: u64,
}

impl Default for OracleOptions {
    fn default() -> Self {
        Self {
            edges: 50,
            k: 10,
            thetas: vec![1e-3, 1e-2, 0.05, 0.5, 1e3],
            instances: 20,
            cost_mode: CostMode::Squared,
            max_iter: ORACLE_MAX_ITER,
            tol: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleRow {
    pub theta: f64,
    /// Mean fraction of the oracle's top-k edges also in the plan's top-k.
    pub agreement: f64,
    /// Fraction of instances whose top-k sets match exactly.
    pub exact: f64,
    /// Largest `|Gamma_{i,2} - y_i|` against the binary oracle `y`.
    pub gap_to_oracle: f64,
    /// Largest `|Gamma_{i,2} - k/E|`.
    pub gap_to_uniform: f64,
    pub max_iterations: usize,
    pub max_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub options: OracleOptions,
    pub rows: Vec<OracleRow>,
}

/// Instance `i` of the sweep: `edges` uniform affinities in `[0, 1)`.
pub fn oracle_instance(seed: u64, i: usize, edges: usize) -> Vec<f64> {
    let mut rng = Rng::indexed(seed, Purpose::Oracle, i as u64);
    (0..edges).map(|_| rng.uniform()).collect()
}

fn top_set(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut top = order[..k].to_vec();
    top.sort_unstable();
    top
}

pub fn cmd_oracle(opts: &OracleOptions) -> CliResult<OracleReport> {
    if opts.edges < 2 || opts.edges > 10_000 {
        return Err(CliError::Input(format!(
            "e must lie in [2, 10000], got {}",
            opts.edges
        )));
    }
    if opts.k == 0 || opts.k >= opts.edges {
        return Err(CliError::Input(format!(
            "k must lie in [1, {}], got {}",
            opts.edges - 1,
            opts.k
        )));
    }
    if opts.instances == 0 || opts.thetas.is_empty() {
        return Err(CliError::Input(
            "need at least one instance and one theta".into(),
        ));
    }
    if let Some(t) = opts.thetas.iter().find(|t| !(t.is_finite() && **t > 0.0)) {
        return Err(CliError::Input(format!(
            "theta must be positive and finite, got {t}"
        )));
    }
    let uniform = opts.k as f64 / opts.edges as f64;
    let mut rows = Vec::with_capacity(opts.thetas.len());
    for &theta in &opts.thetas {
        let settings = SinkhornSettings {
            theta,
            tol: opts.tol,
            max_iter: opts.max_iter,
        };
        let mut row = OracleRow {
            theta,
            agreement: 0.0,
            exact: 0.0,
            gap_to_oracle: 0.0,
            gap_to_uniform: 0.0,
            max_iterations: 0,
            max_residual: 0.0,
        };
        for i in 0..opts.instances {
            let d = oracle_instance(opts.seed, i, opts.edges);
            let plan = solve_edges(&d, opts.k as i64, opts.cost_mode, settings)?;
            let y = topk_oracle(&d, opts.k)?;
            let want = top_set(&d, opts.k);
            let got = top_set(&plan.log_select, opts.k);
            let shared = got.iter().filter(|i| want.binary_search(i).is_ok()).count();
            row.agreement += shared as f64 / opts.k as f64;
            row.exact += f64::from(u8::from(got == want));
            for (g, &yi) in plan.select().iter().zip(&y) {
                row.gap_to_oracle = row.gap_to_oracle.max((g - f64::from(yi)).abs());
                row.gap_to_uniform = row.gap_to_uniform.max((g - uniform).abs());
            }
            row.max_iterations = row.max_iterations.max(plan.iterations);
            row.max_residual = row.max_residual.max(plan.residual);
        }
        row.agreement /= opts.instances as f64;
        row.exact /= opts.instances as f64;
        rows.push(row);
    }
    Ok(OracleReport {
        options: opts.clone(),
        rows,
    })
}

pub fn oracle_table(report: &OracleReport) -> String {
    let mut out = format!(
        "{:>10} {:>9} {:>6} {:>10} {:>10} {:>7} {:>10}\n",
        "theta", "agreement", "exact", "gap_oracle", "gap_unif", "iters", "residual"
    );
    for r in &report.rows {
        out.push_str(&format!(
            "{:>10.3e} {:>9.4} {:>6.3} {:>10.3e} {:>10.3e} {:>7} {:>10.3e}\n",
            r.theta,
            r.agreement,
            r.exact,
            r.gap_to_oracle,
            r.gap_to_uniform,
            r.max_iterations,
            r.max_residual
        ));
    }
    out
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    write_file(path, &(to_json(value) + "\n"))
}
