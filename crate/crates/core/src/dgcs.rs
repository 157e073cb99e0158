//! Differentiable graph clustering: node similarity, density-gated edge
//! affinity, and soft top-k edge selection as an entropic OT problem with
//! two columns (reject, select).

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Result};
use crate::ot::{sinkhorn, SinkhornSettings};
use crate::rng::Rng;
use crate::tape::{SolveInfo, Tape, Var};
use crate::tensor::Tensor2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimilarityParams {
    pub wq: Tensor2,
    pub wk: Tensor2,
}

#[derive(Debug, Clone, Copy)]
pub struct SimilarityVars {
    pub wq: Var,
    pub wk: Var,
}

impl SimilarityParams {
    /// Identity plus uniform noise of half-width `0.1 / sqrt(h)`.
    pub fn new(h: usize, rng: &mut Rng) -> Self {
        let spread = 0.1 / (h as f64).sqrt();
        let mut init = || {
            let mut w = Tensor2::identity(h);
            w.data_mut()
                .iter_mut()
                .for_each(|v| *v += rng.uniform_range(-spread, spread));
            w
        };
        let wq = init();
        let wk = init();
        Self { wq, wk }
    }

    pub fn params(&self) -> Vec<&Tensor2> {
        vec![&self.wq, &self.wk]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor2> {
        vec![&mut self.wq, &mut self.wk]
    }

    pub fn bind(&self, tape: &mut Tape) -> SimilarityVars {
        SimilarityVars {
            wq: tape.param(self.wq.clone()),
            wk: tape.param(self.wk.clone()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostMode {
    /// `(d_max - d_i, d_min - d_i)`, as literally written. Its row
    /// difference is the same for every edge, so the plan is uniform.
    Linear,
    /// `((d_i - d_min)^2, (d_i - d_max)^2)`.
    #[default]
    Squared,
}

/// `S = (V Wq)(V Wk)^T / sqrt(h)`.
pub fn similarity(tape: &mut Tape, v: Var, vars: &SimilarityVars) -> Result<Var> {
    let h = tape.value(v).cols();
    let w = tape.value(vars.wq).shape();
    if w != (h, h) || tape.value(vars.wk).shape() != (h, h) {
        return Err(shape(
            "similarity",
            format!("nodes of width {h}, projections {w:?}"),
        ));
    }
    let q = tape.matmul(v, vars.wq)?;
    let k = tape.matmul(v, vars.wk)?;
    let kt = tape.transpose(k)?;
    let s = tape.matmul(q, kt)?;
    tape.scale(s, 1.0 / (h as f64).sqrt())
}

/// Per row, the sum of the `r` largest entries of `relu(S)`, as a `V x 1`
/// column.
pub fn node_density(tape: &mut Tape, s: Var, r: usize) -> Result<Var> {
    let pos = tape.relu(s)?;
    tape.row_top_sum(pos, r)
}

/// `S'(i,j) = relu(S(i,j)) * sigmoid((D_j - D_i) / tau)`, with the diagonal
/// optionally forced to zero.
pub fn edge_affinity(
    tape: &mut Tape,
    s: Var,
    density: Var,
    tau: f64,
    zero_diagonal: bool,
) -> Result<Var> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(invalid("edge_affinity", format!("tau = {tau}")));
    }
    let n = tape.value(s).rows();
    if tape.value(s).cols() != n || tape.value(density).len() != n {
        return Err(shape(
            "edge_affinity",
            format!(
                "S {:?}, density of length {}",
                tape.value(s).shape(),
                tape.value(density).len()
            ),
        ));
    }
    let diff = tape.pairwise_diff(density)?;
    let diff = tape.scale(diff, 1.0 / tau)?;
    let gate = tape.sigmoid(diff)?;
    let pos = tape.relu(s)?;
    let out = tape.mul(pos, gate)?;
    if zero_diagonal {
        let mask =
            tape.constant(Tensor2::filled(n, n, 1.0).zip_map(&Tensor2::identity(n), |a, b| a - b)?);
        tape.mul(out, mask)
    } else {
        Ok(out)
    }
}

/// Cost matrix `E x 2` for the flattened affinities `d` (`E x 1`).
pub fn build_cost(tape: &mut Tape, d: Var, mode: CostMode) -> Result<Var> {
    let e = tape.value(d).len();
    if e < 2 {
        return Err(invalid("build_cost", format!("{e} edges, need at least 2")));
    }
    let d = tape.reshape(d, e, 1)?;
    let max = tape.max_all(d)?;
    let min = tape.min_all(d)?;
    let (reject, select) = match mode {
        CostMode::Linear => {
            let neg = tape.scale(d, -1.0)?;
            (
                tape.add_scalar_var(neg, max)?,
                tape.add_scalar_var(neg, min)?,
            )
        }
        CostMode::Squared => {
            let nmin = tape.scale(min, -1.0)?;
            let nmax = tape.scale(max, -1.0)?;
            let lo = tape.add_scalar_var(d, nmin)?;
            let hi = tape.add_scalar_var(d, nmax)?;
            (tape.square(lo)?, tape.square(hi)?)
        }
    };
    tape.concat_cols(&[reject, select])
}

/// Rescales affinities to `[0, 1]` by their range, on the tape.
///
/// Both anchors of the squared cost move with the data, so without this the
/// cost spread grows with the square of the affinity range and the solver's
/// iteration count with it. A constant `d` is returned unchanged.
pub fn normalize_range(tape: &mut Tape, d: Var) -> Result<Var> {
    let max = tape.max_all(d)?;
    let min = tape.min_all(d)?;
    if tape.scalar(max) - tape.scalar(min) <= f64::EPSILON * tape.scalar(max).abs().max(1.0) {
        return Ok(d);
    }
    let nmin = tape.scale(min, -1.0)?;
    let shifted = tape.add_scalar_var(d, nmin)?;
    let range = tape.add_scalar_var(max, nmin)?;
    tape.div_scalar_var(shifted, range)
}

/// Marginals and edge budget of one selection problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsifyProblem {
    pub edges: usize,
    pub k: usize,
    /// Set when `V - Z` fell outside `[1, E - 1]` and `k` was clamped.
    pub clamped: bool,
}

impl SparsifyProblem {
    /// Budget `k = V - Z` for a forest with `Z` components over `V` nodes.
    pub fn for_nodes(nodes: usize, components: usize) -> Result<Self> {
        let edges = nodes * nodes;
        let want = nodes as i64 - components as i64;
        Self::with_k(edges, want)
    }

    pub fn with_k(edges: usize, k: i64) -> Result<Self> {
        if edges < 2 {
            return Err(invalid(
                "SparsifyProblem",
                format!("{edges} edges, need at least 2"),
            ));
        }
        let hi = edges as i64 - 1;
        let clamped_k = k.clamp(1, hi);
        Ok(Self {
            edges,
            k: clamped_k as usize,
            clamped: clamped_k != k,
        })
    }

    pub fn row_marginal(&self) -> Vec<f64> {
        vec![1.0; self.edges]
    }

    pub fn col_marginal(&self) -> Vec<f64> {
        vec![(self.edges - self.k) as f64, self.k as f64]
    }
}

/// Solves the selection problem on the tape. Returns the `E x 2` plan.
pub fn sinkhorn_solve(
    tape: &mut Tape,
    cost: Var,
    problem: &SparsifyProblem,
    settings: SinkhornSettings,
) -> Result<(Var, SolveInfo)> {
    if tape.value(cost).shape() != (problem.edges, 2) {
        return Err(shape(
            "sinkhorn_solve",
            format!(
                "cost {:?} for {} edges",
                tape.value(cost).shape(),
                problem.edges
            ),
        ));
    }
    tape.sinkhorn(
        cost,
        problem.row_marginal(),
        problem.col_marginal(),
        settings,
    )
}

/// Row-major `V x V` reshape of the select column.
pub fn refine(tape: &mut Tape, plan: Var, nodes: usize) -> Result<Var> {
    let e = tape.value(plan).rows();
    if e != nodes * nodes {
        return Err(shape("refine", format!("{e} edges for {nodes} nodes")));
    }
    let select = tape.column(plan, 1)?;
    tape.reshape(select, nodes, nodes)
}

/// Off-tape solution of one selection problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransportPlan {
    /// `E x 2`.
    pub gamma: Tensor2,
    /// Log of the select column; keeps an order where `gamma` saturates.
    pub log_select: Vec<f64>,
    pub iterations: usize,
    pub residual: f64,
    pub k: usize,
    pub clamped: bool,
}

impl TransportPlan {
    pub fn select(&self) -> Vec<f64> {
        (0..self.gamma.rows())
            .map(|i| self.gamma.get(i, 1))
            .collect()
    }

    /// Select column as a `V x V` matrix.
    pub fn refined(&self, nodes: usize) -> Result<Tensor2> {
        if self.gamma.rows() != nodes * nodes {
            return Err(shape(
                "refine",
                format!("{} edges for {nodes} nodes", self.gamma.rows()),
            ));
        }
        Tensor2::from_vec(nodes, nodes, self.select())
    }
}

/// Builds the cost for `d` and runs Sinkhorn on it.
pub fn solve_edges(
    d: &[f64],
    k: i64,
    mode: CostMode,
    settings: SinkhornSettings,
) -> Result<TransportPlan> {
    let problem = SparsifyProblem::with_k(d.len(), k)?;
    let mut tape = Tape::new();
    let dv = tape.constant(Tensor2::col_vector(d.to_vec()));
    let cost = build_cost(&mut tape, dv, mode)?;
    let run = sinkhorn(
        tape.value(cost),
        &problem.row_marginal(),
        &problem.col_marginal(),
        settings,
        None,
    )?;
    Ok(TransportPlan {
        log_select: (0..problem.edges).map(|i| run.log_plan.get(i, 1)).collect(),
        gamma: run.plan(),
        iterations: run.iterations,
        residual: run.residual,
        k: problem.k,
        clamped: problem.clamped,
    })
}

/// Iteration cap for comparisons against the hard limit. Near `theta = 1e-3`
/// the duals start far from their fixed point and move by roughly
/// `ln(E / k)` per iteration, so the adaptation default of 200 is not enough.
pub const ORACLE_MAX_ITER: usize = 20_000;

/// Hard selection: 1 for the `k` largest entries (ties to the lower index).
pub fn topk_oracle(d: &[f64], k: usize) -> Result<Vec<u8>> {
    if k == 0 || k >= d.len() {
        return Err(invalid(
            "topk_oracle",
            format!("k = {k} outside (0, {})", d.len()),
        ));
    }
    let mut order: Vec<usize> = (0..d.len()).collect();
    order.sort_by(|&a, &b| d[b].total_cmp(&d[a]).then(a.cmp(&b)));
    let mut out = vec![0u8; d.len()];
    order[..k].iter().for_each(|&i| out[i] = 1);
    Ok(out)
}
