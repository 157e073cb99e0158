//! Log-domain Sinkhorn scaling for entropic optimal transport.
//!
//! The plan is parameterized as `log P_ij = -C_ij/theta + f_i + g_j` with
//! `g = 0` at the start, i.e. `P^(0) = exp(-C/theta)`. Each iteration first
//! rescales rows to `r`, then columns to `c`. The dual iterates of every
//! iteration are kept so the reverse pass can walk the exact unroll.

use crate::error::{invalid, shape, Error, Result};
use crate::tensor::{ensure_positive, logsumexp, Tensor2};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SinkhornSettings {
    pub theta: f64,
    /// Stop once the L1 marginal residual drops to this value.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SinkhornSettings {
    fn default() -> Self {
        Self {
            theta: 0.05,
            tol: 1e-6,
            max_iter: 200,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SinkhornRun {
    pub log_plan: Tensor2,
    pub iterations: usize,
    /// `sum_i |row_i - r_i| + sum_j |col_j - c_j|` after the last iteration.
    pub residual: f64,
    f_hist: Vec<Vec<f64>>,
    g_hist: Vec<Vec<f64>>,
    theta: f64,
}

impl SinkhornRun {
    pub fn plan(&self) -> Tensor2 {
        self.log_plan.map(f64::exp)
    }
}

/// Runs Sinkhorn on `cost` with marginals `r` (rows) and `c` (columns).
///
/// With `fixed_iters = Some(n)` exactly `n` iterations run and the tolerance
/// is ignored; this is how a recorded unroll is replayed.
pub fn sinkhorn(
    cost: &Tensor2,
    r: &[f64],
    c: &[f64],
    settings: SinkhornSettings,
    fixed_iters: Option<usize>,
) -> Result<SinkhornRun> {
    const OP: &str = "sinkhorn";
    let (m, n) = cost.shape();
    if r.len() != m || c.len() != n {
        return Err(shape(
            OP,
            format!(
                "cost {m}x{n} with marginals of length {} and {}",
                r.len(),
                c.len()
            ),
        ));
    }
    if m == 0 || n == 0 {
        return Err(Error::Empty { op: OP });
    }
    ensure_positive(OP, "theta", settings.theta)?;
    if r.iter().chain(c).any(|v| !(*v > 0.0 && v.is_finite())) {
        return Err(invalid(OP, "marginals must be strictly positive"));
    }
    let limit = fixed_iters.unwrap_or(settings.max_iter);
    if limit == 0 {
        return Err(invalid(OP, "at least one iteration is required"));
    }
    if !cost.all_finite() {
        return Err(Error::NonFinite { op: OP });
    }

    let kernel = cost.map(|v| -v / settings.theta);
    let k = kernel.data();
    let log_r: Vec<f64> = r.iter().map(|v| v.ln()).collect();
    let log_c: Vec<f64> = c.iter().map(|v| v.ln()).collect();

    let mut g = vec![0.0; n];
    let mut f = vec![0.0; m];
    let mut lse_row = row_lse(k, m, n, &g);
    let mut lse_col = vec![0.0; n];
    let mut f_hist = Vec::new();
    let mut g_hist = Vec::new();
    let mut residual = f64::INFINITY;
    let mut iterations = 0;

    while iterations < limit {
        for i in 0..m {
            f[i] = log_r[i] - lse_row[i];
        }
        for (j, out) in lse_col.iter_mut().enumerate() {
            *out = logsumexp((0..m).map(|i| k[i * n + j] + f[i]));
        }
        for j in 0..n {
            g[j] = log_c[j] - lse_col[j];
        }
        if f.iter().chain(&g).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: OP });
        }
        f_hist.push(f.clone());
        g_hist.push(g.clone());
        iterations += 1;

        lse_row = row_lse(k, m, n, &g);
        let row_err: f64 = (0..m)
            .map(|i| ((f[i] + lse_row[i]).exp() - r[i]).abs())
            .sum();
        let col_err: f64 = (0..n)
            .map(|j| ((g[j] + lse_col[j]).exp() - c[j]).abs())
            .sum();
        residual = row_err + col_err;
        if !residual.is_finite() {
            return Err(Error::NonFinite { op: OP });
        }
        if fixed_iters.is_none() && residual <= settings.tol {
            break;
        }
    }

    let mut log_plan = kernel;
    for i in 0..m {
        for j in 0..n {
            log_plan.data_mut()[i * n + j] += f[i] + g[j];
        }
    }
    Ok(SinkhornRun {
        log_plan,
        iterations,
        residual,
        f_hist,
        g_hist,
        theta: settings.theta,
    })
}

fn row_lse(k: &[f64], m: usize, n: usize, g: &[f64]) -> Vec<f64> {
    (0..m)
        .map(|i| logsumexp(k[i * n..(i + 1) * n].iter().zip(g).map(|(a, b)| a + b)))
        .collect()
}

/// Reverse pass through the executed unroll: maps the gradient of the
/// output plan to the gradient of the cost matrix.
pub fn sinkhorn_backward(
    run: &SinkhornRun,
    cost: &Tensor2,
    r: &[f64],
    c: &[f64],
    plan_grad: &Tensor2,
) -> Tensor2 {
    let (m, n) = cost.shape();
    let theta = run.theta;
    let k: Vec<f64> = cost.data().iter().map(|v| -v / theta).collect();
    let plan = run.plan();

    // Output: P = exp(K + f^T + g^T).
    let mut k_bar = vec![0.0; m * n];
    let mut f_bar = vec![0.0; m];
    let mut g_bar = vec![0.0; n];
    for i in 0..m {
        for j in 0..n {
            let a = plan.data()[i * n + j] * plan_grad.data()[i * n + j];
            k_bar[i * n + j] += a;
            f_bar[i] += a;
            g_bar[j] += a;
        }
    }

    let zeros = vec![0.0; n];
    for t in (0..run.iterations).rev() {
        let f_t = &run.f_hist[t];
        let g_t = &run.g_hist[t];
        let g_prev = if t == 0 { &zeros } else { &run.g_hist[t - 1] };

        // g^t = log c - LSE_i(K + f^t): softmax over i, weights sum to c_j.
        for i in 0..m {
            let mut acc = 0.0;
            for j in 0..n {
                let idx = i * n + j;
                let pi = (k[idx] + f_t[i] + g_t[j]).exp() / c[j];
                let w = g_bar[j] * pi;
                k_bar[idx] -= w;
                acc += w;
            }
            f_bar[i] -= acc;
        }

        // f^t = log r - LSE_j(K + g^{t-1}).
        let mut g_prev_bar = vec![0.0; n];
        for i in 0..m {
            for j in 0..n {
                let idx = i * n + j;
                let pi = (k[idx] + g_prev[j] + f_t[i]).exp() / r[i];
                let w = f_bar[i] * pi;
                k_bar[idx] -= w;
                g_prev_bar[j] -= w;
            }
        }
        g_bar = g_prev_bar;
        f_bar.iter_mut().for_each(|v| *v = 0.0);
    }

    let data = k_bar.into_iter().map(|v| -v / theta).collect();
    Tensor2::from_vec(m, n, data).expect("shape preserved")
}
