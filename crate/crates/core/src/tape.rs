//! Reverse-mode differentiation over [`Tensor2`] values.
//!
//! A [`Tape`] records every operation as a node whose inputs precede it, so
//! the node order is already a topological order. [`Tape::stop_grad`] is a
//! barrier: its value flows forward, its gradient is always zero.
//!
//! A tape runs in one of two modes. While recording, the value leaving each
//! barrier and the iteration count of each Sinkhorn solve are logged as
//! [`Frozen`] entries. A replaying tape substitutes those entries verbatim,
//! which turns the objective into the surrogate in which barrier outputs are
//! constants and solver unrolls have a fixed length. The finite-difference
//! oracle differentiates exactly that surrogate.

use crate::error::{invalid, shape, Error, Result};
use crate::ot::{sinkhorn, sinkhorn_backward, SinkhornRun, SinkhornSettings};
use crate::tensor::{Tensor2, COSINE_EPS};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A value pinned at the base point of a finite-difference check.
#[derive(Debug, Clone, PartialEq)]
pub enum Frozen {
    Barrier(Tensor2),
    Iterations(usize),
}

#[derive(Debug)]
enum Mode {
    Record,
    Replay { cursor: usize },
}

#[derive(Debug)]
enum Op {
    Leaf,
    Const,
    StopGrad,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    AddCol(usize, usize),
    AddScalarVar(usize, usize),
    DivScalarVar(usize, usize),
    Scale(usize, f64),
    AddConst(usize),
    MatMul(usize, usize),
    Transpose(usize),
    Reshape(usize),
    Relu(usize),
    Sigmoid(usize),
    Log(usize),
    Square(usize),
    ClampMin(usize, f64),
    SoftmaxRows(usize),
    Sum(usize),
    SumRows(usize),
    SumCols(usize),
    GatherRows(usize, Vec<usize>),
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    Column(usize, usize),
    Extremum(usize, usize),
    PairwiseDiff(usize),
    RowTopSum(usize, Vec<Vec<usize>>),
    CosineRows(usize, usize),
    Sinkhorn {
        cost: usize,
        r: Vec<f64>,
        c: Vec<f64>,
        run: Box<SinkhornRun>,
    },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor2,
    requires_grad: bool,
}

/// Diagnostics of one taped Sinkhorn solve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveInfo {
    pub iterations: usize,
    pub residual: f64,
}

#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    mode: Mode,
    frozen: Vec<Frozen>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// A recording tape.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            mode: Mode::Record,
            frozen: Vec::new(),
        }
    }

    /// A tape that substitutes `frozen` values in recording order.
    pub fn replaying(frozen: Vec<Frozen>) -> Self {
        Self {
            nodes: Vec::new(),
            mode: Mode::Replay { cursor: 0 },
            frozen,
        }
    }

    /// The frozen values recorded (or being replayed) by this tape.
    pub fn frozen(&self) -> &[Frozen] {
        &self.frozen
    }

    pub fn into_frozen(self) -> Vec<Frozen> {
        self.frozen
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor2 {
        &self.nodes[v.0].value
    }

    /// Value of a 1x1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    /// A learnable leaf.
    pub fn param(&mut self, value: Tensor2) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor2) -> Var {
        self.nodes.push(Node {
            op: Op::Const,
            value,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(
        &mut self,
        name: &'static str,
        op: Op,
        value: Tensor2,
        inputs: &[usize],
    ) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn next_frozen(&mut self, op: &'static str) -> Result<Option<Frozen>> {
        match &mut self.mode {
            Mode::Record => Ok(None),
            Mode::Replay { cursor } => {
                let item = self
                    .frozen
                    .get(*cursor)
                    .cloned()
                    .ok_or(Error::ReplayMismatch { op })?;
                *cursor += 1;
                Ok(Some(item))
            }
        }
    }

    /// Forward identity, backward zero.
    pub fn stop_grad(&mut self, a: Var) -> Result<Var> {
        let value = match self.next_frozen("stop_grad")? {
            None => {
                let v = self.value(a).clone();
                self.frozen.push(Frozen::Barrier(v.clone()));
                v
            }
            Some(Frozen::Barrier(v)) if v.shape() == self.value(a).shape() => v,
            Some(_) => return Err(Error::ReplayMismatch { op: "stop_grad" }),
        };
        self.nodes.push(Node {
            op: Op::StopGrad,
            value,
            requires_grad: false,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        self.push("add", Op::Add(a.0, b.0), v, &[a.0, b.0])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        self.push("sub", Op::Sub(a.0, b.0), v, &[a.0, b.0])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        self.push("mul", Op::Mul(a.0, b.0), v, &[a.0, b.0])
    }

    /// Adds a `1 x cols` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let v = self.value(a).add_row(self.value(row))?;
        self.push("add_row", Op::AddRow(a.0, row.0), v, &[a.0, row.0])
    }

    /// Adds a `rows x 1` column to every column of `a`.
    pub fn add_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (m, n) = self.value(a).shape();
        if self.value(col).shape() != (m, 1) {
            return Err(shape(
                "add_col",
                format!("{m}x{n} plus column {:?}", self.value(col).shape()),
            ));
        }
        let mut v = self.value(a).clone();
        let c = self.value(col).data().to_vec();
        for i in 0..m {
            v.row_mut(i).iter_mut().for_each(|x| *x += c[i]);
        }
        self.push("add_col", Op::AddCol(a.0, col.0), v, &[a.0, col.0])
    }

    /// Adds the single entry of the 1x1 node `s` to every entry of `a`.
    pub fn add_scalar_var(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).shape() != (1, 1) {
            return Err(shape("add_scalar_var", "scalar operand must be 1x1"));
        }
        let k = self.scalar(s);
        let v = self.value(a).map(|x| x + k);
        self.push("add_scalar_var", Op::AddScalarVar(a.0, s.0), v, &[a.0, s.0])
    }

    /// Divides every entry of `a` by the single entry of the 1x1 node `s`.
    pub fn div_scalar_var(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).shape() != (1, 1) {
            return Err(shape("div_scalar_var", "scalar operand must be 1x1"));
        }
        let k = self.scalar(s);
        if k == 0.0 || !k.is_finite() {
            return Err(invalid("div_scalar_var", format!("divisor {k}")));
        }
        let v = self.value(a).map(|x| x / k);
        self.push("div_scalar_var", Op::DivScalarVar(a.0, s.0), v, &[a.0, s.0])
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x * k);
        self.push("scale", Op::Scale(a.0, k), v, &[a.0])
    }

    pub fn add_const(&mut self, a: Var, k: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x + k);
        self.push("add_const", Op::AddConst(a.0), v, &[a.0])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        self.push("matmul", Op::MatMul(a.0, b.0), v, &[a.0, b.0])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).transpose();
        self.push("transpose", Op::Transpose(a.0), v, &[a.0])
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let v = self.value(a).reshape(rows, cols)?;
        self.push("reshape", Op::Reshape(a.0), v, &[a.0])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push("relu", Op::Relu(a.0), v, &[a.0])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(sigmoid);
        self.push("sigmoid", Op::Sigmoid(a.0), v, &[a.0])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(f64::ln);
        self.push("log", Op::Log(a.0), v, &[a.0])
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x * x);
        self.push("square", Op::Square(a.0), v, &[a.0])
    }

    /// `max(a, floor)`; entries at or below the floor get no gradient.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x.max(floor));
        self.push("clamp_min", Op::ClampMin(a.0, floor), v, &[a.0])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let src = self.value(a);
        if src.cols() == 0 {
            return Err(Error::Empty { op: "softmax_rows" });
        }
        let mut v = src.clone();
        for i in 0..v.rows() {
            let row = v.row_mut(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                total += *x;
            }
            row.iter_mut().for_each(|x| *x /= total);
        }
        self.push("softmax_rows", Op::SoftmaxRows(a.0), v, &[a.0])
    }

    /// Sum of all entries, as a 1x1 node.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let v = Tensor2::scalar(self.value(a).sum());
        self.push("sum", Op::Sum(a.0), v, &[a.0])
    }

    /// Row sums as a `rows x 1` column.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let src = self.value(a);
        let v = Tensor2::col_vector((0..src.rows()).map(|i| src.row(i).iter().sum()).collect());
        self.push("sum_rows", Op::SumRows(a.0), v, &[a.0])
    }

    /// Column sums as a `1 x cols` row.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        let src = self.value(a);
        let mut out = vec![0.0; src.cols()];
        for i in 0..src.rows() {
            for (o, x) in out.iter_mut().zip(src.row(i)) {
                *o += x;
            }
        }
        self.push(
            "sum_cols",
            Op::SumCols(a.0),
            Tensor2::row_vector(out),
            &[a.0],
        )
    }

    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let v = self.value(a).gather_rows(indices)?;
        self.push(
            "gather_rows",
            Op::GatherRows(a.0, indices.to_vec()),
            v,
            &[a.0],
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Empty { op: "concat_rows" });
        }
        let values: Vec<&Tensor2> = parts.iter().map(|p| self.value(*p)).collect();
        let v = Tensor2::concat_rows(&values)?;
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        self.push("concat_rows", Op::ConcatRows(ids.clone()), v, &ids)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Empty { op: "concat_cols" });
        }
        let transposed: Vec<Tensor2> = parts.iter().map(|p| self.value(*p).transpose()).collect();
        let refs: Vec<&Tensor2> = transposed.iter().collect();
        let v = Tensor2::concat_rows(&refs)
            .map_err(|_| shape("concat_cols", "row counts differ"))?
            .transpose();
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        self.push("concat_cols", Op::ConcatCols(ids.clone()), v, &ids)
    }

    /// Column `j` as a `rows x 1` node.
    pub fn column(&mut self, a: Var, j: usize) -> Result<Var> {
        let src = self.value(a);
        if j >= src.cols() {
            return Err(shape("column", format!("column {j} of {}", src.cols())));
        }
        let v = Tensor2::col_vector((0..src.rows()).map(|i| src.get(i, j)).collect());
        self.push("column", Op::Column(a.0, j), v, &[a.0])
    }

    /// Largest entry (first on ties), as a 1x1 node.
    pub fn max_all(&mut self, a: Var) -> Result<Var> {
        self.extremum(a, |cand, best| cand > best, "max_all")
    }

    /// Smallest entry (first on ties), as a 1x1 node.
    pub fn min_all(&mut self, a: Var) -> Result<Var> {
        self.extremum(a, |cand, best| cand < best, "min_all")
    }

    fn extremum(
        &mut self,
        a: Var,
        better: impl Fn(f64, f64) -> bool,
        name: &'static str,
    ) -> Result<Var> {
        let data = self.value(a).data();
        if data.is_empty() {
            return Err(Error::Empty { op: name });
        }
        let mut arg = 0;
        for (i, &x) in data.iter().enumerate() {
            if better(x, data[arg]) {
                arg = i;
            }
        }
        let v = Tensor2::scalar(data[arg]);
        self.push(name, Op::Extremum(a.0, arg), v, &[a.0])
    }

    /// `out[i][j] = v[j] - v[i]` for a vector node `v` of any orientation.
    pub fn pairwise_diff(&mut self, v: Var) -> Result<Var> {
        let x = self.value(v).data().to_vec();
        let n = x.len();
        let mut out = Tensor2::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                out.set(i, j, x[j] - x[i]);
            }
        }
        self.push("pairwise_diff", Op::PairwiseDiff(v.0), out, &[v.0])
    }

    /// Per row, the sum of the `r` largest entries (ties to the lower column).
    pub fn row_top_sum(&mut self, a: Var, r: usize) -> Result<Var> {
        let src = self.value(a);
        if r == 0 || r > src.cols() {
            return Err(crate::error::invalid(
                "row_top_sum",
                format!("r = {r} outside [1, {}]", src.cols()),
            ));
        }
        let mut picks = Vec::with_capacity(src.rows());
        let mut out = Vec::with_capacity(src.rows());
        for i in 0..src.rows() {
            let row = src.row(i);
            let chosen = if r == row.len() {
                (0..row.len()).collect::<Vec<_>>()
            } else {
                let mut order: Vec<usize> = (0..row.len()).collect();
                order.sort_by(|&p, &q| row[q].total_cmp(&row[p]).then(p.cmp(&q)));
                order.truncate(r);
                order
            };
            out.push(chosen.iter().map(|&j| row[j]).sum());
            picks.push(chosen);
        }
        self.push(
            "row_top_sum",
            Op::RowTopSum(a.0, picks),
            Tensor2::col_vector(out),
            &[a.0],
        )
    }

    /// Cosine similarity between every row of `a` and every row of `b`.
    /// Pairs involving a row of norm below [`COSINE_EPS`] are 0 with zero
    /// gradient.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.cols() != y.cols() {
            return Err(shape(
                "cosine_rows",
                format!("widths {} and {}", x.cols(), y.cols()),
            ));
        }
        let nx = row_norms(x);
        let ny = row_norms(y);
        let mut out = Tensor2::zeros(x.rows(), y.rows());
        for i in 0..x.rows() {
            for j in 0..y.rows() {
                if nx[i] >= COSINE_EPS && ny[j] >= COSINE_EPS {
                    let d: f64 = x.row(i).iter().zip(y.row(j)).map(|(p, q)| p * q).sum();
                    out.set(i, j, d / (nx[i] * ny[j]));
                }
            }
        }
        self.push("cosine_rows", Op::CosineRows(a.0, b.0), out, &[a.0, b.0])
    }

    /// Entropic OT plan for the cost node, with row marginals `r` and
    /// column marginals `c`. The unroll is differentiated exactly as run.
    pub fn sinkhorn(
        &mut self,
        cost: Var,
        r: Vec<f64>,
        c: Vec<f64>,
        settings: SinkhornSettings,
    ) -> Result<(Var, SolveInfo)> {
        let fixed = match self.next_frozen("sinkhorn")? {
            None => None,
            Some(Frozen::Iterations(n)) => Some(n),
            Some(_) => return Err(Error::ReplayMismatch { op: "sinkhorn" }),
        };
        let run = sinkhorn(self.value(cost), &r, &c, settings, fixed)?;
        if fixed.is_none() {
            self.frozen.push(Frozen::Iterations(run.iterations));
        }
        let info = SolveInfo {
            iterations: run.iterations,
            residual: run.residual,
        };
        let plan = run.plan();
        let var = self.push(
            "sinkhorn",
            Op::Sinkhorn {
                cost: cost.0,
                r,
                c,
                run: Box::new(run),
            },
            plan,
            &[cost.0],
        )?;
        Ok((var, info))
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let (rows, cols) = self.value(loss).shape();
        if (rows, cols) != (1, 1) {
            return Err(Error::NonScalarLoss { rows, cols });
        }
        let mut grads: Vec<Option<Tensor2>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor2::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            for (input, contribution) in self.local_grads(idx, &g) {
                if !self.nodes[input].requires_grad {
                    continue;
                }
                match &mut grads[input] {
                    Some(acc) => acc
                        .data_mut()
                        .iter_mut()
                        .zip(contribution.data())
                        .for_each(|(a, c)| *a += c),
                    slot @ None => *slot = Some(contribution),
                }
            }
            grads[idx] = Some(g);
        }

        for (node, g) in self.nodes.iter().zip(&grads) {
            if let (Op::Leaf, Some(g)) = (&node.op, g) {
                if !g.all_finite() {
                    return Err(Error::NonFinite { op: "backward" });
                }
            }
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn local_grads(&self, idx: usize, g: &Tensor2) -> Vec<(usize, Tensor2)> {
        let node = &self.nodes[idx];
        let val = |i: usize| &self.nodes[i].value;
        match &node.op {
            Op::Leaf | Op::Const | Op::StopGrad => vec![],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|x| -x))],
            Op::Mul(a, b) => vec![
                (*a, g.zip_map(val(*b), |x, y| x * y).unwrap()),
                (*b, g.zip_map(val(*a), |x, y| x * y).unwrap()),
            ],
            Op::AddRow(a, row) => {
                let mut rg = vec![0.0; g.cols()];
                for i in 0..g.rows() {
                    rg.iter_mut().zip(g.row(i)).for_each(|(o, x)| *o += x);
                }
                vec![(*a, g.clone()), (*row, Tensor2::row_vector(rg))]
            }
            Op::AddCol(a, col) => {
                let cg = (0..g.rows()).map(|i| g.row(i).iter().sum()).collect();
                vec![(*a, g.clone()), (*col, Tensor2::col_vector(cg))]
            }
            Op::AddScalarVar(a, s) => vec![(*a, g.clone()), (*s, Tensor2::scalar(g.sum()))],
            Op::DivScalarVar(a, s) => {
                let k = val(*s).get(0, 0);
                let dot: f64 = g
                    .data()
                    .iter()
                    .zip(val(*a).data())
                    .map(|(x, v)| x * v)
                    .sum();
                vec![
                    (*a, g.map(|x| x / k)),
                    (*s, Tensor2::scalar(-dot / (k * k))),
                ]
            }
            Op::Scale(a, k) => vec![(*a, g.map(|x| x * k))],
            Op::AddConst(a) => vec![(*a, g.clone())],
            Op::MatMul(a, b) => {
                let ga = g.matmul_nt(val(*b)).unwrap();
                let gb = val(*a).matmul_tn(g).unwrap();
                vec![(*a, ga), (*b, gb)]
            }
            Op::Transpose(a) => vec![(*a, g.transpose())],
            Op::Reshape(a) => {
                let (r, c) = val(*a).shape();
                vec![(*a, g.reshape(r, c).unwrap())]
            }
            Op::Relu(a) => vec![(
                *a,
                g.zip_map(val(*a), |x, v| if v > 0.0 { x } else { 0.0 })
                    .unwrap(),
            )],
            Op::Sigmoid(a) => vec![(
                *a,
                g.zip_map(&node.value, |x, y| x * y * (1.0 - y)).unwrap(),
            )],
            Op::Log(a) => vec![(*a, g.zip_map(val(*a), |x, v| x / v).unwrap())],
            Op::Square(a) => vec![(*a, g.zip_map(val(*a), |x, v| 2.0 * x * v).unwrap())],
            Op::ClampMin(a, floor) => {
                let f = *floor;
                vec![(
                    *a,
                    g.zip_map(val(*a), |x, v| if v > f { x } else { 0.0 })
                        .unwrap(),
                )]
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut out = Tensor2::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let dot: f64 = y.row(i).iter().zip(g.row(i)).map(|(p, q)| p * q).sum();
                    for j in 0..y.cols() {
                        out.set(i, j, y.get(i, j) * (g.get(i, j) - dot));
                    }
                }
                vec![(*a, out)]
            }
            Op::Sum(a) => {
                let (r, c) = val(*a).shape();
                vec![(*a, Tensor2::filled(r, c, g.data()[0]))]
            }
            Op::SumRows(a) => {
                let (r, c) = val(*a).shape();
                let mut out = Tensor2::zeros(r, c);
                for i in 0..r {
                    out.row_mut(i).iter_mut().for_each(|x| *x = g.data()[i]);
                }
                vec![(*a, out)]
            }
            Op::SumCols(a) => {
                let (r, c) = val(*a).shape();
                let mut out = Tensor2::zeros(r, c);
                for i in 0..r {
                    out.row_mut(i).copy_from_slice(g.data());
                }
                vec![(*a, out)]
            }
            Op::GatherRows(a, indices) => {
                let (r, c) = val(*a).shape();
                let mut out = Tensor2::zeros(r, c);
                for (k, &i) in indices.iter().enumerate() {
                    out.row_mut(i)
                        .iter_mut()
                        .zip(g.row(k))
                        .for_each(|(o, x)| *o += x);
                }
                vec![(*a, out)]
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                parts
                    .iter()
                    .map(|&p| {
                        let (r, c) = val(p).shape();
                        let slice = g.data()[start * c..(start + r) * c].to_vec();
                        start += r;
                        (p, Tensor2::from_vec(r, c, slice).unwrap())
                    })
                    .collect()
            }
            Op::ConcatCols(parts) => {
                let gt = g.transpose();
                let mut start = 0;
                parts
                    .iter()
                    .map(|&p| {
                        let (r, c) = val(p).shape();
                        let slice = gt.data()[start * r..(start + c) * r].to_vec();
                        start += c;
                        (p, Tensor2::from_vec(c, r, slice).unwrap().transpose())
                    })
                    .collect()
            }
            Op::Column(a, j) => {
                let (r, c) = val(*a).shape();
                let mut out = Tensor2::zeros(r, c);
                for i in 0..r {
                    out.set(i, *j, g.data()[i]);
                }
                vec![(*a, out)]
            }
            Op::Extremum(a, arg) => {
                let (r, c) = val(*a).shape();
                let mut out = Tensor2::zeros(r, c);
                out.data_mut()[*arg] = g.data()[0];
                vec![(*a, out)]
            }
            Op::PairwiseDiff(v) => {
                let (r, c) = val(*v).shape();
                let n = r * c;
                let mut out = vec![0.0; n];
                for i in 0..n {
                    for j in 0..n {
                        let x = g.get(i, j);
                        out[j] += x;
                        out[i] -= x;
                    }
                }
                vec![(*v, Tensor2::from_vec(r, c, out).unwrap())]
            }
            Op::RowTopSum(a, picks) => {
                let (r, c) = val(*a).shape();
                let mut out = Tensor2::zeros(r, c);
                for (i, chosen) in picks.iter().enumerate() {
                    for &j in chosen {
                        out.set(i, j, g.data()[i]);
                    }
                }
                vec![(*a, out)]
            }
            Op::CosineRows(a, b) => {
                let (x, y) = (val(*a), val(*b));
                let (nx, ny) = (row_norms(x), row_norms(y));
                let mut gx = Tensor2::zeros(x.rows(), x.cols());
                let mut gy = Tensor2::zeros(y.rows(), y.cols());
                for i in 0..x.rows() {
                    for j in 0..y.rows() {
                        if nx[i] < COSINE_EPS || ny[j] < COSINE_EPS {
                            continue;
                        }
                        let w = g.get(i, j);
                        if w == 0.0 {
                            continue;
                        }
                        let cij = node.value.get(i, j);
                        let inv = 1.0 / (nx[i] * ny[j]);
                        for k in 0..x.cols() {
                            let (xi, yj) = (x.get(i, k), y.get(j, k));
                            gx.data_mut()[i * x.cols() + k] +=
                                w * (yj * inv - cij * xi / (nx[i] * nx[i]));
                            gy.data_mut()[j * y.cols() + k] +=
                                w * (xi * inv - cij * yj / (ny[j] * ny[j]));
                        }
                    }
                }
                vec![(*a, gx), (*b, gy)]
            }
            Op::Sinkhorn { cost, r, c, run } => {
                vec![(*cost, sinkhorn_backward(run, val(*cost), r, c, g))]
            }
        }
    }
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor2>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient of `v`; exact zeros when the loss does not reach it.
    pub fn get(&self, v: Var) -> Tensor2 {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Tensor2::zeros(r, c)
            }
        }
    }

    pub fn reached(&self, v: Var) -> bool {
        self.grads[v.0].is_some()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn row_norms(t: &Tensor2) -> Vec<f64> {
    (0..t.rows())
        .map(|i| t.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect()
}
