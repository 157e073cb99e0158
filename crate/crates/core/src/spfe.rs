//! Prompt-based feature enhancement: attention pooling of the node set into
//! a query, retrieval from a commonality pool (reverse attention) and a
//! heterogeneity pool (softmax attention), and additive enhancement.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Error, Result};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    Commonality,
    Heterogeneity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptPool {
    pub kind: PromptKind,
    /// `M x h`.
    pub prompts: Tensor2,
}

impl PromptPool {
    /// Entries uniform in (-0.5, 0.5).
    pub fn new(kind: PromptKind, size: usize, dim: usize, rng: &mut Rng) -> Result<Self> {
        if size == 0 || dim == 0 {
            return Err(invalid(
                "PromptPool::new",
                format!("{size} prompts of width {dim}"),
            ));
        }
        let data = (0..size * dim)
            .map(|_| rng.uniform_range(-0.5, 0.5))
            .collect();
        Ok(Self {
            kind,
            prompts: Tensor2::from_vec(size, dim, data)?,
        })
    }

    pub fn len(&self) -> usize {
        self.prompts.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.rows() == 0
    }

    /// Rescales every non-zero row to unit norm.
    pub fn renormalize(&mut self) {
        for r in 0..self.prompts.rows() {
            let row = self.prompts.row_mut(r);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                row.iter_mut().for_each(|v| *v /= norm);
            }
        }
    }
}

/// `q = V^T softmax(V c_p)`, returned as a `1 x h` row. `c_p` is `1 x h`.
pub fn attention_pool(tape: &mut Tape, v: Var, context: Var) -> Result<Var> {
    let (n, h) = tape.value(v).shape();
    if n == 0 {
        return Err(Error::Empty {
            op: "attention_pool",
        });
    }
    if tape.value(context).shape() != (1, h) {
        return Err(shape(
            "attention_pool",
            format!("context {:?} for width {h}", tape.value(context).shape()),
        ));
    }
    let ct = tape.transpose(context)?;
    let scores = tape.matmul(v, ct)?;
    let scores = tape.transpose(scores)?;
    let weights = tape.softmax_rows(scores)?;
    tape.matmul(weights, v)
}

fn check_pool(op: &'static str, tape: &Tape, query: Var, pool: Var) -> Result<()> {
    let (q, p) = (tape.value(query).shape(), tape.value(pool).shape());
    if q.0 != 1 || q.1 != p.1 || p.0 == 0 {
        return Err(shape(op, format!("query {q:?}, pool {p:?}")));
    }
    Ok(())
}

/// `alpha_j = relu(-cos(q, P_j))`, left unnormalized, and `p = alpha P`.
/// Returns `(alpha 1 x M, p 1 x h)`.
pub fn retrieve_commonality(tape: &mut Tape, query: Var, pool: Var) -> Result<(Var, Var)> {
    check_pool("retrieve_commonality", tape, query, pool)?;
    let cos = tape.cosine_rows(query, pool)?;
    let neg = tape.scale(cos, -1.0)?;
    let alpha = tape.relu(neg)?;
    let prompt = tape.matmul(alpha, pool)?;
    Ok((alpha, prompt))
}

/// `alpha = softmax_j cos(q, P_j)` and `p = alpha P`.
pub fn retrieve_heterogeneity(tape: &mut Tape, query: Var, pool: Var) -> Result<(Var, Var)> {
    check_pool("retrieve_heterogeneity", tape, query, pool)?;
    let cos = tape.cosine_rows(query, pool)?;
    let alpha = tape.softmax_rows(cos)?;
    let prompt = tape.matmul(alpha, pool)?;
    Ok((alpha, prompt))
}

/// Adds both prompts to every node row.
pub fn enhance(tape: &mut Tape, v: Var, common: Var, hetero: Var) -> Result<Var> {
    let v = tape.add_row(v, common)?;
    tape.add_row(v, hetero)
}

/// Values of one retrieval, off the tape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub query: Vec<f64>,
    pub alpha_co: Vec<f64>,
    pub alpha_he: Vec<f64>,
    pub p_co: Vec<f64>,
    pub p_he: Vec<f64>,
}

/// Pools `v`, retrieves from both pools and returns the enhanced nodes.
pub fn enhance_nodes(
    v: &Tensor2,
    context: &Tensor2,
    common: &PromptPool,
    hetero: &PromptPool,
) -> Result<(Tensor2, RetrievalResult)> {
    let mut tape = Tape::new();
    let v = tape.constant(v.clone());
    let cp = tape.constant(context.clone());
    let co = tape.constant(common.prompts.clone());
    let he = tape.constant(hetero.prompts.clone());
    let q = attention_pool(&mut tape, v, cp)?;
    let (a_co, p_co) = retrieve_commonality(&mut tape, q, co)?;
    let (a_he, p_he) = retrieve_heterogeneity(&mut tape, q, he)?;
    let out = enhance(&mut tape, v, p_co, p_he)?;
    let data = |x: Var| tape.value(x).data().to_vec();
    let result = RetrievalResult {
        query: data(q),
        alpha_co: data(a_co),
        alpha_he: data(a_he),
        p_co: data(p_co),
        p_he: data(p_he),
    };
    Ok((tape.value(out).clone(), result))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Purpose;

    fn t(rows: &[&[f64]]) -> Tensor2 {
        Tensor2::from_rows(rows).unwrap()
    }

    fn pool(tape: &mut Tape, v: &Tensor2, c: &Tensor2) -> Vec<f64> {
        let v = tape.constant(v.clone());
        let c = tape.constant(c.clone());
        let q = attention_pool(tape, v, c).unwrap();
        tape.value(q).data().to_vec()
    }

    fn retrieve(common: bool, q: &[f64], prompts: &Tensor2) -> (Vec<f64>, Vec<f64>) {
        let mut tape = Tape::new();
        let q = tape.constant(Tensor2::row_vector(q.to_vec()));
        let p = tape.constant(prompts.clone());
        let (a, out) = if common {
            retrieve_commonality(&mut tape, q, p).unwrap()
        } else {
            retrieve_heterogeneity(&mut tape, q, p).unwrap()
        };
        (
            tape.value(a).data().to_vec(),
            tape.value(out).data().to_vec(),
        )
    }

    fn close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn single_node_pools_to_itself() {
        let v = t(&[&[0.3, -1.2, 4.0]]);
        close(
            &pool(&mut Tape::new(), &v, &t(&[&[5.0, 1.0, -2.0]])),
            v.row(0),
            1e-15,
        );
    }

    #[test]
    fn zero_context_gives_column_mean() {
        let v = t(&[&[1.0, 2.0], &[3.0, -2.0], &[5.0, 3.0]]);
        close(
            &pool(&mut Tape::new(), &v, &Tensor2::zeros(1, 2)),
            &[3.0, 1.0],
            1e-12,
        );
    }

    #[test]
    fn pooling_hand_value() {
        let q = pool(&mut Tape::new(), &Tensor2::identity(2), &t(&[&[1.0, 0.0]]));
        let e = std::f64::consts::E;
        close(&q, &[e / (e + 1.0), 1.0 / (e + 1.0)], 1e-12);
        close(&q, &[0.73106, 0.26894], 1e-5);
    }

    #[test]
    fn pooling_errors() {
        let mut tape = Tape::new();
        let v = tape.constant(Tensor2::zeros(0, 2));
        let c = tape.constant(Tensor2::zeros(1, 2));
        assert!(attention_pool(&mut tape, v, c).is_err());
        let v = tape.constant(Tensor2::zeros(2, 2));
        let c = tape.constant(Tensor2::zeros(1, 3));
        assert!(attention_pool(&mut tape, v, c).is_err());
    }

    #[test]
    fn aligned_prompts_contribute_nothing() {
        let (a, p) = retrieve(
            true,
            &[1.0, 1.0],
            &t(&[&[1.0, 0.0], &[0.0, 2.0], &[1.0, -1.0]]),
        );
        close(&a, &[0.0, 0.0, 0.0], 0.0);
        close(&p, &[0.0, 0.0], 0.0);
    }

    #[test]
    fn commonality_hand_value() {
        let (a, p) = retrieve(true, &[1.0, 0.0], &t(&[&[-1.0, 0.0], &[0.0, 1.0]]));
        close(&a, &[1.0, 0.0], 1e-15);
        close(&p, &[-1.0, 0.0], 1e-15);
    }

    #[test]
    fn retrieval_ignores_query_scale() {
        let mut rng = Rng::new(5, Purpose::Oracle);
        let prompts = PromptPool::new(PromptKind::Commonality, 6, 4, &mut rng)
            .unwrap()
            .prompts;
        let q: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
        let q5: Vec<f64> = q.iter().map(|v| 5.0 * v).collect();
        for common in [true, false] {
            let (a, p) = retrieve(common, &q, &prompts);
            let (a5, p5) = retrieve(common, &q5, &prompts);
            close(&a, &a5, 1e-12);
            close(&p, &p5, 1e-12);
        }
    }

    #[test]
    fn single_prompt_heterogeneity() {
        let (a, p) = retrieve(false, &[0.2, -0.7], &t(&[&[3.0, 4.0]]));
        close(&a, &[1.0], 1e-15);
        close(&p, &[3.0, 4.0], 1e-15);
    }

    #[test]
    fn heterogeneity_hand_value() {
        let (a, p) = retrieve(false, &[1.0, 0.0], &t(&[&[1.0, 0.0], &[-1.0, 0.0]]));
        let e2 = (2.0f64).exp();
        close(&a, &[e2 / (e2 + 1.0), 1.0 / (e2 + 1.0)], 1e-12);
        close(&a, &[0.88080, 0.11920], 1e-5);
        close(&p, &[(e2 - 1.0) / (e2 + 1.0), 0.0], 1e-12);
        close(&p, &[0.76159, 0.0], 1e-5);
    }

    #[test]
    fn heterogeneity_permutation_equivariance() {
        let prompts = t(&[&[0.3, 0.1], &[-0.4, 0.2], &[0.05, -0.5]]);
        let swapped = t(&[&[0.05, -0.5], &[0.3, 0.1], &[-0.4, 0.2]]);
        let (a, p) = retrieve(false, &[0.6, -0.2], &prompts);
        let (b, q) = retrieve(false, &[0.6, -0.2], &swapped);
        close(&[a[2], a[0], a[1]], &b, 1e-15);
        close(&p, &q, 1e-14);
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn retrieval_width_mismatch() {
        let mut tape = Tape::new();
        let q = tape.constant(Tensor2::zeros(1, 3));
        let p = tape.constant(Tensor2::zeros(2, 2));
        assert!(retrieve_commonality(&mut tape, q, p).is_err());
        assert!(retrieve_heterogeneity(&mut tape, q, p).is_err());
    }

    #[test]
    fn enhancement_is_row_addition() {
        let mut tape = Tape::new();
        let v = tape.constant(t(&[&[1.0, 1.0]]));
        let co = tape.constant(t(&[&[-1.0, 0.0]]));
        let he = tape.constant(t(&[&[0.5, 0.0]]));
        let out = enhance(&mut tape, v, co, he).unwrap();
        assert_eq!(tape.value(out).data(), &[0.5, 1.0]);

        let big = tape.constant(Tensor2::filled(7, 2, 0.25));
        let zero = tape.constant(Tensor2::zeros(1, 2));
        let same = enhance(&mut tape, big, zero, zero).unwrap();
        assert_eq!(tape.value(same), &Tensor2::filled(7, 2, 0.25));
        let bad = tape.constant(Tensor2::zeros(1, 3));
        assert!(enhance(&mut tape, big, bad, zero).is_err());
    }

    #[test]
    fn pool_initialization() {
        let mut rng = Rng::new(0, Purpose::AdapterInit);
        let pool = PromptPool::new(PromptKind::Heterogeneity, 8, 16, &mut rng).unwrap();
        assert_eq!(pool.prompts.shape(), (8, 16));
        assert!(pool.prompts.data().iter().all(|v| (-0.5..0.5).contains(v)));
        assert!(PromptPool::new(PromptKind::Heterogeneity, 0, 16, &mut rng).is_err());
        let mut p = pool.clone();
        p.renormalize();
        for r in 0..8 {
            let n: f64 = p.prompts.row(r).iter().map(|v| v * v).sum();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn enhance_nodes_reports_consistent_values() {
        let mut rng = Rng::new(9, Purpose::Oracle);
        let v = Tensor2::from_vec(5, 4, (0..20).map(|_| rng.normal()).collect()).unwrap();
        let cp = Tensor2::from_vec(1, 4, (0..4).map(|_| rng.normal()).collect()).unwrap();
        let co = PromptPool::new(PromptKind::Commonality, 3, 4, &mut rng).unwrap();
        let he = PromptPool::new(PromptKind::Heterogeneity, 3, 4, &mut rng).unwrap();
        let (out, res) = enhance_nodes(&v, &cp, &co, &he).unwrap();
        assert!(res.alpha_co.iter().all(|&a| a >= 0.0));
        assert!((res.alpha_he.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        for r in 0..5 {
            for c in 0..4 {
                let want = v.get(r, c) + res.p_co[c] + res.p_he[c];
                assert!((out.get(r, c) - want).abs() < 1e-14);
            }
        }
    }
}
