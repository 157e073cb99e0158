//! Adaptation objective: a graph-consistency KL weighted by the refined
//! edges, a clustering term pulling the commonality prompts together, and
//! their weighted sum.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor2;

/// Floor applied to probabilities before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-8;

/// `sum_ij S*_ij KL(P_j || sg(P_i))`. Gradient reaches `S*` and the `P_j`
/// side only.
pub fn graph_consistency_loss(tape: &mut Tape, s_star: Var, probs: Var) -> Result<Var> {
    consistency_against(tape, s_star, probs, probs)
}

/// The consistency loss with the stop-gradient side read from `target`
/// (same shape as `probs`) instead of `probs` itself.
pub fn consistency_against(tape: &mut Tape, s_star: Var, probs: Var, target: Var) -> Result<Var> {
    let (v, _) = tape.value(probs).shape();
    if tape.value(s_star).shape() != (v, v)
        || tape.value(target).shape() != tape.value(probs).shape()
    {
        return Err(shape(
            "graph_consistency_loss",
            format!(
                "S* {:?}, predictions {:?}, targets {:?}",
                tape.value(s_star).shape(),
                tape.value(probs).shape(),
                tape.value(target).shape()
            ),
        ));
    }
    let floored = tape.clamp_min(probs, PROB_FLOOR)?;
    let log_p = tape.log(floored)?;
    let plogp = tape.mul(probs, log_p)?;
    let neg_entropy = tape.sum_rows(plogp)?;
    let neg_entropy = tape.transpose(neg_entropy)?;

    let target = tape.clamp_min(target, PROB_FLOOR)?;
    let target = tape.stop_grad(target)?;
    let log_q = tape.log(target)?;
    let pt = tape.transpose(probs)?;
    let cross = tape.matmul(log_q, pt)?;
    let cross = tape.scale(cross, -1.0)?;
    // kl[i][j] = sum_c P_jc (log P_jc - log q_ic)
    let kl = tape.add_row(cross, neg_entropy)?;
    let weighted = tape.mul(s_star, kl)?;
    tape.sum(weighted)
}

/// `(1/B) sum_{i != j} (1 - cos(p_i, p_j))` over the `B x h` rows.
pub fn clustering_loss(tape: &mut Tape, prompts: Var) -> Result<Var> {
    let b = tape.value(prompts).rows();
    if b == 0 {
        return Err(Error::Empty {
            op: "clustering_loss",
        });
    }
    let cos = tape.cosine_rows(prompts, prompts)?;
    let off = Tensor2::filled(b, b, 1.0).zip_map(&Tensor2::identity(b), |a, e| a - e)?;
    let mask = tape.constant(off);
    let cos = tape.mul(cos, mask)?;
    let total = tape.sum(cos)?;
    let scaled = tape.scale(total, -1.0 / b as f64)?;
    tape.add_const(scaled, (b - 1) as f64)
}

/// `L_G + lambda * L_C`.
pub fn total_loss(tape: &mut Tape, graph: Var, cluster: Var, lambda: f64) -> Result<Var> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(invalid("total_loss", format!("lambda = {lambda}")));
    }
    let weighted = tape.scale(cluster, lambda)?;
    tape.add(graph, weighted)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub graph: f64,
    pub cluster: f64,
    pub lambda: f64,
}

impl LossReport {
    pub fn read(tape: &Tape, total: Var, graph: Var, cluster: Var, lambda: f64) -> Self {
        Self {
            total: tape.scalar(total),
            graph: tape.scalar(graph),
            cluster: tape.scalar(cluster),
            lambda,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dgcs::{build_cost, refine, sinkhorn_solve, CostMode, SparsifyProblem};
    use crate::fd::{fd_oracle, relative_error, tape_gradient};
    use crate::ot::SinkhornSettings;
    use crate::rng::{Purpose, Rng};
    use proptest::prelude::*;

    fn lg(s: &Tensor2, p: &Tensor2) -> f64 {
        let mut tape = Tape::new();
        let s = tape.constant(s.clone());
        let p = tape.constant(p.clone());
        let l = graph_consistency_loss(&mut tape, s, p).unwrap();
        tape.scalar(l)
    }

    fn lc(p: &Tensor2) -> f64 {
        let mut tape = Tape::new();
        let p = tape.constant(p.clone());
        let l = clustering_loss(&mut tape, p).unwrap();
        tape.scalar(l)
    }

    fn kl(p: &[f64], q: &[f64]) -> f64 {
        p.iter()
            .zip(q)
            .map(|(a, b)| a * (a.max(PROB_FLOOR) / b.max(PROB_FLOOR)).ln())
            .sum()
    }

    fn random_probs(rng: &mut Rng, rows: usize, cols: usize) -> Tensor2 {
        let mut out = Tensor2::zeros(rows, cols);
        for r in 0..rows {
            let logits: Vec<f64> = (0..cols).map(|_| 2.0 * rng.normal()).collect();
            let p = crate::tensor::softmax_stable(&logits).unwrap();
            out.row_mut(r).copy_from_slice(&p);
        }
        out
    }

    #[test]
    fn identical_predictions_cost_nothing() {
        let p = Tensor2::from_rows(&[[0.2, 0.5, 0.3]; 4]).unwrap();
        assert!(lg(&Tensor2::filled(4, 4, 0.7), &p).abs() < 1e-15);
    }

    #[test]
    fn empty_graph_costs_nothing() {
        let p = Tensor2::from_rows(&[[0.9, 0.05, 0.05], [0.1, 0.1, 0.8]]).unwrap();
        assert_eq!(lg(&Tensor2::zeros(2, 2), &p), 0.0);
    }

    #[test]
    fn consistency_hand_value() {
        let p = Tensor2::from_rows(&[[0.5, 0.5], [0.9, 0.1]]).unwrap();
        let s = Tensor2::from_rows(&[[0.0, 0.5], [0.0, 0.0]]).unwrap();
        let want = 0.5 * (0.9 * 1.8f64.ln() + 0.1 * 0.2f64.ln());
        let got = lg(&s, &p);
        assert!((got - want).abs() < 1e-12);
        assert!((got - 0.18403).abs() < 1e-4);
    }

    #[test]
    fn consistency_matches_double_loop() {
        let mut rng = Rng::new(12, Purpose::Oracle);
        let p = random_probs(&mut rng, 5, 3);
        let s = Tensor2::from_vec(5, 5, (0..25).map(|_| rng.uniform()).collect()).unwrap();
        let mut want = 0.0;
        for i in 0..5 {
            for j in 0..5 {
                want += s.get(i, j) * kl(p.row(j), p.row(i));
            }
        }
        assert!((lg(&s, &p) - want).abs() < 1e-12);
        let mut tape = Tape::new();
        let s = tape.constant(Tensor2::zeros(4, 4));
        let p = tape.constant(p);
        assert!(graph_consistency_loss(&mut tape, s, p).is_err());
    }

    #[test]
    fn clustering_examples() {
        assert!(lc(&Tensor2::from_rows(&[[0.3, -0.2]; 3]).unwrap()).abs() < 1e-12);
        assert!((lc(&Tensor2::identity(2)) - 1.0).abs() < 1e-15);
        assert_eq!(lc(&Tensor2::from_rows(&[[0.0, 0.0]]).unwrap()), 0.0);
        assert_eq!(lc(&Tensor2::from_rows(&[[4.0, 1.0]]).unwrap()), 0.0);
        // Zero vectors count as orthogonal to everything.
        assert!((lc(&Tensor2::zeros(3, 2)) - 2.0).abs() < 1e-15);
        let mut tape = Tape::new();
        let e = tape.constant(Tensor2::zeros(0, 2));
        assert!(clustering_loss(&mut tape, e).is_err());
    }

    #[test]
    fn total_examples() {
        let mut tape = Tape::new();
        let g = tape.constant(Tensor2::scalar(0.18403));
        let c = tape.constant(Tensor2::scalar(1.0));
        let l = total_loss(&mut tape, g, c, 0.2).unwrap();
        assert!((tape.scalar(l) - 0.38403).abs() < 1e-12);
        let l0 = total_loss(&mut tape, g, c, 0.0).unwrap();
        assert_eq!(tape.scalar(l0), 0.18403);
        assert!(total_loss(&mut tape, g, c, -1.0).is_err());
        let r = LossReport::read(&tape, l, g, c, 0.2);
        assert_eq!(r.total, r.graph + r.lambda * r.cluster);
    }

    #[test]
    fn target_side_receives_no_gradient() {
        // a drives only the sg target row; b drives only the live side.
        let s = Tensor2::from_rows(&[[0.0, 0.7], [0.0, 0.0]]).unwrap();
        let f = |tape: &mut Tape, v: &[Var]| {
            let pa = tape.softmax_rows(v[0])?;
            let pb = tape.softmax_rows(v[1])?;
            let p = tape.concat_rows(&[pa, pb])?;
            let target = tape.stop_grad(p)?;
            let live = tape.concat_rows(&[pa, pb])?;
            let mixed = tape.concat_rows(&[target, live])?;
            let first = tape.gather_rows(mixed, &[0])?;
            let second = tape.gather_rows(mixed, &[3])?;
            let probs = tape.concat_rows(&[first, second])?;
            let s = tape.constant(s.clone());
            graph_consistency_loss(tape, s, probs)
        };
        let params = [
            Tensor2::row_vector(vec![0.3, -0.4, 0.1]),
            Tensor2::row_vector(vec![1.2, 0.2, -0.5]),
        ];
        let (_, grads) = tape_gradient(f, &params).unwrap();
        assert!(grads[0].data().iter().all(|&g| g == 0.0));
        assert!(grads[1].max_abs() > 1e-3);
    }

    #[test]
    fn consistency_gradient_matches_oracle() {
        let mut rng = Rng::new(21, Purpose::Oracle);
        let logits = Tensor2::from_vec(4, 3, (0..12).map(|_| rng.normal()).collect()).unwrap();
        let s = Tensor2::from_vec(4, 4, (0..16).map(|_| rng.uniform()).collect()).unwrap();
        let f = |tape: &mut Tape, v: &[Var]| {
            let p = tape.softmax_rows(v[0])?;
            graph_consistency_loss(tape, v[1], p)
        };
        let params = [logits, s];
        let (_, analytic) = tape_gradient(f, &params).unwrap();
        let numeric = fd_oracle(f, &params).unwrap();
        assert!(relative_error(&analytic, &numeric) < 1e-6);
    }

    #[test]
    fn gradient_through_solver_matches_oracle() {
        let v = 6;
        let mut rng = Rng::new(5, Purpose::Oracle);
        let affinity =
            Tensor2::from_vec(v, v, (0..v * v).map(|_| rng.uniform()).collect()).unwrap();
        let probs = random_probs(&mut rng, v, 3);
        let problem = SparsifyProblem::for_nodes(v, 2).unwrap();
        let f = |tape: &mut Tape, vars: &[Var]| {
            let d = tape.reshape(vars[0], v * v, 1)?;
            let cost = build_cost(tape, d, CostMode::Squared)?;
            let (plan, _) = sinkhorn_solve(tape, cost, &problem, SinkhornSettings::default())?;
            let s_star = refine(tape, plan, v)?;
            let p = tape.constant(probs.clone());
            graph_consistency_loss(tape, s_star, p)
        };
        let params = [affinity];
        let (_, analytic) = tape_gradient(f, &params).unwrap();
        let numeric = fd_oracle(f, &params).unwrap();
        let err = relative_error(&analytic, &numeric);
        assert!(err <= 1e-4, "relative error {err}");
        assert!(analytic[0].max_abs() > 0.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn losses_are_non_negative(seed in 0u64..10_000, v in 1usize..8, b in 1usize..6) {
            let mut rng = Rng::new(seed, Purpose::Oracle);
            let p = random_probs(&mut rng, v, 3);
            let s = Tensor2::from_vec(v, v, (0..v * v).map(|_| rng.uniform()).collect()).unwrap();
            prop_assert!(lg(&s, &p) >= -1e-12);
            let prompts = Tensor2::from_vec(b, 4, (0..b * 4).map(|_| rng.normal()).collect()).unwrap();
            let c = lc(&prompts);
            prop_assert!(c >= -1e-12);
            prop_assert!(c <= 2.0 * (b * (b - 1)) as f64 / b as f64 + 1e-12);
        }
    }
}
