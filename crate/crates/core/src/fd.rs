//! Central-difference gradient oracle.
//!
//! The objective is evaluated once on a recording tape to pin every barrier
//! output and solver iteration count, then re-evaluated on replaying tapes at
//! each perturbed parameter entry. The result is the gradient of the
//! surrogate in which barrier outputs are constants, which is what
//! [`Tape::backward`] computes.

use crate::error::{Error, Result};
use crate::tape::{Frozen, Tape, Var};
use crate::tensor::Tensor2;

/// Relative perturbation; the step for entry `w` is `REL_STEP * max(1, |w|)`.
pub const REL_STEP: f64 = 1e-4;

fn evaluate<F>(f: &F, tape: &mut Tape, params: &[Tensor2]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let leaves: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f(tape, &leaves)?;
    let (r, c) = tape.value(loss).shape();
    if (r, c) != (1, 1) {
        return Err(Error::NonScalarLoss { rows: r, cols: c });
    }
    Ok(tape.scalar(loss))
}

/// Loss value and reverse-mode gradients of `f` at `params`.
pub fn tape_gradient<F>(f: F, params: &[Tensor2]) -> Result<(f64, Vec<Tensor2>)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let leaves: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f(&mut tape, &leaves)?;
    let grads = tape.backward(loss)?;
    Ok((
        tape.scalar(loss),
        leaves.iter().map(|&v| grads.get(v)).collect(),
    ))
}

/// Central-difference gradient of `f` with barrier values frozen at `params`.
pub fn fd_oracle<F>(f: F, params: &[Tensor2]) -> Result<Vec<Tensor2>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let first = evaluate(&f, &mut tape, params)?;
    let frozen = tape.into_frozen();
    let mut again = Tape::new();
    let second = evaluate(&f, &mut again, params)?;
    if first.to_bits() != second.to_bits() || again.frozen() != frozen.as_slice() {
        return Err(Error::NonDeterministic { first, second });
    }
    fd_with_frozen(&f, params, &frozen)
}

/// Central differences against an explicit set of frozen values.
pub fn fd_with_frozen<F>(f: &F, params: &[Tensor2], frozen: &[Frozen]) -> Result<Vec<Tensor2>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut work: Vec<Tensor2> = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let mut grad = Tensor2::zeros(params[p].rows(), params[p].cols());
        for e in 0..params[p].len() {
            let w = params[p].data()[e];
            let h = REL_STEP * w.abs().max(1.0);
            work[p].data_mut()[e] = w + h;
            let plus = evaluate(f, &mut Tape::replaying(frozen.to_vec()), &work)?;
            work[p].data_mut()[e] = w - h;
            let minus = evaluate(f, &mut Tape::replaying(frozen.to_vec()), &work)?;
            work[p].data_mut()[e] = w;
            grad.data_mut()[e] = (plus - minus) / (2.0 * h);
        }
        out.push(grad);
    }
    Ok(out)
}

/// Scale below which a gradient group counts as vanishing.
pub const ABS_FLOOR: f64 = 1e-8;

/// `max |a - b| / max(max |a|, max |b|, ABS_FLOOR)` over a parameter group,
/// so that groups whose gradient vanishes compare their rounding noise
/// against the floor instead of against itself.
pub fn relative_error(analytic: &[Tensor2], numeric: &[Tensor2]) -> f64 {
    let mut diff: f64 = 0.0;
    let mut scale: f64 = 0.0;
    for (a, n) in analytic.iter().zip(numeric) {
        for (x, y) in a.data().iter().zip(n.data()) {
            diff = diff.max((x - y).abs());
            scale = scale.max(x.abs()).max(y.abs());
        }
    }
    diff / scale.max(ABS_FLOOR)
}
