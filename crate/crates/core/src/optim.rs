//! SGD with momentum: `v <- momentum * v + g`, `w <- w - lr * v`.

use serde::{Deserialize, Serialize};

use crate::error::{shape, Result};
use crate::tensor::Tensor2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub lr: f64,
    pub momentum: f64,
    pub velocity: Vec<Tensor2>,
    /// Number of updates applied so far.
    pub steps: u64,
}

impl OptimizerState {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            momentum,
            velocity: Vec::new(),
            steps: 0,
        }
    }
}

/// One momentum step over `params`. Velocity buffers are created lazily on
/// the first call and must keep matching shapes afterwards.
pub fn sgd_update(
    params: &mut [&mut Tensor2],
    grads: &[Tensor2],
    state: &mut OptimizerState,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(shape(
            "sgd_update",
            format!("{} parameters, {} gradients", params.len(), grads.len()),
        ));
    }
    if state.velocity.is_empty() {
        state.velocity = params
            .iter()
            .map(|p| Tensor2::zeros(p.rows(), p.cols()))
            .collect();
    }
    if state.velocity.len() != params.len() {
        return Err(shape(
            "sgd_update",
            format!(
                "{} velocity buffers, {} parameters",
                state.velocity.len(),
                params.len()
            ),
        ));
    }
    for ((p, g), v) in params.iter().zip(grads).zip(&state.velocity) {
        if p.shape() != g.shape() || p.shape() != v.shape() {
            return Err(shape(
                "sgd_update",
                format!(
                    "parameter {:?}, gradient {:?}, velocity {:?}",
                    p.shape(),
                    g.shape(),
                    v.shape()
                ),
            ));
        }
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(state.velocity.iter_mut()) {
        for ((w, &gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vi = state.momentum * *vi + gi;
            *w -= state.lr * *vi;
        }
    }
    state.steps += 1;
    Ok(())
}
