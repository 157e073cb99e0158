//! Graph nodes from an image: MC-dropout uncertainty, low-uncertainty
//! foreground sampling, projection into graph space, and the feature queue
//! that turns single images into pseudo-batches.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::backbone::argmax_rows;
use crate::error::{invalid, shape, Error, Result};
use crate::rng::Rng;
use crate::stream::BACKGROUND;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor2;

/// Per-pixel spread of the feature vectors over `passes` stochastic passes.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyMap {
    pub height: usize,
    pub width: usize,
    pub passes: usize,
    pub values: Vec<f64>,
}

/// `U = (1/t) sum_i ||F_i - mean(F)||^2` per pixel. Each map is
/// `pixels x channels`.
pub fn estimate_uncertainty(
    maps: &[Tensor2],
    height: usize,
    width: usize,
) -> Result<UncertaintyMap> {
    const OP: &str = "estimate_uncertainty";
    let t = maps.len();
    if t < 2 {
        return Err(invalid(OP, format!("need at least 2 passes, got {t}")));
    }
    let dims = maps[0].shape();
    if dims.0 != height * width {
        return Err(shape(
            OP,
            format!("{} rows for a {height}x{width} image", dims.0),
        ));
    }
    if let Some(m) = maps.iter().find(|m| m.shape() != dims) {
        return Err(shape(
            OP,
            format!("pass shapes {:?} and {:?}", dims, m.shape()),
        ));
    }
    let (pixels, channels) = dims;
    let mut values = vec![0.0; pixels];
    let mut mean = vec![0.0; channels];
    for (p, out) in values.iter_mut().enumerate() {
        mean.iter_mut().for_each(|v| *v = 0.0);
        for m in maps {
            mean.iter_mut().zip(m.row(p)).for_each(|(a, x)| *a += x);
        }
        mean.iter_mut().for_each(|v| *v /= t as f64);
        let mut acc = 0.0;
        for m in maps {
            acc += m
                .row(p)
                .iter()
                .zip(&mean)
                .map(|(x, a)| (x - a) * (x - a))
                .sum::<f64>();
        }
        *out = acc / t as f64;
    }
    Ok(UncertaintyMap {
        height,
        width,
        passes: t,
        values,
    })
}

/// Pixels chosen as graph nodes for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    /// Row-major pixel indices, ascending.
    pub pixels: Vec<usize>,
    /// Foreground pixel count before filtering.
    pub foreground: usize,
    /// Size of the low-uncertainty set sampled from.
    pub kept: usize,
    /// Set when no pixel was predicted foreground and the candidates were
    /// all pixels instead.
    pub fallback: bool,
}

/// Keeps the `ceil(p * count)` lowest-uncertainty foreground pixels (ties by
/// row-major index) and draws `n_target` of them, one per stratum of a grid
/// partition of the kept set.
pub fn select_nodes(
    u: &UncertaintyMap,
    prediction: &Tensor2,
    p: f64,
    n_target: usize,
    rng: &mut Rng,
) -> Result<Selection> {
    const OP: &str = "select_nodes";
    if !(p > 0.0 && p <= 1.0) {
        return Err(invalid(OP, format!("p = {p} outside (0, 1]")));
    }
    if n_target == 0 {
        return Err(invalid(OP, "n_target must be at least 1"));
    }
    if prediction.rows() != u.values.len() {
        return Err(shape(
            OP,
            format!(
                "{} predictions for {} pixels",
                prediction.rows(),
                u.values.len()
            ),
        ));
    }
    let labels = argmax_rows(prediction);
    let mut candidates: Vec<usize> = (0..labels.len())
        .filter(|&i| labels[i] != BACKGROUND)
        .collect();
    let foreground = candidates.len();
    let fallback = candidates.is_empty();
    if fallback {
        candidates = (0..labels.len()).collect();
    }
    if candidates.is_empty() {
        return Err(Error::Empty { op: OP });
    }
    candidates.sort_by(|&a, &b| u.values[a].total_cmp(&u.values[b]).then(a.cmp(&b)));
    let keep = ((p * candidates.len() as f64).ceil() as usize).clamp(1, candidates.len());
    candidates.truncate(keep);

    let mut pixels = if n_target >= keep {
        candidates
    } else {
        stratified(&candidates, u.height, u.width, n_target, rng)
    };
    pixels.sort_unstable();
    Ok(Selection {
        pixels,
        foreground,
        kept: keep,
        fallback,
    })
}

fn stratified(kept: &[usize], height: usize, width: usize, n: usize, rng: &mut Rng) -> Vec<usize> {
    let grid = (n as f64).sqrt().ceil() as usize;
    let cell = |p: usize| {
        let (r, c) = (p / width, p % width);
        (r * grid / height) * grid + c * grid / width
    };
    let mut ordered = kept.to_vec();
    ordered.sort_by_key(|&p| (cell(p), p));
    (0..n)
        .map(|s| {
            let lo = s * ordered.len() / n;
            let hi = (s + 1) * ordered.len() / n;
            ordered[lo + rng.below(hi - lo)]
        })
        .collect()
}

/// Two-layer map from backbone features to graph space:
/// `linear(in -> h) -> ReLU -> linear(h -> h)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Projection {
    pub w1: Tensor2,
    pub b1: Tensor2,
    pub w2: Tensor2,
    pub b2: Tensor2,
}

#[derive(Debug, Clone, Copy)]
pub struct ProjectionVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl Projection {
    pub fn new(input: usize, hidden: usize, rng: &mut Rng) -> Self {
        let init = |rows: usize, cols: usize, rng: &mut Rng| {
            let bound = (6.0 / rows as f64).sqrt();
            let data = (0..rows * cols)
                .map(|_| rng.uniform_range(-bound, bound))
                .collect();
            Tensor2::from_vec(rows, cols, data).expect("sized")
        };
        Self {
            w1: init(input, hidden, rng),
            b1: Tensor2::zeros(1, hidden),
            w2: init(hidden, hidden, rng),
            b2: Tensor2::zeros(1, hidden),
        }
    }

    pub fn params(&self) -> Vec<&Tensor2> {
        vec![&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor2> {
        vec![&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    pub fn bind(&self, tape: &mut Tape) -> ProjectionVars {
        ProjectionVars {
            w1: tape.param(self.w1.clone()),
            b1: tape.param(self.b1.clone()),
            w2: tape.param(self.w2.clone()),
            b2: tape.param(self.b2.clone()),
        }
    }
}

pub fn project_nodes(tape: &mut Tape, vars: &ProjectionVars, features: Var) -> Result<Var> {
    let (_, width) = tape.value(features).shape();
    let expected = tape.value(vars.w1).rows();
    if width != expected {
        return Err(shape(
            "project_nodes",
            format!("features have {width} channels, projection expects {expected}"),
        ));
    }
    let hidden = tape.matmul(features, vars.w1)?;
    let hidden = tape.add_row(hidden, vars.b1)?;
    let hidden = tape.relu(hidden)?;
    let out = tape.matmul(hidden, vars.w2)?;
    tape.add_row(out, vars.b2)
}

/// Detached per-image record kept for later pseudo-batches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueueEntry {
    pub image_id: u64,
    /// Enhanced node features, `n x h`.
    pub enhanced: Tensor2,
    /// Backbone features of the same nodes, `n x feature_dim`, so the
    /// current head can re-predict them.
    pub features: Tensor2,
    /// Pooled query of the image, `1 x h`, so the current commonality pool
    /// can re-retrieve its prompt.
    pub query: Tensor2,
}

impl QueueEntry {
    pub fn nodes(&self) -> usize {
        self.enhanced.rows()
    }
}

/// FIFO of at most `capacity` detached entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureQueue {
    capacity: usize,
    entries: VecDeque<QueueEntry>,
}

/// Layout of the nodes handed to the graph solver: queued blocks in
/// arrival order, then the current image.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoBatch {
    pub queued: Vec<QueueEntry>,
    pub block_sizes: Vec<usize>,
}

impl PseudoBatch {
    /// Image count `B`.
    pub fn images(&self) -> usize {
        self.block_sizes.len()
    }

    /// Node count `V`.
    pub fn nodes(&self) -> usize {
        self.block_sizes.iter().sum()
    }
}

impl FeatureQueue {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            entries: VecDeque::with_capacity(capacity + 1),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = &QueueEntry> {
        self.entries.iter()
    }

    /// Pseudo-batch of the queued entries plus `current`; `current` is then
    /// enqueued and the oldest entries evicted down to capacity.
    pub fn assemble_and_rotate(&mut self, current: QueueEntry) -> PseudoBatch {
        let queued: Vec<QueueEntry> = self.entries.iter().cloned().collect();
        let mut block_sizes: Vec<usize> = queued.iter().map(QueueEntry::nodes).collect();
        block_sizes.push(current.nodes());
        self.entries.push_back(current);
        while self.entries.len() > self.capacity {
            self.entries.pop_front();
        }
        PseudoBatch {
            queued,
            block_sizes,
        }
    }
}
