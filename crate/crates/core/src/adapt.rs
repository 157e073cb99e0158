//! Online adaptation. Each stream sample gets exactly one optimizer step on
//! the graph objective, followed by dropout-free inference with the updated
//! parameters.
//!
//! A step has two halves. The plan (MC-dropout passes, uncertainty, node
//! selection, the dropout mask of the taped pass) is computed off the tape
//! and treated as fixed input. The objective is then a deterministic taped
//! function of the 15 learnable tensors, which is what the gradient check
//! differentiates.

use std::collections::BTreeMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::backbone::{encode_tape, extract_patches, head_tape, Backbone, BackboneVars};
use crate::dgcs::{
    build_cost, edge_affinity, node_density, normalize_range, refine, similarity, sinkhorn_solve,
    CostMode, SimilarityParams, SimilarityVars, SparsifyProblem,
};
use crate::error::{invalid, shape, Error, Result};
use crate::losses::{clustering_loss, consistency_against, total_loss, LossReport, PROB_FLOOR};
use crate::nodes::{
    estimate_uncertainty, project_nodes, FeatureQueue, Projection, ProjectionVars, QueueEntry,
    Selection,
};
use crate::optim::{sgd_update, OptimizerState};
use crate::ot::SinkhornSettings;
use crate::rng::{Purpose, Rng};
use crate::spfe::{
    attention_pool, enhance, retrieve_commonality, retrieve_heterogeneity, PromptKind, PromptPool,
};
use crate::stream::{foreground_dice, Image, StreamSample};
use crate::tape::{SolveInfo, Tape, Var};
use crate::tensor::Tensor2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptConfig {
    /// Weight of the clustering loss.
    pub lambda: f64,
    /// Fraction of foreground pixels kept by uncertainty.
    pub uncertainty_fraction: f64,
    /// Queue length `N`.
    pub queue_size: usize,
    /// Target component count `Z`; the edge budget is `V - Z`.
    pub components: usize,
    /// MC-dropout passes `t`.
    pub mc_passes: usize,
    /// Prompts per pool `M`.
    pub prompts: usize,
    pub theta: f64,
    pub tau: f64,
    /// Graph-space width `h`.
    pub graph_dim: usize,
    pub nodes_per_image: usize,
    pub lr: f64,
    pub momentum: f64,
    pub cost_mode: CostMode,
    pub rounds: usize,
    pub sinkhorn_max_iter: usize,
    pub sinkhorn_tol: f64,
    /// Entries summed per row for node density; `None` sums the whole row.
    /// Capped at the node count of the step.
    pub density_r: Option<usize>,
    pub zero_diagonal: bool,
    /// Rescale edge affinities to `[0, 1]` before building the cost.
    pub normalize_affinity: bool,
    pub normalize_prompts: bool,
    pub seed: u64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            lambda: 0.2,
            uncertainty_fraction: 0.5,
            queue_size: 3,
            components: 48,
            mc_passes: 4,
            prompts: 8,
            theta: 0.05,
            tau: 1.0,
            graph_dim: 16,
            nodes_per_image: 32,
            lr: 0.005,
            momentum: 0.9,
            cost_mode: CostMode::Squared,
            rounds: 1,
            sinkhorn_max_iter: 200,
            sinkhorn_tol: 1e-6,
            density_r: None,
            zero_diagonal: false,
            normalize_affinity: true,
            normalize_prompts: false,
            seed: 0,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        const OP: &str = "AdaptConfig";
        let finite_pos = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(invalid(OP, format!("{name} = {v} must be positive")))
            }
        };
        finite_pos("theta", self.theta)?;
        finite_pos("tau", self.tau)?;
        finite_pos("sinkhorn_tol", self.sinkhorn_tol)?;
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(invalid(
                OP,
                format!("lambda = {} must be non-negative", self.lambda),
            ));
        }
        if !(self.uncertainty_fraction > 0.0 && self.uncertainty_fraction <= 1.0) {
            return Err(invalid(
                OP,
                format!(
                    "uncertainty_fraction = {} outside (0, 1]",
                    self.uncertainty_fraction
                ),
            ));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(invalid(
                OP,
                format!("lr = {} must be non-negative", self.lr),
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(invalid(
                OP,
                format!("momentum = {} outside [0, 1)", self.momentum),
            ));
        }
        if self.mc_passes < 2 {
            return Err(invalid(OP, "mc_passes must be at least 2"));
        }
        let counts = [
            ("prompts", self.prompts),
            ("graph_dim", self.graph_dim),
            ("nodes_per_image", self.nodes_per_image),
            ("rounds", self.rounds),
            ("sinkhorn_max_iter", self.sinkhorn_max_iter),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(invalid(OP, format!("{name} must be at least 1")));
            }
        }
        if self.density_r == Some(0) {
            return Err(invalid(OP, "density_r must be at least 1"));
        }
        Ok(())
    }

    pub fn sinkhorn(&self) -> SinkhornSettings {
        SinkhornSettings {
            theta: self.theta,
            tol: self.sinkhorn_tol,
            max_iter: self.sinkhorn_max_iter,
        }
    }
}

/// Learnable state introduced at test time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Adapter {
    pub projection: Projection,
    /// Pooling context `c_p`, `1 x h`.
    pub context: Tensor2,
    pub common: PromptPool,
    pub hetero: PromptPool,
    pub similarity: SimilarityParams,
}

impl Adapter {
    /// Fresh adapter for a backbone with `feature_dim` features. The pooling
    /// context starts at zero, i.e. as a plain mean.
    pub fn new(feature_dim: usize, config: &AdaptConfig) -> Result<Self> {
        config.validate()?;
        let h = config.graph_dim;
        let mut rng = Rng::new(config.seed, Purpose::AdapterInit);
        let projection = Projection::new(feature_dim, h, &mut rng);
        let common = PromptPool::new(PromptKind::Commonality, config.prompts, h, &mut rng)?;
        let hetero = PromptPool::new(PromptKind::Heterogeneity, config.prompts, h, &mut rng)?;
        let similarity = SimilarityParams::new(h, &mut rng);
        Ok(Self {
            projection,
            context: Tensor2::zeros(1, h),
            common,
            hetero,
            similarity,
        })
    }

    /// Checks that every tensor has the shape a fresh adapter for
    /// `feature_dim` and `config` would have, and holds finite values.
    pub fn check(&self, feature_dim: usize, config: &AdaptConfig) -> Result<()> {
        let fresh = Self::new(feature_dim, config)?;
        for (i, (a, b)) in self.params().into_iter().zip(fresh.params()).enumerate() {
            if a.shape() != b.shape() {
                return Err(shape(
                    "Adapter::check",
                    format!(
                        "tensor {i} is {:?}, config expects {:?}",
                        a.shape(),
                        b.shape()
                    ),
                ));
            }
            if !a.all_finite() {
                return Err(Error::NonFinite {
                    op: "Adapter::check",
                });
            }
        }
        Ok(())
    }

    pub fn params(&self) -> Vec<&Tensor2> {
        let mut out = self.projection.params();
        out.extend([
            &self.context,
            &self.common.prompts,
            &self.hetero.prompts,
            &self.similarity.wq,
            &self.similarity.wk,
        ]);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor2> {
        let mut out = self.projection.params_mut();
        out.extend([
            &mut self.context,
            &mut self.common.prompts,
            &mut self.hetero.prompts,
            &mut self.similarity.wq,
            &mut self.similarity.wk,
        ]);
        out
    }
}

/// Number of learnable tensors seen by the objective.
pub const PARAM_COUNT: usize = 15;

/// Named slices of the parameter list, in objective order.
pub const PARAM_GROUPS: [(&str, Range<usize>); 7] = [
    ("backbone", 0..6),
    ("projection", 6..10),
    ("c_p", 10..11),
    ("P_CO", 11..12),
    ("P_HE", 12..13),
    ("W_q", 13..14),
    ("W_k", 14..15),
];

pub fn collect_params<'a>(backbone: &'a Backbone, adapter: &'a Adapter) -> Vec<&'a Tensor2> {
    let mut out = backbone.params();
    out.extend(adapter.params());
    out
}

/// Off-tape decisions for one step.
#[derive(Debug, Clone)]
pub struct StepPlan {
    pub selection: Selection,
    /// Patches of the selected pixels, `n x 25`.
    pub patches: Tensor2,
    /// Dropout mask of the taped pass, `n x hidden`.
    pub mask: Tensor2,
}

/// MC-dropout passes, uncertainty, node selection and the training mask.
/// Randomness is keyed by `(config.seed, step)`.
pub fn plan_step(
    backbone: &Backbone,
    image: &Image,
    config: &AdaptConfig,
    step: u64,
) -> Result<StepPlan> {
    let mut drop_rng = Rng::indexed(config.seed, Purpose::Dropout, step);
    let mut pick_rng = Rng::indexed(config.seed, Purpose::Sampling, step);
    let clean = backbone.forward(image, None)?;
    let maps = (0..config.mc_passes)
        .map(|_| {
            backbone
                .forward(image, Some(&mut drop_rng))
                .map(|o| o.features)
        })
        .collect::<Result<Vec<_>>>()?;
    let u = estimate_uncertainty(&maps, image.height, image.width)?;
    let selection = crate::nodes::select_nodes(
        &u,
        &clean.probs,
        config.uncertainty_fraction,
        config.nodes_per_image,
        &mut pick_rng,
    )?;
    let patches = extract_patches(image, &selection.pixels)?;
    let mask = backbone.dropout_mask(selection.pixels.len(), &mut drop_rng);
    Ok(StepPlan {
        selection,
        patches,
        mask,
    })
}

/// Handles into one taped objective.
#[derive(Debug, Clone)]
pub struct StepGraph {
    pub loss: Var,
    pub graph: Var,
    pub cluster: Var,
    /// Edge affinities `d`, one per ordered node pair.
    pub affinity: Var,
    /// Enhanced nodes of the current image.
    pub enhanced: Var,
    /// Backbone features of the current image's nodes.
    pub features: Var,
    pub query: Var,
    pub solve: SolveInfo,
    pub problem: SparsifyProblem,
    pub nodes: usize,
    pub batch: usize,
}

/// Builds the full objective on `tape` from the [`PARAM_COUNT`] leaves.
///
/// Queued blocks enter as constants: their enhanced nodes feed the graph,
/// their stored features go through the live head, and their stored queries
/// are re-retrieved from the live commonality pool. With `probe` set, the
/// stop-gradient targets are `softmax(log P + probe)` instead of `P`.
pub fn step_objective(
    tape: &mut Tape,
    leaves: &[Var],
    plan: &StepPlan,
    queued: &[QueueEntry],
    config: &AdaptConfig,
    probe: Option<Var>,
) -> Result<StepGraph> {
    if leaves.len() != PARAM_COUNT {
        return Err(invalid(
            "step_objective",
            format!("{} leaves, expected {PARAM_COUNT}", leaves.len()),
        ));
    }
    let bb = BackboneVars {
        w1: leaves[0],
        b1: leaves[1],
        w2: leaves[2],
        b2: leaves[3],
        wh: leaves[4],
        bh: leaves[5],
    };
    let proj = ProjectionVars {
        w1: leaves[6],
        b1: leaves[7],
        w2: leaves[8],
        b2: leaves[9],
    };
    let (context, common, hetero) = (leaves[10], leaves[11], leaves[12]);
    let sim = SimilarityVars {
        wq: leaves[13],
        wk: leaves[14],
    };

    let features = encode_tape(tape, &bb, plan.patches.clone(), Some(plan.mask.clone()))?;
    let v = project_nodes(tape, &proj, features)?;
    let query = attention_pool(tape, v, context)?;
    let (_, p_co) = retrieve_commonality(tape, query, common)?;
    let (_, p_he) = retrieve_heterogeneity(tape, query, hetero)?;
    let enhanced = enhance(tape, v, p_co, p_he)?;

    let mut node_blocks = Vec::with_capacity(queued.len() + 1);
    let mut feature_blocks = Vec::with_capacity(queued.len() + 1);
    let mut commons = Vec::with_capacity(queued.len() + 1);
    for entry in queued {
        node_blocks.push(tape.constant(entry.enhanced.clone()));
        feature_blocks.push(tape.constant(entry.features.clone()));
        let q = tape.constant(entry.query.clone());
        commons.push(retrieve_commonality(tape, q, common)?.1);
    }
    node_blocks.push(enhanced);
    feature_blocks.push(features);
    commons.push(p_co);

    let nodes_all = tape.concat_rows(&node_blocks)?;
    let features_all = tape.concat_rows(&feature_blocks)?;
    let probs = head_tape(tape, &bb, features_all)?;
    let n = tape.value(nodes_all).rows();

    let s = similarity(tape, nodes_all, &sim)?;
    let density = node_density(tape, s, config.density_r.unwrap_or(n).min(n))?;
    let affinity = edge_affinity(tape, s, density, config.tau, config.zero_diagonal)?;
    let d = tape.reshape(affinity, n * n, 1)?;
    let scaled = if config.normalize_affinity {
        normalize_range(tape, d)?
    } else {
        d
    };
    let cost = build_cost(tape, scaled, config.cost_mode)?;
    let problem = SparsifyProblem::for_nodes(n, config.components)?;
    let (plan_var, solve) = sinkhorn_solve(tape, cost, &problem, config.sinkhorn())?;
    let s_star = refine(tape, plan_var, n)?;

    let target = match probe {
        None => probs,
        Some(p) => {
            let floored = tape.clamp_min(probs, PROB_FLOOR)?;
            let logs = tape.log(floored)?;
            let shifted = tape.add(logs, p)?;
            tape.softmax_rows(shifted)?
        }
    };
    let graph = consistency_against(tape, s_star, probs, target)?;
    let commons = tape.concat_rows(&commons)?;
    let cluster = clustering_loss(tape, commons)?;
    let loss = total_loss(tape, graph, cluster, config.lambda)?;
    Ok(StepGraph {
        loss,
        graph,
        cluster,
        affinity: d,
        enhanced,
        features,
        query,
        solve,
        problem,
        nodes: n,
        batch: queued.len() + 1,
    })
}

/// Mutable adaptation state carried along the stream.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptState {
    pub backbone: Backbone,
    pub adapter: Adapter,
    pub optimizer: OptimizerState,
    pub queue: FeatureQueue,
    /// Steps taken so far, across rounds.
    pub steps: u64,
}

impl AdaptState {
    pub fn new(backbone: Backbone, config: &AdaptConfig) -> Result<Self> {
        backbone.check()?;
        let adapter = Adapter::new(backbone.config.feature_dim, config)?;
        Ok(Self {
            backbone,
            adapter,
            optimizer: OptimizerState::new(config.lr, config.momentum),
            queue: FeatureQueue::new(config.queue_size),
            steps: 0,
        })
    }

    /// Continues from a previously adapted `adapter` with a fresh optimizer
    /// and an empty queue.
    pub fn resume(backbone: Backbone, adapter: Adapter, config: &AdaptConfig) -> Result<Self> {
        backbone.check()?;
        adapter.check(backbone.config.feature_dim, config)?;
        Ok(Self {
            backbone,
            adapter,
            optimizer: OptimizerState::new(config.lr, config.momentum),
            queue: FeatureQueue::new(config.queue_size),
            steps: 0,
        })
    }

    pub fn params(&self) -> Vec<&Tensor2> {
        collect_params(&self.backbone, &self.adapter)
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor2> {
        let mut out = self.backbone.params_mut();
        out.extend(self.adapter.params_mut());
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: u64,
    pub round: usize,
    pub scene: u64,
    pub domain_id: String,
    /// Absent when the update was skipped or rolled back.
    pub losses: Option<LossReport>,
    pub dice_disc: f64,
    pub dice_cup: f64,
    pub sinkhorn_iterations: usize,
    pub sinkhorn_residual: f64,
    /// Node count `V` of the pseudo-batch.
    pub nodes: usize,
    /// Edge budget `k`.
    pub k: usize,
    /// Images in the pseudo-batch `B`.
    pub batch: usize,
    /// Nodes drawn from the current image.
    pub selected: usize,
    pub foreground_fallback: bool,
    pub k_clamped: bool,
    /// Reason the update did not happen, if it did not.
    pub aborted: Option<String>,
}

impl StepReport {
    pub fn mean_dice(&self) -> f64 {
        0.5 * (self.dice_disc + self.dice_cup)
    }
}

struct Update {
    prediction: Vec<u8>,
    losses: LossReport,
    solve: SolveInfo,
    problem: SparsifyProblem,
    nodes: usize,
    batch: usize,
}

fn recoverable(e: &Error) -> bool {
    matches!(e, Error::NonFinite { .. } | Error::Diverged { .. })
}

fn try_update(
    state: &mut AdaptState,
    plan: &StepPlan,
    queued: &[QueueEntry],
    config: &AdaptConfig,
    sample: &StreamSample,
) -> Result<Update> {
    let mut tape = Tape::new();
    let leaves: Vec<Var> = state
        .params()
        .into_iter()
        .map(|p| tape.param(p.clone()))
        .collect();
    let g = step_objective(&mut tape, &leaves, plan, queued, config, None)?;
    let grads = tape.backward(g.loss)?;
    let grads: Vec<Tensor2> = leaves.iter().map(|&v| grads.get(v)).collect();
    let mut optimizer = state.optimizer.clone();
    {
        let mut params = state.params_mut();
        sgd_update(&mut params, &grads, &mut optimizer)?;
        if params.iter().any(|p| !p.all_finite()) {
            return Err(Error::NonFinite { op: "sgd_update" });
        }
    }
    state.optimizer = optimizer;
    if config.normalize_prompts {
        state.adapter.common.renormalize();
        state.adapter.hetero.renormalize();
    }
    // Finite weights can still overflow at inference.
    let prediction = state.backbone.forward(&sample.image, None)?.argmax();
    state.queue.assemble_and_rotate(QueueEntry {
        image_id: sample.scene,
        enhanced: tape.value(g.enhanced).clone(),
        features: tape.value(g.features).clone(),
        query: tape.value(g.query).clone(),
    });
    Ok(Update {
        prediction,
        losses: LossReport::read(&tape, g.loss, g.graph, g.cluster, config.lambda),
        solve: g.solve,
        problem: g.problem,
        nodes: g.nodes,
        batch: g.batch,
    })
}

/// One adaptation step on `sample`: plan, a single optimizer update, then
/// post-update inference scored against the mask. Non-finite values during
/// the update restore the pre-step state and are reported, not raised.
pub fn adapt_step(
    state: &mut AdaptState,
    sample: &StreamSample,
    config: &AdaptConfig,
    round: usize,
) -> Result<StepReport> {
    let step = state.steps;
    state.steps += 1;
    let plan = plan_step(&state.backbone, &sample.image, config, step)?;
    let queued: Vec<QueueEntry> = state.queue.entries().cloned().collect();
    let total_nodes =
        plan.selection.pixels.len() + queued.iter().map(QueueEntry::nodes).sum::<usize>();

    let mut report = StepReport {
        step,
        round,
        scene: sample.scene,
        domain_id: sample.domain_id.clone(),
        losses: None,
        dice_disc: 0.0,
        dice_cup: 0.0,
        sinkhorn_iterations: 0,
        sinkhorn_residual: 0.0,
        nodes: total_nodes,
        k: 0,
        batch: queued.len() + 1,
        selected: plan.selection.pixels.len(),
        foreground_fallback: plan.selection.fallback,
        k_clamped: false,
        aborted: None,
    };

    let mut prediction = None;
    if total_nodes < 2 {
        report.aborted = Some("fewer than two graph nodes".into());
    } else {
        let snapshot = state.clone();
        match try_update(state, &plan, &queued, config, sample) {
            Ok(u) => {
                prediction = Some(u.prediction);
                report.losses = Some(u.losses);
                report.sinkhorn_iterations = u.solve.iterations;
                report.sinkhorn_residual = u.solve.residual;
                report.nodes = u.nodes;
                report.batch = u.batch;
                report.k = u.problem.k;
                report.k_clamped = u.problem.clamped;
            }
            Err(e) if recoverable(&e) => {
                *state = snapshot;
                report.aborted = Some(e.to_string());
            }
            Err(e) => return Err(e),
        }
    }

    let pred = match prediction {
        Some(p) => p,
        None => state.backbone.forward(&sample.image, None)?.argmax(),
    };
    let [disc, cup] = foreground_dice(&pred, &sample.mask)?;
    report.dice_disc = disc;
    report.dice_cup = cup;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSummary {
    pub steps: usize,
    pub adapted_dice: f64,
    pub baseline_dice: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub rounds: usize,
    pub steps: usize,
    /// Mean over all steps of the mean foreground DSC.
    pub adapted_dice: f64,
    /// Same mean for the frozen source model over one pass of the stream.
    pub baseline_dice: f64,
    pub per_domain: BTreeMap<String, DomainSummary>,
    pub aborted_steps: usize,
    pub fallback_steps: usize,
    pub clamped_steps: usize,
    pub max_residual: f64,
    pub config: AdaptConfig,
}

#[derive(Debug, Clone)]
pub struct StreamRun {
    pub reports: Vec<StepReport>,
    pub summary: RunSummary,
    pub state: AdaptState,
}

/// Mean foreground DSC of the frozen model on each sample.
pub fn baseline_dice(backbone: &Backbone, stream: &[StreamSample]) -> Result<Vec<f64>> {
    stream
        .iter()
        .map(|s| {
            let pred = backbone.forward(&s.image, None)?.argmax();
            let [a, b] = foreground_dice(&pred, &s.mask)?;
            Ok(0.5 * (a + b))
        })
        .collect()
}

/// Adapts along `stream` for `config.rounds` passes without resets.
pub fn run_stream(
    backbone: &Backbone,
    stream: &[StreamSample],
    config: &AdaptConfig,
) -> Result<StreamRun> {
    run_stream_with(backbone, stream, config, |_| {})
}

/// [`run_stream`] with a callback invoked after every step.
pub fn run_stream_with(
    backbone: &Backbone,
    stream: &[StreamSample],
    config: &AdaptConfig,
    on_step: impl FnMut(&StepReport),
) -> Result<StreamRun> {
    config.validate()?;
    let state = AdaptState::new(backbone.clone(), config)?;
    run_stream_from(state, stream, config, on_step)
}

/// Adapts from an existing state. The baseline is the state's backbone as
/// passed in, frozen.
pub fn run_stream_from(
    mut state: AdaptState,
    stream: &[StreamSample],
    config: &AdaptConfig,
    mut on_step: impl FnMut(&StepReport),
) -> Result<StreamRun> {
    config.validate()?;
    if stream.is_empty() {
        return Err(Error::Empty { op: "run_stream" });
    }
    let baseline = baseline_dice(&state.backbone, stream)?;
    let mut reports = Vec::with_capacity(stream.len() * config.rounds);
    for round in 0..config.rounds {
        for sample in stream {
            let report = adapt_step(&mut state, sample, config, round)?;
            on_step(&report);
            reports.push(report);
        }
    }

    let mut domains: BTreeMap<String, (usize, f64, f64, usize)> = BTreeMap::new();
    for (s, b) in stream.iter().zip(&baseline) {
        let e = domains.entry(s.domain_id.clone()).or_default();
        e.2 += b;
        e.3 += 1;
    }
    for r in &reports {
        let e = domains.entry(r.domain_id.clone()).or_default();
        e.0 += 1;
        e.1 += r.mean_dice();
    }
    let per_domain = domains
        .into_iter()
        .map(|(id, (n, adapted, base, nb))| {
            let summary = DomainSummary {
                steps: n,
                adapted_dice: adapted / n.max(1) as f64,
                baseline_dice: base / nb.max(1) as f64,
            };
            (id, summary)
        })
        .collect();
    let summary = RunSummary {
        seed: config.seed,
        rounds: config.rounds,
        steps: reports.len(),
        adapted_dice: reports.iter().map(StepReport::mean_dice).sum::<f64>() / reports.len() as f64,
        baseline_dice: baseline.iter().sum::<f64>() / baseline.len() as f64,
        per_domain,
        aborted_steps: reports.iter().filter(|r| r.aborted.is_some()).count(),
        fallback_steps: reports.iter().filter(|r| r.foreground_fallback).count(),
        clamped_steps: reports.iter().filter(|r| r.k_clamped).count(),
        max_residual: reports
            .iter()
            .map(|r| r.sinkhorn_residual)
            .fold(0.0, f64::max),
        config: config.clone(),
    };
    Ok(StreamRun {
        reports,
        summary,
        state,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::stream::{generate_stream, DomainSpec};

    fn tiny_backbone(seed: u64) -> Backbone {
        Backbone::new(
            BackboneConfig::default(),
            &mut Rng::new(seed, Purpose::Init),
        )
        .unwrap()
    }

    fn tiny_config() -> AdaptConfig {
        AdaptConfig {
            nodes_per_image: 6,
            components: 4,
            graph_dim: 8,
            prompts: 4,
            ..AdaptConfig::default()
        }
    }

    fn tiny_stream(n: usize) -> Vec<StreamSample> {
        let domains = [DomainSpec::source()];
        generate_stream(4, &domains, n, false, 16).unwrap()
    }

    #[test]
    fn defaults_match_protocol() {
        let c = AdaptConfig::default();
        assert_eq!(
            (
                c.lambda,
                c.uncertainty_fraction,
                c.queue_size,
                c.components,
                c.mc_passes,
                c.prompts
            ),
            (0.2, 0.5, 3, 48, 4, 8)
        );
        assert_eq!((c.theta, c.lr, c.momentum, c.tau), (0.05, 0.005, 0.9, 1.0));
        assert_eq!(c.cost_mode, CostMode::Squared);
        c.validate().unwrap();
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad = [
            AdaptConfig {
                mc_passes: 1,
                ..AdaptConfig::default()
            },
            AdaptConfig {
                uncertainty_fraction: 0.0,
                ..AdaptConfig::default()
            },
            AdaptConfig {
                theta: 0.0,
                ..AdaptConfig::default()
            },
            AdaptConfig {
                lambda: -0.1,
                ..AdaptConfig::default()
            },
            AdaptConfig {
                momentum: 1.0,
                ..AdaptConfig::default()
            },
            AdaptConfig {
                density_r: Some(0),
                ..AdaptConfig::default()
            },
            AdaptConfig {
                rounds: 0,
                ..AdaptConfig::default()
            },
        ];
        for c in bad {
            assert!(c.validate().is_err(), "{c:?}");
        }
        let text = r#"{"lambda": 0.1, "unknown": 3}"#;
        assert!(serde_json::from_str::<AdaptConfig>(text).is_err());
    }

    #[test]
    fn parameter_groups_cover_the_list() {
        let state = AdaptState::new(tiny_backbone(0), &tiny_config()).unwrap();
        assert_eq!(state.params().len(), PARAM_COUNT);
        let mut next = 0;
        for (_, r) in PARAM_GROUPS {
            assert_eq!(r.start, next);
            next = r.end;
        }
        assert_eq!(next, PARAM_COUNT);
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let config = AdaptConfig {
            lr: 0.0,
            ..tiny_config()
        };
        let backbone = tiny_backbone(1);
        let stream = tiny_stream(3);
        let mut state = AdaptState::new(backbone.clone(), &config).unwrap();
        let before: Vec<Tensor2> = state.params().into_iter().cloned().collect();
        for s in &stream {
            let r = adapt_step(&mut state, s, &config, 0).unwrap();
            assert!(r.aborted.is_none());
            let pred = backbone.forward(&s.image, None).unwrap().argmax();
            let [a, b] = foreground_dice(&pred, &s.mask).unwrap();
            assert_eq!((r.dice_disc, r.dice_cup), (a, b));
        }
        let after: Vec<Tensor2> = state.params().into_iter().cloned().collect();
        assert_eq!(before, after);
    }

    #[test]
    fn one_optimizer_step_per_sample() {
        let config = AdaptConfig {
            rounds: 2,
            ..tiny_config()
        };
        let run = run_stream(&tiny_backbone(2), &tiny_stream(4), &config).unwrap();
        assert_eq!(run.reports.len(), 8);
        assert_eq!(
            run.state.optimizer.steps,
            8 - run.summary.aborted_steps as u64
        );
        assert_eq!(run.state.steps, 8);
        let batches: Vec<usize> = run.reports.iter().map(|r| r.batch).collect();
        assert_eq!(&batches[..5], &[1, 2, 3, 4, 4]);
        assert_eq!(run.reports[4].round, 1);
    }

    #[test]
    fn summary_is_mean_of_steps() {
        let run = run_stream(&tiny_backbone(3), &tiny_stream(3), &tiny_config()).unwrap();
        let mean = run.reports.iter().map(StepReport::mean_dice).sum::<f64>() / 3.0;
        assert!((run.summary.adapted_dice - mean).abs() < 1e-15);
        assert_eq!(run.summary.per_domain.len(), 1);
    }

    #[test]
    fn masks_do_not_influence_adaptation() {
        let config = tiny_config();
        let clean = tiny_stream(4);
        let mut garbage = clean.clone();
        for (i, s) in garbage.iter_mut().enumerate() {
            s.mask
                .iter_mut()
                .enumerate()
                .for_each(|(j, m)| *m = ((i + j) % 3) as u8);
        }
        let a = run_stream(&tiny_backbone(5), &clean, &config).unwrap();
        let b = run_stream(&tiny_backbone(5), &garbage, &config).unwrap();
        assert_eq!(a.state, b.state);
        for (x, y) in a.reports.iter().zip(&b.reports) {
            assert_eq!(
                x.losses.map(|l| l.total.to_bits()),
                y.losses.map(|l| l.total.to_bits())
            );
            assert_eq!(x.sinkhorn_residual.to_bits(), y.sinkhorn_residual.to_bits());
        }
    }

    fn objective_value(state: &AdaptState, plan: &StepPlan, config: &AdaptConfig) -> f64 {
        let mut tape = Tape::new();
        let leaves: Vec<Var> = state
            .params()
            .into_iter()
            .map(|p| tape.param(p.clone()))
            .collect();
        let g = step_objective(&mut tape, &leaves, plan, &[], config, None).unwrap();
        tape.scalar(g.loss)
    }

    #[test]
    fn repeated_sample_mostly_lowers_the_loss() {
        // Same sample, same node draw and dropout mask, empty queue: only the
        // parameters differ between the two evaluations.
        let config = AdaptConfig {
            queue_size: 0,
            ..tiny_config()
        };
        let mut lower = 0;
        for seed in 0..20 {
            let sample =
                &generate_stream(100 + seed, &[DomainSpec::source()], 1, false, 16).unwrap()[0];
            let mut state = AdaptState::new(tiny_backbone(seed), &config).unwrap();
            let plan = plan_step(&state.backbone, &sample.image, &config, 0).unwrap();
            let first = objective_value(&state, &plan, &config);
            try_update(&mut state, &plan, &[], &config, sample).unwrap();
            let second = objective_value(&state, &plan, &config);
            lower += usize::from(second <= first);
        }
        assert!(lower >= 16, "{lower} of 20");
    }

    #[test]
    fn non_finite_update_rolls_back() {
        let config = AdaptConfig {
            lr: 1e300,
            ..tiny_config()
        };
        let stream = tiny_stream(2);
        let mut state = AdaptState::new(tiny_backbone(6), &config).unwrap();
        let before = state.clone();
        let r = adapt_step(&mut state, &stream[0], &config, 0).unwrap();
        assert!(r.aborted.is_some());
        assert_eq!(state.backbone, before.backbone);
        assert_eq!(state.adapter, before.adapter);
        assert_eq!(state.optimizer, before.optimizer);
        assert_eq!(state.queue, before.queue);
    }
}
