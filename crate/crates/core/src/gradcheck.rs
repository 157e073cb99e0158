//! End-to-end gradient check of the adaptation objective against central
//! differences, per parameter group.

use serde::{Deserialize, Serialize};

use crate::adapt::{
    collect_params, plan_step, step_objective, AdaptConfig, Adapter, StepPlan, PARAM_COUNT,
    PARAM_GROUPS,
};
use crate::backbone::{Backbone, BackboneConfig};
use crate::error::{invalid, Result};
use crate::fd::{fd_oracle, relative_error, tape_gradient};
use crate::nodes::QueueEntry;
use crate::rng::{Purpose, Rng};
use crate::stream::{generate_stream, DomainSpec, NUM_CLASSES};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor2;

pub const GRADCHECK_TOL: f64 = 1e-4;
pub const MAX_NODES: usize = 16;
/// Name of the group that reaches the loss only through the stop-gradient.
pub const PROBE_GROUP: &str = "sg_probe";

const IMAGES: usize = 3;
const IMAGE_SIZE: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckConfig {
    /// Total graph nodes `V`, split over three images.
    pub nodes: usize,
    pub graph_dim: usize,
    pub prompts: usize,
    pub components: usize,
    /// Sinkhorn iterations, run to completion regardless of the residual.
    pub iters: usize,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            nodes: 12,
            graph_dim: 8,
            prompts: 4,
            components: 4,
            iters: 5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupCheck {
    pub group: String,
    pub rel_error: f64,
    pub max_abs_analytic: f64,
    pub max_abs_numeric: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub config: GradcheckConfig,
    pub loss: f64,
    pub nodes: usize,
    pub iterations: usize,
    pub groups: Vec<GroupCheck>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.passed)
    }

    pub fn failing(&self) -> Vec<&str> {
        self.groups
            .iter()
            .filter(|g| !g.passed)
            .map(|g| g.group.as_str())
            .collect()
    }
}

struct Instance {
    config: AdaptConfig,
    params: Vec<Tensor2>,
    plan: StepPlan,
    queued: Vec<QueueEntry>,
}

fn build(check: &GradcheckConfig) -> Result<Instance> {
    if check.nodes < IMAGES * 2 || check.nodes > MAX_NODES {
        return Err(invalid(
            "gradcheck",
            format!(
                "nodes must lie in [{}, {MAX_NODES}], got {}",
                IMAGES * 2,
                check.nodes
            ),
        ));
    }
    if check.iters == 0 {
        return Err(invalid("gradcheck", "iters must be positive"));
    }
    let base = AdaptConfig {
        graph_dim: check.graph_dim,
        prompts: check.prompts,
        components: check.components,
        queue_size: IMAGES - 1,
        sinkhorn_max_iter: check.iters,
        sinkhorn_tol: f64::MIN_POSITIVE,
        seed: check.seed,
        ..AdaptConfig::default()
    };
    base.validate()?;
    let backbone = Backbone::new(
        BackboneConfig::default(),
        &mut Rng::new(check.seed, Purpose::Init),
    )?;
    let adapter = Adapter::new(backbone.config.feature_dim, &base)?;
    let params: Vec<Tensor2> = collect_params(&backbone, &adapter)
        .into_iter()
        .cloned()
        .collect();
    let images = generate_stream(
        check.seed,
        &[DomainSpec::source()],
        IMAGES,
        false,
        IMAGE_SIZE,
    )?;

    let per_image = check.nodes / IMAGES;
    let mut queued = Vec::with_capacity(IMAGES - 1);
    for (i, sample) in images[..IMAGES - 1].iter().enumerate() {
        let config = AdaptConfig {
            nodes_per_image: per_image,
            ..base.clone()
        };
        let plan = plan_step(&backbone, &sample.image, &config, i as u64)?;
        let mut tape = Tape::new();
        let leaves: Vec<Var> = params.iter().map(|p| tape.constant(p.clone())).collect();
        let g = step_objective(&mut tape, &leaves, &plan, &[], &config, None)?;
        queued.push(QueueEntry {
            image_id: sample.scene,
            enhanced: tape.value(g.enhanced).clone(),
            features: tape.value(g.features).clone(),
            query: tape.value(g.query).clone(),
        });
    }
    let config = AdaptConfig {
        nodes_per_image: check.nodes - per_image * (IMAGES - 1),
        ..base
    };
    let plan = plan_step(
        &backbone,
        &images[IMAGES - 1].image,
        &config,
        (IMAGES - 1) as u64,
    )?;
    let total = plan.selection.pixels.len() + queued.iter().map(QueueEntry::nodes).sum::<usize>();
    if total != check.nodes {
        return Err(invalid(
            "gradcheck",
            format!("drew {total} nodes, wanted {}", check.nodes),
        ));
    }
    Ok(Instance {
        config,
        params,
        plan,
        queued,
    })
}

/// Compares reverse-mode gradients of the full step objective with the
/// frozen-barrier central-difference oracle. The extra probe group enters
/// only the stop-gradient targets, so its analytic gradient must be zero.
pub fn gradcheck(check: &GradcheckConfig) -> Result<GradcheckReport> {
    let inst = build(check)?;
    let mut params = inst.params.clone();
    params.push(Tensor2::zeros(check.nodes, NUM_CLASSES));
    let f = |tape: &mut Tape, leaves: &[Var]| {
        let g = step_objective(
            tape,
            &leaves[..PARAM_COUNT],
            &inst.plan,
            &inst.queued,
            &inst.config,
            Some(leaves[PARAM_COUNT]),
        )?;
        Ok(g.loss)
    };
    let (loss, analytic) = tape_gradient(f, &params)?;
    let numeric = fd_oracle(f, &params)?;

    let mut tape = Tape::new();
    let leaves: Vec<Var> = inst
        .params
        .iter()
        .map(|p| tape.constant(p.clone()))
        .collect();
    let g = step_objective(
        &mut tape,
        &leaves,
        &inst.plan,
        &inst.queued,
        &inst.config,
        None,
    )?;

    let max_abs = |ts: &[Tensor2]| ts.iter().map(Tensor2::max_abs).fold(0.0, f64::max);
    let mut groups: Vec<GroupCheck> = PARAM_GROUPS
        .iter()
        .map(|(name, range)| {
            let a = &analytic[range.clone()];
            let n = &numeric[range.clone()];
            let rel_error = relative_error(a, n);
            GroupCheck {
                group: (*name).to_string(),
                rel_error,
                max_abs_analytic: max_abs(a),
                max_abs_numeric: max_abs(n),
                passed: rel_error <= GRADCHECK_TOL,
            }
        })
        .collect();
    let probe = &analytic[PARAM_COUNT..];
    groups.push(GroupCheck {
        group: PROBE_GROUP.to_string(),
        rel_error: relative_error(probe, &numeric[PARAM_COUNT..]),
        max_abs_analytic: max_abs(probe),
        max_abs_numeric: max_abs(&numeric[PARAM_COUNT..]),
        passed: max_abs(probe) == 0.0,
    });
    Ok(GradcheckReport {
        config: *check,
        loss,
        nodes: g.nodes,
        iterations: g.solve.iterations,
        groups,
    })
}
