//! The coarse-to-fine correspondence classifier.
//!
//! A trunk of hybrid attention blocks consumes the raw `[N, 4]`
//! correspondence coordinates (lifted to `C` channels) with the ratio-prior
//! posterior steering the attention. Two refinement stages re-process the
//! trunk features, each using the previous stage's solver weights
//! `tanh(relu(L)) + eps` as its attention prior, so global context is
//! dominated by the previous coarse inliers. Stage guidance tightens from
//! recall-heavy to balanced (default F3 -> F2.5 -> F2).
//!
//! The combined objective adds the per-stage guided classification losses
//! and, after a warmup, a regression loss on the essential matrix solved
//! from the final weights (differentiable through the eigenvector solve).

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Array, DiffError, Graph, NodeId};
use crate::blocks::{
    ha_block, inlier_weight_head, pointwise_linear, BatchNormState, BlockError, HaBlockParams,
    PointwiseLinearParams,
};
use crate::geometry::{
    epipolar_monomials, weighted_eight_point, Correspondence, EssentialMatrix, GeometryError,
};
use crate::loss::{
    guided_loss_step, plain_ce, weighted_ib_ce, ClassWeights, ConfusionState, FnGuidance,
    LossError,
};

/// Floor added to previous-stage weights before they become the refinement
/// attention prior, so an all-zero coarse stage still yields uniform
/// attention instead of degenerate statistics.
pub const REFINE_PRIOR_EPS: f64 = 1e-3;

/// Forward passes reject pairs smaller than this.
pub const MIN_CORRESPONDENCES: usize = 16;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid cascade config: {0}")]
    InvalidConfig(String),
    #[error("need at least {MIN_CORRESPONDENCES} correspondences, got {0}")]
    TooFewCorrespondences(usize),
    #[error(transparent)]
    Block(#[from] BlockError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Architecture and objective weights of the classifier.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CascadeConfig {
    pub trunk_depth: usize,
    pub refine_depth: usize,
    /// F-measure exponents per stage, strictly decreasing (coarse to fine).
    pub stage_guidance: Vec<f64>,
    pub eta1: f64,
    pub eta2: f64,
    pub eta3: f64,
    pub channels: usize,
    pub groups: usize,
    pub reduction: usize,
    /// With `false`, a single-stage trunk of equal total depth replaces the
    /// three-stage architecture (ablation control).
    pub cascade: bool,
}

impl CascadeConfig {
    /// CPU-friendly configuration used by the desk-scale experiments.
    pub fn desk_default() -> Self {
        CascadeConfig {
            trunk_depth: 6,
            refine_depth: 2,
            stage_guidance: vec![3.0, 2.5, 2.0],
            eta1: 0.1,
            eta2: 0.1,
            eta3: 0.1,
            channels: 32,
            groups: 4,
            reduction: 4,
            cascade: true,
        }
    }

    /// The full-scale configuration (12-block trunk, 3-block refinements,
    /// 128 channels).
    pub fn full_preset() -> Self {
        CascadeConfig {
            trunk_depth: 12,
            refine_depth: 3,
            channels: 128,
            ..Self::desk_default()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::InvalidConfig(msg));
        if self.trunk_depth == 0 {
            return bad("trunk depth must be at least 1".into());
        }
        if self.cascade && self.refine_depth == 0 {
            return bad("cascade refinement depth must be at least 1".into());
        }
        if self.stage_guidance.len() != 3 {
            return bad(format!(
                "expected 3 stage guidance values, got {}",
                self.stage_guidance.len()
            ));
        }
        for w in self.stage_guidance.windows(2) {
            if !(w[0] > w[1]) {
                return bad(format!(
                    "stage guidance must strictly decrease, got {:?}",
                    self.stage_guidance
                ));
            }
        }
        if self.stage_guidance.iter().any(|n| !(*n > 0.0)) {
            return bad("guidance exponents must be positive".into());
        }
        if self.eta1 < 0.0 || self.eta2 < 0.0 || self.eta3 < 0.0 {
            return bad("loss weights must be nonnegative".into());
        }
        if self.channels < 2 {
            return bad("need at least 2 channels".into());
        }
        // Channel attention divisibility; mirrors the block-level check.
        if self.groups == 0
            || self.reduction == 0
            || self.channels % self.groups != 0
            || self.channels / self.reduction == 0
            || (self.channels / self.reduction) % self.groups != 0
        {
            return bad(format!(
                "channels {} not divisible into groups {} with reduction {}",
                self.channels, self.groups, self.reduction
            ));
        }
        Ok(())
    }

    /// Blocks in a single-stage network of the same capacity.
    pub fn total_depth(&self) -> usize {
        self.trunk_depth + 2 * self.refine_depth
    }

    pub fn stages(&self) -> usize {
        if self.cascade {
            3
        } else {
            1
        }
    }

    /// Closed-form count of trainable parameter tensors.
    pub fn expected_tensor_count(&self) -> usize {
        let blocks = if self.cascade {
            self.trunk_depth + 2 * self.refine_depth
        } else {
            self.total_depth()
        };
        let heads = self.stages();
        2 + blocks * HaBlockParams::TENSOR_COUNT + heads * 2
    }
}

/// The classifier: parameter arrays plus batch-norm running state.
#[derive(Debug, Clone)]
pub struct CascadeModel {
    pub config: CascadeConfig,
    pub lift: PointwiseLinearParams,
    pub trunk: Vec<HaBlockParams>,
    pub head1: Option<PointwiseLinearParams>,
    pub refine1: Vec<HaBlockParams>,
    pub head2: Option<PointwiseLinearParams>,
    pub refine2: Vec<HaBlockParams>,
    pub head3: PointwiseLinearParams,
    pub bn_states: Vec<BatchNormState>,
}

impl CascadeModel {
    /// Deterministic initialization from a seed.
    pub fn build(config: CascadeConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let c = config.channels;
        let (g, r) = (config.groups, config.reduction);
        let mut blocks = |count: usize, rng: &mut ChaCha20Rng| -> Result<Vec<_>, ModelError> {
            (0..count)
                .map(|_| HaBlockParams::init(c, g, r, rng).map_err(ModelError::from))
                .collect()
        };
        let (trunk_count, refine_count) = if config.cascade {
            (config.trunk_depth, config.refine_depth)
        } else {
            (config.total_depth(), 0)
        };
        let lift = PointwiseLinearParams::init(4, c, true, &mut rng);
        let trunk = blocks(trunk_count, &mut rng)?;
        let head1 = config
            .cascade
            .then(|| PointwiseLinearParams::init(c, 1, true, &mut rng));
        let refine1 = blocks(refine_count, &mut rng)?;
        let head2 = config
            .cascade
            .then(|| PointwiseLinearParams::init(c, 1, true, &mut rng));
        let refine2 = blocks(refine_count, &mut rng)?;
        let head3 = PointwiseLinearParams::init(c, 1, true, &mut rng);
        let total_blocks = trunk_count + 2 * refine_count;
        Ok(CascadeModel {
            config,
            lift,
            trunk,
            head1,
            refine1,
            head2,
            refine2,
            head3,
            bn_states: (0..total_blocks).map(|_| BatchNormState::init(c)).collect(),
        })
    }

    /// Trainable tensors in canonical (binding) order.
    pub fn tensors(&self) -> Vec<&Array> {
        let mut out = self.lift.tensors();
        for b in &self.trunk {
            out.extend(b.tensors());
        }
        if let Some(h) = &self.head1 {
            out.extend(h.tensors());
        }
        for b in &self.refine1 {
            out.extend(b.tensors());
        }
        if let Some(h) = &self.head2 {
            out.extend(h.tensors());
        }
        for b in &self.refine2 {
            out.extend(b.tensors());
        }
        out.extend(self.head3.tensors());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Array> {
        let mut out = self.lift.tensors_mut();
        for b in &mut self.trunk {
            out.extend(b.tensors_mut());
        }
        if let Some(h) = &mut self.head1 {
            out.extend(h.tensors_mut());
        }
        for b in &mut self.refine1 {
            out.extend(b.tensors_mut());
        }
        if let Some(h) = &mut self.head2 {
            out.extend(h.tensors_mut());
        }
        for b in &mut self.refine2 {
            out.extend(b.tensors_mut());
        }
        out.extend(self.head3.tensors_mut());
        out
    }

    /// Forward pass over one pair.
    ///
    /// `bayes_prior` feeds the trunk attention; refinement stages derive
    /// their priors from the previous stage's logits unless `frozen_refine`
    /// supplies them (gradient checks re-evaluate the same function, so they
    /// freeze the priors of the base point). `train` collects per-pair
    /// batch-norm statistics for the running-state update.
    pub fn forward(
        &self,
        coords: &Array,
        bayes_prior: &[f64],
        train: bool,
        frozen_refine: Option<&[Vec<f64>]>,
    ) -> Result<ForwardPass, ModelError> {
        let n = coords.shape()[0];
        assert_eq!(coords.shape()[1], 4, "coordinates must be [N, 4]");
        if n < MIN_CORRESPONDENCES {
            return Err(ModelError::TooFewCorrespondences(n));
        }
        if bayes_prior.len() != n {
            return Err(ModelError::Block(BlockError::PriorLengthMismatch {
                expected: n,
                got: bayes_prior.len(),
            }));
        }
        let mut g = Graph::new();
        let coords_node = g.constant(coords.clone());
        let lift_nodes = self.lift.bind(&mut g);
        let trunk_nodes: Vec<_> = self.trunk.iter().map(|b| b.bind(&mut g)).collect();
        let head1_nodes = self.head1.as_ref().map(|h| h.bind(&mut g));
        let refine1_nodes: Vec<_> = self.refine1.iter().map(|b| b.bind(&mut g)).collect();
        let head2_nodes = self.head2.as_ref().map(|h| h.bind(&mut g));
        let refine2_nodes: Vec<_> = self.refine2.iter().map(|b| b.bind(&mut g)).collect();
        let head3_nodes = self.head3.bind(&mut g);

        let (groups, reduction) = (self.config.groups, self.config.reduction);
        let mut bn_stats: Vec<Option<(Array, Array)>> = Vec::with_capacity(self.bn_states.len());
        let mut bn_index = 0usize;
        let mut used_priors: Vec<Vec<f64>> = vec![bayes_prior.to_vec()];

        let mut f = pointwise_linear(&mut g, coords_node, &lift_nodes);
        for nodes in &trunk_nodes {
            let (out, stats) = ha_block(
                &mut g,
                f,
                bayes_prior,
                nodes,
                groups,
                reduction,
                &self.bn_states[bn_index],
                train,
            )?;
            f = out;
            bn_stats.push(stats);
            bn_index += 1;
        }

        let mut stage_logits = Vec::with_capacity(self.config.stages());
        if self.config.cascade {
            let logits1 = pointwise_linear(&mut g, f, head1_nodes.as_ref().unwrap());
            stage_logits.push(logits1);
            let prior2 = match frozen_refine {
                Some(fr) => fr[0].clone(),
                None => refinement_prior(&g, logits1),
            };
            for nodes in &refine1_nodes {
                let (out, stats) = ha_block(
                    &mut g,
                    f,
                    &prior2,
                    nodes,
                    groups,
                    reduction,
                    &self.bn_states[bn_index],
                    train,
                )?;
                f = out;
                bn_stats.push(stats);
                bn_index += 1;
            }
            used_priors.push(prior2);

            let logits2 = pointwise_linear(&mut g, f, head2_nodes.as_ref().unwrap());
            stage_logits.push(logits2);
            let prior3 = match frozen_refine {
                Some(fr) => fr[1].clone(),
                None => refinement_prior(&g, logits2),
            };
            for nodes in &refine2_nodes {
                let (out, stats) = ha_block(
                    &mut g,
                    f,
                    &prior3,
                    nodes,
                    groups,
                    reduction,
                    &self.bn_states[bn_index],
                    train,
                )?;
                f = out;
                bn_stats.push(stats);
                bn_index += 1;
            }
            used_priors.push(prior3);
        }
        let logits_final = pointwise_linear(&mut g, f, &head3_nodes);
        stage_logits.push(logits_final);

        Ok(ForwardPass {
            graph: g,
            stage_logits,
            bn_stats,
            used_priors,
        })
    }

    /// Eval-mode inference: stage logits, solver weights and the essential
    /// matrix estimate (when at least eight weights are positive).
    pub fn infer(
        &self,
        correspondences: &[Correspondence],
        bayes_prior: &[f64],
    ) -> Result<CascadeOutput, ModelError> {
        let coords = coords_array(correspondences);
        let mut pass = self.forward(&coords, bayes_prior, false, None)?;
        let final_logits = *pass.stage_logits.last().expect("at least one stage");
        let weights_node = inlier_weight_head(&mut pass.graph, final_logits);
        let final_weights = pass.graph.eval(weights_node)?.data().to_vec();
        let stage_logits: Vec<Vec<f64>> = pass
            .stage_logits
            .iter()
            .map(|&id| pass.graph.value(id).data().to_vec())
            .collect();
        let e_hat = weighted_eight_point(correspondences, &final_weights).ok();
        Ok(CascadeOutput {
            stage_logits,
            final_weights,
            e_hat,
        })
    }
}

/// Previous-stage solver weights, floored, as the next attention prior.
fn refinement_prior(g: &Graph, logits: NodeId) -> Vec<f64> {
    g.value(logits)
        .data()
        .iter()
        .map(|&l| l.max(0.0).tanh() + REFINE_PRIOR_EPS)
        .collect()
}

/// `[N, 4]` coordinate array from correspondences.
pub fn coords_array(correspondences: &[Correspondence]) -> Array {
    let mut data = Vec::with_capacity(correspondences.len() * 4);
    for c in correspondences {
        data.extend_from_slice(&[c.x1, c.y1, c.x2, c.y2]);
    }
    Array::new(vec![correspondences.len(), 4], data)
}

/// One forward pass: the live graph plus the per-stage logit nodes.
pub struct ForwardPass {
    pub graph: Graph,
    pub stage_logits: Vec<NodeId>,
    /// Per-block batch statistics when run in train mode.
    pub bn_stats: Vec<Option<(Array, Array)>>,
    /// Attention priors actually used: the ratio posterior, then one per
    /// refinement stage.
    pub used_priors: Vec<Vec<f64>>,
}

/// Inference result on one pair.
#[derive(Debug, Clone)]
pub struct CascadeOutput {
    pub stage_logits: Vec<Vec<f64>>,
    pub final_weights: Vec<f64>,
    pub e_hat: Option<EssentialMatrix>,
}

/// How each stage's classification term is weighted.
#[derive(Debug, Clone)]
pub enum StageLossSpec {
    /// Re-solve the class weights from this batch's confusion state.
    Guided(FnGuidance),
    /// Fixed class weights (0.5/0.5 is the balanced baseline).
    FixedIb(ClassWeights),
    /// Plain cross entropy over all samples.
    PlainCe,
}

/// Combined objective of one pair, with per-stage diagnostics.
pub struct TotalLossParts {
    pub total: NodeId,
    pub stage_weights: Vec<Option<ClassWeights>>,
    pub stage_states: Vec<ConfusionState>,
    pub stage_loss_values: Vec<f64>,
    pub regression_value: Option<f64>,
}

/// Builds `l_cls_final + eta1 l_cls1 + eta2 l_cls2 + eta3(iter) l_reg` on
/// the pass's graph. The regression term activates once `iteration` reaches
/// `eta3_warmup` and differentiates through the weighted eight-point solve
/// (pre-projection unit eigenvector against the ground truth).
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    pass: &mut ForwardPass,
    labels: &[bool],
    correspondences: &[Correspondence],
    gt_e: &EssentialMatrix,
    config: &CascadeConfig,
    iteration: usize,
    eta3_warmup: usize,
    specs: &[StageLossSpec],
) -> Result<TotalLossParts, ModelError> {
    assert_eq!(
        specs.len(),
        pass.stage_logits.len(),
        "one loss spec per stage"
    );
    let g = &mut pass.graph;
    let mut stage_weights = Vec::with_capacity(specs.len());
    let mut stage_states = Vec::with_capacity(specs.len());
    let mut stage_nodes = Vec::with_capacity(specs.len());
    let mut stage_loss_values = Vec::with_capacity(specs.len());
    for (&logits, spec) in pass.stage_logits.iter().zip(specs.iter()) {
        let probs = g.sigmoid(logits);
        let (node, weights) = match spec {
            StageLossSpec::Guided(guidance) => {
                let step = guided_loss_step(g, probs, labels, *guidance)?;
                stage_states.push(step.state);
                (step.loss, Some(step.weights))
            }
            StageLossSpec::FixedIb(w) => {
                let values: Vec<f64> = g.value(probs).data().to_vec();
                stage_states.push(crate::loss::confusion_from_probs(&values, labels)?);
                (weighted_ib_ce(g, probs, labels, w)?, Some(*w))
            }
            StageLossSpec::PlainCe => {
                let values: Vec<f64> = g.value(probs).data().to_vec();
                stage_states.push(crate::loss::confusion_from_probs(&values, labels)?);
                (plain_ce(g, probs, labels), None)
            }
        };
        // Stage losses come out as [1, 1] matmul results; flatten to [1] so
        // they combine with the regression term.
        let node = g.reduce_sum(node, None);
        stage_loss_values.push(g.value(node).data()[0]);
        stage_nodes.push(node);
        stage_weights.push(weights);
    }

    // Final-stage loss enters unweighted; earlier stages take eta1/eta2.
    let final_node = *stage_nodes.last().unwrap();
    let mut total = final_node;
    if config.cascade {
        let s1 = g.scale(stage_nodes[0], config.eta1);
        let s2 = g.scale(stage_nodes[1], config.eta2);
        let partial = g.add(s1, s2);
        total = g.add(total, partial);
    }

    let mut regression_value = None;
    if config.eta3 > 0.0 && iteration >= eta3_warmup {
        let final_logits = *pass.stage_logits.last().unwrap();
        let l_reg = essential_regression_node(g, final_logits, correspondences, gt_e);
        regression_value = Some(g.value(l_reg).data()[0]);
        let weighted = g.scale(l_reg, config.eta3);
        total = g.add(total, weighted);
    }

    Ok(TotalLossParts {
        total,
        stage_weights,
        stage_states,
        stage_loss_values,
        regression_value,
    })
}

/// Differentiable essential-matrix regression: solver weights from the
/// logits scale the epipolar constraint rows, the unit eigenvector of the
/// weighted normal matrix approximates the essential matrix, and the loss
/// is the squared distance to the ground truth with the sign branch chosen
/// at the current value (ties take the minus branch).
fn essential_regression_node(
    g: &mut Graph,
    final_logits: NodeId,
    correspondences: &[Correspondence],
    gt_e: &EssentialMatrix,
) -> NodeId {
    let n = correspondences.len();
    let mut m_data = Vec::with_capacity(n * 9);
    for c in correspondences {
        m_data.extend_from_slice(&epipolar_monomials(c));
    }
    let mut mt_data = vec![0.0; 9 * n];
    for (i, row) in m_data.chunks_exact(9).enumerate() {
        for (j, &v) in row.iter().enumerate() {
            mt_data[j * n + i] = v;
        }
    }
    let m = g.constant(Array::new(vec![n, 9], m_data));
    let mt = g.constant(Array::new(vec![9, n], mt_data));
    let w = inlier_weight_head(g, final_logits);
    let wb = g.broadcast(w, &[n, 9]);
    let weighted_rows = g.mul(wb, m);
    let normal = g.matmul(mt, weighted_rows);
    let e = g.min_eigvec(normal);
    let gt_flat = gt_e.matrix().to_flat();
    let e_val = g.value(e).data();
    let d_minus: f64 = e_val
        .iter()
        .zip(gt_flat.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    let d_plus: f64 = e_val
        .iter()
        .zip(gt_flat.iter())
        .map(|(a, b)| (a + b) * (a + b))
        .sum();
    let target = if d_plus < d_minus {
        gt_flat.map(|v| -v)
    } else {
        gt_flat
    };
    let t = g.constant(Array::new(vec![9], target.to_vec()));
    let diff = g.sub(e, t);
    let sq = g.mul(diff, diff);
    g.reduce_sum(sq, None)
}
