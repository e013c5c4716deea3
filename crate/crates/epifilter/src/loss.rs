//! F-measure guided class weighting for binary cross entropy.
//!
//! The classifier is trained with a class-balanced cross entropy whose
//! positive/negative weights `(lambda, mu)` are re-solved every batch so
//! that, in the space of confusion counts (X false negatives, Y false
//! positives), the loss gradient points exactly opposite the F-measure
//! gradient. A drop in loss then cannot decrease the F-measure.
//!
//! The solver enforces the ratio condition
//! `dF/dX / dF/dY = dl/dX / dl/dY` with `lambda + mu = 1`, where the loss
//! partials follow from the per-category average losses:
//! `dl/dX = lambda/N_pos (l_FN - l_TP)`, `dl/dY = mu/N_neg (l_FP - l_TN)`.
//! F-measure partials use unit-step forward differences; the closed-form
//! chain-rule partials exist as an independent cross-check.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Array, DiffError, Graph, NodeId, LOG_CLAMP};

/// Average cross entropy assigned to an empty category: the loss of a
/// sample sitting exactly on the decision boundary.
pub const EMPTY_CATEGORY_LOSS: f64 = std::f64::consts::LN_2;

/// Loss gaps at or below this are treated as degenerate and fall back to
/// balanced weights.
pub const MIN_LOSS_GAP: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("probability {0} outside [0, 1]")]
    ProbabilityOutOfRange(f64),
    #[error("confusion counts are inconsistent: {0}")]
    InvalidState(String),
    #[error("guidance exponent must be positive, got {0}")]
    InvalidGuidance(f64),
    #[error("batch contains a single class; balanced cross entropy undefined")]
    SingleClass,
    #[error("degenerate confusion state: no true positives")]
    DegenerateState,
    #[error(transparent)]
    Diff(#[from] DiffError),
}

/// The F-measure exponent `n`; `n > 1` favours recall, `n < 1` precision.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FnGuidance(f64);

impl FnGuidance {
    pub fn new(n: f64) -> Result<Self, LossError> {
        if !(n > 0.0) || !n.is_finite() {
            return Err(LossError::InvalidGuidance(n));
        }
        Ok(FnGuidance(n))
    }

    pub fn n(&self) -> f64 {
        self.0
    }
}

/// Confusion counts of one classified batch element.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConfusionState {
    pub n_pos: usize,
    pub n_neg: usize,
    /// X: positives classified negative.
    pub false_neg: usize,
    /// Y: negatives classified positive.
    pub false_pos: usize,
}

impl ConfusionState {
    pub fn new(
        n_pos: usize,
        n_neg: usize,
        false_neg: usize,
        false_pos: usize,
    ) -> Result<Self, LossError> {
        if false_neg > n_pos {
            return Err(LossError::InvalidState(format!(
                "false negatives {false_neg} exceed positives {n_pos}"
            )));
        }
        if false_pos > n_neg {
            return Err(LossError::InvalidState(format!(
                "false positives {false_pos} exceed negatives {n_neg}"
            )));
        }
        Ok(ConfusionState {
            n_pos,
            n_neg,
            false_neg,
            false_pos,
        })
    }

    pub fn true_pos(&self) -> usize {
        self.n_pos - self.false_neg
    }

    pub fn true_neg(&self) -> usize {
        self.n_neg - self.false_pos
    }

    pub fn precision(&self) -> f64 {
        let tp = self.true_pos();
        if tp == 0 {
            return 0.0;
        }
        tp as f64 / (tp + self.false_pos) as f64
    }

    pub fn recall(&self) -> f64 {
        let tp = self.true_pos();
        if tp == 0 {
            return 0.0;
        }
        tp as f64 / self.n_pos as f64
    }
}

/// Average cross-entropy terms of the four confusion categories, with
/// emptiness flags. Empty categories take [`EMPTY_CATEGORY_LOSS`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CategoryLosses {
    pub l_tp: f64,
    pub l_tn: f64,
    pub l_fp: f64,
    pub l_fn: f64,
    pub tp_empty: bool,
    pub tn_empty: bool,
    pub fp_empty: bool,
    pub fn_empty: bool,
}

/// Positive/negative class weights with `lambda + mu = 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub lambda: f64,
    pub mu: f64,
}

impl ClassWeights {
    pub fn balanced() -> Self {
        ClassWeights {
            lambda: 0.5,
            mu: 0.5,
        }
    }

    fn from_lambda(lambda: f64) -> Self {
        ClassWeights {
            lambda,
            mu: 1.0 - lambda,
        }
    }
}

/// `F_n = (1 + n^2) P R / (n^2 P + R)`; zero when there are no true
/// positives (the P = R = 0 convention).
pub fn fn_measure(state: &ConfusionState, guidance: FnGuidance) -> f64 {
    let tp = state.true_pos();
    if tp == 0 {
        return 0.0;
    }
    let p = state.precision();
    let r = state.recall();
    let n2 = guidance.n() * guidance.n();
    (1.0 + n2) * p * r / (n2 * p + r)
}

/// Threshold-0.5 confusion counts: a sample is predicted positive iff its
/// probability is strictly greater than 0.5.
pub fn confusion_from_probs(
    probs: &[f64],
    labels: &[bool],
) -> Result<ConfusionState, LossError> {
    assert_eq!(probs.len(), labels.len(), "one label per probability");
    let mut state = ConfusionState {
        n_pos: 0,
        n_neg: 0,
        false_neg: 0,
        false_pos: 0,
    };
    for (&p, &label) in probs.iter().zip(labels.iter()) {
        if !(0.0..=1.0).contains(&p) {
            return Err(LossError::ProbabilityOutOfRange(p));
        }
        let predicted = p > 0.5;
        if label {
            state.n_pos += 1;
            if !predicted {
                state.false_neg += 1;
            }
        } else {
            state.n_neg += 1;
            if predicted {
                state.false_pos += 1;
            }
        }
    }
    Ok(state)
}

/// Average `-log` cross-entropy terms per confusion category.
pub fn category_average_losses(probs: &[f64], labels: &[bool]) -> CategoryLosses {
    assert_eq!(probs.len(), labels.len(), "one label per probability");
    let mut sums = [0.0f64; 4]; // tp, fn, tn, fp
    let mut counts = [0usize; 4];
    for (&p, &label) in probs.iter().zip(labels.iter()) {
        let predicted = p > 0.5;
        let (idx, loss) = match (label, predicted) {
            (true, true) => (0, -p.max(LOG_CLAMP).ln()),
            (true, false) => (1, -p.max(LOG_CLAMP).ln()),
            (false, false) => (2, -(1.0 - p).max(LOG_CLAMP).ln()),
            (false, true) => (3, -(1.0 - p).max(LOG_CLAMP).ln()),
        };
        sums[idx] += loss;
        counts[idx] += 1;
    }
    let avg = |i: usize| {
        if counts[i] == 0 {
            EMPTY_CATEGORY_LOSS
        } else {
            sums[i] / counts[i] as f64
        }
    };
    CategoryLosses {
        l_tp: avg(0),
        l_fn: avg(1),
        l_tn: avg(2),
        l_fp: avg(3),
        tp_empty: counts[0] == 0,
        fn_empty: counts[1] == 0,
        tn_empty: counts[2] == 0,
        fp_empty: counts[3] == 0,
    }
}

/// Unit-step forward differences of the F-measure in the confusion counts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FnPartials {
    pub df_x: f64,
    pub df_y: f64,
    /// Set when the +1 step would leave the valid count range; the partial
    /// is 0 by convention.
    pub x_degenerate: bool,
    pub y_degenerate: bool,
}

/// `dF/dX ~ F(X+1, Y) - F(X, Y)` and `dF/dY ~ F(X, Y+1) - F(X, Y)`.
pub fn numerical_fn_partials(state: &ConfusionState, guidance: FnGuidance) -> FnPartials {
    let base = fn_measure(state, guidance);
    let (df_x, x_degenerate) = if state.false_neg + 1 <= state.n_pos {
        let shifted = ConfusionState {
            false_neg: state.false_neg + 1,
            ..*state
        };
        (fn_measure(&shifted, guidance) - base, false)
    } else {
        (0.0, true)
    };
    let (df_y, y_degenerate) = if state.false_pos + 1 <= state.n_neg {
        let shifted = ConfusionState {
            false_pos: state.false_pos + 1,
            ..*state
        };
        (fn_measure(&shifted, guidance) - base, false)
    } else {
        (0.0, true)
    };
    FnPartials {
        df_x,
        df_y,
        x_degenerate,
        y_degenerate,
    }
}

/// Closed-form chain-rule partials of the F-measure; cross-check oracle for
/// [`numerical_fn_partials`]. Errors when there are no true positives.
pub fn analytic_fn_partials(
    state: &ConfusionState,
    guidance: FnGuidance,
) -> Result<(f64, f64), LossError> {
    let tp = state.true_pos();
    if tp == 0 {
        return Err(LossError::DegenerateState);
    }
    let p = state.precision();
    let r = state.recall();
    let n2 = guidance.n() * guidance.n();
    let denom = (n2 * p + r) * (n2 * p + r);
    let df_p = (1.0 + n2) * r * r / denom;
    let df_r = n2 * (1.0 + n2) * p * p / denom;
    let predicted_pos = (tp + state.false_pos) as f64;
    let dp_x = -(state.false_pos as f64) / (predicted_pos * predicted_pos);
    let dp_y = -(tp as f64) / (predicted_pos * predicted_pos);
    let dr_x = -1.0 / state.n_pos as f64;
    // dR/dY = 0: recall does not depend on false positives.
    Ok((df_p * dp_x + df_r * dr_x, df_p * dp_y))
}

/// Loss partials in the confusion counts at given class weights:
/// `dl/dX = lambda/N_pos (l_FN - l_TP)`, `dl/dY = mu/N_neg (l_FP - l_TN)`.
pub fn loss_partials(
    state: &ConfusionState,
    losses: &CategoryLosses,
    weights: &ClassWeights,
) -> (f64, f64) {
    let dl_x = weights.lambda / state.n_pos as f64 * (losses.l_fn - losses.l_tp);
    let dl_y = weights.mu / state.n_neg as f64 * (losses.l_fp - losses.l_tn);
    (dl_x, dl_y)
}

/// Solves `(lambda, mu)` so the ratio condition holds:
/// `lambda/mu = (dF_X/dF_Y) (N_pos/N_neg) (l_FP - l_TN)/(l_FN - l_TP)`.
/// Degenerate inputs (vanishing F-partials, non-positive loss gaps, empty
/// categories pushing a gap to zero) fall back to balanced weights so
/// training can proceed through perfect or single-category iterations.
pub fn solve_class_weights(
    state: &ConfusionState,
    losses: &CategoryLosses,
    guidance: FnGuidance,
) -> ClassWeights {
    let partials = numerical_fn_partials(state, guidance);
    let gap_x = losses.l_fn - losses.l_tp;
    let gap_y = losses.l_fp - losses.l_tn;
    if partials.df_x == 0.0 || partials.df_y == 0.0 {
        return ClassWeights::balanced();
    }
    if gap_x <= MIN_LOSS_GAP || gap_y <= MIN_LOSS_GAP {
        return ClassWeights::balanced();
    }
    if losses.fn_empty && losses.fp_empty {
        // Perfect classification: both mistake-cost gaps are synthetic.
        return ClassWeights::balanced();
    }
    if state.n_pos == 0 || state.n_neg == 0 {
        return ClassWeights::balanced();
    }
    let ratio = partials.df_x / partials.df_y;
    let k = ratio * (state.n_pos as f64 / state.n_neg as f64) * (gap_y / gap_x);
    if !k.is_finite() || k <= 0.0 {
        return ClassWeights::balanced();
    }
    ClassWeights::from_lambda(k / (1.0 + k))
}

fn class_masks(labels: &[bool]) -> (Array, Array, usize, usize) {
    let n = labels.len();
    let mut pos = vec![0.0; n];
    let mut neg = vec![0.0; n];
    let mut n_pos = 0;
    for (i, &l) in labels.iter().enumerate() {
        if l {
            pos[i] = 1.0;
            n_pos += 1;
        } else {
            neg[i] = 1.0;
        }
    }
    (
        Array::new(vec![1, n], pos),
        Array::new(vec![1, n], neg),
        n_pos,
        n - n_pos,
    )
}

/// Class-balanced cross entropy as a differentiable graph node:
/// `-(lambda * mean over positives of log y + mu * mean over negatives of
/// log(1 - y))`. `probs` must be an `[N, 1]` node; the weights enter as
/// constants so gradients flow only to the probabilities.
pub fn weighted_ib_ce(
    g: &mut Graph,
    probs: NodeId,
    labels: &[bool],
    weights: &ClassWeights,
) -> Result<NodeId, LossError> {
    let n = labels.len();
    assert_eq!(
        g.value(probs).shape(),
        &[n, 1],
        "probabilities must be an [N, 1] node"
    );
    let (mask_pos, mask_neg, n_pos, n_neg) = class_masks(labels);
    if n_pos == 0 || n_neg == 0 {
        return Err(LossError::SingleClass);
    }
    let mask_pos = g.constant(mask_pos);
    let mask_neg = g.constant(mask_neg);
    let log_p = g.log(probs);
    let pos_sum = g.matmul(mask_pos, log_p);
    let one_minus = g.one_minus(probs);
    let log_q = g.log(one_minus);
    let neg_sum = g.matmul(mask_neg, log_q);
    let pos_term = g.scale(pos_sum, weights.lambda / n_pos as f64);
    let neg_term = g.scale(neg_sum, weights.mu / n_neg as f64);
    let total = g.add(pos_term, neg_term);
    Ok(g.scale(total, -1.0))
}

/// Plain cross entropy, averaged over all samples.
pub fn plain_ce(g: &mut Graph, probs: NodeId, labels: &[bool]) -> NodeId {
    let n = labels.len();
    assert_eq!(
        g.value(probs).shape(),
        &[n, 1],
        "probabilities must be an [N, 1] node"
    );
    let (mask_pos, mask_neg, _, _) = class_masks(labels);
    let mask_pos = g.constant(mask_pos);
    let mask_neg = g.constant(mask_neg);
    let log_p = g.log(probs);
    let pos_sum = g.matmul(mask_pos, log_p);
    let one_minus = g.one_minus(probs);
    let log_q = g.log(one_minus);
    let neg_sum = g.matmul(mask_neg, log_q);
    let total = g.add(pos_sum, neg_sum);
    g.scale(total, -1.0 / n as f64)
}

/// Result of one guided weighting step on a batch element.
#[derive(Debug)]
pub struct GuidedStep {
    pub loss: NodeId,
    pub weights: ClassWeights,
    pub state: ConfusionState,
    pub losses: CategoryLosses,
}

/// One pass of the per-batch-element weighting: classify at 0.5, average
/// the category losses, solve the weights, and build the balanced cross
/// entropy at those (constant) weights.
pub fn guided_loss_step(
    g: &mut Graph,
    probs: NodeId,
    labels: &[bool],
    guidance: FnGuidance,
) -> Result<GuidedStep, LossError> {
    let values: Vec<f64> = g.value(probs).data().to_vec();
    let state = confusion_from_probs(&values, labels)?;
    let losses = category_average_losses(&values, labels);
    let weights = solve_class_weights(&state, &losses, guidance);
    let loss = weighted_ib_ce(g, probs, labels, &weights)?;
    Ok(GuidedStep {
        loss,
        weights,
        state,
        losses,
    })
}

/// Outcome of the standalone theory verification run.
#[derive(Debug, Clone, Serialize)]
pub struct TheoryReport {
    pub trials: usize,
    pub directions_per_trial: usize,
    /// Max relative residual of the ratio condition at solved weights.
    pub max_ratio_residual: f64,
    /// Max of `dloss * dF` over random directions (must stay <= ~0).
    pub max_antiparallel_product: f64,
    pub weight_sum_violations: usize,
    pub ordering_violations: usize,
    pub sign_violations: usize,
    pub fallback_count: usize,
}

/// Randomized verification of the guided-weighting guarantees: the ratio
/// condition residual, anti-parallelism of loss and F-measure gradients,
/// the category loss ordering, and the partial-derivative sign constraints.
pub fn verify_theory(trials: usize, directions: usize, seed: u64) -> TheoryReport {
    use rand::Rng;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed);
    let guidance_pool = [1.0, 2.0, 2.5, 3.0];
    let mut report = TheoryReport {
        trials,
        directions_per_trial: directions,
        max_ratio_residual: 0.0,
        max_antiparallel_product: f64::NEG_INFINITY,
        weight_sum_violations: 0,
        ordering_violations: 0,
        sign_violations: 0,
        fallback_count: 0,
    };
    for _ in 0..trials {
        let n_pos = rng.gen_range(10..=100_000usize);
        let n_neg = rng.gen_range(10..=100_000usize);
        // Non-degenerate: at least one true positive and room for a +1 step.
        let false_neg = rng.gen_range(0..n_pos);
        let false_pos = rng.gen_range(0..n_neg);
        let state = ConfusionState::new(n_pos, n_neg, false_neg, false_pos).unwrap();
        let guidance = FnGuidance::new(guidance_pool[rng.gen_range(0..guidance_pool.len())])
            .unwrap();
        // Random positive loss gaps on top of a base true-category loss.
        let l_tp = rng.gen_range(0.0..0.5);
        let l_tn = rng.gen_range(0.0..0.5);
        let losses = CategoryLosses {
            l_tp,
            l_tn,
            l_fn: l_tp + rng.gen_range(0.05..2.0),
            l_fp: l_tn + rng.gen_range(0.05..2.0),
            tp_empty: false,
            tn_empty: false,
            fp_empty: false,
            fn_empty: false,
        };
        if losses.l_fn <= losses.l_tp || losses.l_fp <= losses.l_tn {
            report.ordering_violations += 1;
        }
        let weights = solve_class_weights(&state, &losses, guidance);
        if weights.lambda + weights.mu != 1.0
            || !(0.0..=1.0).contains(&weights.lambda)
        {
            report.weight_sum_violations += 1;
        }
        if weights == ClassWeights::balanced() {
            // Could be a legitimate solve landing on 0.5; treat as fallback
            // only when a degeneracy trigger is present.
            let partials = numerical_fn_partials(&state, guidance);
            if partials.df_x == 0.0 || partials.df_y == 0.0 {
                report.fallback_count += 1;
                continue;
            }
        }
        let partials = numerical_fn_partials(&state, guidance);
        if partials.df_x > 0.0 || partials.df_y > 0.0 {
            report.sign_violations += 1;
        }
        let (dl_x, dl_y) = loss_partials(&state, &losses, &weights);
        if dl_x <= 0.0 || dl_y <= 0.0 {
            report.sign_violations += 1;
        }
        if partials.df_y != 0.0 && dl_y != 0.0 {
            let lhs = partials.df_x / partials.df_y;
            let rhs = dl_x / dl_y;
            let residual = (lhs - rhs).abs() / lhs.abs().max(1e-300);
            report.max_ratio_residual = report.max_ratio_residual.max(residual);
        }
        for _ in 0..directions {
            let dx = rng.gen_range(-1.0..1.0);
            let dy = rng.gen_range(-1.0..1.0);
            let dloss = dl_x * dx + dl_y * dy;
            let dfn = partials.df_x * dx + partials.df_y * dy;
            report.max_antiparallel_product =
                report.max_antiparallel_product.max(dloss * dfn);
        }
    }
    report
}
