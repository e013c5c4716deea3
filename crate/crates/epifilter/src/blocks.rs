//! Differentiable building blocks for the correspondence classifier.
//!
//! All blocks operate on `[N, C]` feature nodes (N correspondences, C
//! channels) and are permutation equivariant over the N points (exactly for
//! per-point ops, up to floating-point reassociation in the cross-point
//! reductions). Parameters live as plain [`Array`]s between iterations and
//! are bound into a fresh graph per forward pass.
//!
//! Batch normalization always normalizes by running statistics, which the
//! trainer updates from per-pair batch statistics with momentum 0.9.
//! Normalizing by this pair's own statistics would algebraically cancel the
//! attention-weighted statistics of the preceding normalization.

use rand::Rng;
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use crate::autodiff::{Array, Graph, NodeId};

/// Variance floor used by every normalization in the network.
pub const NORM_EPS: f64 = 1e-3;
/// Prior probabilities are clamped into `[PRIOR_CLAMP, 1 - PRIOR_CLAMP]`
/// before the log-odds fusion.
pub const PRIOR_CLAMP: f64 = 1e-6;
/// Momentum of the batch-norm running statistics.
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Error)]
pub enum BlockError {
    #[error("normalization needs at least 2 points, got {0}")]
    TooFewPoints(usize),
    #[error("prior length {got} does not match {expected} points")]
    PriorLengthMismatch { expected: usize, got: usize },
    #[error(
        "channels {channels} not divisible into groups {groups} with reduction {reduction}"
    )]
    Divisibility {
        channels: usize,
        groups: usize,
        reduction: usize,
    },
}

pub(crate) fn normal_array(rng: &mut ChaCha20Rng, shape: &[usize], std: f64) -> Array {
    let numel: usize = shape.iter().product();
    // Box-Muller keeps the only RNG dependency on uniform draws.
    let data: Vec<f64> = (0..numel)
        .map(|_| {
            let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            let u2: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            (-2.0 * u1.ln()).sqrt() * u2.cos() * std
        })
        .collect();
    Array::new(shape.to_vec(), data)
}

// ---------------------------------------------------------------------------
// Pointwise linear
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct PointwiseLinearParams {
    pub weight: Array,
    /// Absent for linears feeding a mean-subtracting normalization, where a
    /// bias is structurally dead.
    pub bias: Option<Array>,
}

impl PointwiseLinearParams {
    pub fn init(c_in: usize, c_out: usize, bias: bool, rng: &mut ChaCha20Rng) -> Self {
        PointwiseLinearParams {
            weight: normal_array(rng, &[c_in, c_out], 1.0 / (c_in as f64).sqrt()),
            bias: bias.then(|| Array::zeros(&[1, c_out])),
        }
    }

    pub fn tensors(&self) -> Vec<&Array> {
        let mut out = vec![&self.weight];
        if let Some(b) = &self.bias {
            out.push(b);
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Array> {
        let mut out = vec![&mut self.weight];
        if let Some(b) = &mut self.bias {
            out.push(b);
        }
        out
    }

    pub fn bind(&self, g: &mut Graph) -> PlNodes {
        PlNodes {
            weight: g.parameter(self.weight.clone()),
            bias: self.bias.as_ref().map(|b| g.parameter(b.clone())),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PlNodes {
    pub weight: NodeId,
    pub bias: Option<NodeId>,
}

/// `f W (+ b)` applied per point.
pub fn pointwise_linear(g: &mut Graph, f: NodeId, nodes: &PlNodes) -> NodeId {
    let prod = g.matmul(f, nodes.weight);
    match nodes.bias {
        Some(bias) => {
            let shape = g.value(prod).shape().to_vec();
            let b = g.broadcast(bias, &shape);
            g.add(prod, b)
        }
        None => prod,
    }
}

// ---------------------------------------------------------------------------
// Context normalization
// ---------------------------------------------------------------------------

/// Per-channel standardization across the N points of one pair:
/// `(f - mean) / sqrt(var + 1e-3)`.
pub fn context_normalize(g: &mut Graph, f: NodeId) -> Result<NodeId, BlockError> {
    let shape = g.value(f).shape().to_vec();
    let n = shape[0];
    if n < 2 {
        return Err(BlockError::TooFewPoints(n));
    }
    let mean = g.reduce_mean(f, Some(0));
    let mb = g.broadcast(mean, &shape);
    let dev = g.sub(f, mb);
    let sq = g.mul(dev, dev);
    let var = g.reduce_mean(sq, Some(0));
    let eps = g.constant(Array::full(g.value(var).shape(), NORM_EPS));
    let shifted = g.add(var, eps);
    let sigma = g.power(shifted, 0.5);
    let sb = g.broadcast(sigma, &shape);
    Ok(g.div(dev, sb))
}

// ---------------------------------------------------------------------------
// Prior-attentive context normalization
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct BacnParams {
    pub att_weight: Array,
    pub scale: Array,
    pub shift: Array,
}

impl BacnParams {
    pub const TENSOR_COUNT: usize = 3;

    pub fn init(c: usize, rng: &mut ChaCha20Rng) -> Self {
        BacnParams {
            att_weight: normal_array(rng, &[c, 1], 1.0 / (c as f64).sqrt()),
            scale: Array::full(&[1, c], 1.0),
            shift: Array::zeros(&[1, c]),
        }
    }

    pub fn tensors(&self) -> Vec<&Array> {
        vec![&self.att_weight, &self.scale, &self.shift]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Array> {
        vec![&mut self.att_weight, &mut self.scale, &mut self.shift]
    }

    pub fn bind(&self, g: &mut Graph) -> BacnNodes {
        BacnNodes {
            att_weight: g.parameter(self.att_weight.clone()),
            scale: g.parameter(self.scale.clone()),
            shift: g.parameter(self.shift.clone()),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BacnNodes {
    pub att_weight: NodeId,
    pub scale: NodeId,
    pub shift: NodeId,
}

/// Attention-weighted normalization with a probability prior fused into the
/// attention logits as log-odds. The prior enters as data (no gradient).
///
/// Attention: `a_i = f_i . w_att + logit(clamp(prior_i))`, `w = softmax over
/// points` (an attention bias would be shift-invariant dead weight).
/// Statistics: `u = sum_i w_i f_i`, `var = sum_i w_i (f_i - u)^2 + 1e-3`;
/// the standardized feature then takes a learned per-channel scale/shift.
pub fn bacn_forward(
    g: &mut Graph,
    f: NodeId,
    prior: &[f64],
    nodes: &BacnNodes,
) -> Result<NodeId, BlockError> {
    let shape = g.value(f).shape().to_vec();
    let n = shape[0];
    if n < 2 {
        return Err(BlockError::TooFewPoints(n));
    }
    if prior.len() != n {
        return Err(BlockError::PriorLengthMismatch {
            expected: n,
            got: prior.len(),
        });
    }
    let att = g.matmul(f, nodes.att_weight);
    let log_odds: Vec<f64> = prior
        .iter()
        .map(|&p| {
            let p = p.clamp(PRIOR_CLAMP, 1.0 - PRIOR_CLAMP);
            (p / (1.0 - p)).ln()
        })
        .collect();
    let prior_node = g.constant(Array::column(&log_odds));
    let logits = g.add(att, prior_node);
    let w = g.softmax_over_axis(logits, 0);
    let wb = g.broadcast(w, &shape);
    let wf = g.mul(wb, f);
    let u = g.reduce_sum(wf, Some(0));
    let ub = g.broadcast(u, &shape);
    let dev = g.sub(f, ub);
    let dev2 = g.mul(dev, dev);
    let wdev2 = g.mul(wb, dev2);
    let var = g.reduce_sum(wdev2, Some(0));
    let eps = g.constant(Array::full(g.value(var).shape(), NORM_EPS));
    let var = g.add(var, eps);
    let sigma = g.power(var, 0.5);
    // (dev / sigma) * scale + shift, with the per-channel coefficient
    // formed at [1, C] size before broadcasting.
    let coef = g.div(nodes.scale, sigma);
    let cb = g.broadcast(coef, &shape);
    let scaled = g.mul(dev, cb);
    let shift = g.broadcast(nodes.shift, &shape);
    Ok(g.add(scaled, shift))
}

// ---------------------------------------------------------------------------
// Batch normalization by running statistics
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct BatchNormParams {
    pub scale: Array,
    pub shift: Array,
}

impl BatchNormParams {
    pub fn init(c: usize) -> Self {
        BatchNormParams {
            scale: Array::full(&[1, c], 1.0),
            shift: Array::zeros(&[1, c]),
        }
    }

    pub fn tensors(&self) -> Vec<&Array> {
        vec![&self.scale, &self.shift]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Array> {
        vec![&mut self.scale, &mut self.shift]
    }

    pub fn bind(&self, g: &mut Graph) -> BnNodes {
        BnNodes {
            scale: g.parameter(self.scale.clone()),
            shift: g.parameter(self.shift.clone()),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BnNodes {
    pub scale: NodeId,
    pub shift: NodeId,
}

/// Per-channel running statistics of the batch-norm input.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState {
    pub running_mean: Array,
    pub running_var: Array,
}

impl BatchNormState {
    pub fn init(c: usize) -> Self {
        BatchNormState {
            running_mean: Array::zeros(&[1, c]),
            running_var: Array::full(&[1, c], 1.0),
        }
    }

    /// Folds one pair's batch statistics in with momentum 0.9.
    pub fn update(&mut self, mean: &Array, var: &Array) {
        for (r, &m) in self
            .running_mean
            .data_mut()
            .iter_mut()
            .zip(mean.data().iter())
        {
            *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * m;
        }
        for (r, &v) in self
            .running_var
            .data_mut()
            .iter_mut()
            .zip(var.data().iter())
        {
            *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * v;
        }
    }
}

/// Normalizes by the running statistics (as graph constants), then applies
/// the learned scale and shift. When `collect_stats` is set, this pair's
/// per-channel mean and biased variance come back for the trainer to fold
/// into the running state.
pub fn batch_norm(
    g: &mut Graph,
    f: NodeId,
    nodes: &BnNodes,
    state: &BatchNormState,
    collect_stats: bool,
) -> Result<(NodeId, Option<(Array, Array)>), BlockError> {
    let shape = g.value(f).shape().to_vec();
    let n = shape[0];
    if n < 2 {
        return Err(BlockError::TooFewPoints(n));
    }
    let stats = if collect_stats {
        let data = g.value(f).data();
        let c = shape[1];
        let mut mean = vec![0.0; c];
        for row in data.chunks_exact(c) {
            for (m, &v) in mean.iter_mut().zip(row.iter()) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        let mut var = vec![0.0; c];
        for row in data.chunks_exact(c) {
            for ((vv, &v), &m) in var.iter_mut().zip(row.iter()).zip(mean.iter()) {
                *vv += (v - m) * (v - m);
            }
        }
        for v in &mut var {
            *v /= n as f64;
        }
        Some((Array::new(vec![1, c], mean), Array::new(vec![1, c], var)))
    } else {
        None
    };

    // (f - mu)/sigma * scale + shift == f * (scale/sigma) + (shift - mu
    // scale/sigma): both coefficients form at [1, C] size, so only two
    // full-size ops touch the features.
    let sigma_data: Vec<f64> = state
        .running_var
        .data()
        .iter()
        .map(|v| (v + NORM_EPS).sqrt())
        .collect();
    let sigma = g.constant(Array::new(state.running_var.shape().to_vec(), sigma_data));
    let mean = g.constant(state.running_mean.clone());
    let coef = g.div(nodes.scale, sigma);
    let mean_coef = g.mul(mean, coef);
    let bias = g.sub(nodes.shift, mean_coef);
    let cb = g.broadcast(coef, &shape);
    let scaled = g.mul(f, cb);
    let bb = g.broadcast(bias, &shape);
    Ok((g.add(scaled, bb), stats))
}

// ---------------------------------------------------------------------------
// Channel attention
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ChannelAttentionParams {
    pub w1: Array,
    pub b1: Array,
    pub w2: Array,
    pub b2: Array,
}

impl ChannelAttentionParams {
    pub const TENSOR_COUNT: usize = 4;

    pub fn init(
        c: usize,
        groups: usize,
        reduction: usize,
        rng: &mut ChaCha20Rng,
    ) -> Result<Self, BlockError> {
        let hidden = ca_hidden(c, groups, reduction)?;
        let group_in = c / groups;
        let group_hidden = hidden / groups;
        Ok(ChannelAttentionParams {
            w1: normal_array(rng, &[c, group_hidden], 1.0 / (group_in as f64).sqrt()),
            b1: Array::zeros(&[1, hidden]),
            w2: normal_array(rng, &[hidden, group_in], 1.0 / (group_hidden as f64).sqrt()),
            b2: Array::zeros(&[1, c]),
        })
    }

    pub fn tensors(&self) -> Vec<&Array> {
        vec![&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Array> {
        vec![&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    pub fn bind(&self, g: &mut Graph) -> CaNodes {
        CaNodes {
            w1: g.parameter(self.w1.clone()),
            b1: g.parameter(self.b1.clone()),
            w2: g.parameter(self.w2.clone()),
            b2: g.parameter(self.b2.clone()),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CaNodes {
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
}

fn ca_hidden(c: usize, groups: usize, reduction: usize) -> Result<usize, BlockError> {
    let err = || BlockError::Divisibility {
        channels: c,
        groups,
        reduction,
    };
    if groups == 0 || reduction == 0 || c % groups != 0 {
        return Err(err());
    }
    if c / reduction == 0 {
        return Err(err());
    }
    let hidden = c / reduction;
    if hidden % groups != 0 {
        return Err(err());
    }
    Ok(hidden)
}

/// Per-point sigmoid channel gating with group-structured maps: a squeeze
/// to `C/reduction` hidden channels and back, both block-diagonal over
/// `groups` channel groups, then `f * gate` elementwise.
pub fn channel_attention(
    g: &mut Graph,
    f: NodeId,
    nodes: &CaNodes,
    groups: usize,
    reduction: usize,
) -> Result<NodeId, BlockError> {
    let shape = g.value(f).shape().to_vec();
    let c = shape[1];
    let hidden = ca_hidden(c, groups, reduction)?;
    let group_in = c / groups;
    let group_hidden = hidden / groups;

    let mut hidden_parts = Vec::with_capacity(groups);
    for k in 0..groups {
        let fs = g.slice(f, 1, k * group_in, (k + 1) * group_in);
        let ws = g.slice(nodes.w1, 0, k * group_in, (k + 1) * group_in);
        hidden_parts.push(g.matmul(fs, ws));
    }
    let h = g.concat(1, &hidden_parts);
    let h_shape = g.value(h).shape().to_vec();
    let b1 = g.broadcast(nodes.b1, &h_shape);
    let h = g.add(h, b1);
    let h = g.relu(h);

    let mut gate_parts = Vec::with_capacity(groups);
    for k in 0..groups {
        let hs = g.slice(h, 1, k * group_hidden, (k + 1) * group_hidden);
        let ws = g.slice(nodes.w2, 0, k * group_hidden, (k + 1) * group_hidden);
        gate_parts.push(g.matmul(hs, ws));
    }
    let gate = g.concat(1, &gate_parts);
    let b2 = g.broadcast(nodes.b2, &shape);
    let gate = g.add(gate, b2);
    let gate = g.sigmoid(gate);
    Ok(g.mul(f, gate))
}

// ---------------------------------------------------------------------------
// Hybrid attention block
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct HaBlockParams {
    pub pl1: PointwiseLinearParams,
    pub bacn: BacnParams,
    pub bn: BatchNormParams,
    pub ca: ChannelAttentionParams,
    pub pl2: PointwiseLinearParams,
}

impl HaBlockParams {
    /// pl1 (1, bias-free) + bacn (3) + bn (2) + ca (4) + pl2 (2).
    pub const TENSOR_COUNT: usize = 12;

    pub fn init(
        c: usize,
        groups: usize,
        reduction: usize,
        rng: &mut ChaCha20Rng,
    ) -> Result<Self, BlockError> {
        Ok(HaBlockParams {
            pl1: PointwiseLinearParams::init(c, c, false, rng),
            bacn: BacnParams::init(c, rng),
            bn: BatchNormParams::init(c),
            ca: ChannelAttentionParams::init(c, groups, reduction, rng)?,
            pl2: PointwiseLinearParams::init(c, c, true, rng),
        })
    }

    pub fn tensors(&self) -> Vec<&Array> {
        let mut out = self.pl1.tensors();
        out.extend(self.bacn.tensors());
        out.extend(self.bn.tensors());
        out.extend(self.ca.tensors());
        out.extend(self.pl2.tensors());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Array> {
        let mut out = self.pl1.tensors_mut();
        out.extend(self.bacn.tensors_mut());
        out.extend(self.bn.tensors_mut());
        out.extend(self.ca.tensors_mut());
        out.extend(self.pl2.tensors_mut());
        out
    }

    pub fn bind(&self, g: &mut Graph) -> HaNodes {
        HaNodes {
            pl1: self.pl1.bind(g),
            bacn: self.bacn.bind(g),
            bn: self.bn.bind(g),
            ca: self.ca.bind(g),
            pl2: self.pl2.bind(g),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct HaNodes {
    pub pl1: PlNodes,
    pub bacn: BacnNodes,
    pub bn: BnNodes,
    pub ca: CaNodes,
    pub pl2: PlNodes,
}

/// Residual hybrid attention block:
/// `f + PL2(CA(ReLU(BN(BACN(PL1(f))))))`. PL2 is the branch's output
/// projection; zeroing it makes the block the identity.
#[allow(clippy::too_many_arguments)]
pub fn ha_block(
    g: &mut Graph,
    f: NodeId,
    prior: &[f64],
    nodes: &HaNodes,
    groups: usize,
    reduction: usize,
    bn_state: &BatchNormState,
    collect_stats: bool,
) -> Result<(NodeId, Option<(Array, Array)>), BlockError> {
    let h = pointwise_linear(g, f, &nodes.pl1);
    let h = bacn_forward(g, h, prior, &nodes.bacn)?;
    let (h, stats) = batch_norm(g, h, &nodes.bn, bn_state, collect_stats)?;
    let h = g.relu(h);
    let h = channel_attention(g, h, &nodes.ca, groups, reduction)?;
    let h = pointwise_linear(g, h, &nodes.pl2);
    Ok((g.add(f, h), stats))
}

/// Solver weights from classifier logits: `w = tanh(relu(L))`, in `[0, 1)`.
/// The classification probability for loss purposes is `sigmoid(L)`.
pub fn inlier_weight_head(g: &mut Graph, logits: NodeId) -> NodeId {
    let r = g.relu(logits);
    g.tanh(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_difference_check, finite_difference_check_params, Graph};
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(seed)
    }

    fn random_features(n: usize, c: usize, seed: u64) -> Array {
        normal_array(&mut rng(seed), &[n, c], 1.0)
    }

    /// Running state with generic non-identity statistics.
    fn test_bn_state(c: usize, seed: u64) -> BatchNormState {
        let mut r = rng(seed);
        let mean: Vec<f64> = (0..c).map(|_| r.gen_range(-0.5..0.5)).collect();
        let var: Vec<f64> = (0..c).map(|_| r.gen_range(0.5..2.0)).collect();
        BatchNormState {
            running_mean: Array::new(vec![1, c], mean),
            running_var: Array::new(vec![1, c], var),
        }
    }

    #[test]
    fn context_normalize_constant_column_is_zero() {
        let mut g = Graph::new();
        let f = g.constant(Array::full(&[6, 3], 2.5));
        let out = context_normalize(&mut g, f).unwrap();
        assert!(g.value(out).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn context_normalize_standardizes() {
        let mut g = Graph::new();
        let f = g.constant(random_features(200, 4, 1));
        let out = context_normalize(&mut g, f).unwrap();
        let data = g.value(out).data();
        for ch in 0..4 {
            let col: Vec<f64> = data.iter().skip(ch).step_by(4).copied().collect();
            let mean: f64 = col.iter().sum::<f64>() / col.len() as f64;
            let var: f64 =
                col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / col.len() as f64;
            assert!(mean.abs() < 1e-12, "channel {ch} mean {mean}");
            assert!((var - 1.0).abs() < 0.05, "channel {ch} var {var}");
        }
    }

    #[test]
    fn context_normalize_rejects_single_point() {
        let mut g = Graph::new();
        let f = g.constant(Array::full(&[1, 3], 1.0));
        assert!(matches!(
            context_normalize(&mut g, f),
            Err(BlockError::TooFewPoints(1))
        ));
    }

    #[test]
    fn context_normalize_input_gradients_match_fd() {
        let point = random_features(10, 3, 2);
        let err = finite_difference_check(
            |g, p| {
                let out = context_normalize(g, p).unwrap();
                let probe = g.constant(random_features(10, 3, 3));
                let m = g.mul(out, probe);
                g.reduce_sum(m, None)
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn bacn_with_uniform_attention_matches_context_normalize() {
        let n = 40;
        let c = 8;
        let feats = random_features(n, c, 2);
        let mut g = Graph::new();
        let f = g.constant(feats.clone());
        // Zero attention weight and a constant prior: softmax is uniform.
        let nodes = BacnNodes {
            att_weight: g.constant(Array::zeros(&[c, 1])),
            scale: g.constant(Array::full(&[1, c], 1.0)),
            shift: g.constant(Array::zeros(&[1, c])),
        };
        let out = bacn_forward(&mut g, f, &vec![0.5; n], &nodes).unwrap();
        let cn = context_normalize(&mut g, f).unwrap();
        for (a, b) in g.value(out).data().iter().zip(g.value(cn).data()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn bacn_one_hot_attention_zeroes_that_row() {
        let n = 10;
        let c = 4;
        let feats = random_features(n, c, 3);
        let mut g = Graph::new();
        let f = g.constant(feats);
        let nodes = BacnNodes {
            att_weight: g.constant(Array::zeros(&[c, 1])),
            scale: g.constant(Array::full(&[1, c], 1.0)),
            shift: g.constant(Array::zeros(&[1, c])),
        };
        // Prior saturated on point 3; clamped log-odds dominate the softmax.
        let mut prior = vec![0.0; n];
        prior[3] = 1.0;
        let out = bacn_forward(&mut g, f, &prior, &nodes).unwrap();
        let row = &g.value(out).data()[3 * c..4 * c];
        for v in row {
            assert!(v.abs() < 1e-6, "row entry {v}");
        }
    }

    #[test]
    fn bacn_label_prior_pulls_mean_toward_inliers() {
        let mut wins = 0;
        for trial in 0..100 {
            let n = 60;
            let c = 6;
            let mut r = rng(100 + trial);
            // Inlier features cluster away from outlier features.
            let mut data = Vec::with_capacity(n * c);
            let labels: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
            for &l in &labels {
                for _ in 0..c {
                    let base: f64 = if l { 1.0 } else { -1.0 };
                    data.push(base + r.gen_range(-0.5..0.5));
                }
            }
            let feats = Array::new(vec![n, c], data);
            let prior: Vec<f64> =
                labels.iter().map(|&l| if l { 1.0 } else { 0.0 }).collect();
            let inlier_mean: Vec<f64> = (0..c)
                .map(|ch| {
                    let vals: Vec<f64> = labels
                        .iter()
                        .enumerate()
                        .filter(|(_, &l)| l)
                        .map(|(i, _)| feats.data()[i * c + ch])
                        .collect();
                    vals.iter().sum::<f64>() / vals.len() as f64
                })
                .collect();
            let unweighted_mean: Vec<f64> = (0..c)
                .map(|ch| feats.data().iter().skip(ch).step_by(c).sum::<f64>() / n as f64)
                .collect();
            // Attention weights with zero attention parameters: softmax of
            // the clamped prior log-odds.
            let log_odds: Vec<f64> = prior
                .iter()
                .map(|&p| {
                    let p = p.clamp(PRIOR_CLAMP, 1.0 - PRIOR_CLAMP);
                    (p / (1.0 - p)).ln()
                })
                .collect();
            let max = log_odds.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v));
            let exps: Vec<f64> = log_odds.iter().map(|v| (v - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            let weighted_mean: Vec<f64> = (0..c)
                .map(|ch| {
                    exps.iter()
                        .enumerate()
                        .map(|(i, e)| e / total * feats.data()[i * c + ch])
                        .sum::<f64>()
                })
                .collect();
            let dist = |a: &[f64], b: &[f64]| {
                a.iter()
                    .zip(b)
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    .sqrt()
            };
            if dist(&weighted_mean, &inlier_mean) < dist(&unweighted_mean, &inlier_mean) {
                wins += 1;
            }
        }
        assert!(wins >= 95, "weighted mean closer in only {wins}/100 trials");
    }

    #[test]
    fn bacn_gradients_match_finite_differences() {
        let n = 8;
        let c = 8;
        let mut r = rng(14);
        let params = BacnParams::init(c, &mut r);
        let feats = random_features(n, c, 15);
        let prior: Vec<f64> = (0..n).map(|i| 0.2 + 0.05 * i as f64).collect();
        let probe = normal_array(&mut r, &[n, c], 1.0);
        let tensors: Vec<Array> = params.tensors().into_iter().cloned().collect();
        let err = finite_difference_check_params(
            |g, ps| {
                let f = g.constant(feats.clone());
                let nodes = BacnNodes {
                    att_weight: ps[0],
                    scale: ps[1],
                    shift: ps[2],
                };
                let out = bacn_forward(g, f, &prior, &nodes).unwrap();
                let pn = g.constant(probe.clone());
                let m = g.mul(out, pn);
                g.reduce_sum(m, None)
            },
            &tensors,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn channel_attention_zero_params_halves_input() {
        let n = 8;
        let c = 8;
        let feats = random_features(n, c, 4);
        let mut g = Graph::new();
        let f = g.constant(feats.clone());
        let nodes = CaNodes {
            w1: g.constant(Array::zeros(&[c, 2])),
            b1: g.constant(Array::zeros(&[1, 4])),
            w2: g.constant(Array::zeros(&[4, 4])),
            b2: g.constant(Array::zeros(&[1, c])),
        };
        let out = channel_attention(&mut g, f, &nodes, 2, 2).unwrap();
        for (o, i) in g.value(out).data().iter().zip(feats.data()) {
            assert_eq!(*o, i * 0.5);
        }
    }

    #[test]
    fn channel_attention_is_a_contraction() {
        let n = 12;
        let c = 8;
        let mut r = rng(5);
        let params = ChannelAttentionParams::init(c, 4, 2, &mut r).unwrap();
        let feats = random_features(n, c, 6);
        let mut g = Graph::new();
        let f = g.constant(feats.clone());
        let nodes = params.bind(&mut g);
        let out = channel_attention(&mut g, f, &nodes, 4, 2).unwrap();
        for (o, i) in g.value(out).data().iter().zip(feats.data()) {
            assert!(o.abs() <= i.abs());
        }
    }

    #[test]
    fn channel_attention_rejects_bad_divisibility() {
        let mut g = Graph::new();
        let f = g.constant(random_features(4, 6, 7));
        let nodes = CaNodes {
            w1: g.constant(Array::zeros(&[6, 1])),
            b1: g.constant(Array::zeros(&[1, 2])),
            w2: g.constant(Array::zeros(&[2, 2])),
            b2: g.constant(Array::zeros(&[1, 6])),
        };
        assert!(matches!(
            channel_attention(&mut g, f, &nodes, 4, 3),
            Err(BlockError::Divisibility { .. })
        ));
    }

    #[test]
    fn channel_attention_gradients_match_finite_differences() {
        let n = 6;
        let c = 8;
        let groups = 2;
        let reduction = 4;
        let mut r = rng(8);
        let params = ChannelAttentionParams::init(c, groups, reduction, &mut r).unwrap();
        let feats = random_features(n, c, 9);
        let weights_vec: Vec<Array> = params.tensors().into_iter().cloned().collect();
        let probe = normal_array(&mut r, &[n, c], 1.0);
        let err = finite_difference_check_params(
            |g, ps| {
                let f = g.constant(feats.clone());
                let nodes = CaNodes {
                    w1: ps[0],
                    b1: ps[1],
                    w2: ps[2],
                    b2: ps[3],
                };
                let out = channel_attention(g, f, &nodes, groups, reduction).unwrap();
                let probe_node = g.constant(probe.clone());
                let weighted = g.mul(out, probe_node);
                g.reduce_sum(weighted, None)
            },
            &weights_vec,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn ha_block_with_zero_final_linear_is_identity() {
        let n = 10;
        let c = 8;
        let mut r = rng(10);
        let mut params = HaBlockParams::init(c, 2, 2, &mut r).unwrap();
        params.pl2.weight = Array::zeros(&[c, c]);
        params.pl2.bias = Some(Array::zeros(&[1, c]));
        let feats = random_features(n, c, 11);
        let state = test_bn_state(c, 12);
        let mut g = Graph::new();
        let f = g.constant(feats.clone());
        let nodes = params.bind(&mut g);
        let (out, _) =
            ha_block(&mut g, f, &vec![0.5; n], &nodes, 2, 2, &state, true).unwrap();
        assert_eq!(g.value(out).data(), feats.data());
    }

    #[test]
    fn ha_block_preserves_shape() {
        for (n, c) in [(16, 8), (33, 16), (20, 4)] {
            let mut r = rng(12);
            let params = HaBlockParams::init(c, 2, 2, &mut r).unwrap();
            let state = BatchNormState::init(c);
            let feats = random_features(n, c, 13);
            let mut g = Graph::new();
            let f = g.constant(feats);
            let nodes = params.bind(&mut g);
            let (out, stats) =
                ha_block(&mut g, f, &vec![0.5; n], &nodes, 2, 2, &state, true).unwrap();
            assert_eq!(g.value(out).shape(), &[n, c]);
            assert!(stats.is_some());
        }
    }

    #[test]
    fn ha_block_gradients_match_finite_differences() {
        let n = 8;
        let c = 8;
        let groups = 2;
        let reduction = 2;
        let mut r = rng(14);
        let params = HaBlockParams::init(c, groups, reduction, &mut r).unwrap();
        let state = test_bn_state(c, 15);
        let feats = random_features(n, c, 16);
        let prior: Vec<f64> = (0..n).map(|i| 0.2 + 0.05 * i as f64).collect();
        let probe = normal_array(&mut r, &[n, c], 1.0);
        let tensor_vec: Vec<Array> = params.tensors().into_iter().cloned().collect();
        assert_eq!(tensor_vec.len(), HaBlockParams::TENSOR_COUNT);
        let err = finite_difference_check_params(
            |g, ps| {
                let f = g.constant(feats.clone());
                let nodes = HaNodes {
                    pl1: PlNodes {
                        weight: ps[0],
                        bias: None,
                    },
                    bacn: BacnNodes {
                        att_weight: ps[1],
                        scale: ps[2],
                        shift: ps[3],
                    },
                    bn: BnNodes {
                        scale: ps[4],
                        shift: ps[5],
                    },
                    ca: CaNodes {
                        w1: ps[6],
                        b1: ps[7],
                        w2: ps[8],
                        b2: ps[9],
                    },
                    pl2: PlNodes {
                        weight: ps[10],
                        bias: Some(ps[11]),
                    },
                };
                let (out, _) =
                    ha_block(g, f, &prior, &nodes, groups, reduction, &state, false).unwrap();
                let probe_node = g.constant(probe.clone());
                let weighted = g.mul(out, probe_node);
                g.reduce_sum(weighted, None)
            },
            &tensor_vec,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn weight_head_values() {
        let mut g = Graph::new();
        let l = g.constant(Array::column(&[-3.0, 0.5, 50.0]));
        let w = inlier_weight_head(&mut g, l);
        let data = g.value(w).data();
        assert_eq!(data[0], 0.0);
        assert!((data[1] - 0.46212).abs() < 1e-5);
        assert!((data[2] - 1.0).abs() < 1e-12);
        assert!(data.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn blocks_are_permutation_equivariant() {
        // Exact for the per-point channel attention; the normalizations
        // reassociate their cross-point sums, so those match to 1e-9.
        let n = 24;
        let c = 8;
        let mut r = rng(16);
        let params = HaBlockParams::init(c, 2, 2, &mut r).unwrap();
        let state = test_bn_state(c, 17);
        let feats = random_features(n, c, 18);
        let prior: Vec<f64> = (0..n).map(|i| (i as f64 + 1.0) / (n as f64 + 2.0)).collect();
        let perm: Vec<usize> = {
            let mut p: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                let j = r.gen_range(0..=i);
                p.swap(i, j);
            }
            p
        };
        let permuted_feats = {
            let mut data = vec![0.0; n * c];
            for (dst, &src) in perm.iter().enumerate() {
                data[dst * c..(dst + 1) * c]
                    .copy_from_slice(&feats.data()[src * c..(src + 1) * c]);
            }
            Array::new(vec![n, c], data)
        };
        let permuted_prior: Vec<f64> = perm.iter().map(|&src| prior[src]).collect();

        let run = |feats: &Array, prior: &[f64]| -> (Vec<f64>, Vec<f64>) {
            let mut g = Graph::new();
            let f = g.constant(feats.clone());
            let nodes = params.bind(&mut g);
            let (ha_out, _) =
                ha_block(&mut g, f, prior, &nodes, 2, 2, &state, false).unwrap();
            let ca_out = channel_attention(&mut g, f, &nodes.ca, 2, 2).unwrap();
            (
                g.value(ha_out).data().to_vec(),
                g.value(ca_out).data().to_vec(),
            )
        };
        let (ha_base, ca_base) = run(&feats, &prior);
        let (ha_perm, ca_perm) = run(&permuted_feats, &permuted_prior);
        for (dst, &src) in perm.iter().enumerate() {
            for ch in 0..c {
                let a = ha_base[src * c + ch];
                let b = ha_perm[dst * c + ch];
                assert!((a - b).abs() < 1e-9, "ha mismatch {a} vs {b}");
                assert_eq!(
                    ca_base[src * c + ch],
                    ca_perm[dst * c + ch],
                    "channel attention must be exactly equivariant"
                );
            }
        }
    }

    #[test]
    fn bn_normalizes_by_running_statistics() {
        let n = 6;
        let c = 4;
        let feats = random_features(n, c, 18);
        let mut state = BatchNormState::init(c);
        state.running_mean = Array::full(&[1, c], 0.25);
        state.running_var = Array::full(&[1, c], 4.0);
        let mut g = Graph::new();
        let f = g.constant(feats.clone());
        let nodes = BnNodes {
            scale: g.constant(Array::full(&[1, c], 1.0)),
            shift: g.constant(Array::zeros(&[1, c])),
        };
        let (out, stats) = batch_norm(&mut g, f, &nodes, &state, false).unwrap();
        assert!(stats.is_none());
        let expected_sigma = (4.0f64 + NORM_EPS).sqrt();
        for (o, i) in g.value(out).data().iter().zip(feats.data()) {
            assert!((o - (i - 0.25) / expected_sigma).abs() < 1e-12);
        }
    }

    #[test]
    fn bn_state_update_applies_momentum() {
        let c = 2;
        let mut state = BatchNormState::init(c);
        let mean = Array::new(vec![1, c], vec![1.0, -1.0]);
        let var = Array::new(vec![1, c], vec![2.0, 0.5]);
        state.update(&mean, &var);
        assert!((state.running_mean.data()[0] - 0.1).abs() < 1e-15);
        assert!((state.running_mean.data()[1] + 0.1).abs() < 1e-15);
        assert!((state.running_var.data()[0] - (0.9 + 0.2)).abs() < 1e-15);
        assert!((state.running_var.data()[1] - (0.9 + 0.05)).abs() < 1e-15);
    }

    #[test]
    fn bn_train_mode_reports_pair_statistics() {
        let n = 50;
        let c = 3;
        let feats = random_features(n, c, 19);
        let state = BatchNormState::init(c);
        let mut g = Graph::new();
        let f = g.constant(feats.clone());
        let nodes = BnNodes {
            scale: g.constant(Array::full(&[1, c], 1.0)),
            shift: g.constant(Array::zeros(&[1, c])),
        };
        let (_, stats) = batch_norm(&mut g, f, &nodes, &state, true).unwrap();
        let (mean, var) = stats.unwrap();
        for ch in 0..c {
            let col: Vec<f64> = feats.data().iter().skip(ch).step_by(c).copied().collect();
            let m: f64 = col.iter().sum::<f64>() / n as f64;
            let v: f64 = col.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n as f64;
            assert!((mean.data()[ch] - m).abs() < 1e-12);
            assert!((var.data()[ch] - v).abs() < 1e-12);
        }
    }
}
