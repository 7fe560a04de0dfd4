//! Credit assignment: turns sparse leaf rewards into dense edge advantages.
//!
//! Fusion gives every internal node a value by averaging the rewards of its
//! descendant leaves, either uniformly or softmax-weighted by the behavior
//! path log-probability from the node to each leaf. Depth normalization
//! then standardizes node values within each depth (population statistics)
//! and hands each edge the clipped advantage of its child node.
//!
//! Importance-sampled fusion variants reweight leaves by a ratio between an
//! explicit target and proposal density; they exist for diagnostics and are
//! not part of the training path.

use crate::tree::TrajectoryTree;
use crate::{Error, Result};

/// How leaf rewards are averaged into node values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionMode {
    /// Weights `softmax(beta * s_l)` over descendant leaves, where `s_l`
    /// sums the recorded behavior log-probs on the node-to-leaf path.
    SoftmaxPath,
    /// Plain arithmetic mean over descendant leaves.
    Uniform,
    /// `mean(w_l * r_l)` with `w_l = exp(target - proposal)`.
    ImportanceSampling,
    /// `sum(w_l * r_l) / sum(w_l)` with the same ratios.
    SelfNormalizedIs,
}

impl FusionMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            FusionMode::SoftmaxPath => "softmax-path",
            FusionMode::Uniform => "uniform",
            FusionMode::ImportanceSampling => "importance-sampling",
            FusionMode::SelfNormalizedIs => "self-normalized-is",
        }
    }
}

impl std::str::FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmax-path" | "softmax" => Ok(FusionMode::SoftmaxPath),
            "uniform" => Ok(FusionMode::Uniform),
            "importance-sampling" | "is" => Ok(FusionMode::ImportanceSampling),
            "self-normalized-is" | "snis" => Ok(FusionMode::SelfNormalizedIs),
            other => Err(Error::Config(format!(
                "unknown fusion mode {other:?} (expected softmax-path, uniform, \
                 importance-sampling or self-normalized-is)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionConfig {
    pub mode: FusionMode,
    pub beta: f64,
}

impl FusionConfig {
    pub fn new(mode: FusionMode, beta: f64) -> Result<Self> {
        if !(beta.is_finite() && beta >= 0.0) {
            return Err(Error::Config(format!(
                "fusion beta must be a non-negative real, got {beta}"
            )));
        }
        Ok(FusionConfig { mode, beta })
    }

    pub fn softmax(beta: f64) -> Result<Self> {
        FusionConfig::new(FusionMode::SoftmaxPath, beta)
    }

    pub fn uniform() -> Self {
        FusionConfig {
            mode: FusionMode::Uniform,
            beta: 0.0,
        }
    }
}

/// Fused node values plus the depth statistics and edge advantages derived
/// from them. Node-indexed vectors follow the tree's flat breadth-first
/// layout; the root slot of `edge_advantages` is unused and kept at zero.
#[derive(Debug, Clone)]
pub struct CreditTable {
    pub fused_values: Vec<f64>,
    pub depth_mean: Vec<f64>,
    pub depth_std: Vec<f64>,
    pub epsilon: f64,
    pub advantage_clip: f64,
    pub edge_advantages: Vec<f64>,
}

pub const DEFAULT_EPSILON: f64 = 1e-8;
pub const DEFAULT_ADVANTAGE_CLIP: f64 = 5.0;

impl CreditTable {
    fn from_fused(fused_values: Vec<f64>) -> Self {
        CreditTable {
            fused_values,
            depth_mean: Vec::new(),
            depth_std: Vec::new(),
            epsilon: DEFAULT_EPSILON,
            advantage_clip: DEFAULT_ADVANTAGE_CLIP,
            edge_advantages: Vec::new(),
        }
    }

    /// Replace the numerical guard added to the depth std. Zero is allowed:
    /// zero-variance depths already short-circuit to advantage 0.
    pub fn with_epsilon(mut self, epsilon: f64) -> Result<Self> {
        if !(epsilon.is_finite() && epsilon >= 0.0) {
            return Err(Error::Config(format!(
                "epsilon must be a non-negative real, got {epsilon}"
            )));
        }
        self.epsilon = epsilon;
        Ok(self)
    }

    pub fn with_advantage_clip(mut self, clip: f64) -> Result<Self> {
        if !(clip.is_finite() && clip > 0.0) {
            return Err(Error::Config(format!(
                "advantage_clip must be positive, got {clip}"
            )));
        }
        self.advantage_clip = clip;
        Ok(self)
    }

    pub fn fused_value(&self, tree: &TrajectoryTree, depth: usize, breadth: usize) -> f64 {
        self.fused_values[tree.flat_index(depth, breadth)]
    }

    pub fn edge_advantage(&self, tree: &TrajectoryTree, depth: usize, breadth: usize) -> f64 {
        assert!(depth > 0, "the root has no incoming edge");
        self.edge_advantages[tree.flat_index(depth, breadth)]
    }
}

// Behavior log-probability accumulated from the root to every node, over
// stochastic edges only. Softmax weights under a node need the node-to-leaf
// sums; the common root-to-node prefix cancels inside the softmax, so the
// root-anchored sums can stand in for them.
fn cumulative_logprobs(tree: &TrajectoryTree) -> Vec<f64> {
    let mut cum = vec![0.0; tree.node_count()];
    for depth in 1..=tree.depth() {
        let stochastic = tree.step_is_stochastic(depth - 1);
        for breadth in 0..tree.width_at(depth) {
            let (pd, pb) = tree.parent(depth, breadth).expect("non-root node");
            let own = if stochastic {
                tree.edge_logprob(depth, breadth)
            } else {
                0.0
            };
            cum[tree.flat_index(depth, breadth)] = cum[tree.flat_index(pd, pb)] + own;
        }
    }
    cum
}

/// Softmax weights over one node's descendant leaves, max-subtracted for
/// stability. Exposed so tests and diagnostics can inspect the weighting
/// directly.
pub fn fusion_weights(
    tree: &TrajectoryTree,
    config: &FusionConfig,
    depth: usize,
    breadth: usize,
) -> Result<Vec<f64>> {
    let range = tree.descendant_leaf_range(depth, breadth);
    let n = range.len();
    match config.mode {
        FusionMode::Uniform => Ok(vec![1.0 / n as f64; n]),
        FusionMode::SoftmaxPath if config.beta == 0.0 => Ok(vec![1.0 / n as f64; n]),
        FusionMode::SoftmaxPath => {
            let cum = cumulative_logprobs(tree);
            let leaves_start = tree.flat_index(tree.depth(), 0);
            let scores: Vec<f64> = range
                .map(|l| config.beta * cum[leaves_start + l])
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let unnorm: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let total: f64 = unnorm.iter().sum();
            Ok(unnorm.iter().map(|w| w / total).collect())
        }
        FusionMode::ImportanceSampling | FusionMode::SelfNormalizedIs => Err(Error::Config(
            "importance-sampled fusion needs explicit proposal and target \
             log-probabilities; use fuse_rewards_snis"
                .into(),
        )),
    }
}

/// Assign every node the weighted average of its descendant leaf rewards.
///
/// Under `SoftmaxPath` with `beta = 0` and under `Uniform` the node value
/// is the exact arithmetic mean (identical floating-point summation order),
/// so the two modes agree bit for bit.
pub fn fuse_rewards(
    tree: &TrajectoryTree,
    leaf_rewards: &[f64],
    config: &FusionConfig,
) -> Result<CreditTable> {
    if leaf_rewards.len() != tree.leaf_count() {
        return Err(Error::Config(format!(
            "got {} leaf rewards for a tree with {} leaves",
            leaf_rewards.len(),
            tree.leaf_count()
        )));
    }
    if let Some(bad) = leaf_rewards.iter().find(|r| !r.is_finite()) {
        return Err(Error::Numeric(format!("non-finite leaf reward {bad}")));
    }
    let uniform = match config.mode {
        FusionMode::Uniform => true,
        FusionMode::SoftmaxPath => config.beta == 0.0,
        FusionMode::ImportanceSampling | FusionMode::SelfNormalizedIs => {
            return Err(Error::Config(
                "importance-sampled fusion needs explicit proposal and target \
                 log-probabilities; use fuse_rewards_snis"
                    .into(),
            ))
        }
    };

    let cum = if uniform {
        Vec::new()
    } else {
        cumulative_logprobs(tree)
    };
    let leaves_start = tree.flat_index(tree.depth(), 0);
    let mut fused = vec![0.0; tree.node_count()];
    for depth in 0..=tree.depth() {
        for breadth in 0..tree.width_at(depth) {
            let range = tree.descendant_leaf_range(depth, breadth);
            let value = if uniform {
                let sum: f64 = range.clone().map(|l| leaf_rewards[l]).sum();
                sum / range.len() as f64
            } else {
                let scores: Vec<f64> = range
                    .clone()
                    .map(|l| config.beta * cum[leaves_start + l])
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                let mut acc = 0.0;
                for (s, l) in scores.iter().zip(range) {
                    let w = (s - m).exp();
                    total += w;
                    acc += w * leaf_rewards[l];
                }
                acc / total
            };
            fused[tree.flat_index(depth, breadth)] = value;
        }
    }
    Ok(CreditTable::from_fused(fused))
}

/// Importance-sampled fusion against an explicit target density.
///
/// `proposal_logprobs` and `target_logprobs` are per-leaf path log-densities.
/// Ratios `w_l = exp(target - proposal)` are used raw (they are genuine
/// likelihood ratios whose absolute scale matters for the unnormalized
/// estimator); if every ratio in a node underflows or any overflows, the
/// fusion fails loudly instead of returning a silent zero or infinity.
///
/// Returns node-indexed fused values and effective sample sizes
/// `ESS = (sum w)^2 / sum w^2`.
pub fn fuse_rewards_snis(
    tree: &TrajectoryTree,
    leaf_rewards: &[f64],
    proposal_logprobs: &[f64],
    target_logprobs: &[f64],
    self_normalized: bool,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let leaves = tree.leaf_count();
    if leaf_rewards.len() != leaves
        || proposal_logprobs.len() != leaves
        || target_logprobs.len() != leaves
    {
        return Err(Error::Config(format!(
            "leaf rewards and log-prob vectors must all have length {leaves}"
        )));
    }
    let weights: Vec<f64> = target_logprobs
        .iter()
        .zip(proposal_logprobs)
        .map(|(t, p)| (t - p).exp())
        .collect();
    if let Some(bad) = weights.iter().find(|w| !w.is_finite()) {
        return Err(Error::Numeric(format!(
            "importance weight overflowed: {bad}"
        )));
    }

    let mut fused = vec![0.0; tree.node_count()];
    let mut ess = vec![0.0; tree.node_count()];
    for depth in 0..=tree.depth() {
        for breadth in 0..tree.width_at(depth) {
            let range = tree.descendant_leaf_range(depth, breadth);
            let n = range.len() as f64;
            let mut sum_w = 0.0;
            let mut sum_w2 = 0.0;
            let mut sum_wr = 0.0;
            for l in range {
                let w = weights[l];
                sum_w += w;
                sum_w2 += w * w;
                sum_wr += w * leaf_rewards[l];
            }
            if sum_w == 0.0 {
                return Err(Error::Numeric(format!(
                    "all importance weights underflowed to zero under node \
                     ({depth}, {breadth})"
                )));
            }
            let idx = tree.flat_index(depth, breadth);
            fused[idx] = if self_normalized {
                sum_wr / sum_w
            } else {
                sum_wr / n
            };
            ess[idx] = sum_w * sum_w / sum_w2;
        }
    }
    Ok((fused, ess))
}

/// Standardize fused values within each depth and write the resulting edge
/// advantages both into the table and onto the tree.
///
/// Depth statistics are population mean and std. A depth with zero std
/// (singletons included) carries no comparative signal and gets advantage 0.
/// Advantages are clipped to `[-advantage_clip, +advantage_clip]`.
pub fn depth_normalize(table: &mut CreditTable, tree: &mut TrajectoryTree) -> Result<()> {
    if table.fused_values.len() != tree.node_count() {
        return Err(Error::Config(format!(
            "credit table covers {} nodes but the tree has {}",
            table.fused_values.len(),
            tree.node_count()
        )));
    }
    let depth_t = tree.depth();
    table.depth_mean = vec![0.0; depth_t + 1];
    table.depth_std = vec![0.0; depth_t + 1];
    table.edge_advantages = vec![0.0; tree.node_count()];

    for depth in 0..=depth_t {
        let start = tree.flat_index(depth, 0);
        let width = tree.width_at(depth);
        let values = &table.fused_values[start..start + width];
        let mean = values.iter().sum::<f64>() / width as f64;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / width as f64;
        let std = var.sqrt();
        table.depth_mean[depth] = mean;
        table.depth_std[depth] = std;
        if depth == 0 {
            continue; // the root has no incoming edge
        }
        for breadth in 0..width {
            let idx = start + breadth;
            let pre = if std == 0.0 {
                0.0
            } else {
                (table.fused_values[idx] - mean) / (std + table.epsilon)
            };
            let adv = pre.clamp(-table.advantage_clip, table.advantage_clip);
            table.edge_advantages[idx] = adv;
            tree.set_advantage(depth, breadth, adv);
        }
    }
    Ok(())
}

/// Center sibling values on their mean, the within-group control-variate
/// baseline. The centered values must sum to zero up to accumulated
/// rounding; a violation indicates broken arithmetic, not data.
pub fn group_baseline_check(values: &[f64]) -> Result<Vec<f64>> {
    if values.len() < 2 {
        return Err(Error::Config(
            "group baseline needs at least two siblings".into(),
        ));
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let centered: Vec<f64> = values.iter().map(|v| v - mean).collect();
    let residual: f64 = centered.iter().sum();
    let scale = values.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    if residual.abs() > 1e-9 * values.len() as f64 * scale {
        return Err(Error::Numeric(format!(
            "centered group values sum to {residual:e}, expected zero"
        )));
    }
    Ok(centered)
}
