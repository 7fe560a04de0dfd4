//! Gradient-set pruning: selects which edges participate in the update.
//!
//! Width pruning drops whole root-to-leaf paths, either keeping the better
//! child under every parent at the last branching step (parent-top1) or
//! keeping only the globally best and worst `b` leaves by reward
//! (extreme-b). Depth pruning drops every edge inside a sliding window of
//! steps that advances as training progresses.
//!
//! All variants run strictly after fusion and normalization and only ever
//! clear mask bits, so they commute with each other and never touch forward
//! rollouts, fused values, or advantages.

use crate::credit::CreditTable;
use crate::tree::{SlidingWindow, TrajectoryTree};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WidthMode {
    None,
    ParentTop1,
    ExtremeB,
}

impl WidthMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            WidthMode::None => "none",
            WidthMode::ParentTop1 => "parent-top1",
            WidthMode::ExtremeB => "extreme-b",
        }
    }
}

impl std::str::FromStr for WidthMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(WidthMode::None),
            "parent-top1" => Ok(WidthMode::ParentTop1),
            "extreme-b" => Ok(WidthMode::ExtremeB),
            other => Err(Error::Config(format!(
                "unknown width pruning mode {other:?} (expected none, parent-top1 \
                 or extreme-b)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruningConfig {
    pub width_mode: WidthMode,
    pub extreme_b: usize,
    /// Depth window; `None` disables depth pruning.
    pub window: Option<SlidingWindow>,
}

impl PruningConfig {
    pub fn new(
        width_mode: WidthMode,
        extreme_b: usize,
        window: Option<SlidingWindow>,
    ) -> Result<Self> {
        if width_mode == WidthMode::ExtremeB && extreme_b == 0 {
            return Err(Error::Config("extreme-b pruning needs b >= 1".into()));
        }
        Ok(PruningConfig {
            width_mode,
            extreme_b,
            window,
        })
    }

    pub fn none() -> Self {
        PruningConfig {
            width_mode: WidthMode::None,
            extreme_b: 0,
            window: None,
        }
    }
}

/// Index of the largest value, lowest index winning exact ties. The
/// deterministic convention for every reward comparison in this module.
pub fn tie_break(values: &[f64]) -> Result<usize> {
    if values.is_empty() {
        return Err(Error::Config("tie_break on an empty slice".into()));
    }
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Drop leaves (and the edges unique to their paths) from the gradient set.
///
/// Returns the kept leaf indices in increasing order. An edge survives if
/// at least one kept leaf passes through it, so shared prefixes of kept
/// paths stay in the set. Forward results are untouched: the credit table
/// is read-only here.
pub fn apply_width_pruning(
    tree: &mut TrajectoryTree,
    credit: &CreditTable,
    config: &PruningConfig,
) -> Result<Vec<usize>> {
    if !tree.mask_initialized() {
        tree.init_gradient_mask();
    }
    let n_leaves = tree.leaf_count();
    let leaf_depth = tree.depth();
    let leaf_rewards: Vec<f64> = (0..n_leaves)
        .map(|l| credit.fused_value(tree, leaf_depth, l))
        .collect();

    let kept: Vec<usize> = match config.width_mode {
        WidthMode::None => (0..n_leaves).collect(),
        WidthMode::ParentTop1 => {
            let Some(&last_split) = tree.schedule().split_steps().last() else {
                return Ok((0..n_leaves).collect()); // a chain has no branching to prune
            };
            let mut kept = Vec::with_capacity(tree.width_at(last_split));
            for parent in 0..tree.width_at(last_split) {
                let children = tree.children(last_split, parent);
                // After the last split every child subtree holds exactly one
                // leaf, so the child's fused value is that leaf's reward.
                let child_values: Vec<f64> = children
                    .clone()
                    .map(|c| credit.fused_value(tree, last_split + 1, c))
                    .collect();
                let winner = children.start + tie_break(&child_values)?;
                let range = tree.descendant_leaf_range(last_split + 1, winner);
                debug_assert_eq!(range.len(), 1);
                kept.extend(range);
            }
            kept.sort_unstable();
            kept
        }
        WidthMode::ExtremeB => {
            let b = config.extreme_b;
            if 2 * b > n_leaves {
                return Err(Error::Config(format!(
                    "extreme-b keeps 2b = {} leaves but the tree only has {}",
                    2 * b,
                    n_leaves
                )));
            }
            let mut by_reward: Vec<usize> = (0..n_leaves).collect();
            // Bottom picks: ascending reward, lowest index among ties.
            by_reward.sort_by(|&a, &c| {
                leaf_rewards[a]
                    .partial_cmp(&leaf_rewards[c])
                    .expect("finite rewards")
                    .then(a.cmp(&c))
            });
            let mut kept: Vec<usize> = by_reward[..b].to_vec();
            // Top picks: descending reward, lowest index among ties.
            by_reward.sort_by(|&a, &c| {
                leaf_rewards[c]
                    .partial_cmp(&leaf_rewards[a])
                    .expect("finite rewards")
                    .then(a.cmp(&c))
            });
            kept.extend(&by_reward[..b]);
            kept.sort_unstable();
            kept.dedup();
            kept
        }
    };

    // Prefix sums over the kept indicator let each edge test its contiguous
    // descendant-leaf range in O(1).
    let mut kept_prefix = vec![0usize; n_leaves + 1];
    {
        let mut mark = vec![false; n_leaves];
        for &l in &kept {
            mark[l] = true;
        }
        for (i, &m) in mark.iter().enumerate() {
            kept_prefix[i + 1] = kept_prefix[i] + usize::from(m);
        }
    }
    for depth in 1..=leaf_depth {
        for breadth in 0..tree.width_at(depth) {
            let range = tree.descendant_leaf_range(depth, breadth);
            if kept_prefix[range.end] == kept_prefix[range.start] {
                tree.drop_from_gradient_set(depth, breadth);
            }
        }
    }
    Ok(kept)
}

/// Drop every edge whose step index falls inside the window at this
/// iteration. Returns the pruned step set.
pub fn apply_depth_pruning(
    tree: &mut TrajectoryTree,
    iteration: usize,
    window: &SlidingWindow,
) -> Vec<usize> {
    if !tree.mask_initialized() {
        tree.init_gradient_mask();
    }
    let (steps, _) = window.depths(iteration, tree.depth());
    let pruned: Vec<usize> = steps.collect();
    for &step in &pruned {
        for breadth in 0..tree.width_at(step + 1) {
            tree.drop_from_gradient_set(step + 1, breadth);
        }
    }
    pruned
}
