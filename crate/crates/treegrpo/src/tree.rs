//! Rollout trees.
//!
//! A trajectory tree is a perfect prefix-sharing structure: every node at a
//! split depth has exactly `K` children, every other non-terminal node has
//! exactly one, so the node count at depth `d` is `K^(number of split steps
//! before d)`. Nodes are stored in flat arrays indexed by `(depth,
//! breadth_index)`; parents and children are recovered with index
//! arithmetic, and the descendant leaves of any node form a contiguous range
//! of breadth indices.
//!
//! Each non-root node doubles as the edge from its parent: the recorded
//! noise, the behavior log-probability, the advantage and the gradient-set
//! flag of a transition all live on the child node.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Default cap on the number of leaves a schedule may produce.
pub const DEFAULT_LEAF_BUDGET: usize = 256;

// ---------------------------------------------------------------------------
// Branching schedule
// ---------------------------------------------------------------------------

/// Where and how wide a rollout tree branches.
///
/// `split_steps` lists the depths whose outgoing transition fans out into
/// `branch_factor` children. An empty list is the valid degenerate case of a
/// single chain. `correlation` is the branch-noise mixing strength `s`: the
/// noises handed to the children of one split are
/// `(xi0 + s * eta_b) / sqrt(1 + s^2)`, which keeps every child's noise
/// standard normal while giving any two siblings covariance `1/(1+s^2)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchSchedule {
    depth_t: usize,
    split_steps: Vec<usize>,
    branch_factor: usize,
    correlation: f64,
    final_step_deterministic: bool,
    leaf_budget: usize,
}

impl BranchSchedule {
    pub fn new(
        depth_t: usize,
        split_steps: Vec<usize>,
        branch_factor: usize,
        correlation: f64,
    ) -> Result<Self> {
        let schedule = BranchSchedule {
            depth_t,
            split_steps,
            branch_factor,
            correlation,
            final_step_deterministic: false,
            leaf_budget: DEFAULT_LEAF_BUDGET,
        };
        schedule.validate()?;
        Ok(schedule)
    }

    /// Make the final denoising step deterministic. The final transition then
    /// carries no noise, no log-probability and no loss term.
    pub fn with_final_step_deterministic(mut self, on: bool) -> Result<Self> {
        self.final_step_deterministic = on;
        self.validate()?;
        Ok(self)
    }

    pub fn with_leaf_budget(mut self, budget: usize) -> Result<Self> {
        self.leaf_budget = budget;
        self.validate()?;
        Ok(self)
    }

    fn validate(&self) -> Result<()> {
        if self.depth_t == 0 {
            return Err(Error::Config("schedule depth must be at least 1".into()));
        }
        if self.branch_factor < 2 {
            return Err(Error::Config(format!(
                "branch_factor must be at least 2, got {}",
                self.branch_factor
            )));
        }
        if !(self.correlation.is_finite() && self.correlation >= 0.0) {
            return Err(Error::Config(format!(
                "correlation must be a non-negative real, got {}",
                self.correlation
            )));
        }
        for pair in self.split_steps.windows(2) {
            if pair[0] >= pair[1] {
                return Err(Error::Config(format!(
                    "split_steps must be strictly increasing, got {:?}",
                    self.split_steps
                )));
            }
        }
        if let Some(&last) = self.split_steps.last() {
            if last >= self.depth_t {
                return Err(Error::Config(format!(
                    "split step {} is out of range for depth {}",
                    last, self.depth_t
                )));
            }
        }
        if self.final_step_deterministic && self.is_split(self.depth_t - 1) {
            return Err(Error::Config(
                "the final step cannot both split and be deterministic".into(),
            ));
        }
        let leaves = checked_leaf_count(self.branch_factor, self.split_steps.len())
            .ok_or_else(|| Error::Config("leaf count overflows".into()))?;
        if leaves > self.leaf_budget {
            return Err(Error::Config(format!(
                "schedule produces {} leaves, exceeding the leaf budget {}",
                leaves, self.leaf_budget
            )));
        }
        Ok(())
    }

    pub fn depth(&self) -> usize {
        self.depth_t
    }

    pub fn split_steps(&self) -> &[usize] {
        &self.split_steps
    }

    pub fn branch_factor(&self) -> usize {
        self.branch_factor
    }

    pub fn correlation(&self) -> f64 {
        self.correlation
    }

    pub fn final_step_deterministic(&self) -> bool {
        self.final_step_deterministic
    }

    pub fn leaf_budget(&self) -> usize {
        self.leaf_budget
    }

    pub fn is_split(&self, depth: usize) -> bool {
        self.split_steps.binary_search(&depth).is_ok()
    }

    /// Number of split steps strictly before `depth`.
    pub fn splits_before(&self, depth: usize) -> usize {
        self.split_steps.partition_point(|&b| b < depth)
    }

    /// Node count at `depth`: `K^(splits before depth)`.
    pub fn width_at(&self, depth: usize) -> usize {
        self.branch_factor.pow(self.splits_before(depth) as u32)
    }

    /// Total leaf count `K^|split_steps|`.
    pub fn leaf_count(&self) -> usize {
        self.branch_factor.pow(self.split_steps.len() as u32)
    }

    /// Number of children a node at `depth` has.
    pub fn child_count(&self, depth: usize) -> usize {
        if depth >= self.depth_t {
            0
        } else if self.is_split(depth) {
            self.branch_factor
        } else {
            1
        }
    }
}

fn checked_leaf_count(k: usize, splits: usize) -> Option<usize> {
    let mut leaves = 1usize;
    for _ in 0..splits {
        leaves = leaves.checked_mul(k)?;
    }
    Some(leaves)
}

// ---------------------------------------------------------------------------
// Sliding depth window
// ---------------------------------------------------------------------------

/// A window of consecutive depths that shifts forward during training.
///
/// At iteration `m` the window occupies depths `p .. p + size` with
/// `p = min(start + m / shift_interval, stop)`. The same arithmetic drives
/// both depth pruning and the hybrid ODE-SDE step-mode schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlidingWindow {
    pub size: usize,
    pub shift_interval: usize,
    pub start: usize,
    pub stop: usize,
}

impl SlidingWindow {
    pub fn new(size: usize, shift_interval: usize, start: usize, stop: usize) -> Result<Self> {
        if size == 0 {
            return Err(Error::Config("window size must be at least 1".into()));
        }
        if shift_interval == 0 {
            return Err(Error::Config(
                "window shift_interval must be at least 1".into(),
            ));
        }
        if start > stop {
            return Err(Error::Config(format!(
                "window start {start} exceeds stop {stop}"
            )));
        }
        Ok(SlidingWindow {
            size,
            shift_interval,
            start,
            stop,
        })
    }

    /// Leading depth of the window at `iteration`.
    pub fn position(&self, iteration: usize) -> usize {
        (self.start + iteration / self.shift_interval).min(self.stop)
    }

    /// Depths covered at `iteration`, clamped to valid transition indices
    /// `0..depth_t`. Returns the range and whether clamping dropped depths.
    pub fn depths(&self, iteration: usize, depth_t: usize) -> (std::ops::Range<usize>, bool) {
        let p = self.position(iteration);
        let end = p + self.size;
        if end > depth_t {
            (p..depth_t.max(p), true)
        } else {
            (p..end, false)
        }
    }
}

// ---------------------------------------------------------------------------
// Trajectory tree
// ---------------------------------------------------------------------------

/// A rollout tree over `schedule.depth()` transitions.
///
/// Depth 0 holds the single root; depth `T` holds the leaves. All per-node
/// storage is flat, indexed by `flat_index(depth, breadth)`.
#[derive(Debug, Clone)]
pub struct TrajectoryTree {
    schedule: BranchSchedule,
    dim: usize,
    /// offsets[d] is the flat index of the first node at depth d;
    /// offsets[T + 1] is the total node count.
    offsets: Vec<usize>,
    states: Vec<f64>,
    states_set: Vec<bool>,
    /// Noise consumed by the edge into each node (zeros for the root and
    /// for deterministic transitions).
    noises: Vec<f64>,
    /// Behavior log-probability of the edge into each node
    /// (0.0 for the root and for deterministic transitions).
    logprobs: Vec<f64>,
    /// Advantage of the edge into each node, filled by the credit module.
    advantages: Vec<Option<f64>>,
    /// Whether the edge into each node is in the gradient set, filled by the
    /// pruning module. Meaningless until `mask_initialized`.
    grad_mask: Vec<bool>,
    mask_initialized: bool,
    /// Effective noise scale of each transition index `0..T`;
    /// exactly 0.0 marks a deterministic (ODE) step.
    step_sigmas: Vec<f64>,
}

impl TrajectoryTree {
    /// Build the skeleton: index structure allocated, all states unset
    /// except the root.
    pub fn skeleton(schedule: BranchSchedule, root_state: Vec<f64>) -> Result<Self> {
        schedule.validate()?;
        let dim = root_state.len();
        if dim == 0 {
            return Err(Error::Config("state dimension must be positive".into()));
        }
        let t = schedule.depth();
        let mut offsets = Vec::with_capacity(t + 2);
        let mut total = 0usize;
        for d in 0..=t {
            offsets.push(total);
            total += schedule.width_at(d);
        }
        offsets.push(total);
        let mut tree = TrajectoryTree {
            schedule,
            dim,
            offsets,
            states: vec![0.0; total * dim],
            states_set: vec![false; total],
            noises: vec![0.0; total * dim],
            logprobs: vec![0.0; total],
            advantages: vec![None; total],
            grad_mask: vec![false; total],
            mask_initialized: false,
            step_sigmas: vec![0.0; t],
        };
        tree.set_state(0, 0, &root_state)?;
        Ok(tree)
    }

    pub fn schedule(&self) -> &BranchSchedule {
        &self.schedule
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn depth(&self) -> usize {
        self.schedule.depth()
    }

    pub fn node_count(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    /// One edge per non-root node.
    pub fn edge_count(&self) -> usize {
        self.node_count() - 1
    }

    pub fn leaf_count(&self) -> usize {
        self.schedule.leaf_count()
    }

    pub fn width_at(&self, depth: usize) -> usize {
        self.schedule.width_at(depth)
    }

    pub fn flat_index(&self, depth: usize, breadth: usize) -> usize {
        debug_assert!(depth <= self.depth());
        debug_assert!(breadth < self.width_at(depth));
        self.offsets[depth] + breadth
    }

    /// Parent coordinates of a non-root node.
    pub fn parent(&self, depth: usize, breadth: usize) -> Option<(usize, usize)> {
        if depth == 0 {
            return None;
        }
        let b = if self.schedule.is_split(depth - 1) {
            breadth / self.schedule.branch_factor()
        } else {
            breadth
        };
        Some((depth - 1, b))
    }

    /// Breadth indices of the children of `(depth, breadth)`.
    pub fn children(&self, depth: usize, breadth: usize) -> std::ops::Range<usize> {
        match self.schedule.child_count(depth) {
            0 => 0..0,
            1 => breadth..breadth + 1,
            k => breadth * k..(breadth + 1) * k,
        }
    }

    /// Contiguous range of leaf breadth indices descending from
    /// `(depth, breadth)`.
    pub fn descendant_leaf_range(&self, depth: usize, breadth: usize) -> std::ops::Range<usize> {
        let per_node = self.leaf_count() / self.width_at(depth);
        breadth * per_node..(breadth + 1) * per_node
    }

    pub fn state(&self, depth: usize, breadth: usize) -> &[f64] {
        let i = self.flat_index(depth, breadth);
        debug_assert!(self.states_set[i], "state ({depth},{breadth}) unset");
        &self.states[i * self.dim..(i + 1) * self.dim]
    }

    pub fn state_is_set(&self, depth: usize, breadth: usize) -> bool {
        self.states_set[self.flat_index(depth, breadth)]
    }

    pub fn set_state(&mut self, depth: usize, breadth: usize, state: &[f64]) -> Result<()> {
        if state.len() != self.dim {
            return Err(Error::Config(format!(
                "state dimension {} does not match tree dimension {}",
                state.len(),
                self.dim
            )));
        }
        if let Some(bad) = state.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite state component {bad} at node ({depth},{breadth})"
            )));
        }
        let i = self.flat_index(depth, breadth);
        self.states[i * self.dim..(i + 1) * self.dim].copy_from_slice(state);
        self.states_set[i] = true;
        Ok(())
    }

    pub fn noise(&self, depth: usize, breadth: usize) -> &[f64] {
        let i = self.flat_index(depth, breadth);
        &self.noises[i * self.dim..(i + 1) * self.dim]
    }

    pub fn set_noise(&mut self, depth: usize, breadth: usize, noise: &[f64]) -> Result<()> {
        if let Some(bad) = noise.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite noise component {bad} at node ({depth},{breadth})"
            )));
        }
        let i = self.flat_index(depth, breadth);
        self.noises[i * self.dim..(i + 1) * self.dim].copy_from_slice(noise);
        Ok(())
    }

    /// Behavior log-probability of the edge into `(depth, breadth)`.
    pub fn edge_logprob(&self, depth: usize, breadth: usize) -> f64 {
        assert!(depth > 0, "the root has no incoming edge");
        assert!(
            self.step_is_stochastic(depth - 1),
            "transition {} is deterministic and has no log-probability",
            depth - 1
        );
        self.logprobs[self.flat_index(depth, breadth)]
    }

    pub fn set_edge_logprob(&mut self, depth: usize, breadth: usize, lp: f64) {
        assert!(depth > 0, "the root has no incoming edge");
        let i = self.flat_index(depth, breadth);
        self.logprobs[i] = lp;
    }

    pub fn advantage(&self, depth: usize, breadth: usize) -> Option<f64> {
        self.advantages[self.flat_index(depth, breadth)]
    }

    pub fn set_advantage(&mut self, depth: usize, breadth: usize, adv: f64) {
        assert!(depth > 0, "the root has no incoming edge");
        let i = self.flat_index(depth, breadth);
        self.advantages[i] = Some(adv);
    }

    /// Effective noise scale of transition `step` (index into `0..T`).
    pub fn step_sigma(&self, step: usize) -> f64 {
        self.step_sigmas[step]
    }

    pub fn set_step_sigma(&mut self, step: usize, sigma: f64) {
        self.step_sigmas[step] = sigma;
    }

    /// Whether transition `step` injected noise.
    pub fn step_is_stochastic(&self, step: usize) -> bool {
        self.step_sigmas[step] != 0.0
    }

    /// Initialize the gradient mask to "every stochastic edge participates".
    /// Deterministic transitions never carry loss terms.
    pub fn init_gradient_mask(&mut self) {
        for d in 1..=self.depth() {
            let stochastic = self.step_is_stochastic(d - 1);
            for b in 0..self.width_at(d) {
                let i = self.flat_index(d, b);
                self.grad_mask[i] = stochastic;
            }
        }
        self.mask_initialized = true;
    }

    pub fn mask_initialized(&self) -> bool {
        self.mask_initialized
    }

    pub fn in_gradient_set(&self, depth: usize, breadth: usize) -> bool {
        assert!(self.mask_initialized, "gradient mask has not been set");
        self.grad_mask[self.flat_index(depth, breadth)]
    }

    /// Clear the gradient flag of the edge into `(depth, breadth)`.
    pub fn drop_from_gradient_set(&mut self, depth: usize, breadth: usize) {
        assert!(self.mask_initialized, "gradient mask has not been set");
        let i = self.flat_index(depth, breadth);
        self.grad_mask[i] = false;
    }

    /// States of all leaves, one row per leaf.
    pub fn leaf_states(&self) -> Vec<Vec<f64>> {
        let t = self.depth();
        (0..self.leaf_count())
            .map(|b| self.state(t, b).to_vec())
            .collect()
    }

    /// Gradient-edge count divided by leaf count.
    ///
    /// Fails if the pruning pipeline has not populated the mask yet.
    pub fn gradient_edge_nfe(&self) -> Result<f64> {
        if !self.mask_initialized {
            return Err(Error::Config(
                "gradient mask is unset; run the pruning pipeline first".into(),
            ));
        }
        let kept = self.grad_mask.iter().filter(|&&m| m).count();
        Ok(kept as f64 / self.leaf_count() as f64)
    }

    /// Serialize the full tree for `dump-tree` and for oracle tests.
    pub fn dump(&self) -> TreeDump {
        let mut nodes = Vec::with_capacity(self.node_count());
        let mut edges = Vec::with_capacity(self.edge_count());
        for d in 0..=self.depth() {
            for b in 0..self.width_at(d) {
                let i = self.flat_index(d, b);
                nodes.push(NodeDump {
                    depth: d,
                    breadth_index: b,
                    state: self.states[i * self.dim..(i + 1) * self.dim].to_vec(),
                    behavior_logprob_from_parent: self.logprobs[i],
                    recorded_noise: self.noises[i * self.dim..(i + 1) * self.dim].to_vec(),
                });
                if d > 0 {
                    edges.push(EdgeDump {
                        depth: d,
                        breadth_index: b,
                        advantage: self.advantages[i],
                        in_gradient_set: self.mask_initialized && self.grad_mask[i],
                    });
                }
            }
        }
        TreeDump {
            schedule: self.schedule.clone(),
            dim: self.dim,
            step_sigmas: self.step_sigmas.clone(),
            nodes,
            edges,
        }
    }
}

// ---------------------------------------------------------------------------
// NFE accounting
// ---------------------------------------------------------------------------

/// Denoiser evaluations per final sample for a branching schedule.
///
/// Evaluations are counted per transition: the node count charged at depth
/// `d` is `K^(number of split steps <= d)`, summed over `d = 0..T` and
/// divided by the leaf count. Equivalently this is one evaluation per edge
/// of the tree. A single chain of `T` steps therefore costs exactly `T`.
pub fn average_per_sample_nfe(schedule: &BranchSchedule) -> f64 {
    let k = schedule.branch_factor() as f64;
    let mut evals = 0.0;
    for d in 0..schedule.depth() {
        let splits_through = schedule.splits_before(d + 1);
        evals += k.powi(splits_through as i32);
    }
    evals / schedule.leaf_count() as f64
}

// ---------------------------------------------------------------------------
// Serialization of dumps
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NodeDump {
    pub depth: usize,
    pub breadth_index: usize,
    pub state: Vec<f64>,
    pub behavior_logprob_from_parent: f64,
    pub recorded_noise: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EdgeDump {
    pub depth: usize,
    pub breadth_index: usize,
    pub advantage: Option<f64>,
    pub in_gradient_set: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TreeDump {
    pub schedule: BranchSchedule,
    pub dim: usize,
    pub step_sigmas: Vec<f64>,
    pub nodes: Vec<NodeDump>,
    pub edges: Vec<EdgeDump>,
}
