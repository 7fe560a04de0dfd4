//! Training loops over trajectory trees.
//!
//! One iteration does the same thing in every mode: snapshot the policy as
//! the behavior policy, roll out under the snapshot, turn rewards into
//! per-edge advantages, replay the recorded transitions under the current
//! parameters to get importance ratios, accumulate the clipped surrogate
//! gradient over a batch of prompts, and take a single optimizer step.
//! Because the parameters only move once per iteration, every ratio during
//! an iteration is exactly 1; the machinery still computes and clips ratios
//! so the estimator stays correct if the update cadence ever changes.
//!
//! Three modes share this skeleton. `train_branch` rolls one tree per
//! prompt and credits edges through reward fusion and depth-wise
//! normalization. `train_sequential` is the flat baseline: a group of
//! independent chains per prompt, terminal rewards normalized within the
//! group and broadcast to every step. `train_hybrid` is the branch mode
//! with stochastic steps restricted to the split steps plus a sliding
//! window, so gradient edges (and their replay cost) drop sharply.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::Serialize;

use crate::credit::{self, FusionConfig, FusionMode};
use crate::dynamics::{self, DiffusionCoefficients, RolloutSeed, TimeGrid};
use crate::policy::{MixtureWorld, Policy, RewardFunction, Trace};
use crate::pruning::{self, PruningConfig, WidthMode};
use crate::rng::{self, Purpose};
use crate::runio::{RunLog, RunRow};
use crate::tree::{BranchSchedule, SlidingWindow, TrajectoryTree};
use crate::{Error, Result};

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Clipped-surrogate hyperparameters shared by all modes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GrpoConfig {
    /// Half-width of the ratio clip band `[1 - eps, 1 + eps]`.
    pub clip_epsilon: f64,
    /// Chains per prompt in the sequential baseline. Branch modes take
    /// their group size from the tree's leaf count instead.
    pub num_generations: usize,
    /// Prompts accumulated into each optimizer step.
    pub grad_accum_steps: usize,
    /// Optimizer steps to run.
    pub iterations: usize,
    /// Share the initial latent across a prompt's chains (sequential mode;
    /// trees share their root by construction).
    pub init_same_noise: bool,
    /// Fraction of stochastic steps that receive gradient in the sequential
    /// baseline; `floor(fraction * steps)` steps are drawn per chain.
    pub timestep_fraction: f64,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        GrpoConfig {
            clip_epsilon: 1e-4,
            num_generations: 12,
            grad_accum_steps: 12,
            iterations: 0,
            init_same_noise: true,
            timestep_fraction: 1.0,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_epsilon.is_finite() && self.clip_epsilon > 0.0 && self.clip_epsilon < 1.0) {
            return Err(Error::Config(format!(
                "clip_epsilon must lie in (0, 1), got {}",
                self.clip_epsilon
            )));
        }
        if self.num_generations < 2 {
            return Err(Error::Config(format!(
                "num_generations must be at least 2 for group normalization, got {}",
                self.num_generations
            )));
        }
        if self.grad_accum_steps == 0 {
            return Err(Error::Config("grad_accum_steps must be at least 1".into()));
        }
        if !(self.timestep_fraction.is_finite()
            && self.timestep_fraction > 0.0
            && self.timestep_fraction <= 1.0)
        {
            return Err(Error::Config(format!(
                "timestep_fraction must lie in (0, 1], got {}",
                self.timestep_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub max_grad_norm: f64,
    pub ema_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 1e-5,
            weight_decay: 1e-4,
            max_grad_norm: 0.01,
            ema_decay: 0.995,
        }
    }
}

/// Everything one training run needs beyond the schedule and the task.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub grpo: GrpoConfig,
    pub optimizer: OptimizerConfig,
    pub fusion: FusionConfig,
    /// Variance floor for depth-wise normalization.
    pub credit_epsilon: f64,
    /// Symmetric advantage clamp after normalization.
    pub advantage_clip: f64,
    pub pruning: PruningConfig,
    /// Stochastic window for hybrid mode; other modes ignore it.
    pub hybrid_window: Option<SlidingWindow>,
    /// Time-grid warp strength.
    pub shift: f64,
    /// Noise level of stochastic steps.
    pub eta: f64,
    /// Run seed: parameter init, step subsets, any training-side randomness.
    pub seed: u64,
    /// Sampler seed: root, step and branch noise of rollouts.
    pub sampler_seed: u64,
    /// Denoising steps of a sequential-baseline chain.
    pub baseline_steps: usize,
    /// Write a checkpoint every this many iterations; 0 disables.
    pub checkpoint_interval: usize,
    /// Where checkpoints and failure dumps go; `None` disables both.
    pub output_dir: Option<PathBuf>,
    /// Measure wall time per iteration. Off by default so identical runs
    /// produce byte-identical logs.
    pub record_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            grpo: GrpoConfig::default(),
            optimizer: OptimizerConfig::default(),
            fusion: FusionConfig::softmax(1.0),
            credit_epsilon: credit::DEFAULT_EPSILON,
            advantage_clip: credit::DEFAULT_ADVANTAGE_CLIP,
            pruning: PruningConfig::none(),
            hybrid_window: None,
            shift: 3.0,
            eta: 0.3,
            seed: 42,
            sampler_seed: 1223627,
            baseline_steps: 16,
            checkpoint_interval: 40,
            output_dir: None,
            record_wall_time: false,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        self.grpo.validate()?;
        if !(self.optimizer.learning_rate.is_finite() && self.optimizer.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.optimizer.learning_rate
            )));
        }
        if !(self.optimizer.weight_decay.is_finite() && self.optimizer.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "weight_decay must be non-negative, got {}",
                self.optimizer.weight_decay
            )));
        }
        if !(self.optimizer.max_grad_norm.is_finite() && self.optimizer.max_grad_norm > 0.0) {
            return Err(Error::Config(format!(
                "max_grad_norm must be positive, got {}",
                self.optimizer.max_grad_norm
            )));
        }
        if matches!(
            self.fusion.mode,
            FusionMode::ImportanceSampling | FusionMode::SelfNormalizedIs
        ) {
            return Err(Error::Config(
                "training fuses rewards along recorded paths; importance-sampling fusion \
                 is a diagnostic estimator, not a training mode"
                    .into(),
            ));
        }
        if self.baseline_steps == 0 {
            return Err(Error::Config("baseline_steps must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    Branch,
    Sequential,
    Hybrid,
}

impl TrainMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            TrainMode::Branch => "branch",
            TrainMode::Sequential => "sequential",
            TrainMode::Hybrid => "hybrid",
        }
    }
}

impl std::str::FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "branch" => Ok(TrainMode::Branch),
            "sequential" => Ok(TrainMode::Sequential),
            "hybrid" => Ok(TrainMode::Hybrid),
            other => Err(Error::Config(format!(
                "unknown training mode {other:?}; expected branch, sequential or hybrid"
            ))),
        }
    }
}

// ---------------------------------------------------------------------------
// Clipped surrogate objective
// ---------------------------------------------------------------------------

/// Objective value and its derivative with respect to each new
/// log-probability.
#[derive(Debug, Clone)]
pub struct EdgeLoss {
    pub objective: f64,
    pub dobj_dnew: Vec<f64>,
}

/// Clipped-ratio surrogate over a set of edges:
/// `mean_e min(rho_e A_e, clamp(rho_e, 1 - eps, 1 + eps) A_e)` with
/// `rho_e = exp(new_e - old_e)`.
///
/// The derivative flows only through edges where the unclipped branch is
/// selected; ties (in particular `rho = 1`) count as unclipped, so at the
/// behavior policy the gradient is the plain advantage-weighted score.
pub fn grpo_edge_loss(
    advantages: &[f64],
    old_logprobs: &[f64],
    new_logprobs: &[f64],
    clip_epsilon: f64,
) -> Result<EdgeLoss> {
    assert_eq!(advantages.len(), old_logprobs.len(), "edge array mismatch");
    assert_eq!(advantages.len(), new_logprobs.len(), "edge array mismatch");
    if advantages.is_empty() {
        return Err(Error::Config("gradient edge set is empty".into()));
    }
    if !(clip_epsilon.is_finite() && clip_epsilon > 0.0 && clip_epsilon < 1.0) {
        return Err(Error::Config(format!(
            "clip_epsilon must lie in (0, 1), got {clip_epsilon}"
        )));
    }
    let n = advantages.len() as f64;
    let mut objective = 0.0;
    let mut dobj = vec![0.0; advantages.len()];
    for (e, ((&a, &old), &new)) in advantages
        .iter()
        .zip(old_logprobs)
        .zip(new_logprobs)
        .enumerate()
    {
        let rho = (new - old).exp();
        if !rho.is_finite() {
            return Err(Error::Numeric(format!(
                "importance ratio exp({new} - {old}) is not finite"
            )));
        }
        let unclipped = rho * a;
        let clipped = rho.clamp(1.0 - clip_epsilon, 1.0 + clip_epsilon) * a;
        if unclipped <= clipped {
            objective += unclipped;
            dobj[e] = rho * a / n;
        } else {
            objective += clipped;
        }
    }
    objective /= n;
    if !objective.is_finite() {
        return Err(Error::Numeric(format!(
            "surrogate objective is not finite: {objective}"
        )));
    }
    Ok(EdgeLoss {
        objective,
        dobj_dnew: dobj,
    })
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

/// Adam with decoupled weight decay and global-norm gradient clipping.
///
/// `step` clips first (scaling the whole gradient so its norm is at most
/// `max_grad_norm`), then feeds the clipped gradient to bias-corrected
/// first and second moments, and finally applies decay directly to the
/// parameters rather than through the gradient.
#[derive(Debug, Clone)]
pub struct AdamW {
    learning_rate: f64,
    weight_decay: f64,
    max_grad_norm: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamW {
    pub fn new(n_params: usize, cfg: &OptimizerConfig) -> AdamW {
        AdamW {
            learning_rate: cfg.learning_rate,
            weight_decay: cfg.weight_decay,
            max_grad_norm: cfg.max_grad_norm,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    /// Apply one update in place. Returns the pre-clip gradient norm.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<f64> {
        assert_eq!(params.len(), self.m.len(), "parameter count changed");
        assert_eq!(grads.len(), self.m.len(), "gradient count mismatch");
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!(
                "gradient component {i} is not finite: {}",
                grads[i]
            )));
        }
        let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
        let scale = if norm > self.max_grad_norm {
            self.max_grad_norm / norm
        } else {
            1.0
        };
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i] * scale;
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -=
                self.learning_rate * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * params[i]);
        }
        Ok(norm)
    }
}

/// Exponential moving average: `ema <- decay * ema + (1 - decay) * params`.
pub fn ema_update(ema: &mut [f64], params: &[f64], decay: f64) {
    debug_assert_eq!(ema.len(), params.len());
    for (e, p) in ema.iter_mut().zip(params) {
        *e = decay * *e + (1.0 - decay) * p;
    }
}

// ---------------------------------------------------------------------------
// Replay: recompute log-probabilities of recorded transitions
// ---------------------------------------------------------------------------

/// One forward pass at an internal node, shared by all of its child edges.
struct ParentWork {
    trace: Trace,
    mu: Vec<f64>,
    h: f64,
    sigma: f64,
}

/// One gradient-set edge, pointing at its parent's cached forward pass.
struct ReplayEdge {
    depth: usize,
    breadth: usize,
    parent: usize,
    old_lp: f64,
    new_lp: f64,
    advantage: f64,
}

/// Walk the gradient set of `tree` and recompute each edge's transition
/// log-probability under the current parameters. The realized next states
/// and step noise scales are taken from the rollout record; only the policy
/// mean moves.
fn collect_replay(
    tree: &TrajectoryTree,
    grid: &TimeGrid,
    policy: &Policy,
) -> Result<(Vec<ParentWork>, Vec<ReplayEdge>)> {
    let mut works = Vec::new();
    let mut edges = Vec::new();
    for pd in 0..tree.depth() {
        if !tree.step_is_stochastic(pd) {
            continue;
        }
        let sigma = tree.step_sigma(pd);
        let h = grid.step_size(pd);
        let t = grid.time(pd);
        for pb in 0..tree.width_at(pd) {
            let children: Vec<usize> = tree
                .children(pd, pb)
                .filter(|&c| tree.in_gradient_set(pd + 1, c))
                .collect();
            if children.is_empty() {
                continue;
            }
            let z = tree.state(pd, pb);
            let (v, trace) = policy.net.forward_traced(z, t)?;
            let mu: Vec<f64> = z.iter().zip(&v).map(|(zi, vi)| zi + h * vi).collect();
            let parent = works.len();
            for c in children {
                let advantage = tree.advantage(pd + 1, c).ok_or_else(|| {
                    Error::Config(format!("edge ({},{c}) has no advantage assigned", pd + 1))
                })?;
                edges.push(ReplayEdge {
                    depth: pd + 1,
                    breadth: c,
                    parent,
                    old_lp: tree.edge_logprob(pd + 1, c),
                    new_lp: dynamics::transition_logprob(&mu, tree.state(pd + 1, c), sigma),
                    advantage,
                });
            }
            works.push(ParentWork {
                trace,
                mu,
                h,
                sigma,
            });
        }
    }
    Ok((works, edges))
}

/// Backpropagate `scale * dobj_dnew[e]` through each replayed edge into the
/// policy's gradient accumulator.
fn apply_edge_gradients(
    policy: &mut Policy,
    tree: &TrajectoryTree,
    works: &[ParentWork],
    edges: &[ReplayEdge],
    dobj_dnew: &[f64],
    scale: f64,
) {
    debug_assert_eq!(edges.len(), dobj_dnew.len());
    let dim = tree.dim();
    let mut upstream = vec![0.0; dim];
    for (edge, &dd) in edges.iter().zip(dobj_dnew) {
        let coeff = dd * scale;
        if coeff == 0.0 {
            continue;
        }
        let w = &works[edge.parent];
        let child = tree.state(edge.depth, edge.breadth);
        let var = w.sigma * w.sigma;
        for j in 0..dim {
            upstream[j] = coeff * (child[j] - w.mu[j]) / var * w.h;
        }
        policy.net.backward(&w.trace, &upstream, &mut policy.grads);
    }
}

// ---------------------------------------------------------------------------
// Shared per-prompt bookkeeping
// ---------------------------------------------------------------------------

/// Rollouts of one prompt with their replay records.
struct PromptBatch {
    trees: Vec<TrajectoryTree>,
    works: Vec<Vec<ParentWork>>,
    edges: Vec<Vec<ReplayEdge>>,
}

impl PromptBatch {
    fn edge_total(&self) -> usize {
        self.edges.iter().map(Vec::len).sum()
    }
}

/// Pool the batch's edges, evaluate the surrogate, and accumulate gradients
/// scaled for `accum` prompts per optimizer step. Returns the objective.
fn accumulate_prompt(
    policy: &mut Policy,
    batch: &PromptBatch,
    clip_epsilon: f64,
    accum: usize,
) -> Result<f64> {
    let total = batch.edge_total();
    let mut advantages = Vec::with_capacity(total);
    let mut old_lps = Vec::with_capacity(total);
    let mut new_lps = Vec::with_capacity(total);
    for edges in &batch.edges {
        for e in edges {
            advantages.push(e.advantage);
            old_lps.push(e.old_lp);
            new_lps.push(e.new_lp);
        }
    }
    let loss = grpo_edge_loss(&advantages, &old_lps, &new_lps, clip_epsilon)?;
    // Maximizing the objective means descending its negation, averaged over
    // the accumulation batch.
    let scale = -1.0 / accum as f64;
    let mut offset = 0;
    for (tree, (works, edges)) in batch
        .trees
        .iter()
        .zip(batch.works.iter().zip(&batch.edges))
    {
        let slice = &loss.dobj_dnew[offset..offset + edges.len()];
        apply_edge_gradients(policy, tree, works, edges, slice, scale);
        offset += edges.len();
    }
    Ok(loss.objective)
}

/// Write the prompt's trees next to the run outputs so a numeric failure
/// can be inspected after the fact. Best effort; logging is the fallback.
fn dump_failed_prompt(dir: Option<&Path>, iteration: usize, prompt: u64, trees: &[TrajectoryTree]) {
    let Some(dir) = dir else {
        return;
    };
    let dumps: Vec<_> = trees.iter().map(|t| t.dump()).collect();
    let path = dir.join(format!("failure_iter{iteration:06}_prompt{prompt}.json"));
    let write = std::fs::create_dir_all(dir).and_then(|_| {
        std::fs::write(
            &path,
            serde_json::to_vec_pretty(&dumps).expect("tree dump serializes"),
        )
    });
    match write {
        Ok(()) => log::error!("dumped failing rollouts to {}", path.display()),
        Err(e) => log::error!("could not write failure dump {}: {e}", path.display()),
    }
}

fn population_stats(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

// ---------------------------------------------------------------------------
// Sequential-baseline helpers
// ---------------------------------------------------------------------------

/// Group-normalized advantages `(r - mean) / std` with the population
/// standard deviation. A zero-variance group gets all-zero advantages, so
/// it contributes no update.
pub fn group_advantages(rewards: &[f64]) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::Config(
            "group normalization needs at least two rewards".into(),
        ));
    }
    if let Some(bad) = rewards.iter().find(|r| !r.is_finite()) {
        return Err(Error::Numeric(format!("non-finite reward {bad} in group")));
    }
    let (mean, std) = population_stats(rewards);
    if std == 0.0 {
        return Ok(vec![0.0; rewards.len()]);
    }
    Ok(rewards.iter().map(|r| (r - mean) / std).collect())
}

/// Draw `floor(fraction * n)` distinct step indices from `0..n`.
fn subsample_steps(n: usize, fraction: f64, rng: &mut rand_chacha::ChaCha8Rng) -> Vec<usize> {
    let count = ((fraction * n as f64).floor() as usize).min(n);
    if count == n {
        return (0..n).collect();
    }
    let mut steps: Vec<usize> = (0..n).collect();
    steps.shuffle(rng);
    steps.truncate(count);
    steps.sort_unstable();
    steps
}

// ---------------------------------------------------------------------------
// Training loops
// ---------------------------------------------------------------------------

/// Gradient-set edges remaining in a tree after pruning.
fn gradient_edge_count(tree: &TrajectoryTree) -> u64 {
    let mut count = 0;
    for d in 1..=tree.depth() {
        for b in 0..tree.width_at(d) {
            if tree.in_gradient_set(d, b) {
                count += 1;
            }
        }
    }
    count
}

/// Train on branching rollouts. `hybrid` restricts stochastic steps to the
/// splits plus the sliding window.
fn train_tree_mode(
    cfg: &TrainConfig,
    schedule: &BranchSchedule,
    world: &MixtureWorld,
    reward: &RewardFunction,
    policy: &mut Policy,
    hybrid: bool,
) -> Result<RunLog> {
    cfg.validate()?;
    if world.dim() != policy.net.dim() {
        return Err(Error::Config(format!(
            "world dimension {} does not match the policy's {}",
            world.dim(),
            policy.net.dim()
        )));
    }
    let window = if hybrid {
        Some(cfg.hybrid_window.ok_or_else(|| {
            Error::Config("hybrid mode needs a sliding window configured".into())
        })?)
    } else {
        None
    };
    let grid = TimeGrid::new(schedule.depth(), cfg.shift)?;
    let coeffs = DiffusionCoefficients::toy(cfg.eta)?;
    let accum = cfg.grpo.grad_accum_steps;
    let mut optimizer = AdamW::new(policy.net.param_count(), &cfg.optimizer);
    let mut log = RunLog::new();

    if cfg.grpo.iterations == 0 {
        let modes = match window {
            Some(w) => dynamics::hybrid_step_modes(schedule, &w, 0),
            None => dynamics::base_step_modes(schedule),
        };
        let started = Instant::now();
        let mut rewards = Vec::new();
        let mut nfe_old = 0u64;
        for p in 0..accum {
            let seed = RolloutSeed::new(cfg.sampler_seed, p as u64);
            let tree = dynamics::rollout_tree(
                schedule,
                world.dim(),
                &grid,
                &coeffs,
                &modes,
                seed,
                policy,
            )?;
            nfe_old += tree.edge_count() as u64;
            rewards.extend(tree.leaf_states().iter().map(|z| reward.evaluate(z)));
        }
        log.push(eval_row(&rewards, nfe_old, elapsed_ms(cfg, started)));
        return Ok(log);
    }

    for it in 0..cfg.grpo.iterations {
        let started = Instant::now();
        let behavior = policy.clone();
        let modes = match window {
            Some(w) => dynamics::hybrid_step_modes(schedule, &w, it),
            None => dynamics::base_step_modes(schedule),
        };
        policy.zero_grads();

        let mut iter_rewards = Vec::new();
        let mut objective_sum = 0.0;
        let mut nfe_old = 0u64;
        let mut nfe_new = 0u64;
        let mut any_edges = false;

        for p in 0..accum {
            let prompt = (it * accum + p) as u64;
            let seed = RolloutSeed::new(cfg.sampler_seed, prompt);
            let mut tree = dynamics::rollout_tree(
                schedule,
                world.dim(),
                &grid,
                &coeffs,
                &modes,
                seed,
                &behavior,
            )?;
            let leaf_rewards: Vec<f64> = tree
                .leaf_states()
                .iter()
                .map(|z| reward.evaluate(z))
                .collect();
            iter_rewards.extend_from_slice(&leaf_rewards);

            let mut table = credit::fuse_rewards(&tree, &leaf_rewards, &cfg.fusion)?
                .with_epsilon(cfg.credit_epsilon)?
                .with_advantage_clip(cfg.advantage_clip)?;
            credit::depth_normalize(&mut table, &mut tree)?;

            tree.init_gradient_mask();
            if cfg.pruning.width_mode != WidthMode::None {
                pruning::apply_width_pruning(&mut tree, &table, &cfg.pruning)?;
            }
            if let Some(w) = &cfg.pruning.window {
                pruning::apply_depth_pruning(&mut tree, it, w);
            }

            nfe_old += tree.edge_count() as u64;
            nfe_new += gradient_edge_count(&tree);

            let (works, edges) = collect_replay(&tree, &grid, policy)?;
            let batch = PromptBatch {
                trees: vec![tree],
                works: vec![works],
                edges: vec![edges],
            };
            if batch.edge_total() == 0 {
                log::warn!(
                    "iteration {it} prompt {prompt}: gradient edge set is empty, skipping"
                );
                continue;
            }
            any_edges = true;
            match accumulate_prompt(policy, &batch, cfg.grpo.clip_epsilon, accum) {
                Ok(objective) => objective_sum += objective,
                Err(e @ Error::Numeric(_)) => {
                    dump_failed_prompt(cfg.output_dir.as_deref(), it, prompt, &batch.trees);
                    return Err(e);
                }
                Err(e) => return Err(e),
            }
        }

        let grad_norm = finish_iteration(cfg, policy, &mut optimizer, it, any_edges)?;
        let (reward_mean, reward_std) = population_stats(&iter_rewards);
        log.push(RunRow {
            iteration: (it + 1) as u64,
            reward_mean,
            reward_std,
            objective: objective_sum / accum as f64,
            grad_norm,
            nfe_old,
            nfe_new,
            wall_ms: elapsed_ms(cfg, started),
        });
    }
    Ok(log)
}

/// Train the flat GRPO baseline: independent chains, terminal rewards
/// normalized within each prompt's group and broadcast to every stochastic
/// step of the chain.
pub fn train_sequential(
    cfg: &TrainConfig,
    world: &MixtureWorld,
    reward: &RewardFunction,
    policy: &mut Policy,
) -> Result<RunLog> {
    cfg.validate()?;
    if world.dim() != policy.net.dim() {
        return Err(Error::Config(format!(
            "world dimension {} does not match the policy's {}",
            world.dim(),
            policy.net.dim()
        )));
    }
    let chain = BranchSchedule::new(cfg.baseline_steps, Vec::new(), 2, 0.0)?;
    let grid = TimeGrid::new(chain.depth(), cfg.shift)?;
    let coeffs = DiffusionCoefficients::toy(cfg.eta)?;
    let modes = dynamics::base_step_modes(&chain);
    let accum = cfg.grpo.grad_accum_steps;
    let group = cfg.grpo.num_generations;
    let mut optimizer = AdamW::new(policy.net.param_count(), &cfg.optimizer);
    let mut log = RunLog::new();

    if cfg.grpo.iterations == 0 {
        let started = Instant::now();
        let mut rewards = Vec::new();
        let mut nfe_old = 0u64;
        for p in 0..accum {
            for g in 0..group {
                let seed = RolloutSeed {
                    sampler_seed: cfg.sampler_seed,
                    prompt: p as u64,
                    lane: g as u64,
                    shared_root: cfg.grpo.init_same_noise,
                };
                let tree = dynamics::rollout_tree(
                    &chain,
                    world.dim(),
                    &grid,
                    &coeffs,
                    &modes,
                    seed,
                    policy,
                )?;
                nfe_old += tree.edge_count() as u64;
                rewards.push(reward.evaluate(&tree.leaf_states()[0]));
            }
        }
        log.push(eval_row(&rewards, nfe_old, elapsed_ms(cfg, started)));
        return Ok(log);
    }

    for it in 0..cfg.grpo.iterations {
        let started = Instant::now();
        let behavior = policy.clone();
        policy.zero_grads();

        let mut iter_rewards = Vec::new();
        let mut objective_sum = 0.0;
        let mut nfe_old = 0u64;
        let mut nfe_new = 0u64;
        let mut any_edges = false;

        for p in 0..accum {
            let prompt = (it * accum + p) as u64;
            let mut trees = Vec::with_capacity(group);
            let mut terminal_rewards = Vec::with_capacity(group);
            for g in 0..group {
                let seed = RolloutSeed {
                    sampler_seed: cfg.sampler_seed,
                    prompt,
                    lane: g as u64,
                    shared_root: cfg.grpo.init_same_noise,
                };
                let tree = dynamics::rollout_tree(
                    &chain,
                    world.dim(),
                    &grid,
                    &coeffs,
                    &modes,
                    seed,
                    &behavior,
                )?;
                terminal_rewards.push(reward.evaluate(&tree.leaf_states()[0]));
                trees.push(tree);
            }
            iter_rewards.extend_from_slice(&terminal_rewards);
            let advantages = group_advantages(&terminal_rewards)?;

            // Broadcast each chain's advantage, then subsample which steps
            // keep their gradient; subsampling happens after normalization.
            let stochastic_steps: Vec<usize> =
                (0..chain.depth()).filter(|&d| trees[0].step_is_stochastic(d)).collect();
            for (g, tree) in trees.iter_mut().enumerate() {
                for d in 1..=tree.depth() {
                    tree.set_advantage(d, 0, advantages[g]);
                }
                tree.init_gradient_mask();
                let mut rng = rng::stream(
                    cfg.seed,
                    Purpose::StepSubset,
                    prompt,
                    it as u64,
                    g as u64,
                );
                let picks = subsample_steps(
                    stochastic_steps.len(),
                    cfg.grpo.timestep_fraction,
                    &mut rng,
                );
                let keep: Vec<usize> = picks.iter().map(|&i| stochastic_steps[i]).collect();
                for &d in &stochastic_steps {
                    if !keep.contains(&d) {
                        tree.drop_from_gradient_set(d + 1, 0);
                    }
                }
                nfe_old += tree.edge_count() as u64;
                nfe_new += gradient_edge_count(tree);
            }

            let mut works = Vec::with_capacity(group);
            let mut edges = Vec::with_capacity(group);
            for tree in &trees {
                let (w, e) = collect_replay(tree, &grid, policy)?;
                works.push(w);
                edges.push(e);
            }
            let batch = PromptBatch {
                trees,
                works,
                edges,
            };
            if batch.edge_total() == 0 {
                log::warn!(
                    "iteration {it} prompt {prompt}: gradient edge set is empty, skipping"
                );
                continue;
            }
            any_edges = true;
            match accumulate_prompt(policy, &batch, cfg.grpo.clip_epsilon, accum) {
                Ok(objective) => objective_sum += objective,
                Err(e @ Error::Numeric(_)) => {
                    dump_failed_prompt(cfg.output_dir.as_deref(), it, prompt, &batch.trees);
                    return Err(e);
                }
                Err(e) => return Err(e),
            }
        }

        let grad_norm = finish_iteration(cfg, policy, &mut optimizer, it, any_edges)?;
        let (reward_mean, reward_std) = population_stats(&iter_rewards);
        log.push(RunRow {
            iteration: (it + 1) as u64,
            reward_mean,
            reward_std,
            objective: objective_sum / accum as f64,
            grad_norm,
            nfe_old,
            nfe_new,
            wall_ms: elapsed_ms(cfg, started),
        });
    }
    Ok(log)
}

pub fn train_branch(
    cfg: &TrainConfig,
    schedule: &BranchSchedule,
    world: &MixtureWorld,
    reward: &RewardFunction,
    policy: &mut Policy,
) -> Result<RunLog> {
    train_tree_mode(cfg, schedule, world, reward, policy, false)
}

pub fn train_hybrid(
    cfg: &TrainConfig,
    schedule: &BranchSchedule,
    world: &MixtureWorld,
    reward: &RewardFunction,
    policy: &mut Policy,
) -> Result<RunLog> {
    train_tree_mode(cfg, schedule, world, reward, policy, true)
}

/// Optimizer step, EMA update and checkpointing at the end of an iteration.
/// Returns the logged gradient norm (0 when the step was skipped).
fn finish_iteration(
    cfg: &TrainConfig,
    policy: &mut Policy,
    optimizer: &mut AdamW,
    it: usize,
    any_edges: bool,
) -> Result<f64> {
    let grad_norm = if any_edges {
        let norm = optimizer.step(&mut policy.net.params, &policy.grads)?;
        ema_update(&mut policy.ema, &policy.net.params, policy.ema_decay);
        norm
    } else {
        log::warn!("iteration {it}: no gradient edges in any prompt, skipping the update");
        0.0
    };
    if cfg.checkpoint_interval > 0 && (it + 1) % cfg.checkpoint_interval == 0 {
        if let Some(dir) = &cfg.output_dir {
            std::fs::create_dir_all(dir)?;
            let path = dir.join(format!("checkpoint_{:06}.ckpt", it + 1));
            policy.save(&path, it + 1, cfg.seed)?;
        }
    }
    Ok(grad_norm)
}

/// The single row of a zero-iteration run: the starting reward, no update.
fn eval_row(rewards: &[f64], nfe_old: u64, wall_ms: u64) -> RunRow {
    let (reward_mean, reward_std) = population_stats(rewards);
    RunRow {
        iteration: 0,
        reward_mean,
        reward_std,
        objective: 0.0,
        grad_norm: 0.0,
        nfe_old,
        nfe_new: 0,
        wall_ms,
    }
}

fn elapsed_ms(cfg: &TrainConfig, started: Instant) -> u64 {
    if cfg.record_wall_time {
        started.elapsed().as_millis() as u64
    } else {
        0
    }
}

// ---------------------------------------------------------------------------
// Group-baseline variance probe
// ---------------------------------------------------------------------------

/// Paired comparison of the gradient estimator with and without the group
/// baseline on a frozen one-step policy.
#[derive(Debug, Clone, Serialize)]
pub struct BaselineVarianceReport {
    pub resamples: usize,
    pub mean_no_baseline: f64,
    pub mean_group_baseline: f64,
    pub var_no_baseline: f64,
    pub var_group_baseline: f64,
    /// Standard error of the mean difference between the two estimators,
    /// computed from the paired per-resample differences.
    pub paired_se: f64,
}

/// Estimate the variance of the per-group policy gradient with and without
/// the group-mean baseline.
///
/// Rolls a one-step tree with `k` near-independent siblings from a fixed
/// root, `resamples` times, and projects each group's gradient estimate
/// onto a fixed random direction in parameter space. The no-baseline
/// estimator weights scores by raw rewards; the group-baseline estimator
/// weights them by rewards centered on the group mean. Subtracting the
/// group mean leaves the estimator's expectation within `(k-1)/k` of the
/// raw one (the self-term) while cancelling the reward level that dominates
/// the variance.
pub fn baseline_variance_probe(
    policy: &Policy,
    reward: &RewardFunction,
    k: usize,
    resamples: usize,
    seed: u64,
) -> Result<BaselineVarianceReport> {
    if k < 2 {
        return Err(Error::Config(format!(
            "the probe needs at least two siblings, got {k}"
        )));
    }
    if resamples < 2 {
        return Err(Error::Config(format!(
            "the probe needs at least two resamples, got {resamples}"
        )));
    }
    // Large mixing parameter: siblings are effectively independent draws.
    let schedule = BranchSchedule::new(1, vec![0], k, 1e6)?
        .with_leaf_budget(k.max(crate::tree::DEFAULT_LEAF_BUDGET))?;
    let grid = TimeGrid::new(1, 3.0)?;
    let coeffs = DiffusionCoefficients::toy(0.7)?;
    let modes = dynamics::base_step_modes(&schedule);
    let dim = policy.net.dim();

    let mut probe_rng = rng::stream(seed, Purpose::Fixture, 0, 0, 0);
    let mut probe = rng::standard_normal(&mut probe_rng, policy.net.param_count());
    let norm = probe.iter().map(|p| p * p).sum::<f64>().sqrt();
    probe.iter_mut().for_each(|p| *p /= norm);

    let mut no_baseline = Vec::with_capacity(resamples);
    let mut group_baseline = Vec::with_capacity(resamples);
    let mut scratch = vec![0.0; policy.net.param_count()];
    for rep in 0..resamples {
        let rollout_seed = RolloutSeed {
            sampler_seed: seed,
            prompt: 0,
            lane: rep as u64,
            shared_root: true,
        };
        let tree =
            dynamics::rollout_tree(&schedule, dim, &grid, &coeffs, &modes, rollout_seed, policy)?;
        let root = tree.state(0, 0);
        let t = grid.time(0);
        let h = grid.step_size(0);
        let sigma = tree.step_sigma(0);
        let var = sigma * sigma;
        let (v, trace) = policy.net.forward_traced(root, t)?;
        let mu: Vec<f64> = root.iter().zip(&v).map(|(zi, vi)| zi + h * vi).collect();

        let mut rewards = Vec::with_capacity(k);
        let mut scores = Vec::with_capacity(k);
        let mut upstream = vec![0.0; dim];
        for b in 0..k {
            let leaf = tree.state(1, b);
            rewards.push(reward.evaluate(leaf));
            for j in 0..dim {
                upstream[j] = (leaf[j] - mu[j]) / var * h;
            }
            scratch.iter_mut().for_each(|g| *g = 0.0);
            policy.net.backward(&trace, &upstream, &mut scratch);
            scores.push(scratch.iter().zip(&probe).map(|(g, p)| g * p).sum::<f64>());
        }
        let mean_reward = rewards.iter().sum::<f64>() / k as f64;
        let nb = rewards
            .iter()
            .zip(&scores)
            .map(|(r, s)| r * s)
            .sum::<f64>()
            / k as f64;
        let gb = rewards
            .iter()
            .zip(&scores)
            .map(|(r, s)| (r - mean_reward) * s)
            .sum::<f64>()
            / k as f64;
        no_baseline.push(nb);
        group_baseline.push(gb);
    }

    let sample_stats = |xs: &[f64]| {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
        (mean, var)
    };
    let (mean_nb, var_nb) = sample_stats(&no_baseline);
    let (mean_gb, var_gb) = sample_stats(&group_baseline);
    let diffs: Vec<f64> = no_baseline
        .iter()
        .zip(&group_baseline)
        .map(|(a, b)| a - b)
        .collect();
    let (_, var_diff) = sample_stats(&diffs);
    Ok(BaselineVarianceReport {
        resamples,
        mean_no_baseline: mean_nb,
        mean_group_baseline: mean_gb,
        var_no_baseline: var_nb,
        var_group_baseline: var_gb,
        paired_se: (var_diff / resamples as f64).sqrt(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn tiny_schedule() -> BranchSchedule {
        BranchSchedule::new(2, vec![0], 2, 1.0).unwrap()
    }

    fn tiny_config(iterations: usize) -> TrainConfig {
        TrainConfig {
            grpo: GrpoConfig {
                iterations,
                grad_accum_steps: 2,
                num_generations: 3,
                ..GrpoConfig::default()
            },
            optimizer: OptimizerConfig {
                learning_rate: 1e-3,
                weight_decay: 0.0,
                ..OptimizerConfig::default()
            },
            baseline_steps: 3,
            checkpoint_interval: 0,
            ..TrainConfig::default()
        }
    }

    // -- clipped surrogate --------------------------------------------------

    #[test]
    fn unit_ratio_reduces_to_the_mean_advantage() {
        let adv = [0.5, -1.25, 2.0, 0.0];
        let lps = [0.3, -0.7, 0.0, 5.0];
        let loss = grpo_edge_loss(&adv, &lps, &lps, 1e-4).unwrap();
        let mean = adv.iter().sum::<f64>() / 4.0;
        assert_eq!(loss.objective, mean);
        for (d, a) in loss.dobj_dnew.iter().zip(&adv) {
            assert_eq!(*d, a / 4.0);
        }
    }

    #[test]
    fn clipping_caps_the_objective_and_kills_the_gradient() {
        // Ratio 1.5 with eps 0.2 and positive advantage clips to 1.2.
        let loss = grpo_edge_loss(&[1.0], &[0.0], &[1.5f64.ln()], 0.2).unwrap();
        assert_relative_eq!(loss.objective, 1.2, max_relative = 1e-12);
        assert_eq!(loss.dobj_dnew[0], 0.0);

        // Ratio 0.5 with negative advantage: the clipped branch pays -0.8
        // and the min picks it over -0.5.
        let loss = grpo_edge_loss(&[-1.0], &[0.0], &[0.5f64.ln()], 0.2).unwrap();
        assert_relative_eq!(loss.objective, -0.8, max_relative = 1e-12);
        assert_eq!(loss.dobj_dnew[0], 0.0);
    }

    #[test]
    fn unclipped_branch_keeps_its_gradient() {
        // Ratio 1.1 inside the band: min is a tie, gradient flows.
        let loss = grpo_edge_loss(&[2.0], &[0.0], &[1.1f64.ln()], 0.2).unwrap();
        assert_relative_eq!(loss.objective, 2.2, max_relative = 1e-12);
        assert_relative_eq!(loss.dobj_dnew[0], 2.2, max_relative = 1e-12);

        // Ratio 0.5 with positive advantage: unclipped 0.5 < clipped 0.8,
        // so the pessimistic branch is the unclipped one and keeps gradient.
        let loss = grpo_edge_loss(&[1.0], &[0.0], &[0.5f64.ln()], 0.2).unwrap();
        assert_relative_eq!(loss.objective, 0.5, max_relative = 1e-12);
        assert_relative_eq!(loss.dobj_dnew[0], 0.5, max_relative = 1e-12);
    }

    #[test]
    fn pooling_averages_rather_than_sums() {
        let adv = [1.0, -0.5];
        let old = [0.0, 0.0];
        let new = [0.0, 0.0];
        let once = grpo_edge_loss(&adv, &old, &new, 0.2).unwrap();
        let doubled = grpo_edge_loss(
            &[1.0, -0.5, 1.0, -0.5],
            &[0.0; 4],
            &[0.0; 4],
            0.2,
        )
        .unwrap();
        assert_relative_eq!(once.objective, doubled.objective, max_relative = 1e-15);
    }

    #[test]
    fn edge_order_does_not_change_the_objective() {
        let adv = [0.3, -1.0, 2.5, 0.7];
        let old = [0.1, 0.2, -0.3, 0.0];
        let new = [0.1001, 0.1999, -0.3002, 0.00005];
        let a = grpo_edge_loss(&adv, &old, &new, 1e-3).unwrap();
        let rev_adv: Vec<f64> = adv.iter().rev().copied().collect();
        let rev_old: Vec<f64> = old.iter().rev().copied().collect();
        let rev_new: Vec<f64> = new.iter().rev().copied().collect();
        let b = grpo_edge_loss(&rev_adv, &rev_old, &rev_new, 1e-3).unwrap();
        assert_relative_eq!(a.objective, b.objective, max_relative = 1e-12);
    }

    #[test]
    fn empty_edge_set_is_a_config_error() {
        match grpo_edge_loss(&[], &[], &[], 0.2) {
            Err(Error::Config(msg)) => assert!(msg.contains("empty")),
            other => panic!("expected a config error, got {other:?}"),
        }
    }

    #[test]
    fn runaway_ratio_aborts_with_a_numeric_error() {
        match grpo_edge_loss(&[1.0], &[0.0], &[1e9], 0.2) {
            Err(Error::Numeric(_)) => {}
            other => panic!("expected a numeric error, got {other:?}"),
        }
        match grpo_edge_loss(&[1.0], &[f64::NAN], &[0.0], 0.2) {
            Err(Error::Numeric(_)) => {}
            other => panic!("expected a numeric error, got {other:?}"),
        }
    }

    // -- optimizer ----------------------------------------------------------

    #[test]
    fn adamw_matches_a_hand_worked_trace() {
        let cfg = OptimizerConfig {
            learning_rate: 0.1,
            weight_decay: 0.0,
            max_grad_norm: 1.0,
            ema_decay: 0.995,
        };
        let mut opt = AdamW::new(1, &cfg);
        let mut p = [1.0f64];
        let grads = [[0.004f64], [-0.002], [0.001]];

        // Independent scalar recomputation of the same three steps.
        let (b1, b2, eps) = (0.9, 0.999, 1e-8);
        let (mut m, mut v, mut q) = (0.0f64, 0.0f64, 1.0f64);
        for (t, g) in grads.iter().enumerate() {
            let g = g[0];
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let m_hat = m / (1.0 - b1.powi(t as i32 + 1));
            let v_hat = v / (1.0 - b2.powi(t as i32 + 1));
            q -= 0.1 * m_hat / (v_hat.sqrt() + eps);

            let norm = opt.step(&mut p, &grads[t]).unwrap();
            assert_relative_eq!(norm, g.abs(), max_relative = 1e-14);
            assert_relative_eq!(p[0], q, max_relative = 1e-14);
        }
    }

    #[test]
    fn global_norm_clip_scales_the_gradient_before_the_moments() {
        let cfg = OptimizerConfig {
            learning_rate: 0.1,
            weight_decay: 0.0,
            max_grad_norm: 0.01,
            ema_decay: 0.995,
        };
        let mut opt = AdamW::new(2, &cfg);
        let mut p = [0.0f64, 0.0];
        // Norm 10 against a cap of 0.01: the effective gradient is the raw
        // one scaled by 0.001.
        let norm = opt.step(&mut p, &[6.0, 8.0]).unwrap();
        assert_eq!(norm, 10.0);
        let g = [6.0e-3, 8.0e-3];
        for i in 0..2 {
            // First step: m_hat = g, v_hat = g^2, so the update is close to
            // lr * sign(g) but softened by eps.
            let expect = -0.1 * g[i] / (g[i].abs() + 1e-8);
            assert_relative_eq!(p[i], expect, max_relative = 1e-12);
        }
    }

    #[test]
    fn zero_gradient_and_zero_decay_leave_parameters_untouched() {
        let cfg = OptimizerConfig {
            learning_rate: 0.5,
            weight_decay: 0.0,
            max_grad_norm: 0.01,
            ema_decay: 0.995,
        };
        let mut opt = AdamW::new(3, &cfg);
        let mut p = [1.0, -2.5, 0.125];
        let before = p;
        opt.step(&mut p, &[0.0, 0.0, 0.0]).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn weight_decay_is_decoupled_from_the_moments() {
        let cfg = OptimizerConfig {
            learning_rate: 0.1,
            weight_decay: 0.1,
            max_grad_norm: 1.0,
            ema_decay: 0.995,
        };
        let mut opt = AdamW::new(1, &cfg);
        let mut p = [2.0f64];
        // Zero gradient: the only movement is p * (1 - lr * wd).
        opt.step(&mut p, &[0.0]).unwrap();
        assert_relative_eq!(p[0], 2.0 * (1.0 - 0.01), max_relative = 1e-15);
    }

    #[test]
    fn non_finite_gradients_are_rejected() {
        let mut opt = AdamW::new(2, &OptimizerConfig::default());
        let mut p = [0.0, 0.0];
        match opt.step(&mut p, &[0.0, f64::INFINITY]) {
            Err(Error::Numeric(msg)) => assert!(msg.contains("1")),
            other => panic!("expected a numeric error, got {other:?}"),
        }
    }

    #[test]
    fn ema_blends_toward_the_parameters() {
        let mut ema = [0.0f64, 1.0];
        ema_update(&mut ema, &[1.0, 1.0], 0.9);
        assert_relative_eq!(ema[0], 0.1, max_relative = 1e-15);
        assert_relative_eq!(ema[1], 1.0, max_relative = 1e-15);
    }

    // -- replay -------------------------------------------------------------

    /// Roll a small tree, credit it, and return it with its mask set.
    fn credited_tree(policy: &Policy, fusion: &FusionConfig) -> (TrajectoryTree, TimeGrid) {
        let schedule = tiny_schedule();
        let grid = TimeGrid::new(2, 3.0).unwrap();
        let coeffs = DiffusionCoefficients::toy(0.5).unwrap();
        let modes = dynamics::base_step_modes(&schedule);
        let seed = RolloutSeed::new(99, 3);
        let mut tree =
            dynamics::rollout_tree(&schedule, 2, &grid, &coeffs, &modes, seed, policy).unwrap();
        let world = MixtureWorld::two_mode_default();
        let reward = RewardFunction::mode_preference(&world, 0, 1.0).unwrap();
        let rewards: Vec<f64> = tree
            .leaf_states()
            .iter()
            .map(|z| reward.evaluate(z))
            .collect();
        let mut table = credit::fuse_rewards(&tree, &rewards, fusion).unwrap();
        credit::depth_normalize(&mut table, &mut tree).unwrap();
        tree.init_gradient_mask();
        (tree, grid)
    }

    #[test]
    fn replay_at_the_behavior_policy_has_unit_ratios() {
        let policy = Policy::new(2, 8, 0.995, 17).unwrap();
        let (tree, grid) = credited_tree(&policy, &FusionConfig::softmax(1.0));
        let (_, edges) = collect_replay(&tree, &grid, &policy).unwrap();
        assert_eq!(edges.len(), 4);
        let mut advantages = Vec::new();
        for e in &edges {
            assert_eq!(e.new_lp, e.old_lp);
            advantages.push(e.advantage);
        }
        let old: Vec<f64> = edges.iter().map(|e| e.old_lp).collect();
        let new: Vec<f64> = edges.iter().map(|e| e.new_lp).collect();
        let loss = grpo_edge_loss(&advantages, &old, &new, 1e-4).unwrap();
        let mean = advantages.iter().sum::<f64>() / advantages.len() as f64;
        assert_eq!(loss.objective, mean);
    }

    #[test]
    fn replay_gradient_matches_finite_differences() {
        let mut policy = Policy::new(2, 6, 0.995, 23).unwrap();
        let (tree, grid) = credited_tree(&policy, &FusionConfig::softmax(1.0));

        // Wide clip band keeps the objective smooth around the base point.
        let clip = 0.5;
        let objective_at = |policy: &Policy| -> f64 {
            let (_, edges) = collect_replay(&tree, &grid, policy).unwrap();
            let adv: Vec<f64> = edges.iter().map(|e| e.advantage).collect();
            let old: Vec<f64> = edges.iter().map(|e| e.old_lp).collect();
            let new: Vec<f64> = edges.iter().map(|e| e.new_lp).collect();
            grpo_edge_loss(&adv, &old, &new, clip).unwrap().objective
        };

        policy.zero_grads();
        let (works, edges) = collect_replay(&tree, &grid, &policy).unwrap();
        let adv: Vec<f64> = edges.iter().map(|e| e.advantage).collect();
        let old: Vec<f64> = edges.iter().map(|e| e.old_lp).collect();
        let new: Vec<f64> = edges.iter().map(|e| e.new_lp).collect();
        let loss = grpo_edge_loss(&adv, &old, &new, clip).unwrap();
        let mut analytic = vec![0.0; policy.net.param_count()];
        std::mem::swap(&mut analytic, &mut policy.grads);
        apply_edge_gradients(&mut policy, &tree, &works, &edges, &loss.dobj_dnew, 1.0);
        std::mem::swap(&mut analytic, &mut policy.grads);

        let n = policy.net.param_count();
        for i in (0..n).step_by(7) {
            let h = 1e-6 * policy.net.params[i].abs().max(1.0);
            let saved = policy.net.params[i];
            policy.net.params[i] = saved + h;
            let plus = objective_at(&policy);
            policy.net.params[i] = saved - h;
            let minus = objective_at(&policy);
            policy.net.params[i] = saved;
            let fd = (plus - minus) / (2.0 * h);
            let scale = fd.abs().max(analytic[i].abs()).max(1e-3);
            assert!(
                (fd - analytic[i]).abs() / scale <= 1e-4,
                "param {i}: fd {fd} vs analytic {}",
                analytic[i]
            );
        }
    }

    // -- sequential-baseline helpers -----------------------------------------

    #[test]
    fn group_advantages_match_the_worked_examples() {
        assert_eq!(group_advantages(&[0.0, 2.0]).unwrap(), vec![-1.0, 1.0]);
        assert_eq!(group_advantages(&[1.0, 1.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn group_advantages_reject_bad_input() {
        assert!(matches!(
            group_advantages(&[1.0]),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            group_advantages(&[1.0, f64::NAN]),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn subsampling_counts_follow_the_floor_rule() {
        let mut rng = rng::stream(1, Purpose::StepSubset, 0, 0, 0);
        assert_eq!(subsample_steps(16, 1.0, &mut rng).len(), 16);
        let picks = subsample_steps(16, 0.6, &mut rng);
        assert_eq!(picks.len(), 9);
        assert!(picks.windows(2).all(|w| w[0] < w[1]));
        assert!(picks.iter().all(|&s| s < 16));
    }

    #[test]
    fn subsampling_is_deterministic_per_stream() {
        let mut a = rng::stream(7, Purpose::StepSubset, 3, 1, 2);
        let mut b = rng::stream(7, Purpose::StepSubset, 3, 1, 2);
        assert_eq!(subsample_steps(20, 0.35, &mut a), subsample_steps(20, 0.35, &mut b));
        let mut c = rng::stream(7, Purpose::StepSubset, 3, 1, 3);
        // A different lane draws a different subset with high probability;
        // equal subsets here would signal stream reuse.
        assert_ne!(subsample_steps(20, 0.35, &mut a), subsample_steps(20, 0.35, &mut c));
    }

    // -- training loops ------------------------------------------------------

    #[test]
    fn constant_rewards_leave_the_parameters_unchanged() {
        let world = MixtureWorld::two_mode_default();
        let reward = RewardFunction::Custom(std::sync::Arc::new(|_: &[f64]| 1.0));
        let mut policy = Policy::new(2, 8, 0.995, 5).unwrap();
        let before = policy.net.params.clone();
        let cfg = tiny_config(1);
        let log = train_branch(&cfg, &tiny_schedule(), &world, &reward, &mut policy).unwrap();
        assert_eq!(policy.net.params, before);
        assert_eq!(log.rows[0].grad_norm, 0.0);
        assert_eq!(log.rows[0].objective, 0.0);
    }

    #[test]
    fn run_rows_are_labeled_one_through_m() {
        let world = MixtureWorld::two_mode_default();
        let reward = RewardFunction::mode_preference(&world, 0, 1.0).unwrap();
        let mut policy = Policy::new(2, 8, 0.995, 5).unwrap();
        let cfg = tiny_config(3);
        let log = train_branch(&cfg, &tiny_schedule(), &world, &reward, &mut policy).unwrap();
        let labels: Vec<u64> = log.rows.iter().map(|r| r.iteration).collect();
        assert_eq!(labels, vec![1, 2, 3]);
        // Two prompts per iteration, four edges per tree, all stochastic.
        assert!(log.rows.iter().all(|r| r.nfe_old == 2 * 4));
        assert!(log.rows.iter().all(|r| r.nfe_new == 2 * 4));
    }

    #[test]
    fn zero_iterations_log_the_starting_reward_only() {
        let world = MixtureWorld::two_mode_default();
        let reward = RewardFunction::mode_preference(&world, 0, 1.0).unwrap();
        let mut policy = Policy::new(2, 8, 0.995, 5).unwrap();
        let before = policy.net.params.clone();
        let cfg = tiny_config(0);
        let log = train_branch(&cfg, &tiny_schedule(), &world, &reward, &mut policy).unwrap();
        assert_eq!(policy.net.params, before);
        assert_eq!(log.rows.len(), 1);
        let row = &log.rows[0];
        assert_eq!(row.iteration, 0);
        assert_eq!(row.objective, 0.0);
        assert_eq!(row.nfe_new, 0);
        assert!(row.reward_mean > 0.0);
    }

    #[test]
    fn identical_configurations_produce_identical_logs() {
        let world = MixtureWorld::two_mode_default();
        let reward = RewardFunction::mode_preference(&world, 0, 1.0).unwrap();
        let cfg = tiny_config(3);
        let run = || {
            let mut policy = Policy::new(2, 8, 0.995, 5).unwrap();
            train_branch(&cfg, &tiny_schedule(), &world, &reward, &mut policy)
                .unwrap()
                .to_csv()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn sequential_baseline_trains_and_counts_chain_edges() {
        let world = MixtureWorld::two_mode_default();
        let reward = RewardFunction::mode_preference(&world, 0, 1.0).unwrap();
        let mut policy = Policy::new(2, 8, 0.995, 5).unwrap();
        let cfg = tiny_config(2);
        let log = train_sequential(&cfg, &world, &reward, &mut policy).unwrap();
        assert_eq!(log.rows.len(), 2);
        // 2 prompts x 3 chains x 3 steps.
        assert!(log.rows.iter().all(|r| r.nfe_old == 18));
        assert!(log.rows.iter().all(|r| r.nfe_new == 18));
    }

    #[test]
    fn sequential_chains_share_the_root_only_when_asked() {
        let world = MixtureWorld::two_mode_default();
        let chain = BranchSchedule::new(3, Vec::new(), 2, 0.0).unwrap();
        let grid = TimeGrid::new(3, 3.0).unwrap();
        let coeffs = DiffusionCoefficients::toy(0.3).unwrap();
        let modes = dynamics::base_step_modes(&chain);
        let policy = Policy::new(2, 8, 0.995, 5).unwrap();
        let root_of = |lane: u64, shared: bool| {
            let seed = RolloutSeed {
                sampler_seed: 11,
                prompt: 4,
                lane,
                shared_root: shared,
            };
            dynamics::rollout_tree(&chain, world.dim(), &grid, &coeffs, &modes, seed, &policy)
                .unwrap()
                .state(0, 0)
                .to_vec()
        };
        assert_eq!(root_of(0, true), root_of(5, true));
        assert_ne!(root_of(0, false), root_of(5, false));
    }

    #[test]
    fn timestep_fraction_thins_the_gradient_set() {
        let world = MixtureWorld::two_mode_default();
        let reward = RewardFunction::mode_preference(&world, 0, 1.0).unwrap();
        let mut policy = Policy::new(2, 8, 0.995, 5).unwrap();
        let mut cfg = tiny_config(1);
        cfg.baseline_steps = 10;
        cfg.grpo.timestep_fraction = 0.6;
        let log = train_sequential(&cfg, &world, &reward, &mut policy).unwrap();
        // floor(0.6 * 10) = 6 steps per chain keep gradient.
        assert_eq!(log.rows[0].nfe_old, 2 * 3 * 10);
        assert_eq!(log.rows[0].nfe_new, 2 * 3 * 6);
    }

    #[test]
    fn hybrid_mode_needs_and_uses_its_window() {
        let world = MixtureWorld::two_mode_default();
        let reward = RewardFunction::mode_preference(&world, 0, 1.0).unwrap();
        let schedule = BranchSchedule::new(6, vec![0, 2], 2, 1.0).unwrap();
        let mut policy = Policy::new(2, 8, 0.995, 5).unwrap();
        let mut cfg = tiny_config(1);
        assert!(matches!(
            train_hybrid(&cfg, &schedule, &world, &reward, &mut policy),
            Err(Error::Config(_))
        ));

        cfg.hybrid_window = Some(SlidingWindow::new(1, 10, 4, 4).unwrap());
        let log = train_hybrid(&cfg, &schedule, &world, &reward, &mut policy).unwrap();
        // Widths at depths 1..6 are 2,2,4,4,4,4 -> 20 edges per tree.
        assert_eq!(log.rows[0].nfe_old, 2 * 20);
        // Stochastic: split edges (2 at step 0, 4 at step 2) + window step 4
        // (4 edges). Everything else is ODE and carries no gradient.
        assert_eq!(log.rows[0].nfe_new, 2 * 10);
    }

    #[test]
    fn hybrid_gradient_edges_are_strictly_fewer_than_branch() {
        let world = MixtureWorld::two_mode_default();
        let reward = RewardFunction::mode_preference(&world, 0, 1.0).unwrap();
        let schedule = BranchSchedule::new(16, vec![0, 3, 6, 9], 2, 4.0)
            .unwrap()
            .with_final_step_deterministic(true)
            .unwrap();
        let mut cfg = tiny_config(1);
        cfg.grpo.grad_accum_steps = 1;

        let mut policy = Policy::new(2, 8, 0.995, 5).unwrap();
        let branch_log =
            train_branch(&cfg, &schedule, &world, &reward, &mut policy).unwrap();

        cfg.hybrid_window = Some(SlidingWindow::new(4, 10, 9, 12).unwrap());
        let mut policy = Policy::new(2, 8, 0.995, 5).unwrap();
        let hybrid_log =
            train_hybrid(&cfg, &schedule, &world, &reward, &mut policy).unwrap();

        // Same rollout work, far fewer gradient edges: 138 for the full
        // tree (154 edges minus the deterministic last step) against 78
        // for splits plus the window.
        assert_eq!(branch_log.rows[0].nfe_old, hybrid_log.rows[0].nfe_old);
        assert_eq!(branch_log.rows[0].nfe_new, 138);
        assert_eq!(hybrid_log.rows[0].nfe_new, 78);
    }

    #[test]
    fn checkpoints_appear_at_the_interval() {
        let world = MixtureWorld::two_mode_default();
        let reward = RewardFunction::mode_preference(&world, 0, 1.0).unwrap();
        let mut policy = Policy::new(2, 8, 0.995, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config(4);
        cfg.checkpoint_interval = 2;
        cfg.output_dir = Some(dir.path().to_path_buf());
        train_branch(&cfg, &tiny_schedule(), &world, &reward, &mut policy).unwrap();
        for it in [2, 4] {
            let path = dir.path().join(format!("checkpoint_{it:06}.ckpt"));
            let (_, header) = Policy::load(&path).unwrap();
            assert_eq!(header.iteration, it);
        }
        assert!(!dir.path().join("checkpoint_000001.ckpt").exists());
        assert!(!dir.path().join("checkpoint_000003.ckpt").exists());
    }

    #[test]
    fn importance_sampling_fusion_is_rejected_for_training() {
        let world = MixtureWorld::two_mode_default();
        let reward = RewardFunction::mode_preference(&world, 0, 1.0).unwrap();
        let mut policy = Policy::new(2, 8, 0.995, 5).unwrap();
        let mut cfg = tiny_config(1);
        cfg.fusion = FusionConfig::new(FusionMode::SelfNormalizedIs, 1.0).unwrap();
        match train_branch(&cfg, &tiny_schedule(), &world, &reward, &mut policy) {
            Err(Error::Config(msg)) => assert!(msg.contains("diagnostic")),
            other => panic!("expected a config error, got {other:?}"),
        }
    }

    // -- variance probe ------------------------------------------------------

    #[test]
    fn group_baseline_strictly_reduces_probe_variance() {
        let policy = Policy::new(2, 8, 0.995, 31).unwrap();
        let world = MixtureWorld::two_mode_default();
        let reward = RewardFunction::mode_preference(&world, 0, 2.0).unwrap();
        let report = baseline_variance_probe(&policy, &reward, 8, 200, 71).unwrap();
        assert!(
            report.var_group_baseline < report.var_no_baseline,
            "baseline did not reduce variance: {report:?}"
        );
        let gap = (report.mean_no_baseline - report.mean_group_baseline).abs();
        assert!(
            gap <= 3.0 * report.paired_se,
            "means differ by {gap} with SE {}",
            report.paired_se
        );
    }
}
