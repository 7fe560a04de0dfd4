//! Reverse-time sampling dynamics.
//!
//! The sampler integrates a learned velocity field backwards over a shifted
//! time grid `1 = t_0 > t_1 > ... > t_T = 0`. Every transition applies the
//! Euler mean update `mu = z + h * v(z, t)`; stochastic (SDE) steps then add
//! `sigma * xi` with effective scale `sigma = eta * g(t) * sqrt(h)` and
//! standard-normal `xi`, while deterministic (ODE) steps take the mean
//! exactly. With the toy diffusion profile `g(t) = t` the injected noise
//! vanishes as the sample approaches data space.
//!
//! At a split step the children of one node share a single mean evaluation
//! and receive correlated noises `(xi0 + s * eta_b) / sqrt(1 + s^2)`: each
//! child's noise is marginally standard normal for any mixing strength `s`,
//! so branching never changes the per-step transition law, and any two
//! siblings have noise covariance `1/(1+s^2)` per coordinate.

use crate::rng::{self, Purpose};
use crate::tree::{BranchSchedule, SlidingWindow, TrajectoryTree};
use crate::{Error, Result};

pub const LN_2PI: f64 = 1.8378770664093453;

// ---------------------------------------------------------------------------
// Time grid
// ---------------------------------------------------------------------------

/// Decreasing time grid over `n_steps` transitions.
///
/// The raw uniform grid `u_i = 1 - i/n` is warped by
/// `t = shift * u / (1 + (shift - 1) * u)`, which concentrates resolution
/// near the noise end `t = 1` for `shift > 1`. The terminal time is exactly
/// 0 so leaves live in data space.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    times: Vec<f64>,
    shift: f64,
}

impl TimeGrid {
    pub fn new(n_steps: usize, shift: f64) -> Result<Self> {
        if n_steps == 0 {
            return Err(Error::Config("time grid needs at least one step".into()));
        }
        if !(shift.is_finite() && shift > 0.0) {
            return Err(Error::Config(format!(
                "time shift must be a positive real, got {shift}"
            )));
        }
        let n = n_steps as f64;
        let times = (0..=n_steps)
            .map(|i| {
                let u = (n - i as f64) / n;
                shift * u / (1.0 + (shift - 1.0) * u)
            })
            .collect();
        Ok(TimeGrid { times, shift })
    }

    pub fn n_steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn shift(&self) -> f64 {
        self.shift
    }

    /// Time at node depth `i`, `t_0 = 1` down to `t_T = 0`.
    pub fn time(&self, i: usize) -> f64 {
        self.times[i]
    }

    /// Step size `h_i = t_i - t_{i+1} > 0` of transition `i`.
    pub fn step_size(&self, i: usize) -> f64 {
        self.times[i] - self.times[i + 1]
    }
}

// ---------------------------------------------------------------------------
// Coefficients and step modes
// ---------------------------------------------------------------------------

/// Diffusion profile and stochasticity level.
///
/// `diffusion` is `g(t)`; `stochasticity` is the constant level `eta`
/// applied at SDE steps (deterministic steps use 0 by definition). The drift
/// is not a separate coefficient here: the mean update is supplied entirely
/// by the learned velocity field.
#[derive(Debug, Clone, Copy)]
pub struct DiffusionCoefficients {
    pub diffusion: fn(f64) -> f64,
    pub stochasticity: f64,
}

fn linear_g(t: f64) -> f64 {
    t
}

fn unit_g(_t: f64) -> f64 {
    1.0
}

impl DiffusionCoefficients {
    /// Toy profile `g(t) = t` with stochasticity `eta`.
    pub fn toy(eta: f64) -> Result<Self> {
        if !(eta.is_finite() && eta >= 0.0) {
            return Err(Error::Config(format!(
                "stochasticity must be non-negative, got {eta}"
            )));
        }
        Ok(DiffusionCoefficients {
            diffusion: linear_g,
            stochasticity: eta,
        })
    }

    /// Constant `g(t) = 1`, handy for arithmetic checks.
    pub fn unit(eta: f64) -> Result<Self> {
        let mut c = Self::toy(eta)?;
        c.diffusion = unit_g;
        Ok(c)
    }

    /// Effective noise scale of transition `i`: `eta * g(t_i) * sqrt(h_i)`
    /// at SDE steps, exactly 0 at ODE steps.
    pub fn effective_scale(&self, grid: &TimeGrid, i: usize, mode: StepMode) -> f64 {
        match mode {
            StepMode::Ode => 0.0,
            StepMode::Sde => {
                self.stochasticity * (self.diffusion)(grid.time(i)) * grid.step_size(i).sqrt()
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepMode {
    Sde,
    Ode,
}

/// Step modes for a plain stochastic rollout: every transition is SDE,
/// except the final one when the schedule marks it deterministic.
pub fn base_step_modes(schedule: &BranchSchedule) -> Vec<StepMode> {
    let t = schedule.depth();
    let mut modes = vec![StepMode::Sde; t];
    if schedule.final_step_deterministic() {
        modes[t - 1] = StepMode::Ode;
    }
    modes
}

/// Hybrid ODE-SDE step modes at a given training iteration.
///
/// Split steps are always SDE (branching requires noise); the sliding window
/// contributes a block of SDE steps that moves deeper as training proceeds;
/// every other transition is ODE. A window reaching past the final
/// transition is clamped (and logged).
pub fn hybrid_step_modes(
    schedule: &BranchSchedule,
    window: &SlidingWindow,
    iteration: usize,
) -> Vec<StepMode> {
    let t = schedule.depth();
    let mut modes = vec![StepMode::Ode; t];
    for &b in schedule.split_steps() {
        modes[b] = StepMode::Sde;
    }
    let (range, clamped) = window.depths(iteration, t);
    if clamped {
        log::warn!(
            "hybrid window at iteration {iteration} extends past depth {t}; clamped to {range:?}"
        );
    }
    for d in range {
        modes[d] = StepMode::Sde;
    }
    if schedule.final_step_deterministic() {
        modes[t - 1] = StepMode::Ode;
    }
    modes
}

// ---------------------------------------------------------------------------
// Elementary transitions
// ---------------------------------------------------------------------------

/// Apply one transition: `policy_mean + scale * noise`.
///
/// `scale` is the effective noise scale of the step; 0 makes the update
/// deterministic regardless of `noise`.
pub fn sde_step(policy_mean: &[f64], noise: &[f64], scale: f64) -> Result<Vec<f64>> {
    debug_assert_eq!(policy_mean.len(), noise.len());
    let out: Vec<f64> = policy_mean
        .iter()
        .zip(noise)
        .map(|(m, n)| m + scale * n)
        .collect();
    if let Some(bad) = out.iter().find(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!(
            "non-finite state component {bad} after sde_step"
        )));
    }
    Ok(out)
}

/// Mix a shared draw with per-branch innovations:
/// `xi_b = (xi0 + s * eta_b) / sqrt(1 + s^2)`.
///
/// With standard-normal inputs every output is marginally standard normal
/// and siblings have covariance `1/(1+s^2)` per coordinate. `s = 0`
/// reproduces the shared draw exactly.
pub fn branch_noises(shared: &[f64], innovations: &[Vec<f64>], s: f64) -> Result<Vec<Vec<f64>>> {
    if !(s.is_finite() && s >= 0.0) {
        return Err(Error::Config(format!(
            "branch correlation must be a non-negative real, got {s}"
        )));
    }
    let norm = (1.0 + s * s).sqrt();
    innovations
        .iter()
        .map(|eta| {
            if eta.len() != shared.len() {
                return Err(Error::Config(
                    "innovation dimension does not match the shared draw".into(),
                ));
            }
            Ok(shared
                .iter()
                .zip(eta)
                .map(|(x0, e)| (x0 + s * e) / norm)
                .collect())
        })
        .collect()
}

/// Log-density of an isotropic Gaussian transition `N(next; mean, sigma^2 I)`.
///
/// Deterministic transitions have no density; asking for one is a contract
/// violation and panics.
pub fn transition_logprob(mean: &[f64], next: &[f64], sigma: f64) -> f64 {
    assert!(
        sigma > 0.0,
        "transition log-prob requested for a deterministic step"
    );
    debug_assert_eq!(mean.len(), next.len());
    let d = mean.len() as f64;
    let sq: f64 = mean
        .iter()
        .zip(next)
        .map(|(m, x)| (x - m) * (x - m))
        .sum();
    -0.5 * d * LN_2PI - d * sigma.ln() - sq / (2.0 * sigma * sigma)
}

// ---------------------------------------------------------------------------
// Velocity fields and rollouts
// ---------------------------------------------------------------------------

/// A velocity field `v(z, t)`. Implemented by the toy policy network and by
/// plain closures in tests.
pub trait Velocity {
    fn velocity(&self, state: &[f64], t: f64) -> Vec<f64>;
}

impl<F> Velocity for F
where
    F: Fn(&[f64], f64) -> Vec<f64>,
{
    fn velocity(&self, state: &[f64], t: f64) -> Vec<f64> {
        self(state, t)
    }
}

/// Seeding coordinates of one rollout.
///
/// `lane` separates chains that belong to the same prompt (the sequential
/// baseline rolls one tree per chain); `shared_root` makes every lane of a
/// prompt start from the same initial latent.
#[derive(Debug, Clone, Copy)]
pub struct RolloutSeed {
    pub sampler_seed: u64,
    pub prompt: u64,
    pub lane: u64,
    pub shared_root: bool,
}

impl RolloutSeed {
    pub fn new(sampler_seed: u64, prompt: u64) -> Self {
        RolloutSeed {
            sampler_seed,
            prompt,
            lane: 0,
            shared_root: true,
        }
    }

    fn root_lane(&self) -> u64 {
        if self.shared_root {
            0
        } else {
            self.lane
        }
    }
}

// Breadth indices stay below the leaf budget (default 256) and lanes below
// the group size, so packing them into one u64 key word is collision-free.
fn key(lane: u64, breadth: usize) -> u64 {
    (lane << 32) | breadth as u64
}

/// Roll out a full trajectory tree under `velocity`.
///
/// The root is drawn standard normal; each depth is expanded in breadth
/// order with one mean evaluation per node. Split steps must be SDE. The
/// recorded per-edge noises and log-probabilities are what the trainer later
/// replays under the updated policy.
pub fn rollout_tree<V: Velocity>(
    schedule: &BranchSchedule,
    dim: usize,
    grid: &TimeGrid,
    coeffs: &DiffusionCoefficients,
    modes: &[StepMode],
    seed: RolloutSeed,
    velocity: &V,
) -> Result<TrajectoryTree> {
    let t_depth = schedule.depth();
    if grid.n_steps() != t_depth {
        return Err(Error::Config(format!(
            "time grid has {} steps but the schedule depth is {}",
            grid.n_steps(),
            t_depth
        )));
    }
    if modes.len() != t_depth {
        return Err(Error::Config(format!(
            "{} step modes supplied for depth {}",
            modes.len(),
            t_depth
        )));
    }
    for &b in schedule.split_steps() {
        if modes[b] == StepMode::Ode {
            return Err(Error::Config(format!(
                "split step {b} must be stochastic"
            )));
        }
    }

    let mut root_rng = rng::stream(
        seed.sampler_seed,
        Purpose::RootNoise,
        seed.prompt,
        0,
        key(seed.root_lane(), 0),
    );
    let root = rng::standard_normal(&mut root_rng, dim);
    let mut tree = TrajectoryTree::skeleton(schedule.clone(), root)?;
    let s = schedule.correlation();
    let k = schedule.branch_factor();

    for d in 0..t_depth {
        let sigma = coeffs.effective_scale(grid, d, modes[d]);
        tree.set_step_sigma(d, sigma);
        let h = grid.step_size(d);
        let t = grid.time(d);
        for b in 0..tree.width_at(d) {
            let z = tree.state(d, b).to_vec();
            let v = velocity.velocity(&z, t);
            let mean: Vec<f64> = z.iter().zip(&v).map(|(zi, vi)| zi + h * vi).collect();
            if schedule.is_split(d) {
                let mut branch_rng = rng::stream(
                    seed.sampler_seed,
                    Purpose::BranchNoise,
                    seed.prompt,
                    d as u64,
                    key(seed.lane, b),
                );
                let shared = rng::standard_normal(&mut branch_rng, dim);
                let innovations: Vec<Vec<f64>> = (0..k)
                    .map(|_| rng::standard_normal(&mut branch_rng, dim))
                    .collect();
                let noises = branch_noises(&shared, &innovations, s)?;
                for (c, child) in tree.children(d, b).enumerate() {
                    let next = sde_step(&mean, &noises[c], sigma)
                        .map_err(|e| Error::Numeric(format!("{e} at node ({d},{b})")))?;
                    tree.set_state(d + 1, child, &next)?;
                    tree.set_noise(d + 1, child, &noises[c])?;
                    tree.set_edge_logprob(d + 1, child, transition_logprob(&mean, &next, sigma));
                }
            } else {
                let child = tree.children(d, b).start;
                match modes[d] {
                    StepMode::Sde => {
                        let mut step_rng = rng::stream(
                            seed.sampler_seed,
                            Purpose::StepNoise,
                            seed.prompt,
                            d as u64,
                            key(seed.lane, b),
                        );
                        let noise = rng::standard_normal(&mut step_rng, dim);
                        let next = sde_step(&mean, &noise, sigma)
                            .map_err(|e| Error::Numeric(format!("{e} at node ({d},{b})")))?;
                        tree.set_state(d + 1, child, &next)?;
                        tree.set_noise(d + 1, child, &noise)?;
                        tree.set_edge_logprob(
                            d + 1,
                            child,
                            transition_logprob(&mean, &next, sigma),
                        );
                    }
                    StepMode::Ode => {
                        tree.set_state(d + 1, child, &mean)?;
                    }
                }
            }
        }
    }
    Ok(tree)
}
