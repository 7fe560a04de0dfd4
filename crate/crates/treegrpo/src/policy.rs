//! The toy generative task and its policy network.
//!
//! The data distribution is an isotropic Gaussian mixture in a few
//! dimensions; the policy is a small velocity network `v(z, t)` with two
//! tanh hidden layers, stored as one flat parameter vector with
//! hand-written forward and reverse passes. Keeping the differentiation
//! explicit makes every gradient in the trainer exactly checkable against
//! central finite differences.
//!
//! Pretraining fits the network with conditional flow matching along linear
//! interpolation paths: `x_t = t * x0 + (1 - t) * x1` with noise `x0` at
//! `t = 1` and data `x1` at `t = 0`, regressing `v(x_t, t)` onto `x1 - x0`.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::Velocity;
use crate::rng::{self, Purpose};
use crate::{Error, Result};

// ---------------------------------------------------------------------------
// Toy world
// ---------------------------------------------------------------------------

/// Isotropic Gaussian mixture over `dim` dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureWorld {
    means: Vec<Vec<f64>>,
    weights: Vec<f64>,
    scales: Vec<f64>,
    dim: usize,
}

impl MixtureWorld {
    pub fn new(means: Vec<Vec<f64>>, weights: Vec<f64>, scales: Vec<f64>) -> Result<Self> {
        if means.len() < 2 {
            return Err(Error::Config("the world needs at least two modes".into()));
        }
        if means.len() != weights.len() || means.len() != scales.len() {
            return Err(Error::Config(
                "mode means, weights and scales must have equal length".into(),
            ));
        }
        let dim = means[0].len();
        if dim == 0 || means.iter().any(|m| m.len() != dim) {
            return Err(Error::Config(
                "mode means must share one positive dimension".into(),
            ));
        }
        if weights.iter().any(|&w| !(w.is_finite() && w > 0.0)) {
            return Err(Error::Config("mode weights must be positive".into()));
        }
        if scales.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(Error::Config("mode scales must be positive".into()));
        }
        let total: f64 = weights.iter().sum();
        let weights = weights.iter().map(|w| w / total).collect();
        Ok(MixtureWorld {
            means,
            weights,
            scales,
            dim,
        })
    }

    /// The default task: two modes at (-2, 0) and (2, 0), equal weights,
    /// scale 0.5.
    pub fn two_mode_default() -> Self {
        MixtureWorld::new(
            vec![vec![-2.0, 0.0], vec![2.0, 0.0]],
            vec![0.5, 0.5],
            vec![0.5, 0.5],
        )
        .unwrap()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_modes(&self) -> usize {
        self.means.len()
    }

    pub fn mean(&self, i: usize) -> &[f64] {
        &self.means[i]
    }

    pub fn weight(&self, i: usize) -> f64 {
        self.weights[i]
    }

    pub fn scale(&self, i: usize) -> f64 {
        self.scales[i]
    }

    /// Draw one sample: pick a mode by weight, then add isotropic noise.
    pub fn sample(&self, rng: &mut rand_chacha::ChaCha8Rng) -> Vec<f64> {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut mode = self.means.len() - 1;
        for (i, &w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                mode = i;
                break;
            }
        }
        let noise = rng::standard_normal(rng, self.dim);
        self.means[mode]
            .iter()
            .zip(&noise)
            .map(|(m, n)| m + self.scales[mode] * n)
            .collect()
    }

    /// Mixture density, used by test oracles.
    pub fn density(&self, z: &[f64]) -> f64 {
        let d = self.dim as f64;
        self.means
            .iter()
            .zip(self.weights.iter().zip(&self.scales))
            .map(|(mean, (&w, &s))| {
                let sq: f64 = mean.iter().zip(z).map(|(m, x)| (x - m) * (x - m)).sum();
                w * (-sq / (2.0 * s * s)).exp() / (2.0 * std::f64::consts::PI * s * s).powf(d / 2.0)
            })
            .sum()
    }

    /// Index of the mode whose mean is nearest to `z`.
    pub fn nearest_mode(&self, z: &[f64]) -> usize {
        let mut best = 0;
        let mut best_sq = f64::INFINITY;
        for (i, mean) in self.means.iter().enumerate() {
            let sq: f64 = mean.iter().zip(z).map(|(m, x)| (x - m) * (x - m)).sum();
            if sq < best_sq {
                best_sq = sq;
                best = i;
            }
        }
        best
    }
}

// ---------------------------------------------------------------------------
// Velocity network
// ---------------------------------------------------------------------------

/// Two-hidden-layer tanh network mapping `(z, t)` to a velocity in `dim`
/// dimensions. Parameters live in one flat vector ordered
/// `W1, b1, W2, b2, W3, b3`, all weight matrices row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    dim: usize,
    hidden: usize,
    pub params: Vec<f64>,
}

/// Cached activations of one forward pass, consumed by `backward`.
#[derive(Debug, Clone)]
pub struct Trace {
    x: Vec<f64>,
    h1: Vec<f64>,
    h2: Vec<f64>,
}

impl Mlp {
    pub fn param_count_for(dim: usize, hidden: usize) -> usize {
        let input = dim + 1;
        hidden * input + hidden + hidden * hidden + hidden + dim * hidden + dim
    }

    /// Xavier-uniform weights, zero biases, drawn from the init stream of
    /// `seed`.
    pub fn new(dim: usize, hidden: usize, seed: u64) -> Self {
        assert!(dim > 0 && hidden > 0);
        let mut net = Mlp::zeros(dim, hidden);
        let mut stream = rng::stream(seed, Purpose::ParamInit, 0, 0, 0);
        let input = dim + 1;
        let spans = [
            (0, hidden * input, input, hidden),
            (net.off_w2(), hidden * hidden, hidden, hidden),
            (net.off_w3(), dim * hidden, hidden, dim),
        ];
        for (off, len, fan_in, fan_out) in spans {
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for p in &mut net.params[off..off + len] {
                *p = stream.gen_range(-a..a);
            }
        }
        net
    }

    pub fn zeros(dim: usize, hidden: usize) -> Self {
        Mlp {
            dim,
            hidden,
            params: vec![0.0; Mlp::param_count_for(dim, hidden)],
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    fn off_b1(&self) -> usize {
        self.hidden * (self.dim + 1)
    }

    fn off_w2(&self) -> usize {
        self.off_b1() + self.hidden
    }

    fn off_b2(&self) -> usize {
        self.off_w2() + self.hidden * self.hidden
    }

    fn off_w3(&self) -> usize {
        self.off_b2() + self.hidden
    }

    fn off_b3(&self) -> usize {
        self.off_w3() + self.dim * self.hidden
    }

    /// Flat index of `W1[row, col]` (and likewise below), exposed so tests
    /// can rearrange units.
    pub fn idx_w1(&self, row: usize, col: usize) -> usize {
        row * (self.dim + 1) + col
    }

    pub fn idx_b1(&self, row: usize) -> usize {
        self.off_b1() + row
    }

    pub fn idx_w2(&self, row: usize, col: usize) -> usize {
        self.off_w2() + row * self.hidden + col
    }

    pub fn idx_b2(&self, row: usize) -> usize {
        self.off_b2() + row
    }

    pub fn idx_w3(&self, row: usize, col: usize) -> usize {
        self.off_w3() + row * self.hidden + col
    }

    pub fn idx_b3(&self, row: usize) -> usize {
        self.off_b3() + row
    }

    /// Forward pass returning the velocity and the activation trace needed
    /// for a later backward pass.
    pub fn forward_traced(&self, z: &[f64], t: f64) -> Result<(Vec<f64>, Trace)> {
        assert_eq!(z.len(), self.dim, "state dimension mismatch");
        let h = self.hidden;
        let input = self.dim + 1;
        let mut x = Vec::with_capacity(input);
        x.extend_from_slice(z);
        x.push(t);

        let mut h1 = vec![0.0; h];
        for i in 0..h {
            let row = &self.params[i * input..(i + 1) * input];
            let mut acc = self.params[self.off_b1() + i];
            for (w, xv) in row.iter().zip(&x) {
                acc += w * xv;
            }
            h1[i] = acc.tanh();
        }
        let mut h2 = vec![0.0; h];
        for i in 0..h {
            let row = &self.params[self.off_w2() + i * h..self.off_w2() + (i + 1) * h];
            let mut acc = self.params[self.off_b2() + i];
            for (w, hv) in row.iter().zip(&h1) {
                acc += w * hv;
            }
            h2[i] = acc.tanh();
        }
        let mut v = vec![0.0; self.dim];
        for o in 0..self.dim {
            let row = &self.params[self.off_w3() + o * h..self.off_w3() + (o + 1) * h];
            let mut acc = self.params[self.off_b3() + o];
            for (w, hv) in row.iter().zip(&h2) {
                acc += w * hv;
            }
            v[o] = acc;
        }

        if v.iter().any(|o| !o.is_finite()) {
            for (name, layer) in [("input", &x), ("hidden1", &h1), ("hidden2", &h2), ("output", &v)]
            {
                if let Some(bad) = layer.iter().find(|a| !a.is_finite()) {
                    return Err(Error::Numeric(format!(
                        "non-finite activation {bad} in layer {name}"
                    )));
                }
            }
        }
        Ok((v, Trace { x, h1, h2 }))
    }

    pub fn forward(&self, z: &[f64], t: f64) -> Vec<f64> {
        self.forward_traced(z, t)
            .expect("non-finite activations")
            .0
    }

    /// Accumulate `d(upstream . v)/d(params)` into `grads` for the forward
    /// pass recorded in `trace`. Exact reverse mode, no approximations.
    pub fn backward(&self, trace: &Trace, upstream: &[f64], grads: &mut [f64]) {
        assert_eq!(upstream.len(), self.dim, "upstream dimension mismatch");
        assert_eq!(grads.len(), self.params.len(), "gradient buffer mismatch");
        let h = self.hidden;
        let input = self.dim + 1;

        let mut dh2 = vec![0.0; h];
        for o in 0..self.dim {
            let g = upstream[o];
            grads[self.off_b3() + o] += g;
            let row = self.off_w3() + o * h;
            for j in 0..h {
                grads[row + j] += g * trace.h2[j];
                dh2[j] += g * self.params[row + j];
            }
        }

        let mut dh1 = vec![0.0; h];
        for i in 0..h {
            let dpre = dh2[i] * (1.0 - trace.h2[i] * trace.h2[i]);
            grads[self.off_b2() + i] += dpre;
            let row = self.off_w2() + i * h;
            for j in 0..h {
                grads[row + j] += dpre * trace.h1[j];
                dh1[j] += dpre * self.params[row + j];
            }
        }

        for i in 0..h {
            let dpre = dh1[i] * (1.0 - trace.h1[i] * trace.h1[i]);
            grads[self.off_b1() + i] += dpre;
            let row = i * input;
            for k in 0..input {
                grads[row + k] += dpre * trace.x[k];
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Policy = parameters + gradient accumulators + EMA shadow
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Policy {
    pub net: Mlp,
    pub grads: Vec<f64>,
    pub ema: Vec<f64>,
    pub ema_decay: f64,
}

impl Policy {
    pub fn new(dim: usize, hidden: usize, ema_decay: f64, seed: u64) -> Result<Self> {
        if !(ema_decay.is_finite() && (0.0..1.0).contains(&ema_decay)) {
            return Err(Error::Config(format!(
                "ema_decay must lie in [0, 1), got {ema_decay}"
            )));
        }
        let net = Mlp::new(dim, hidden, seed);
        let ema = net.params.clone();
        let n = net.param_count();
        Ok(Policy {
            net,
            grads: vec![0.0; n],
            ema,
            ema_decay,
        })
    }

    pub fn zero_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn grad_norm(&self) -> f64 {
        self.grads.iter().map(|g| g * g).sum::<f64>().sqrt()
    }

    /// A copy of the network holding the EMA parameters.
    pub fn ema_net(&self) -> Mlp {
        let mut net = self.net.clone();
        net.params = self.ema.clone();
        net
    }

    /// Write a checkpoint: a length-prefixed JSON header followed by the
    /// raw little-endian parameter and EMA blocks.
    pub fn save(&self, path: &Path, iteration: usize, seed: u64) -> Result<()> {
        let header = CheckpointHeader {
            dim: self.net.dim,
            hidden: self.net.hidden,
            param_count: self.net.param_count(),
            ema_decay: self.ema_decay,
            iteration,
            seed,
        };
        let header_bytes = serde_json::to_vec(&header)
            .map_err(|e| Error::Config(format!("checkpoint header: {e}")))?;
        let mut file = std::fs::File::create(path)?;
        file.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
        file.write_all(&header_bytes)?;
        for block in [&self.net.params, &self.ema] {
            for v in block.iter() {
                file.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, CheckpointHeader)> {
        let mut file = std::fs::File::open(path)?;
        let mut len_bytes = [0u8; 8];
        file.read_exact(&mut len_bytes)?;
        let header_len = u64::from_le_bytes(len_bytes) as usize;
        let mut header_bytes = vec![0u8; header_len];
        file.read_exact(&mut header_bytes)?;
        let header: CheckpointHeader = serde_json::from_slice(&header_bytes)
            .map_err(|e| Error::Config(format!("checkpoint header: {e}")))?;
        let mut read_block = |n: usize| -> Result<Vec<f64>> {
            let mut buf = vec![0u8; n * 8];
            file.read_exact(&mut buf)?;
            Ok(buf
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect())
        };
        let params = read_block(header.param_count)?;
        let ema = read_block(header.param_count)?;
        let mut net = Mlp::zeros(header.dim, header.hidden);
        if net.param_count() != header.param_count {
            return Err(Error::Config(format!(
                "checkpoint declares {} parameters but the architecture has {}",
                header.param_count,
                net.param_count()
            )));
        }
        net.params = params;
        Ok((
            Policy {
                grads: vec![0.0; net.param_count()],
                net,
                ema,
                ema_decay: header.ema_decay,
            },
            header,
        ))
    }
}

impl Velocity for Policy {
    fn velocity(&self, state: &[f64], t: f64) -> Vec<f64> {
        self.net.forward(state, t)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub dim: usize,
    pub hidden: usize,
    pub param_count: usize,
    pub ema_decay: f64,
    pub iteration: usize,
    pub seed: u64,
}

// ---------------------------------------------------------------------------
// Rewards
// ---------------------------------------------------------------------------

/// Terminal reward over leaf states.
#[derive(Clone)]
pub enum RewardFunction {
    /// `exp(-||z - m||^2 / (2 tau^2))`, in (0, 1], peaked at the target
    /// mode's mean.
    ModePreference { target: Vec<f64>, tau: f64 },
    /// `-||z - m||`.
    NegativeDistance { target: Vec<f64> },
    /// Any smooth user-supplied reward; used by tests.
    Custom(Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>),
}

impl std::fmt::Debug for RewardFunction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RewardFunction::ModePreference { target, tau } => f
                .debug_struct("ModePreference")
                .field("target", target)
                .field("tau", tau)
                .finish(),
            RewardFunction::NegativeDistance { target } => f
                .debug_struct("NegativeDistance")
                .field("target", target)
                .finish(),
            RewardFunction::Custom(_) => f.write_str("Custom(..)"),
        }
    }
}

impl RewardFunction {
    pub fn mode_preference(world: &MixtureWorld, target_mode: usize, tau: f64) -> Result<Self> {
        if target_mode >= world.n_modes() {
            return Err(Error::Config(format!(
                "target_mode {} out of range for {} modes",
                target_mode,
                world.n_modes()
            )));
        }
        if !(tau.is_finite() && tau > 0.0) {
            return Err(Error::Config(format!("tau must be positive, got {tau}")));
        }
        Ok(RewardFunction::ModePreference {
            target: world.mean(target_mode).to_vec(),
            tau,
        })
    }

    pub fn negative_distance(world: &MixtureWorld, target_mode: usize) -> Result<Self> {
        if target_mode >= world.n_modes() {
            return Err(Error::Config(format!(
                "target_mode {} out of range for {} modes",
                target_mode,
                world.n_modes()
            )));
        }
        Ok(RewardFunction::NegativeDistance {
            target: world.mean(target_mode).to_vec(),
        })
    }

    pub fn evaluate(&self, z: &[f64]) -> f64 {
        match self {
            RewardFunction::ModePreference { target, tau } => {
                let sq: f64 = target.iter().zip(z).map(|(m, x)| (x - m) * (x - m)).sum();
                (-sq / (2.0 * tau * tau)).exp()
            }
            RewardFunction::NegativeDistance { target } => {
                let sq: f64 = target.iter().zip(z).map(|(m, x)| (x - m) * (x - m)).sum();
                -sq.sqrt()
            }
            RewardFunction::Custom(f) => f(z),
        }
    }

    /// Lipschitz constant of the reward, where known: the mode-preference
    /// radial profile has maximal slope `1/(tau * sqrt(e))` at distance
    /// `tau`, and the negative distance has slope 1.
    pub fn lipschitz_bound(&self) -> Option<f64> {
        match self {
            RewardFunction::ModePreference { tau, .. } => {
                Some(1.0 / (tau * std::f64::consts::E.sqrt()))
            }
            RewardFunction::NegativeDistance { .. } => Some(1.0),
            RewardFunction::Custom(_) => None,
        }
    }
}

// ---------------------------------------------------------------------------
// Flow-matching pretraining
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 4000,
            batch_size: 128,
            learning_rate: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct PretrainReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub steps: usize,
}

/// Fit the velocity network to the world with conditional flow matching.
///
/// Each step draws a fresh batch `(x1, x0, t)`, forms `x_t`, and regresses
/// `v(x_t, t)` onto `x1 - x0` with Adam. Training aborts if the smoothed
/// loss after 20% of the budget exceeds the initial loss.
pub fn pretrain_flow_matching(
    world: &MixtureWorld,
    policy: &mut Policy,
    cfg: PretrainConfig,
    seed: u64,
) -> Result<PretrainReport> {
    if cfg.batch_size == 0 {
        return Err(Error::Config("pretrain batch_size must be positive".into()));
    }
    if !(cfg.learning_rate.is_finite() && cfg.learning_rate > 0.0) {
        return Err(Error::Config(format!(
            "pretrain learning_rate must be positive, got {}",
            cfg.learning_rate
        )));
    }
    if world.dim() != policy.net.dim() {
        return Err(Error::Config(format!(
            "world dimension {} does not match policy dimension {}",
            world.dim(),
            policy.net.dim()
        )));
    }
    let dim = world.dim();
    let n = policy.net.param_count();
    let (mut m1, mut m2) = (vec![0.0; n], vec![0.0; n]);
    let (beta1, beta2, eps) = (0.9, 0.999, 1e-8);
    let mut initial_loss = f64::NAN;
    let mut smoothed = f64::NAN;
    let mut last_loss = f64::NAN;
    let checkpoint_step = (cfg.steps as f64 * 0.2).ceil() as usize;

    for step in 0..cfg.steps {
        let mut stream = rng::stream(seed, Purpose::Pretrain, step as u64, 0, 0);
        policy.zero_grads();
        let mut loss = 0.0;
        for _ in 0..cfg.batch_size {
            let x1 = world.sample(&mut stream);
            let x0 = rng::standard_normal(&mut stream, dim);
            let t: f64 = stream.gen();
            let xt: Vec<f64> = x1
                .iter()
                .zip(&x0)
                .map(|(d, n)| t * n + (1.0 - t) * d)
                .collect();
            let target: Vec<f64> = x1.iter().zip(&x0).map(|(d, n)| d - n).collect();
            let (v, trace) = policy.net.forward_traced(&xt, t)?;
            let mut upstream = vec![0.0; dim];
            for o in 0..dim {
                let r = v[o] - target[o];
                loss += r * r;
                upstream[o] = 2.0 * r / cfg.batch_size as f64;
            }
            policy.net.backward(&trace, &upstream, &mut policy.grads);
        }
        loss /= cfg.batch_size as f64;
        last_loss = loss;
        if step == 0 {
            initial_loss = loss;
            smoothed = loss;
        } else {
            smoothed = 0.9 * smoothed + 0.1 * loss;
        }
        if step == checkpoint_step && cfg.steps >= 10 && smoothed > initial_loss {
            return Err(Error::Numeric(format!(
                "pretraining diverged: smoothed loss {smoothed:.6} exceeds \
                 initial loss {initial_loss:.6} after {step} steps"
            )));
        }

        let t_adam = (step + 1) as f64;
        let bc1 = 1.0 - beta1.powf(t_adam);
        let bc2 = 1.0 - beta2.powf(t_adam);
        for i in 0..n {
            let g = policy.grads[i];
            m1[i] = beta1 * m1[i] + (1.0 - beta1) * g;
            m2[i] = beta2 * m2[i] + (1.0 - beta2) * g * g;
            policy.net.params[i] -=
                cfg.learning_rate * (m1[i] / bc1) / ((m2[i] / bc2).sqrt() + eps);
        }
    }
    // RL starts from a clean EMA shadow.
    policy.ema.copy_from_slice(&policy.net.params);
    policy.zero_grads();
    Ok(PretrainReport {
        initial_loss,
        final_loss: last_loss,
        steps: cfg.steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn small_net(seed: u64) -> Mlp {
        Mlp::new(2, 6, seed)
    }

    #[test]
    fn zero_parameters_give_zero_output() {
        let net = Mlp::zeros(2, 8);
        assert_eq!(net.forward(&[0.7, -0.3], 0.5), vec![0.0, 0.0]);
    }

    #[test]
    fn forward_matches_independent_reimplementation() {
        // Naive oracle with explicit matrix loops over the same layout.
        let net = small_net(5);
        let (z, t) = ([0.4, -1.2], 0.3);
        let h = net.hidden();
        let input = 3;
        let x = [z[0], z[1], t];
        let mut h1 = vec![0.0; h];
        for i in 0..h {
            let mut a = net.params[net.idx_b1(i)];
            for k in 0..input {
                a += net.params[net.idx_w1(i, k)] * x[k];
            }
            h1[i] = a.tanh();
        }
        let mut h2 = vec![0.0; h];
        for i in 0..h {
            let mut a = net.params[net.idx_b2(i)];
            for j in 0..h {
                a += net.params[net.idx_w2(i, j)] * h1[j];
            }
            h2[i] = a.tanh();
        }
        let mut expected = vec![0.0; 2];
        for o in 0..2 {
            let mut a = net.params[net.idx_b3(o)];
            for j in 0..h {
                a += net.params[net.idx_w3(o, j)] * h2[j];
            }
            expected[o] = a;
        }
        let got = net.forward(&z, t);
        for o in 0..2 {
            assert_relative_eq!(got[o], expected[o], epsilon = 1e-14);
        }
    }

    #[test]
    fn hidden_unit_permutation_leaves_output_unchanged() {
        let mut net = small_net(9);
        let before = net.forward(&[0.2, 0.9], 0.7);
        // Swap hidden units 1 and 3 of the first layer: rows of W1/b1 and
        // columns of W2.
        let (a, b) = (1, 3);
        for k in 0..3 {
            net.params.swap(net.idx_w1(a, k), net.idx_w1(b, k));
        }
        net.params.swap(net.idx_b1(a), net.idx_b1(b));
        for i in 0..net.hidden() {
            net.params.swap(net.idx_w2(i, a), net.idx_w2(i, b));
        }
        let after = net.forward(&[0.2, 0.9], 0.7);
        for o in 0..2 {
            assert_relative_eq!(before[o], after[o], epsilon = 1e-14);
        }
    }

    #[test]
    fn backward_of_perfectly_fit_target_is_zero() {
        // All-zero net outputs exactly its target 0, so the squared-error
        // upstream vanishes and every accumulated gradient must too.
        let net = Mlp::zeros(2, 8);
        let (v, trace) = net.forward_traced(&[0.4, 0.1], 0.6).unwrap();
        let upstream: Vec<f64> = v.iter().map(|o| 2.0 * (o - 0.0)).collect();
        let mut grads = vec![0.0; net.param_count()];
        net.backward(&trace, &upstream, &mut grads);
        assert!(grads.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn gradients_match_central_finite_differences() {
        // Oracle: perturb every parameter by +-1e-5 and central-difference
        // the scalar loss sum_o c_o * v_o + 0.5 * ||v||^2.
        for seed in [1, 2, 3, 4, 5] {
            let mut net = small_net(seed);
            let z = [0.3, -0.8];
            let t = 0.4;
            let c = [0.7, -1.3];
            let loss = |net: &Mlp| -> f64 {
                let v = net.forward(&z, t);
                c.iter().zip(&v).map(|(ci, vi)| ci * vi).sum::<f64>()
                    + 0.5 * v.iter().map(|vi| vi * vi).sum::<f64>()
            };
            let (v, trace) = net.forward_traced(&z, t).unwrap();
            let upstream: Vec<f64> = c.iter().zip(&v).map(|(ci, vi)| ci + vi).collect();
            let mut grads = vec![0.0; net.param_count()];
            net.backward(&trace, &upstream, &mut grads);

            let h = 1e-5;
            for p in 0..net.param_count() {
                let orig = net.params[p];
                net.params[p] = orig + h;
                let plus = loss(&net);
                net.params[p] = orig - h;
                let minus = loss(&net);
                net.params[p] = orig;
                let numeric = (plus - minus) / (2.0 * h);
                let scale = grads[p].abs().max(numeric.abs()).max(1e-3);
                assert!(
                    (grads[p] - numeric).abs() / scale <= 1e-4,
                    "seed {seed} param {p}: analytic {} vs numeric {}",
                    grads[p],
                    numeric
                );
            }
        }
    }

    #[test]
    fn reward_peaks_at_one_on_the_target_mean() {
        let world = MixtureWorld::two_mode_default();
        let r = RewardFunction::mode_preference(&world, 1, 1.0).unwrap();
        assert_eq!(r.evaluate(&[2.0, 0.0]), 1.0);
    }

    #[test]
    fn reward_at_tau_sqrt2_is_inverse_e() {
        let world = MixtureWorld::two_mode_default();
        let tau = 0.9;
        let r = RewardFunction::mode_preference(&world, 1, tau).unwrap();
        let z = [2.0 + tau * 2.0f64.sqrt(), 0.0];
        assert_relative_eq!(r.evaluate(&z), (-1.0f64).exp(), epsilon = 1e-12);
    }

    #[test]
    fn reward_is_rotation_invariant_about_the_target() {
        let world = MixtureWorld::two_mode_default();
        let r = RewardFunction::mode_preference(&world, 1, 1.3).unwrap();
        let rho = 0.8;
        for angle in [0.3f64, 1.1, 2.9] {
            let z = [2.0 + rho * angle.cos(), rho * angle.sin()];
            assert_relative_eq!(
                r.evaluate(&z),
                (-rho * rho / (2.0 * 1.3 * 1.3)).exp(),
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn reward_respects_its_lipschitz_bound() {
        let world = MixtureWorld::two_mode_default();
        let tau = 0.7;
        let r = RewardFunction::mode_preference(&world, 1, tau).unwrap();
        let bound = r.lipschitz_bound().unwrap();
        assert_relative_eq!(bound, 1.0 / (tau * (1.0f64).exp().sqrt()), epsilon = 1e-12);
        let mut rng = rng::stream(3, Purpose::Fixture, 0, 0, 0);
        for _ in 0..2000 {
            let a = rng::standard_normal(&mut rng, 2);
            let step: Vec<f64> = rng::standard_normal(&mut rng, 2)
                .iter()
                .map(|s| s * 0.05)
                .collect();
            let b: Vec<f64> = a.iter().zip(&step).map(|(x, s)| x + s).collect();
            let dist = step.iter().map(|s| s * s).sum::<f64>().sqrt();
            let dr = (r.evaluate(&a) - r.evaluate(&b)).abs();
            assert!(dr <= bound * dist + 1e-12, "|dr| {dr} > L*d {}", bound * dist);
        }
    }

    #[test]
    fn world_sampling_matches_weights() {
        let world = MixtureWorld::new(
            vec![vec![-2.0, 0.0], vec![2.0, 0.0]],
            vec![0.25, 0.75],
            vec![0.3, 0.3],
        )
        .unwrap();
        let mut rng = rng::stream(17, Purpose::Fixture, 0, 0, 0);
        let n = 40_000;
        let right = (0..n)
            .filter(|_| world.sample(&mut rng)[0] > 0.0)
            .count() as f64
            / n as f64;
        assert!((right - 0.75).abs() < 0.01, "right share {right}");
    }

    #[test]
    fn one_mode_world_requires_duplicated_mean() {
        assert!(MixtureWorld::new(vec![vec![0.0]], vec![1.0], vec![1.0]).is_err());
    }

    #[test]
    fn zero_step_pretraining_changes_nothing() {
        let world = MixtureWorld::two_mode_default();
        let mut policy = Policy::new(2, 8, 0.995, 7).unwrap();
        let before = policy.net.params.clone();
        let report = pretrain_flow_matching(
            &world,
            &mut policy,
            PretrainConfig {
                steps: 0,
                ..Default::default()
            },
            7,
        )
        .unwrap();
        assert_eq!(policy.net.params, before);
        assert_eq!(report.steps, 0);
    }

    #[test]
    fn pretraining_on_a_single_mode_learns_the_direction() {
        // Two coincident modes make an effectively one-mode world.
        let world = MixtureWorld::new(
            vec![vec![1.5, -1.0], vec![1.5, -1.0]],
            vec![0.5, 0.5],
            vec![0.4, 0.4],
        )
        .unwrap();
        let mut policy = Policy::new(2, 16, 0.995, 21).unwrap();
        let report = pretrain_flow_matching(
            &world,
            &mut policy,
            PretrainConfig {
                steps: 600,
                batch_size: 64,
                learning_rate: 2e-3,
            },
            21,
        )
        .unwrap();
        assert!(
            report.final_loss < report.initial_loss,
            "loss {} -> {}",
            report.initial_loss,
            report.final_loss
        );
        // At t=1 the expected target is mode - noise; check the learned
        // field points that way on average.
        let mut rng = rng::stream(22, Purpose::Fixture, 0, 0, 0);
        let mut dot = 0.0;
        for _ in 0..256 {
            let x0 = rng::standard_normal(&mut rng, 2);
            let v = policy.net.forward(&x0, 1.0);
            let ideal = [1.5 - x0[0], -1.0 - x0[1]];
            dot += v[0] * ideal[0] + v[1] * ideal[1];
        }
        assert!(dot > 0.0, "mean alignment {dot}");
    }

    #[test]
    fn checkpoint_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ckpt");
        let mut policy = Policy::new(2, 8, 0.99, 3).unwrap();
        policy.ema[0] = 42.5;
        policy.save(&path, 17, 3).unwrap();
        let (loaded, header) = Policy::load(&path).unwrap();
        assert_eq!(loaded.net.params, policy.net.params);
        assert_eq!(loaded.ema, policy.ema);
        assert_eq!(header.iteration, 17);
        assert_eq!(header.hidden, 8);
    }
}
