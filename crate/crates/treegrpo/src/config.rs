//! Run configuration.
//!
//! Runs are configured by an INI-style text format: `[section]` headers,
//! `key = value` pairs, `#` or `;` comments. Parsing starts from the
//! defaults and applies the file on top, so a config only needs the keys it
//! changes. Unknown sections, unknown keys and duplicate keys are rejected
//! by name; a typo never silently falls back to a default.
//!
//! `emit_ini` writes the canonical form of a configuration: every section,
//! every key, fixed order. Parsing what it emits reproduces the same
//! configuration, which is what run manifests rely on.

use std::path::PathBuf;

use crate::credit::{FusionConfig, FusionMode};
use crate::policy::{MixtureWorld, Policy, PretrainConfig, RewardFunction};
use crate::pruning::{PruningConfig, WidthMode};
use crate::trainer::{GrpoConfig, OptimizerConfig, TrainConfig, TrainMode};
use crate::tree::{BranchSchedule, SlidingWindow, DEFAULT_LEAF_BUDGET};
use crate::{Error, Result};

const SECTIONS: [&str; 14] = [
    "run",
    "schedule",
    "dynamics",
    "world",
    "reward",
    "policy",
    "pretrain",
    "optimizer",
    "grpo",
    "baseline",
    "fusion",
    "credit",
    "pruning",
    "window",
];

/// Named split-step layouts over a 16-step grid.
pub const PRESET_DENSE: [usize; 4] = [0, 3, 6, 9];
pub const PRESET_MIXED: [usize; 4] = [0, 4, 8, 12];
pub const PRESET_SPARSE: [usize; 4] = [0, 5, 10, 15];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RewardKind {
    ModePreference,
    NegativeDistance,
}

impl RewardKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            RewardKind::ModePreference => "mode-preference",
            RewardKind::NegativeDistance => "negative-distance",
        }
    }
}

impl std::str::FromStr for RewardKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mode-preference" => Ok(RewardKind::ModePreference),
            "negative-distance" => Ok(RewardKind::NegativeDistance),
            other => Err(Error::Config(format!(
                "unknown reward kind {other:?}; expected mode-preference or negative-distance"
            ))),
        }
    }
}

// ---------------------------------------------------------------------------
// Sections
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct RunSection {
    pub seed: u64,
    pub sampler_seed: u64,
    pub output_dir: String,
    pub checkpoint_interval: usize,
    pub record_wall_time: bool,
    /// Worker threads for parallel diagnostics; 0 picks the default.
    pub threads: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            seed: 42,
            sampler_seed: 1223627,
            output_dir: "runs".into(),
            checkpoint_interval: 40,
            record_wall_time: false,
            threads: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleSection {
    pub steps: usize,
    pub split_steps: Vec<usize>,
    pub branch_factor: usize,
    pub correlation: f64,
    /// Make the final step deterministic (no noise, no loss there).
    pub ignore_last: bool,
    pub leaf_budget: usize,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        ScheduleSection {
            steps: 16,
            split_steps: PRESET_DENSE.to_vec(),
            branch_factor: 2,
            correlation: 4.0,
            ignore_last: true,
            leaf_budget: DEFAULT_LEAF_BUDGET,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DynamicsSection {
    pub shift: f64,
    pub eta: f64,
}

impl Default for DynamicsSection {
    fn default() -> Self {
        DynamicsSection {
            shift: 3.0,
            eta: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldSection {
    /// Modes sit at `(-separation, 0)` and `(separation, 0)`.
    pub separation: f64,
    pub scale: f64,
}

impl Default for WorldSection {
    fn default() -> Self {
        WorldSection {
            separation: 2.0,
            scale: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RewardSection {
    pub kind: RewardKind,
    pub target_mode: usize,
    pub tau: f64,
}

impl Default for RewardSection {
    fn default() -> Self {
        RewardSection {
            kind: RewardKind::ModePreference,
            target_mode: 0,
            tau: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicySection {
    pub hidden: usize,
}

impl Default for PolicySection {
    fn default() -> Self {
        PolicySection { hidden: 64 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainSection {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for PretrainSection {
    fn default() -> Self {
        let d = PretrainConfig::default();
        PretrainSection {
            steps: d.steps,
            batch_size: d.batch_size,
            learning_rate: d.learning_rate,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerSection {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub max_grad_norm: f64,
    pub ema_decay: f64,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        let d = OptimizerConfig::default();
        OptimizerSection {
            learning_rate: d.learning_rate,
            weight_decay: d.weight_decay,
            max_grad_norm: d.max_grad_norm,
            ema_decay: d.ema_decay,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GrpoSection {
    pub iterations: usize,
    pub clip_epsilon: f64,
    pub num_generations: usize,
    pub grad_accum_steps: usize,
    pub init_same_noise: bool,
    pub timestep_fraction: f64,
}

impl Default for GrpoSection {
    fn default() -> Self {
        let d = GrpoConfig::default();
        GrpoSection {
            iterations: 200,
            clip_epsilon: d.clip_epsilon,
            num_generations: d.num_generations,
            grad_accum_steps: d.grad_accum_steps,
            init_same_noise: d.init_same_noise,
            timestep_fraction: d.timestep_fraction,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineSection {
    pub steps: usize,
}

impl Default for BaselineSection {
    fn default() -> Self {
        BaselineSection { steps: 16 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionSection {
    pub mode: FusionMode,
    pub beta: f64,
}

impl Default for FusionSection {
    fn default() -> Self {
        FusionSection {
            mode: FusionMode::SoftmaxPath,
            beta: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CreditSection {
    pub epsilon: f64,
    pub advantage_clip: f64,
}

impl Default for CreditSection {
    fn default() -> Self {
        CreditSection {
            epsilon: crate::credit::DEFAULT_EPSILON,
            advantage_clip: crate::credit::DEFAULT_ADVANTAGE_CLIP,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruningSection {
    pub width_mode: WidthMode,
    pub extreme_b: usize,
}

impl Default for PruningSection {
    fn default() -> Self {
        PruningSection {
            width_mode: WidthMode::None,
            extreme_b: 1,
        }
    }
}

/// Window geometry. Branch-mode training prunes gradients inside the
/// window when `enabled`; hybrid mode always uses the geometry to place
/// its stochastic steps.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSection {
    pub enabled: bool,
    pub size: usize,
    pub shift_interval: usize,
    pub start: usize,
    pub stop: usize,
}

impl Default for WindowSection {
    fn default() -> Self {
        WindowSection {
            enabled: false,
            size: 4,
            shift_interval: 10,
            start: 9,
            stop: 12,
        }
    }
}

// ---------------------------------------------------------------------------
// The whole configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AppConfig {
    pub run: RunSection,
    pub schedule: ScheduleSection,
    pub dynamics: DynamicsSection,
    pub world: WorldSection,
    pub reward: RewardSection,
    pub policy: PolicySection,
    pub pretrain: PretrainSection,
    pub optimizer: OptimizerSection,
    pub grpo: GrpoSection,
    pub baseline: BaselineSection,
    pub fusion: FusionSection,
    pub credit: CreditSection,
    pub pruning: PruningSection,
    pub window: WindowSection,
}

// -- value parsers, all naming the key they were parsing --------------------

fn ctx(section: &str, key: &str) -> String {
    format!("{section}.{key}")
}

fn parse_u64(section: &str, key: &str, v: &str) -> Result<u64> {
    v.parse()
        .map_err(|_| Error::Config(format!("{}: expected an unsigned integer, got {v:?}", ctx(section, key))))
}

fn parse_usize(section: &str, key: &str, v: &str) -> Result<usize> {
    v.parse()
        .map_err(|_| Error::Config(format!("{}: expected an unsigned integer, got {v:?}", ctx(section, key))))
}

fn parse_f64(section: &str, key: &str, v: &str) -> Result<f64> {
    v.parse()
        .map_err(|_| Error::Config(format!("{}: expected a number, got {v:?}", ctx(section, key))))
}

fn parse_bool(section: &str, key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!(
            "{}: expected true or false, got {v:?}",
            ctx(section, key)
        ))),
    }
}

fn parse_usize_list(section: &str, key: &str, v: &str) -> Result<Vec<usize>> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',')
        .map(|part| parse_usize(section, key, part.trim()))
        .collect()
}

impl AppConfig {
    /// Apply one `key = value` assignment. This is the single entry point
    /// for both file parsing and command-line overrides, so both reject the
    /// same unknown keys.
    pub fn set(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        match (section, key) {
            ("run", "seed") => self.run.seed = parse_u64(section, key, value)?,
            ("run", "sampler_seed") => self.run.sampler_seed = parse_u64(section, key, value)?,
            ("run", "output_dir") => self.run.output_dir = value.to_string(),
            ("run", "checkpoint_interval") => {
                self.run.checkpoint_interval = parse_usize(section, key, value)?
            }
            ("run", "record_wall_time") => {
                self.run.record_wall_time = parse_bool(section, key, value)?
            }
            ("run", "threads") => self.run.threads = parse_usize(section, key, value)?,

            ("schedule", "steps") => self.schedule.steps = parse_usize(section, key, value)?,
            ("schedule", "split_steps") => {
                self.schedule.split_steps = match value {
                    "dense" => PRESET_DENSE.to_vec(),
                    "mixed" => PRESET_MIXED.to_vec(),
                    "sparse" => PRESET_SPARSE.to_vec(),
                    list => parse_usize_list(section, key, list)?,
                }
            }
            ("schedule", "branch_factor") => {
                self.schedule.branch_factor = parse_usize(section, key, value)?
            }
            ("schedule", "correlation") => {
                self.schedule.correlation = parse_f64(section, key, value)?
            }
            ("schedule", "ignore_last") => {
                self.schedule.ignore_last = parse_bool(section, key, value)?
            }
            ("schedule", "leaf_budget") => {
                self.schedule.leaf_budget = parse_usize(section, key, value)?
            }

            ("dynamics", "shift") => self.dynamics.shift = parse_f64(section, key, value)?,
            ("dynamics", "eta") => self.dynamics.eta = parse_f64(section, key, value)?,

            ("world", "separation") => self.world.separation = parse_f64(section, key, value)?,
            ("world", "scale") => self.world.scale = parse_f64(section, key, value)?,

            ("reward", "kind") => {
                self.reward.kind = value
                    .parse()
                    .map_err(|e| Error::Config(format!("{}: {e}", ctx(section, key))))?
            }
            ("reward", "target_mode") => {
                self.reward.target_mode = parse_usize(section, key, value)?
            }
            ("reward", "tau") => self.reward.tau = parse_f64(section, key, value)?,

            ("policy", "hidden") => self.policy.hidden = parse_usize(section, key, value)?,

            ("pretrain", "steps") => self.pretrain.steps = parse_usize(section, key, value)?,
            ("pretrain", "batch_size") => {
                self.pretrain.batch_size = parse_usize(section, key, value)?
            }
            ("pretrain", "learning_rate") => {
                self.pretrain.learning_rate = parse_f64(section, key, value)?
            }

            ("optimizer", "learning_rate") => {
                self.optimizer.learning_rate = parse_f64(section, key, value)?
            }
            ("optimizer", "weight_decay") => {
                self.optimizer.weight_decay = parse_f64(section, key, value)?
            }
            ("optimizer", "max_grad_norm") => {
                self.optimizer.max_grad_norm = parse_f64(section, key, value)?
            }
            ("optimizer", "ema_decay") => {
                self.optimizer.ema_decay = parse_f64(section, key, value)?
            }

            ("grpo", "iterations") => self.grpo.iterations = parse_usize(section, key, value)?,
            ("grpo", "clip_epsilon") => self.grpo.clip_epsilon = parse_f64(section, key, value)?,
            ("grpo", "num_generations") => {
                self.grpo.num_generations = parse_usize(section, key, value)?
            }
            ("grpo", "grad_accum_steps") => {
                self.grpo.grad_accum_steps = parse_usize(section, key, value)?
            }
            ("grpo", "init_same_noise") => {
                self.grpo.init_same_noise = parse_bool(section, key, value)?
            }
            ("grpo", "timestep_fraction") => {
                self.grpo.timestep_fraction = parse_f64(section, key, value)?
            }

            ("baseline", "steps") => self.baseline.steps = parse_usize(section, key, value)?,

            ("fusion", "mode") => {
                self.fusion.mode = value
                    .parse()
                    .map_err(|e| Error::Config(format!("{}: {e}", ctx(section, key))))?
            }
            ("fusion", "beta") => self.fusion.beta = parse_f64(section, key, value)?,

            ("credit", "epsilon") => self.credit.epsilon = parse_f64(section, key, value)?,
            ("credit", "advantage_clip") => {
                self.credit.advantage_clip = parse_f64(section, key, value)?
            }

            ("pruning", "width_mode") => {
                self.pruning.width_mode = value
                    .parse()
                    .map_err(|e| Error::Config(format!("{}: {e}", ctx(section, key))))?
            }
            ("pruning", "extreme_b") => {
                self.pruning.extreme_b = parse_usize(section, key, value)?
            }

            ("window", "enabled") => self.window.enabled = parse_bool(section, key, value)?,
            ("window", "size") => self.window.size = parse_usize(section, key, value)?,
            ("window", "shift_interval") => {
                self.window.shift_interval = parse_usize(section, key, value)?
            }
            ("window", "start") => self.window.start = parse_usize(section, key, value)?,
            ("window", "stop") => self.window.stop = parse_usize(section, key, value)?,

            _ => {
                return Err(Error::Config(format!(
                    "unknown key {}",
                    ctx(section, key)
                )))
            }
        }
        Ok(())
    }

    /// Canonical text form: every section and key in fixed order.
    pub fn emit_ini(&self) -> String {
        let split_steps = self
            .schedule
            .split_steps
            .iter()
            .map(usize::to_string)
            .collect::<Vec<_>>()
            .join(", ");
        format!(
            "[run]\n\
             seed = {}\n\
             sampler_seed = {}\n\
             output_dir = {}\n\
             checkpoint_interval = {}\n\
             record_wall_time = {}\n\
             threads = {}\n\
             \n\
             [schedule]\n\
             steps = {}\n\
             split_steps = {}\n\
             branch_factor = {}\n\
             correlation = {}\n\
             ignore_last = {}\n\
             leaf_budget = {}\n\
             \n\
             [dynamics]\n\
             shift = {}\n\
             eta = {}\n\
             \n\
             [world]\n\
             separation = {}\n\
             scale = {}\n\
             \n\
             [reward]\n\
             kind = {}\n\
             target_mode = {}\n\
             tau = {}\n\
             \n\
             [policy]\n\
             hidden = {}\n\
             \n\
             [pretrain]\n\
             steps = {}\n\
             batch_size = {}\n\
             learning_rate = {}\n\
             \n\
             [optimizer]\n\
             learning_rate = {}\n\
             weight_decay = {}\n\
             max_grad_norm = {}\n\
             ema_decay = {}\n\
             \n\
             [grpo]\n\
             iterations = {}\n\
             clip_epsilon = {}\n\
             num_generations = {}\n\
             grad_accum_steps = {}\n\
             init_same_noise = {}\n\
             timestep_fraction = {}\n\
             \n\
             [baseline]\n\
             steps = {}\n\
             \n\
             [fusion]\n\
             mode = {}\n\
             beta = {}\n\
             \n\
             [credit]\n\
             epsilon = {}\n\
             advantage_clip = {}\n\
             \n\
             [pruning]\n\
             width_mode = {}\n\
             extreme_b = {}\n\
             \n\
             [window]\n\
             enabled = {}\n\
             size = {}\n\
             shift_interval = {}\n\
             start = {}\n\
             stop = {}\n",
            self.run.seed,
            self.run.sampler_seed,
            self.run.output_dir,
            self.run.checkpoint_interval,
            self.run.record_wall_time,
            self.run.threads,
            self.schedule.steps,
            split_steps,
            self.schedule.branch_factor,
            self.schedule.correlation,
            self.schedule.ignore_last,
            self.schedule.leaf_budget,
            self.dynamics.shift,
            self.dynamics.eta,
            self.world.separation,
            self.world.scale,
            self.reward.kind.as_str(),
            self.reward.target_mode,
            self.reward.tau,
            self.policy.hidden,
            self.pretrain.steps,
            self.pretrain.batch_size,
            self.pretrain.learning_rate,
            self.optimizer.learning_rate,
            self.optimizer.weight_decay,
            self.optimizer.max_grad_norm,
            self.optimizer.ema_decay,
            self.grpo.iterations,
            self.grpo.clip_epsilon,
            self.grpo.num_generations,
            self.grpo.grad_accum_steps,
            self.grpo.init_same_noise,
            self.grpo.timestep_fraction,
            self.baseline.steps,
            self.fusion.mode.as_str(),
            self.fusion.beta,
            self.credit.epsilon,
            self.credit.advantage_clip,
            self.pruning.width_mode.as_str(),
            self.pruning.extreme_b,
            self.window.enabled,
            self.window.size,
            self.window.shift_interval,
            self.window.start,
            self.window.stop,
        )
    }

    // -- domain objects -----------------------------------------------------

    pub fn build_schedule(&self) -> Result<BranchSchedule> {
        for &s in &self.schedule.split_steps {
            if s >= self.schedule.steps {
                return Err(Error::Config(format!(
                    "schedule.split_steps: step {s} is out of range for {} steps",
                    self.schedule.steps
                )));
            }
        }
        let schedule = BranchSchedule::new(
            self.schedule.steps,
            self.schedule.split_steps.clone(),
            self.schedule.branch_factor,
            self.schedule.correlation,
        )
        .map_err(prefix_schedule)?
        .with_final_step_deterministic(self.schedule.ignore_last)
        .map_err(prefix_schedule)?
        .with_leaf_budget(self.schedule.leaf_budget)
        .map_err(prefix_schedule)?;
        Ok(schedule)
    }

    pub fn build_world(&self) -> Result<MixtureWorld> {
        MixtureWorld::new(
            vec![
                vec![-self.world.separation, 0.0],
                vec![self.world.separation, 0.0],
            ],
            vec![0.5, 0.5],
            vec![self.world.scale, self.world.scale],
        )
    }

    pub fn build_reward(&self, world: &MixtureWorld) -> Result<RewardFunction> {
        match self.reward.kind {
            RewardKind::ModePreference => {
                RewardFunction::mode_preference(world, self.reward.target_mode, self.reward.tau)
            }
            RewardKind::NegativeDistance => {
                RewardFunction::negative_distance(world, self.reward.target_mode)
            }
        }
    }

    pub fn build_window(&self) -> Result<SlidingWindow> {
        SlidingWindow::new(
            self.window.size,
            self.window.shift_interval,
            self.window.start,
            self.window.stop,
        )
    }

    pub fn build_policy(&self) -> Result<Policy> {
        Policy::new(
            2,
            self.policy.hidden,
            self.optimizer.ema_decay,
            self.run.seed,
        )
    }

    pub fn build_pretrain(&self) -> PretrainConfig {
        PretrainConfig {
            steps: self.pretrain.steps,
            batch_size: self.pretrain.batch_size,
            learning_rate: self.pretrain.learning_rate,
        }
    }

    /// Assemble the trainer configuration for `mode`. The window geometry
    /// feeds depth pruning in branch mode (when enabled) and the stochastic
    /// step placement in hybrid mode.
    pub fn build_train(&self, mode: TrainMode) -> Result<TrainConfig> {
        let window = self.build_window()?;
        let depth_pruning = match mode {
            TrainMode::Branch | TrainMode::Hybrid if self.window.enabled => Some(window),
            _ => None,
        };
        Ok(TrainConfig {
            grpo: GrpoConfig {
                clip_epsilon: self.grpo.clip_epsilon,
                num_generations: self.grpo.num_generations,
                grad_accum_steps: self.grpo.grad_accum_steps,
                iterations: self.grpo.iterations,
                init_same_noise: self.grpo.init_same_noise,
                timestep_fraction: self.grpo.timestep_fraction,
            },
            optimizer: OptimizerConfig {
                learning_rate: self.optimizer.learning_rate,
                weight_decay: self.optimizer.weight_decay,
                max_grad_norm: self.optimizer.max_grad_norm,
                ema_decay: self.optimizer.ema_decay,
            },
            fusion: FusionConfig::new(self.fusion.mode, self.fusion.beta)?,
            credit_epsilon: self.credit.epsilon,
            advantage_clip: self.credit.advantage_clip,
            pruning: PruningConfig {
                width_mode: self.pruning.width_mode,
                extreme_b: self.pruning.extreme_b,
                window: depth_pruning,
            },
            hybrid_window: Some(window),
            shift: self.dynamics.shift,
            eta: self.dynamics.eta,
            seed: self.run.seed,
            sampler_seed: self.run.sampler_seed,
            baseline_steps: self.baseline.steps,
            checkpoint_interval: self.run.checkpoint_interval,
            output_dir: Some(PathBuf::from(&self.run.output_dir)),
            record_wall_time: self.run.record_wall_time,
        })
    }
}

fn prefix_schedule(e: Error) -> Error {
    match e {
        Error::Config(msg) => Error::Config(format!("[schedule] {msg}")),
        other => other,
    }
}

// ---------------------------------------------------------------------------
// Text parsing
// ---------------------------------------------------------------------------

/// Cut a trailing comment: `#` or `;` at the line start or after whitespace.
fn strip_comment(line: &str) -> &str {
    let bytes = line.as_bytes();
    for (i, &b) in bytes.iter().enumerate() {
        if (b == b'#' || b == b';') && (i == 0 || bytes[i - 1].is_ascii_whitespace()) {
            return &line[..i];
        }
    }
    line
}

pub fn parse_str(text: &str) -> Result<AppConfig> {
    let mut cfg = AppConfig::default();
    let mut seen = std::collections::HashSet::new();
    let mut section: Option<String> = None;
    for (idx, raw) in text.lines().enumerate() {
        let line = strip_comment(raw).trim();
        if line.is_empty() {
            continue;
        }
        let lineno = idx + 1;
        if let Some(rest) = line.strip_prefix('[') {
            let name = rest.strip_suffix(']').ok_or_else(|| {
                Error::Config(format!("line {lineno}: malformed section header {line:?}"))
            })?;
            if !SECTIONS.contains(&name) {
                return Err(Error::Config(format!(
                    "line {lineno}: unknown section [{name}]"
                )));
            }
            section = Some(name.to_string());
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Config(format!(
                "line {lineno}: expected key = value, got {line:?}"
            )));
        };
        let Some(section) = section.as_deref() else {
            return Err(Error::Config(format!(
                "line {lineno}: key before any [section] header"
            )));
        };
        let key = key.trim();
        let value = value.trim();
        if !seen.insert(format!("{section}.{key}")) {
            return Err(Error::Config(format!(
                "line {lineno}: duplicate key {}",
                ctx(section, key)
            )));
        }
        cfg.set(section, key, value)?;
    }
    Ok(cfg)
}

pub fn parse_file(path: &std::path::Path) -> Result<AppConfig> {
    let text = std::fs::read_to_string(path)?;
    parse_str(&text)
}

/// Apply a `section.key=value` override string.
pub fn apply_override(cfg: &mut AppConfig, spec: &str) -> Result<()> {
    let Some((path, value)) = spec.split_once('=') else {
        return Err(Error::Config(format!(
            "override {spec:?} is not of the form section.key=value"
        )));
    };
    let Some((section, key)) = path.trim().split_once('.') else {
        return Err(Error::Config(format!(
            "override {spec:?} is not of the form section.key=value"
        )));
    };
    cfg.set(section.trim(), key.trim(), value.trim())
}
