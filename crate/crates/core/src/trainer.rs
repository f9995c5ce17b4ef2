//! Behaviour cloning and group-relative policy optimisation for the
//! softmax-linear policy.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{EnvError, EpisodeConfig, EpisodeState, Environment, Trajectory};
use crate::policy::{log_prob, log_prob_and_grad, Perception, PolicyError, PolicyParams, Sampling, SoftmaxPolicy};
use crate::rng::{derive_seed, rng_for};
use crate::scenes::{manifest_entry, SceneError, SceneSpec};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("every rollout group was degenerate for {0} consecutive steps")]
    AllGroupsDegenerate(usize),
    #[error("rollouts sampled from params version {got}, trainer is at {expected}")]
    VersionMismatch { expected: u64, got: u64 },
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Scene(#[from] SceneError),
}

// --- behaviour cloning -----------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for SftConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 32,
            learning_rate: 0.5,
            seed: 7,
        }
    }
}

impl SftConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::InvalidConfig("sft learning_rate must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("sft batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// A decision point: features of the history and the arm taken.
#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub features: Vec<f64>,
    pub arm: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Demonstration {
    pub steps: Vec<Step>,
}

impl Demonstration {
    /// Replays `trajectory` and featurizes every history prefix, so the
    /// demonstration does not depend on what the generating policy recorded.
    pub fn from_trajectory(trajectory: &Trajectory, perception: &Perception) -> Result<Self, TrainError> {
        let ep = &trajectory.episode;
        let steps = ep
            .actions
            .iter()
            .enumerate()
            .map(|(t, action)| {
                let prefix = history_prefix(ep, t);
                let arm = perception.arms().arm_of(action, &prefix)?;
                Ok(Step {
                    features: perception.featurize(&prefix),
                    arm,
                })
            })
            .collect::<Result<Vec<_>, TrainError>>()?;
        Ok(Self { steps })
    }
}

/// State as it was when the `t`-th action was chosen.
pub fn history_prefix(ep: &EpisodeState, t: usize) -> EpisodeState {
    EpisodeState {
        query: ep.query.clone(),
        original: ep.original.clone(),
        config: ep.config.clone(),
        active_budget: ep.active_budget,
        observations: ep.observations.iter().filter(|o| o.turn <= t).cloned().collect(),
        actions: ep.actions[..t].to_vec(),
        turn: t,
        tokens_used: 0,
        status: crate::env::Status::Running,
        last_error: None,
    }
}

/// Mean negative log-likelihood per demonstration, and its gradient.
pub fn sft_loss_and_grad(params: &PolicyParams, data: &[Demonstration]) -> Result<(f64, Vec<f64>), TrainError> {
    let mut loss = 0.0;
    let mut grad = vec![0.0; params.weights.len()];
    if data.is_empty() {
        return Ok((0.0, grad));
    }
    let n = data.len() as f64;
    for demo in data {
        for step in &demo.steps {
            let (lp, g) = log_prob_and_grad(params, &step.features, step.arm)?;
            loss -= lp / n;
            for (a, b) in grad.iter_mut().zip(&g) {
                *a -= b / n;
            }
        }
    }
    Ok((loss, grad))
}

pub fn sft_loss(params: &PolicyParams, data: &[Demonstration]) -> Result<f64, TrainError> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut loss = 0.0;
    for demo in data {
        for step in &demo.steps {
            loss -= log_prob(params, &step.features, step.arm)?;
        }
    }
    Ok(loss / data.len() as f64)
}

/// Minibatch SGD on the cloning loss. Returns the trained params and the
/// full-dataset loss after each epoch.
pub fn sft_train(
    params: &PolicyParams,
    data: &[Demonstration],
    config: &SftConfig,
) -> Result<(PolicyParams, Vec<f64>), TrainError> {
    config.validate()?;
    let mut params = params.clone();
    let mut losses = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng_for(config.seed, &[0x5f7, epoch as u64]));
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<Demonstration> = chunk.iter().map(|&i| data[i].clone()).collect();
            let (_, g) = sft_loss_and_grad(&params, &batch)?;
            params.apply(&g, -config.learning_rate);
        }
        losses.push(sft_loss(&params, data)?);
    }
    Ok((params, losses))
}

// --- group-relative policy optimisation -------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub clip_low: f64,
    pub clip_high: f64,
    pub learning_rate: f64,
    pub batch_queries: usize,
    /// Trajectories per gradient step.
    pub minibatch: usize,
    pub max_steps: usize,
    pub dynamic_sampling: bool,
    /// Extra sampling rounds per step used to refill degenerate groups.
    pub max_resample_rounds: usize,
    /// Consecutive steps without an informative group before giving up.
    pub max_degenerate_steps: usize,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            clip_low: 0.2,
            clip_high: 0.28,
            learning_rate: 1e-2,
            batch_queries: 8,
            minibatch: 32,
            max_steps: 100,
            dynamic_sampling: true,
            max_resample_rounds: 3,
            max_degenerate_steps: 10,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if self.group_size < 2 {
            return bad("group_size must be >= 2");
        }
        if !(self.clip_low > 0.0 && self.clip_low < 1.0) {
            return bad("clip_low must lie in (0, 1)");
        }
        if !(self.clip_high > 0.0) {
            return bad("clip_high must be > 0");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be > 0");
        }
        if self.batch_queries == 0 || self.minibatch == 0 {
            return bad("batch_queries and minibatch must be >= 1");
        }
        if self.minibatch > self.batch_queries * self.group_size {
            return bad("minibatch exceeds batch_queries * group_size");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvantageGroup {
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
    pub degenerate: bool,
}

/// Group-normalised advantages with the population standard deviation.
pub fn group_advantages(rewards: &[f64]) -> AdvantageGroup {
    let n = rewards.len().max(1) as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let std = (rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
    let degenerate = std == 0.0;
    let advantages = if degenerate {
        vec![0.0; rewards.len()]
    } else {
        rewards.iter().map(|r| (r - mean) / std).collect()
    };
    AdvantageGroup {
        rewards: rewards.to_vec(),
        advantages,
        degenerate,
    }
}

/// `min(r A, clip(r, 1 - eps_low, 1 + eps_high) A)` with `r = exp(new - old)`.
pub fn clipped_surrogate(logp_new: f64, logp_old: f64, advantage: f64, config: &GrpoConfig) -> f64 {
    let r = (logp_new - logp_old).exp();
    let clipped = r.clamp(1.0 - config.clip_low, 1.0 + config.clip_high);
    (r * advantage).min(clipped * advantage)
}

/// Derivative of [`clipped_surrogate`] with respect to `logp_new`.
fn surrogate_slope(logp_new: f64, logp_old: f64, advantage: f64, config: &GrpoConfig) -> f64 {
    let r = (logp_new - logp_old).exp();
    let clipped = r.clamp(1.0 - config.clip_low, 1.0 + config.clip_high);
    // the clipped branch is flat in r, the unclipped one has slope r A
    if r * advantage <= clipped * advantage {
        r * advantage
    } else {
        0.0
    }
}

/// One scored decision inside a frozen rollout batch.
#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateSample {
    pub features: Vec<f64>,
    pub arm: usize,
    pub logp_old: f64,
    pub advantage: f64,
}

/// Mean clipped surrogate over `samples` and its gradient.
pub fn surrogate_objective_and_grad(
    params: &PolicyParams,
    samples: &[SurrogateSample],
    config: &GrpoConfig,
) -> Result<(f64, Vec<f64>), TrainError> {
    let mut obj = 0.0;
    let mut grad = vec![0.0; params.weights.len()];
    if samples.is_empty() {
        return Ok((0.0, grad));
    }
    let n = samples.len() as f64;
    for s in samples {
        let (lp, g) = log_prob_and_grad(params, &s.features, s.arm)?;
        obj += clipped_surrogate(lp, s.logp_old, s.advantage, config) / n;
        let slope = surrogate_slope(lp, s.logp_old, s.advantage, config) / n;
        if slope != 0.0 {
            for (a, b) in grad.iter_mut().zip(&g) {
                *a += slope * b;
            }
        }
    }
    Ok((obj, grad))
}

/// The G rollouts of one query.
#[derive(Debug, Clone)]
pub struct RolloutGroup {
    pub trajectories: Vec<Trajectory>,
}

impl RolloutGroup {
    pub fn rewards(&self) -> Vec<f64> {
        self.trajectories.iter().map(|t| t.reward as f64).collect()
    }

    pub fn advantages(&self) -> AdvantageGroup {
        group_advantages(&self.rewards())
    }

    pub fn all_direct(&self) -> bool {
        self.trajectories.iter().all(|t| t.focus_turns() == 0)
    }

    pub fn all_focus(&self) -> bool {
        self.trajectories.iter().all(|t| t.focus_turns() > 0)
    }

    pub fn visual_tokens(&self) -> usize {
        self.trajectories.iter().map(|t| t.visual_tokens()).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrpoStepStats {
    pub informative_groups: usize,
    pub samples: usize,
    pub minibatches: usize,
    /// Mean surrogate of the first minibatch before its update.
    pub surrogate: f64,
}

fn samples_of(trajectory: &Trajectory, advantage: f64, version: u64) -> Result<Vec<SurrogateSample>, TrainError> {
    trajectory
        .decisions
        .iter()
        .map(|d| {
            if d.version != version {
                return Err(TrainError::VersionMismatch {
                    expected: version,
                    got: d.version,
                });
            }
            match (&d.features, d.arm) {
                (Some(f), Some(arm)) => Ok(SurrogateSample {
                    features: f.clone(),
                    arm,
                    logp_old: d.log_prob,
                    advantage,
                }),
                _ => Err(TrainError::Policy(PolicyError::UnknownAction(
                    "decision without arm or features".into(),
                ))),
            }
        })
        .collect()
}

/// One update from a batch of rollout groups sampled at `params.version`.
/// Degenerate groups are skipped; each minibatch of trajectories takes one
/// ascent step on the mean per-decision clipped surrogate.
pub fn grpo_step(
    params: &PolicyParams,
    groups: &[RolloutGroup],
    config: &GrpoConfig,
    seed: u64,
) -> Result<(PolicyParams, GrpoStepStats), TrainError> {
    config.validate()?;
    let version = params.version;
    let mut pool: Vec<Vec<SurrogateSample>> = Vec::new();
    let mut informative = 0;
    for g in groups {
        let adv = g.advantages();
        if adv.degenerate {
            continue;
        }
        informative += 1;
        for (t, a) in g.trajectories.iter().zip(&adv.advantages) {
            pool.push(samples_of(t, *a, version)?);
        }
    }
    if informative == 0 {
        return Err(TrainError::AllGroupsDegenerate(1));
    }
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.shuffle(&mut rng_for(seed, &[0x9290, version]));
    let mut params = params.clone();
    let mut stats = GrpoStepStats {
        informative_groups: informative,
        samples: pool.iter().map(Vec::len).sum(),
        minibatches: 0,
        surrogate: 0.0,
    };
    for chunk in order.chunks(config.minibatch) {
        let batch: Vec<SurrogateSample> = chunk.iter().flat_map(|&i| pool[i].iter().cloned()).collect();
        let (obj, grad) = surrogate_objective_and_grad(&params, &batch, config)?;
        if stats.minibatches == 0 {
            stats.surrogate = obj;
        }
        params.apply(&grad, config.learning_rate);
        stats.minibatches += 1;
    }
    Ok((params, stats))
}

/// Deterministic class-balanced scene source for training.
#[derive(Debug, Clone)]
pub struct SceneStream {
    pub spec: SceneSpec,
    pub stream: u64,
    pub next: u64,
}

impl SceneStream {
    pub fn new(spec: SceneSpec, stream: u64) -> Self {
        Self { spec, stream, next: 0 }
    }

    fn take(&mut self, n: usize) -> Vec<u64> {
        let ids = (self.next..self.next + n as u64).collect();
        self.next += n as u64;
        ids
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub mean_reward: f64,
    pub all_direct_ratio: f64,
    pub all_focus_ratio: f64,
    /// Fraction of rollouts that answered without focusing.
    pub direct_rollouts: f64,
    pub mean_focus_turns: f64,
    /// Visual tokens over every rollout sampled in this step.
    pub visual_tokens: usize,
    pub sampled_groups: usize,
    pub informative_groups: usize,
    pub surrogate: f64,
    pub version: u64,
}

/// G rollouts of the current policy on stream entry `index`.
pub fn sample_group(
    policy: &SoftmaxPolicy,
    spec: &SceneSpec,
    stream: u64,
    index: u64,
    env_config: &EpisodeConfig,
    group_size: usize,
    seed: u64,
) -> Result<RolloutGroup, TrainError> {
    let scene = manifest_entry(spec, stream, index).regenerate()?;
    let env = Environment::new(scene.image.clone(), env_config.clone())?;
    let trajectories = (0..group_size)
        .map(|g| {
            env.rollout(
                policy,
                Sampling::Sample,
                &scene.query,
                &scene.gold,
                derive_seed(seed, &[g as u64]),
            )
        })
        .collect();
    Ok(RolloutGroup { trajectories })
}

/// GRPO training loop. Logs one [`StepLog`] per step; deterministic in
/// `seed` and the stream position.
pub fn rl_train(
    params: &PolicyParams,
    perception: Arc<Perception>,
    stream: &mut SceneStream,
    env_config: &EpisodeConfig,
    config: &GrpoConfig,
    seed: u64,
) -> Result<(PolicyParams, Vec<StepLog>), TrainError> {
    config.validate()?;
    env_config.validate()?;
    let mut params = params.clone();
    let mut log = Vec::with_capacity(config.max_steps);
    let mut degenerate_streak = 0;
    for step in 0..config.max_steps {
        let policy = SoftmaxPolicy::new(Arc::new(params.clone()), perception.clone())?;
        let mut batch: Vec<RolloutGroup> = Vec::new();
        let (mut sampled, mut direct, mut focus, mut tokens) = (0usize, 0usize, 0usize, 0usize);
        let mut reward_sum = 0.0;
        let (mut direct_rollouts, mut focus_turns) = (0usize, 0usize);
        let rounds = if config.dynamic_sampling { 1 + config.max_resample_rounds } else { 1 };
        for round in 0..rounds {
            let need = config.batch_queries - batch.len();
            if need == 0 {
                break;
            }
            let ids = stream.take(need);
            let groups: Vec<RolloutGroup> = ids
                .par_iter()
                .map(|&i| {
                    sample_group(
                        &policy,
                        &stream.spec,
                        stream.stream,
                        i,
                        env_config,
                        config.group_size,
                        derive_seed(seed, &[step as u64, round as u64, i]),
                    )
                })
                .collect::<Result<_, _>>()?;
            for g in groups {
                sampled += 1;
                direct += g.all_direct() as usize;
                focus += g.all_focus() as usize;
                tokens += g.visual_tokens();
                reward_sum += g.rewards().iter().sum::<f64>();
                for t in &g.trajectories {
                    direct_rollouts += (t.focus_turns() == 0) as usize;
                    focus_turns += t.focus_turns();
                }
                if !config.dynamic_sampling || !g.advantages().degenerate {
                    batch.push(g);
                }
            }
        }
        let rollouts = (sampled * config.group_size) as f64;
        let mut entry = StepLog {
            step,
            mean_reward: reward_sum / rollouts,
            direct_rollouts: direct_rollouts as f64 / rollouts,
            mean_focus_turns: focus_turns as f64 / rollouts,
            all_direct_ratio: direct as f64 / sampled as f64,
            all_focus_ratio: focus as f64 / sampled as f64,
            visual_tokens: tokens,
            sampled_groups: sampled,
            informative_groups: 0,
            surrogate: 0.0,
            version: params.version,
        };
        match grpo_step(&params, &batch, config, derive_seed(seed, &[step as u64])) {
            Ok((next, stats)) => {
                degenerate_streak = 0;
                entry.informative_groups = stats.informative_groups;
                entry.surrogate = stats.surrogate;
                params = next;
            }
            Err(TrainError::AllGroupsDegenerate(_)) => {
                degenerate_streak += 1;
                if degenerate_streak > config.max_degenerate_steps {
                    return Err(TrainError::AllGroupsDegenerate(degenerate_streak));
                }
            }
            Err(e) => return Err(e),
        }
        log.push(entry);
    }
    Ok((params, log))
}
