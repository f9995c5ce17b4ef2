//! Budgeted multi-turn rollout environment.
//!
//! An episode starts from a global glimpse of the original image (downsampled
//! to the active budget when constrained). Each focus action names up to three
//! boxes in the glimpse's pixel frame; the environment maps them back to the
//! original frame, crops the original image and applies the same budget to
//! each crop independently. Crops are never taken from earlier views.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::budget::{self, BBox, BudgetConfig, ImageBuffer};
use crate::policy::{Decision, Policy, Sampling};
use crate::protocol::{self, MAX_BBOXES_PER_CALL};
use crate::scenes::Scene;

/// Text tokens charged per turn on top of visual tokens.
pub const TEXT_TOKENS_PER_TURN: usize = 64;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EnvError {
    #[error("invalid episode config: {0}")]
    InvalidConfig(String),
    #[error("episode already finished with status {0:?}")]
    NotRunning(Status),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OnProtocolError {
    /// End the episode with zero reward.
    #[default]
    Terminate,
    /// Consume the turn without producing an observation.
    SkipTurn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeConfig {
    pub max_turns: usize,
    pub context_limit: usize,
    pub budget: BudgetConfig,
    pub constrained: bool,
    /// Fixed per-view budget replacing the resolution-conditioned one.
    pub fixed_budget_override: Option<usize>,
    #[serde(default)]
    pub on_protocol_error: OnProtocolError,
}

impl Default for EpisodeConfig {
    /// Evaluation settings: 3 turns, 30k context, fixed budget of 256.
    fn default() -> Self {
        Self {
            max_turns: 3,
            context_limit: 30_000,
            budget: BudgetConfig::default(),
            constrained: true,
            fixed_budget_override: Some(256),
            on_protocol_error: OnProtocolError::Terminate,
        }
    }
}

impl EpisodeConfig {
    /// Training settings: 2 turns, resolution-conditioned budget.
    pub fn training() -> Self {
        Self {
            max_turns: 2,
            fixed_budget_override: None,
            ..Self::default()
        }
    }

    pub fn unconstrained(mut self) -> Self {
        self.constrained = false;
        self
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        self.budget
            .validate()
            .map_err(|e| EnvError::InvalidConfig(e.to_string()))?;
        if self.max_turns == 0 {
            return Err(EnvError::InvalidConfig("max_turns must be >= 1".into()));
        }
        if self.context_limit < self.budget.b_max {
            return Err(EnvError::InvalidConfig(format!(
                "context_limit {} below b_max {}",
                self.context_limit, self.budget.b_max
            )));
        }
        if self.fixed_budget_override == Some(0) {
            return Err(EnvError::InvalidConfig("budget override must be >= 1".into()));
        }
        Ok(())
    }

    /// Per-view budget for an original image, `None` when unconstrained.
    pub fn active_budget(&self, original: &ImageBuffer) -> Option<usize> {
        self.constrained.then(|| {
            self.fixed_budget_override
                .unwrap_or_else(|| budget::compute_budget(original, &self.budget))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Action {
    /// Boxes in the pixel frame of the first (overview) observation.
    Focus(Vec<BBox>),
    Answer(String),
}

impl Action {
    pub fn is_focus(&self) -> bool {
        matches!(self, Action::Focus(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Running,
    Answered,
    TruncatedTurns,
    TruncatedContext,
    ProtocolError,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub view: Arc<ImageBuffer>,
    /// Region of the original image this view was rendered from.
    pub source_bbox: BBox,
    pub tokens: usize,
    /// Number of actions taken before this observation arrived.
    pub turn: usize,
}

#[derive(Debug, Clone)]
pub struct EpisodeState {
    pub query: String,
    pub original: Arc<ImageBuffer>,
    pub config: EpisodeConfig,
    pub active_budget: Option<usize>,
    pub observations: Vec<Observation>,
    pub actions: Vec<Action>,
    pub turn: usize,
    pub tokens_used: usize,
    pub status: Status,
    pub last_error: Option<String>,
}

impl EpisodeState {
    pub fn overview(&self) -> &Observation {
        &self.observations[0]
    }

    pub fn visual_tokens(&self) -> usize {
        self.observations.iter().map(|o| o.tokens).sum()
    }

    pub fn focus_turns(&self) -> usize {
        self.actions.iter().filter(|a| a.is_focus()).count()
    }

    /// Map a box from the overview frame to the original frame, rounding
    /// outward so the original region covers the requested one.
    pub fn to_original_frame(&self, b: &BBox) -> BBox {
        let ov = &self.overview().view;
        let (ow, oh) = (self.original.width() as i64, self.original.height() as i64);
        let (vw, vh) = (ov.width() as i64, ov.height() as i64);
        let floor = |v: i64, num: i64, den: i64| (v * num).div_euclid(den);
        let ceil = |v: i64, num: i64, den: i64| -((-v * num).div_euclid(den));
        BBox::new(
            floor(b.x1, ow, vw),
            floor(b.y1, oh, vh),
            ceil(b.x2, ow, vw),
            ceil(b.y2, oh, vh),
        )
    }
}

type ViewKey = (BBox, Option<usize>);

/// One scene image under one config, with memoized budgeted views so that
/// rollouts sharing a scene do not redo identical crops.
pub struct Environment {
    original: Arc<ImageBuffer>,
    config: EpisodeConfig,
    active_budget: Option<usize>,
    cache: Mutex<HashMap<ViewKey, Arc<ImageBuffer>>>,
}

impl Environment {
    pub fn new(original: Arc<ImageBuffer>, config: EpisodeConfig) -> Result<Self, EnvError> {
        config.validate()?;
        let active_budget = config.active_budget(&original);
        Ok(Self {
            original,
            config,
            active_budget,
            cache: Mutex::new(HashMap::new()),
        })
    }

    pub fn config(&self) -> &EpisodeConfig {
        &self.config
    }

    pub fn active_budget(&self) -> Option<usize> {
        self.active_budget
    }

    fn view(&self, region: &BBox) -> Result<Arc<ImageBuffer>, budget::BudgetError> {
        if self.active_budget.is_none() && *region == self.original.bounds() {
            return Ok(self.original.clone());
        }
        let key = (*region, self.active_budget);
        if let Some(v) = self.cache.lock().unwrap().get(&key) {
            return Ok(v.clone());
        }
        let v = Arc::new(render_view(
            &self.original,
            region,
            self.active_budget,
            self.config.budget.patch_size,
        )?);
        self.cache.lock().unwrap().insert(key, v.clone());
        Ok(v)
    }

    pub fn reset(&self, query: &str) -> EpisodeState {
        let full = self.original.bounds();
        let v0 = self.view(&full).expect("full-image view is never empty");
        let tokens = v0.tokens(self.config.budget.patch_size);
        EpisodeState {
            query: query.to_string(),
            original: self.original.clone(),
            config: self.config.clone(),
            active_budget: self.active_budget,
            observations: vec![Observation {
                view: v0,
                source_bbox: full,
                tokens,
                turn: 0,
            }],
            actions: Vec::new(),
            turn: 0,
            tokens_used: tokens + TEXT_TOKENS_PER_TURN,
            status: Status::Running,
            last_error: None,
        }
    }

    pub fn step(&self, state: EpisodeState, action: Action) -> Result<EpisodeState, EnvError> {
        step_impl(state, action, |region| self.view(region))
    }

    /// Roll out `policy` from a fresh reset; deterministic in `seed`.
    pub fn rollout(
        &self,
        policy: &dyn Policy,
        sampling: Sampling,
        query: &str,
        gold: &str,
        seed: u64,
    ) -> Trajectory {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut state = self.reset(query);
        let mut decisions = Vec::new();
        while state.status == Status::Running {
            let decision = policy.act(&state, sampling, &mut rng);
            let action = decision.action.clone();
            decisions.push(decision);
            state = self
                .step(state, action)
                .expect("running episode accepts a step");
        }
        Trajectory::finish(state, decisions, gold)
    }
}

/// `D(Crop(X, region), B)`, or the raw crop when unconstrained.
pub fn render_view(
    original: &ImageBuffer,
    region: &BBox,
    budget: Option<usize>,
    patch_size: usize,
) -> Result<ImageBuffer, budget::BudgetError> {
    if region.clamp_to(original.width(), original.height()) == original.bounds() {
        return Ok(match budget {
            Some(b) => budget::downsample(original, b, patch_size),
            None => original.clone(),
        });
    }
    let cropped = budget::crop(original, region)?;
    Ok(match budget {
        Some(b) => budget::downsample(&cropped, b, patch_size),
        None => cropped,
    })
}

/// Fresh episode on `scene_image`.
pub fn reset(scene_image: Arc<ImageBuffer>, query: &str, config: &EpisodeConfig) -> Result<EpisodeState, EnvError> {
    Ok(Environment::new(scene_image, config.clone())?.reset(query))
}

/// Advance an episode by one action (no view memoization).
pub fn step(state: EpisodeState, action: Action) -> Result<EpisodeState, EnvError> {
    let original = state.original.clone();
    let budget = state.active_budget;
    let patch = state.config.budget.patch_size;
    step_impl(state, action, |region| {
        render_view(&original, region, budget, patch).map(Arc::new)
    })
}

fn step_impl(
    mut state: EpisodeState,
    action: Action,
    mut view_of: impl FnMut(&BBox) -> Result<Arc<ImageBuffer>, budget::BudgetError>,
) -> Result<EpisodeState, EnvError> {
    if state.status != Status::Running {
        return Err(EnvError::NotRunning(state.status));
    }
    state.turn += 1;
    state.tokens_used += TEXT_TOKENS_PER_TURN;
    match &action {
        Action::Answer(_) => {
            state.actions.push(action);
            state.status = Status::Answered;
            return Ok(state);
        }
        Action::Focus(bboxes) => {
            let mut fresh = Vec::with_capacity(bboxes.len());
            let mut violation = None;
            if bboxes.is_empty() || bboxes.len() > MAX_BBOXES_PER_CALL {
                violation = Some(protocol::ProtocolError::BBoxCountOutOfRange(bboxes.len()).to_string());
            } else {
                for b in bboxes {
                    let region = state
                        .to_original_frame(b)
                        .clamp_to(state.original.width(), state.original.height());
                    match view_of(&region) {
                        Ok(view) => {
                            let tokens = view.tokens(state.config.budget.patch_size);
                            fresh.push(Observation {
                                view,
                                source_bbox: region,
                                tokens,
                                turn: state.turn,
                            });
                        }
                        Err(e) => {
                            violation = Some(e.to_string());
                            break;
                        }
                    }
                }
            }
            state.actions.push(action);
            if let Some(msg) = violation {
                state.last_error = Some(msg);
                if state.config.on_protocol_error == OnProtocolError::Terminate {
                    state.status = Status::ProtocolError;
                    return Ok(state);
                }
            } else {
                for o in fresh {
                    state.tokens_used += o.tokens;
                    state.observations.push(o);
                }
            }
        }
    }
    if state.tokens_used > state.config.context_limit {
        state.status = Status::TruncatedContext;
    } else if state.turn >= state.config.max_turns {
        state.status = Status::TruncatedTurns;
    }
    Ok(state)
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub episode: EpisodeState,
    pub answer: Option<String>,
    pub reward: u8,
    pub decisions: Vec<Decision>,
}

impl Trajectory {
    pub fn finish(episode: EpisodeState, decisions: Vec<Decision>, gold: &str) -> Self {
        let answer = match (episode.status, episode.actions.last()) {
            (Status::Answered, Some(Action::Answer(a))) => Some(a.clone()),
            _ => None,
        };
        let mut t = Self {
            episode,
            answer,
            reward: 0,
            decisions,
        };
        t.reward = compute_reward(&t, gold);
        t
    }

    pub fn focus_turns(&self) -> usize {
        self.episode.focus_turns()
    }

    pub fn visual_tokens(&self) -> usize {
        self.episode.visual_tokens()
    }

    /// Focus boxes per turn, in the original image frame.
    pub fn focus_regions(&self) -> Vec<Vec<BBox>> {
        let mut by_turn: Vec<Vec<BBox>> = Vec::new();
        for (i, a) in self.episode.actions.iter().enumerate() {
            if a.is_focus() {
                let turn = i + 1;
                by_turn.push(
                    self.episode
                        .observations
                        .iter()
                        .filter(|o| o.turn == turn)
                        .map(|o| o.source_bbox)
                        .collect(),
                );
            }
        }
        by_turn
    }
}

pub fn normalize_answer(s: &str) -> String {
    s.trim().to_lowercase()
}

/// Sparse exact-match reward after case-folding and trimming.
pub fn compute_reward(trajectory: &Trajectory, gold: &str) -> u8 {
    match (&trajectory.answer, trajectory.episode.status) {
        (Some(a), Status::Answered) if normalize_answer(a) == normalize_answer(gold) => 1,
        _ => 0,
    }
}

/// Run one episode of `policy` on `scene`.
pub fn run_episode(
    policy: &dyn Policy,
    sampling: Sampling,
    scene: &Scene,
    config: &EpisodeConfig,
    seed: u64,
) -> Result<Trajectory, EnvError> {
    let env = Environment::new(scene.image.clone(), config.clone())?;
    Ok(env.rollout(policy, sampling, &scene.query, &scene.gold, seed))
}
