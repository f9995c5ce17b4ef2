//! C ABI over the glimpse environment, policies and evaluator.
//!
//! Every function returns a [`GlimpseStatus`]; on failure the message is
//! available from [`glimpse_last_error`] on the same thread. Handles are
//! opaque and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::sync::Arc;

use glimpse::budget::{budget_for_dims, BBox, BudgetConfig};
use glimpse::env::{normalize_answer, Action, EpisodeConfig, EpisodeState, Environment, Status};
use glimpse::eval::{evaluate, EvalConfig};
use glimpse::policy::{OraclePolicy, Perception, Policy, PolicyParams, SoftmaxPolicy};
use glimpse::scenes::{generate_scene, scene_manifest, Scene, SceneSpec};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GlimpseStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    SceneError = 3,
    EnvError = 4,
    PolicyError = 5,
    EvalError = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GlimpseEpisodeStatus {
    Running = 0,
    Answered = 1,
    TruncatedTurns = 2,
    TruncatedContext = 3,
    ProtocolError = 4,
}

impl From<Status> for GlimpseEpisodeStatus {
    fn from(s: Status) -> Self {
        match s {
            Status::Running => Self::Running,
            Status::Answered => Self::Answered,
            Status::TruncatedTurns => Self::TruncatedTurns,
            Status::TruncatedContext => Self::TruncatedContext,
            Status::ProtocolError => Self::ProtocolError,
        }
    }
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct GlimpseEpisodeInfo {
    pub turn: u32,
    pub status: i32,
    pub observations: u32,
    pub tokens_used: u64,
    pub visual_tokens: u64,
    /// Active per-view budget, 0 when unconstrained.
    pub budget: u32,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct GlimpseMetrics {
    pub accuracy: f64,
    pub all_direct_ratio: f64,
    pub all_focus_ratio: f64,
    pub mean_turns: f64,
    pub visual_tokens_total: u64,
}

pub struct GlimpseScene {
    scene: Scene,
    gold: CString,
    query: CString,
}

pub struct GlimpseEpisode {
    env: Environment,
    state: EpisodeState,
    gold: String,
    reward: u8,
}

pub struct GlimpsePolicy {
    policy: Box<dyn Policy>,
    spec: SceneSpec,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl ToString) {
    let c = CString::new(msg.to_string().replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn fail(status: GlimpseStatus, msg: impl ToString) -> GlimpseStatus {
    set_error(msg);
    status
}

fn guard(f: impl FnOnce() -> GlimpseStatus) -> GlimpseStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => fail(GlimpseStatus::Panic, "internal panic"),
    }
}

fn spec_with_classes(num_classes: u32) -> SceneSpec {
    let mut spec = SceneSpec::default();
    if num_classes > 0 {
        spec.num_classes = num_classes as usize;
    }
    spec
}

/// Message of the last failure on this thread. Valid until the next failing
/// call on the same thread.
#[no_mangle]
pub extern "C" fn glimpse_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Per-view token budget for a `width x height` image under the default law.
///
/// # Safety
/// `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn glimpse_budget_for_dims(width: u32, height: u32, out: *mut u32) -> GlimpseStatus {
    guard(|| {
        if out.is_null() {
            return fail(GlimpseStatus::NullPointer, "out is null");
        }
        if width == 0 || height == 0 {
            return fail(GlimpseStatus::InvalidArgument, "image dimensions must be positive");
        }
        *out = budget_for_dims(width as usize, height as usize, &BudgetConfig::default()) as u32;
        GlimpseStatus::Ok
    })
}

/// Generate the default scene for `seed`. `num_classes` of 0 keeps the
/// default class count.
///
/// # Safety
/// `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn glimpse_scene_new(seed: u64, num_classes: u32, out: *mut *mut GlimpseScene) -> GlimpseStatus {
    guard(|| {
        if out.is_null() {
            return fail(GlimpseStatus::NullPointer, "out is null");
        }
        *out = ptr::null_mut();
        match generate_scene(&spec_with_classes(num_classes), seed) {
            Ok(scene) => {
                let gold = CString::new(scene.gold.clone()).unwrap_or_default();
                let query = CString::new(scene.query.clone()).unwrap_or_default();
                *out = Box::into_raw(Box::new(GlimpseScene { scene, gold, query }));
                GlimpseStatus::Ok
            }
            Err(e) => fail(GlimpseStatus::SceneError, e),
        }
    })
}

/// # Safety
/// `scene` must come from [`glimpse_scene_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn glimpse_scene_free(scene: *mut GlimpseScene) {
    if !scene.is_null() {
        drop(Box::from_raw(scene));
    }
}

/// Gold answer; the pointer lives as long as the scene.
///
/// # Safety
/// `scene` must be a live scene handle or null.
#[no_mangle]
pub unsafe extern "C" fn glimpse_scene_gold(scene: *const GlimpseScene) -> *const c_char {
    scene.as_ref().map_or(ptr::null(), |s| s.gold.as_ptr())
}

/// Query text; the pointer lives as long as the scene.
///
/// # Safety
/// `scene` must be a live scene handle or null.
#[no_mangle]
pub unsafe extern "C" fn glimpse_scene_query(scene: *const GlimpseScene) -> *const c_char {
    scene.as_ref().map_or(ptr::null(), |s| s.query.as_ptr())
}

/// Start an episode on `scene`. `budget_override` of 0 uses the
/// resolution-conditioned budget.
///
/// # Safety
/// `scene` must be a live scene handle and `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn glimpse_episode_new(
    scene: *const GlimpseScene,
    constrained: bool,
    budget_override: u32,
    max_turns: u32,
    out: *mut *mut GlimpseEpisode,
) -> GlimpseStatus {
    guard(|| {
        let (Some(scene), false) = (scene.as_ref(), out.is_null()) else {
            return fail(GlimpseStatus::NullPointer, "scene or out is null");
        };
        *out = ptr::null_mut();
        let config = EpisodeConfig {
            max_turns: max_turns as usize,
            constrained,
            fixed_budget_override: (budget_override > 0).then_some(budget_override as usize),
            ..EpisodeConfig::default()
        };
        let env = match Environment::new(scene.scene.image.clone(), config) {
            Ok(e) => e,
            Err(e) => return fail(GlimpseStatus::EnvError, e),
        };
        let state = env.reset(&scene.scene.query);
        *out = Box::into_raw(Box::new(GlimpseEpisode {
            env,
            state,
            gold: scene.scene.gold.clone(),
            reward: 0,
        }));
        GlimpseStatus::Ok
    })
}

/// # Safety
/// `episode` must come from [`glimpse_episode_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn glimpse_episode_free(episode: *mut GlimpseEpisode) {
    if !episode.is_null() {
        drop(Box::from_raw(episode));
    }
}

fn advance(ep: &mut GlimpseEpisode, action: Action) -> GlimpseStatus {
    match ep.env.step(ep.state.clone(), action) {
        Ok(next) => {
            ep.state = next;
            GlimpseStatus::Ok
        }
        Err(e) => fail(GlimpseStatus::EnvError, e),
    }
}

/// Request crops of `n_boxes` boxes given as `[x1, y1, x2, y2]` quadruples
/// in overview pixels.
///
/// # Safety
/// `episode` must be live and `boxes` must point to `4 * n_boxes` values.
#[no_mangle]
pub unsafe extern "C" fn glimpse_episode_focus(
    episode: *mut GlimpseEpisode,
    boxes: *const i64,
    n_boxes: usize,
) -> GlimpseStatus {
    guard(|| {
        let Some(ep) = episode.as_mut() else {
            return fail(GlimpseStatus::NullPointer, "episode is null");
        };
        if boxes.is_null() && n_boxes > 0 {
            return fail(GlimpseStatus::NullPointer, "boxes is null");
        }
        let flat = if n_boxes == 0 { &[][..] } else { std::slice::from_raw_parts(boxes, 4 * n_boxes) };
        let bboxes = flat.chunks_exact(4).map(|b| BBox::new(b[0], b[1], b[2], b[3])).collect();
        advance(ep, Action::Focus(bboxes))
    })
}

/// Submit the final answer; `reward` receives 1 when it matches the gold label.
///
/// # Safety
/// `episode` must be live, `answer` a NUL-terminated string and `reward`
/// valid for writes.
#[no_mangle]
pub unsafe extern "C" fn glimpse_episode_answer(
    episode: *mut GlimpseEpisode,
    answer: *const c_char,
    reward: *mut u8,
) -> GlimpseStatus {
    guard(|| {
        let (Some(ep), false, false) = (episode.as_mut(), answer.is_null(), reward.is_null()) else {
            return fail(GlimpseStatus::NullPointer, "null argument");
        };
        let Ok(text) = CStr::from_ptr(answer).to_str() else {
            return fail(GlimpseStatus::InvalidArgument, "answer is not UTF-8");
        };
        let status = advance(ep, Action::Answer(text.to_string()));
        if status == GlimpseStatus::Ok {
            ep.reward = u8::from(normalize_answer(text) == normalize_answer(&ep.gold));
            *reward = ep.reward;
        }
        status
    })
}

/// # Safety
/// `episode` must be live and `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn glimpse_episode_info(episode: *const GlimpseEpisode, out: *mut GlimpseEpisodeInfo) -> GlimpseStatus {
    guard(|| {
        let (Some(ep), false) = (episode.as_ref(), out.is_null()) else {
            return fail(GlimpseStatus::NullPointer, "null argument");
        };
        let s = &ep.state;
        *out = GlimpseEpisodeInfo {
            turn: s.turn as u32,
            status: GlimpseEpisodeStatus::from(s.status) as i32,
            observations: s.observations.len() as u32,
            tokens_used: s.tokens_used as u64,
            visual_tokens: s.visual_tokens() as u64,
            budget: s.active_budget.unwrap_or(0) as u32,
        };
        GlimpseStatus::Ok
    })
}

/// Borrow observation `index` as interleaved float samples. The pointer is
/// valid while the episode lives.
///
/// # Safety
/// `episode` must be live; every out pointer must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn glimpse_episode_observation(
    episode: *const GlimpseEpisode,
    index: u32,
    width: *mut u32,
    height: *mut u32,
    channels: *mut u32,
    data: *mut *const f32,
) -> GlimpseStatus {
    guard(|| {
        let Some(ep) = episode.as_ref() else {
            return fail(GlimpseStatus::NullPointer, "episode is null");
        };
        if width.is_null() || height.is_null() || channels.is_null() || data.is_null() {
            return fail(GlimpseStatus::NullPointer, "null out pointer");
        }
        let Some(obs) = ep.state.observations.get(index as usize) else {
            return fail(GlimpseStatus::InvalidArgument, format!("no observation {index}"));
        };
        *width = obs.view.width() as u32;
        *height = obs.view.height() as u32;
        *channels = obs.view.channels() as u32;
        *data = obs.view.data().as_ptr();
        GlimpseStatus::Ok
    })
}

/// The scripted oracle policy over scenes with `num_classes` classes
/// (0 keeps the default).
///
/// # Safety
/// `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn glimpse_policy_oracle(num_classes: u32, out: *mut *mut GlimpsePolicy) -> GlimpseStatus {
    guard(|| {
        if out.is_null() {
            return fail(GlimpseStatus::NullPointer, "out is null");
        }
        *out = ptr::null_mut();
        let spec = spec_with_classes(num_classes);
        match Perception::new(&spec) {
            Ok(p) => {
                let policy = Box::new(OraclePolicy::new(Arc::new(p)));
                *out = Box::into_raw(Box::new(GlimpsePolicy { policy, spec }));
                GlimpseStatus::Ok
            }
            Err(e) => fail(GlimpseStatus::SceneError, e),
        }
    })
}

/// Load a linear policy checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn glimpse_policy_load(
    path: *const c_char,
    num_classes: u32,
    out: *mut *mut GlimpsePolicy,
) -> GlimpseStatus {
    guard(|| {
        if path.is_null() || out.is_null() {
            return fail(GlimpseStatus::NullPointer, "null argument");
        }
        *out = ptr::null_mut();
        let Ok(path) = CStr::from_ptr(path).to_str() else {
            return fail(GlimpseStatus::InvalidArgument, "path is not UTF-8");
        };
        let spec = spec_with_classes(num_classes);
        let perception = match Perception::new(&spec) {
            Ok(p) => Arc::new(p),
            Err(e) => return fail(GlimpseStatus::SceneError, e),
        };
        let built = PolicyParams::load(Path::new(path)).and_then(|p| SoftmaxPolicy::new(Arc::new(p), perception));
        match built {
            Ok(policy) => {
                *out = Box::into_raw(Box::new(GlimpsePolicy {
                    policy: Box::new(policy),
                    spec,
                }));
                GlimpseStatus::Ok
            }
            Err(e) => fail(GlimpseStatus::PolicyError, e),
        }
    })
}

/// # Safety
/// `policy` must come from a `glimpse_policy_*` constructor and not be used
/// afterwards.
#[no_mangle]
pub unsafe extern "C" fn glimpse_policy_free(policy: *mut GlimpsePolicy) {
    if !policy.is_null() {
        drop(Box::from_raw(policy));
    }
}

/// Greedy evaluation on the first `n_scenes` scenes of manifest `stream`
/// with the default evaluation settings. `budget` of 0 keeps the default
/// fixed budget.
///
/// # Safety
/// `policy` must be live and `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn glimpse_evaluate(
    policy: *const GlimpsePolicy,
    stream: u64,
    n_scenes: u32,
    constrained: bool,
    budget: u32,
    out: *mut GlimpseMetrics,
) -> GlimpseStatus {
    guard(|| {
        let (Some(p), false) = (policy.as_ref(), out.is_null()) else {
            return fail(GlimpseStatus::NullPointer, "null argument");
        };
        let scenes = match scene_manifest(&p.spec, stream, n_scenes as usize) {
            Ok(s) => s,
            Err(e) => return fail(GlimpseStatus::SceneError, e),
        };
        let mut cfg = EvalConfig {
            constrained,
            ..EvalConfig::default()
        };
        if budget > 0 {
            cfg.budget_override = Some(budget as usize);
        }
        match evaluate(p.policy.as_ref(), &scenes, &cfg) {
            Ok(r) => {
                *out = GlimpseMetrics {
                    accuracy: r.accuracy,
                    all_direct_ratio: r.all_direct_ratio,
                    all_focus_ratio: r.all_focus_ratio,
                    mean_turns: r.mean_turns,
                    visual_tokens_total: r.visual_tokens_total as u64,
                };
                GlimpseStatus::Ok
            }
            Err(e) => fail(GlimpseStatus::EvalError, e),
        }
    })
}
