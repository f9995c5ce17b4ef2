//! Softmax-linear policy over a fixed arm set, its featurizer, and scripted
//! reference policies.
//!
//! Arms `0..K` answer with class `k`; arms `K..K+G²` focus on one overview
//! grid cell. Features (dimension `2·G² + K + 2`):
//!
//! | block            | size | meaning                                          |
//! |------------------|------|--------------------------------------------------|
//! | saliency         | G²   | overview cell mean luminance, unit L2 norm       |
//! | marker           | G²   | softmax over cells of the overview tint          |
//! | margin           | 1    | best decode margin over the focused views        |
//! | turn             | 1    | number of actions taken                          |
//! | decoded class    | K    | one-hot of the best decoded class over all views |

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::{Arc, Mutex, Weak};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::budget::{BBox, ImageBuffer};
use crate::env::{Action, EpisodeState, Observation};
use crate::scenes::{class_index, class_label, decode_view, Decoding, SceneLayout, SceneSpec, ViewFrame};

/// Softmax temperature applied to per-cell tint.
const MARKER_TEMPERATURE: f64 = 0.03;
const PERCEPT_CACHE_LIMIT: usize = 512;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PolicyError {
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: (usize, usize), got: (usize, usize) },
    #[error("action not in arm set: {0}")]
    UnknownAction(String),
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArmLayout {
    pub num_classes: usize,
    pub grid: usize,
}

impl ArmLayout {
    pub fn new(num_classes: usize, grid: usize) -> Self {
        Self { num_classes, grid }
    }

    pub fn from_spec(spec: &SceneSpec) -> Self {
        Self::new(spec.num_classes, spec.grid)
    }

    pub fn num_cells(&self) -> usize {
        self.grid * self.grid
    }

    pub fn num_arms(&self) -> usize {
        self.num_classes + self.num_cells()
    }

    pub fn feature_dim(&self) -> usize {
        2 * self.num_cells() + self.num_classes + 2
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.num_arms(), self.feature_dim())
    }

    pub fn is_answer(&self, arm: usize) -> bool {
        arm < self.num_classes
    }

    pub fn focus_arm(&self, cell: usize) -> usize {
        self.num_classes + cell
    }

    pub fn answer_arms(&self) -> std::ops::Range<usize> {
        0..self.num_classes
    }

    pub fn focus_arms(&self) -> std::ops::Range<usize> {
        self.num_classes..self.num_arms()
    }

    // feature block offsets
    pub fn saliency_offset(&self) -> usize {
        0
    }
    pub fn marker_offset(&self) -> usize {
        self.num_cells()
    }
    pub fn margin_index(&self) -> usize {
        2 * self.num_cells()
    }
    pub fn turn_index(&self) -> usize {
        2 * self.num_cells() + 1
    }
    pub fn class_offset(&self) -> usize {
        2 * self.num_cells() + 2
    }

    /// Box of grid cell `cell` in the overview frame of `state`.
    pub fn cell_box_in_overview(&self, cell: usize, state: &EpisodeState) -> BBox {
        let ov = &state.overview().view;
        let (ow, oh) = (state.original.width() as i64, state.original.height() as i64);
        let (vw, vh) = (ov.width() as i64, ov.height() as i64);
        let (r, c) = ((cell / self.grid) as i64, (cell % self.grid) as i64);
        let g = self.grid as i64;
        // cell edges in the original frame, then nearest pixel in the overview
        let edge = |i: i64, full: i64, view: i64| {
            let orig = i * full / g;
            (2 * orig * view + full) / (2 * full)
        };
        BBox::new(edge(c, ow, vw), edge(r, oh, vh), edge(c + 1, ow, vw), edge(r + 1, oh, vh))
    }

    pub fn action_of(&self, arm: usize, state: &EpisodeState) -> Action {
        if self.is_answer(arm) {
            Action::Answer(class_label(arm))
        } else {
            Action::Focus(vec![self.cell_box_in_overview(arm - self.num_classes, state)])
        }
    }

    /// Arm of an action taken in `state`. Focus boxes snap to the cell with
    /// the highest IoU, which must exceed one half.
    pub fn arm_of(&self, action: &Action, state: &EpisodeState) -> Result<usize, PolicyError> {
        match action {
            Action::Answer(label) => class_index(&crate::env::normalize_answer(label), self.num_classes)
                .ok_or_else(|| PolicyError::UnknownAction(format!("answer {label:?}"))),
            Action::Focus(boxes) if boxes.len() == 1 => {
                let (best, iou) = (0..self.num_cells())
                    .map(|c| (c, self.cell_box_in_overview(c, state).iou(&boxes[0])))
                    .fold((0, f64::MIN), |acc, x| if x.1 > acc.1 { x } else { acc });
                if iou > 0.5 {
                    Ok(self.focus_arm(best))
                } else {
                    Err(PolicyError::UnknownAction(format!("focus {}", boxes[0])))
                }
            }
            Action::Focus(boxes) => Err(PolicyError::UnknownAction(format!(
                "focus with {} boxes",
                boxes.len()
            ))),
        }
    }
}

/// Per-view perception: cell statistics and the decoded glyph, if any.
#[derive(Debug, Clone)]
struct Percept {
    saliency: Vec<f64>,
    tint: Vec<f64>,
    decoding: Option<Decoding>,
}

type PerceptKey = (usize, BBox);

/// Featurizer bound to a public scene layout. Reads only observations.
pub struct Perception {
    layout: SceneLayout,
    arms: ArmLayout,
    // a live Weak keeps the allocation (not the pixels) reserved, so a cached
    // address cannot be reused by another view
    cache: Mutex<HashMap<PerceptKey, (Weak<ImageBuffer>, Arc<Percept>)>>,
}

impl std::fmt::Debug for Perception {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Perception").field("arms", &self.arms).finish()
    }
}

impl Perception {
    pub fn new(spec: &SceneSpec) -> Result<Self, crate::scenes::SceneError> {
        Ok(Self {
            layout: SceneLayout::new(spec)?,
            arms: ArmLayout::from_spec(spec),
            cache: Mutex::new(HashMap::new()),
        })
    }

    pub fn arms(&self) -> &ArmLayout {
        &self.arms
    }

    pub fn layout(&self) -> &SceneLayout {
        &self.layout
    }

    fn percept(&self, obs: &Observation) -> Arc<Percept> {
        let key = (Arc::as_ptr(&obs.view) as usize, obs.source_bbox);
        if let Some((_, p)) = self.cache.lock().unwrap().get(&key) {
            return p.clone();
        }
        let p = Arc::new(self.compute_percept(&obs.view, &obs.source_bbox));
        let mut cache = self.cache.lock().unwrap();
        if cache.len() >= PERCEPT_CACHE_LIMIT {
            cache.retain(|_, (w, _)| w.strong_count() > 0);
            if cache.len() >= PERCEPT_CACHE_LIMIT {
                cache.clear();
            }
        }
        cache.insert(key, (Arc::downgrade(&obs.view), p.clone()));
        p
    }

    fn compute_percept(&self, view: &ImageBuffer, source: &BBox) -> Percept {
        let n = self.layout.num_cells();
        let frame = ViewFrame::new(view, source);
        let mut saliency = vec![0.0; n];
        let mut tint = vec![0.0; n];
        for c in 0..n {
            if let Some(s) = frame.stats(view, &self.layout.cell_bbox(c)) {
                saliency[c] = s.mean_luma;
                tint[c] = s.mean_tint;
            }
        }
        let norm = saliency.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            saliency.iter_mut().for_each(|v| *v /= norm);
        }
        Percept {
            saliency,
            tint,
            decoding: decode_view(&self.layout, view, source),
        }
    }

    /// Best decoding over every view in the episode.
    pub fn best_decoding(&self, state: &EpisodeState) -> Option<Decoding> {
        state
            .observations
            .iter()
            .filter_map(|o| self.percept(o).decoding)
            .fold(None, |best: Option<Decoding>, d| match best {
                Some(b) if b.margin >= d.margin => Some(b),
                _ => Some(d),
            })
    }

    /// Marker likelihood per cell from the overview.
    pub fn marker_likelihood(&self, state: &EpisodeState) -> Vec<f64> {
        let p = self.percept(state.overview());
        softmax(&p.tint.iter().map(|t| t / MARKER_TEMPERATURE).collect::<Vec<_>>())
    }

    pub fn featurize(&self, state: &EpisodeState) -> Vec<f64> {
        let a = &self.arms;
        let mut f = vec![0.0; a.feature_dim()];
        let ov = self.percept(state.overview());
        let n = a.num_cells();
        f[a.saliency_offset()..a.saliency_offset() + n].copy_from_slice(&ov.saliency);
        let marker = self.marker_likelihood(state);
        f[a.marker_offset()..a.marker_offset() + n].copy_from_slice(&marker);
        if let Some(d) = self.best_decoding(state) {
            f[a.class_offset() + d.class] = 1.0;
        }
        f[a.margin_index()] = state.observations[1..]
            .iter()
            .filter_map(|o| self.percept(o).decoding)
            .map(|d| d.margin)
            .fold(0.0, f64::max);
        f[a.turn_index()] = state.turn as f64;
        f
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub rows: usize,
    pub cols: usize,
    /// Row-major `rows x cols`.
    pub weights: Vec<f64>,
    pub version: u64,
    pub seed: u64,
}

impl PolicyParams {
    pub fn zeros(arms: &ArmLayout) -> Self {
        let (rows, cols) = arms.shape();
        Self {
            rows,
            cols,
            weights: vec![0.0; rows * cols],
            version: 0,
            seed: 0,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.weights[k * self.cols..(k + 1) * self.cols]
    }

    pub fn check_shape(&self, shape: (usize, usize)) -> Result<(), PolicyError> {
        if self.shape() != shape || self.weights.len() != self.rows * self.cols {
            return Err(PolicyError::ShapeMismatch {
                expected: shape,
                got: self.shape(),
            });
        }
        Ok(())
    }

    pub fn logits(&self, features: &[f64]) -> Result<Vec<f64>, PolicyError> {
        if features.len() != self.cols {
            return Err(PolicyError::ShapeMismatch {
                expected: (self.rows, self.cols),
                got: (self.rows, features.len()),
            });
        }
        Ok((0..self.rows)
            .map(|k| self.row(k).iter().zip(features).map(|(w, f)| w * f).sum())
            .collect())
    }

    /// `self += scale * delta`, bumping the version.
    pub fn apply(&mut self, delta: &[f64], scale: f64) {
        for (w, d) in self.weights.iter_mut().zip(delta) {
            *w += scale * d;
        }
        self.version += 1;
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.is_finite())
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "glimpse-policy 1\nshape {} {}\nversion {}\nseed {}\n",
            self.rows, self.cols, self.version, self.seed
        );
        for k in 0..self.rows {
            let row: Vec<String> = self.row(k).iter().map(|w| format!("{w:?}")).collect();
            let _ = writeln!(s, "{}", row.join(" "));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, PolicyError> {
        let bad = |m: &str| PolicyError::Checkpoint(m.to_string());
        let mut lines = text.lines();
        if lines.next() != Some("glimpse-policy 1") {
            return Err(bad("missing magic line"));
        }
        let mut header = |key: &str| -> Result<Vec<u64>, PolicyError> {
            let line = lines.next().ok_or_else(|| bad("truncated header"))?;
            let mut parts = line.split_whitespace();
            if parts.next() != Some(key) {
                return Err(bad(&format!("expected {key}")));
            }
            parts
                .map(|p| p.parse::<u64>().map_err(|_| bad(&format!("bad {key} value"))))
                .collect()
        };
        let shape = header("shape")?;
        let version = header("version")?;
        let seed = header("seed")?;
        if shape.len() != 2 || version.len() != 1 || seed.len() != 1 {
            return Err(bad("malformed header"));
        }
        let (rows, cols) = (shape[0] as usize, shape[1] as usize);
        let mut weights = Vec::with_capacity(rows * cols);
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let row: Result<Vec<f64>, _> = line.split_whitespace().map(str::parse::<f64>).collect();
            let row = row.map_err(|_| bad("bad weight"))?;
            if row.len() != cols {
                return Err(bad("row length differs from header"));
            }
            weights.extend(row);
        }
        if weights.len() != rows * cols {
            return Err(bad("row count differs from header"));
        }
        let p = Self {
            rows,
            cols,
            weights,
            version: version[0],
            seed: seed[0],
        };
        if !p.is_finite() {
            return Err(bad("non-finite weight"));
        }
        Ok(p)
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, self.to_text())
    }

    pub fn load(path: &Path) -> Result<Self, PolicyError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PolicyError::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_text(&text)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActionDistribution {
    pub probs: Vec<f64>,
}

pub fn act_distribution(params: &PolicyParams, features: &[f64]) -> Result<ActionDistribution, PolicyError> {
    Ok(ActionDistribution {
        probs: softmax(&params.logits(features)?),
    })
}

/// Log-probability of `arm` and its gradient (row-major, same shape as the
/// weights): `(1{k=arm} - p_k) * features`.
pub fn log_prob_and_grad(
    params: &PolicyParams,
    features: &[f64],
    arm: usize,
) -> Result<(f64, Vec<f64>), PolicyError> {
    if arm >= params.rows {
        return Err(PolicyError::UnknownAction(format!("arm {arm}")));
    }
    let logits = params.logits(features)?;
    let lp = log_softmax(&logits, arm);
    let probs = softmax(&logits);
    let mut grad = vec![0.0; params.rows * params.cols];
    for k in 0..params.rows {
        let coef = if k == arm { 1.0 } else { 0.0 } - probs[k];
        if coef == 0.0 {
            continue;
        }
        for (g, f) in grad[k * params.cols..(k + 1) * params.cols].iter_mut().zip(features) {
            *g = coef * f;
        }
    }
    Ok((lp, grad))
}

pub fn log_prob(params: &PolicyParams, features: &[f64], arm: usize) -> Result<f64, PolicyError> {
    let logits = params.logits(features)?;
    if arm >= logits.len() {
        return Err(PolicyError::UnknownAction(format!("arm {arm}")));
    }
    Ok(log_softmax(&logits, arm))
}

fn log_softmax(logits: &[f64], arm: usize) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
    logits[arm] - lse
}

/// Inverse-CDF draw; returns the arm and its log-probability.
pub fn sample(dist: &ActionDistribution, rng: &mut ChaCha8Rng) -> (usize, f64) {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = 0;
    for (k, &p) in dist.probs.iter().enumerate() {
        if p > 0.0 {
            last = k;
        }
        acc += p;
        if u < acc && p > 0.0 {
            return (k, p.ln());
        }
    }
    // rounding left u above the final cumulative sum
    (last, dist.probs[last].ln())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    #[default]
    Greedy,
    Sample,
}

/// One policy step, with everything the trainer needs to score it later.
#[derive(Debug, Clone, PartialEq)]
pub struct Decision {
    pub action: Action,
    pub arm: Option<usize>,
    pub features: Option<Vec<f64>>,
    pub log_prob: f64,
    /// Parameter version the decision was sampled from.
    pub version: u64,
}

pub trait Policy: Send + Sync {
    fn act(&self, state: &EpisodeState, sampling: Sampling, rng: &mut ChaCha8Rng) -> Decision;
}

/// Softmax-linear policy over a parameter snapshot.
#[derive(Debug, Clone)]
pub struct SoftmaxPolicy {
    pub params: Arc<PolicyParams>,
    pub perception: Arc<Perception>,
}

impl SoftmaxPolicy {
    pub fn new(params: Arc<PolicyParams>, perception: Arc<Perception>) -> Result<Self, PolicyError> {
        params.check_shape(perception.arms().shape())?;
        Ok(Self { params, perception })
    }
}

impl Policy for SoftmaxPolicy {
    fn act(&self, state: &EpisodeState, sampling: Sampling, rng: &mut ChaCha8Rng) -> Decision {
        let features = self.perception.featurize(state);
        let dist = act_distribution(&self.params, &features).expect("shape checked at construction");
        let (arm, log_prob) = match sampling {
            Sampling::Greedy => {
                let a = argmax(&dist.probs);
                (a, dist.probs[a].ln())
            }
            Sampling::Sample => sample(&dist, rng),
        };
        Decision {
            action: self.perception.arms().action_of(arm, state),
            arm: Some(arm),
            features: Some(features),
            log_prob,
            version: self.params.version,
        }
    }
}

fn scripted(perception: &Perception, state: &EpisodeState, arm: usize) -> Decision {
    Decision {
        action: perception.arms().action_of(arm, state),
        arm: Some(arm),
        features: Some(perception.featurize(state)),
        log_prob: 0.0,
        version: 0,
    }
}

/// Teacher: answer the decoded class once a view resolves it, otherwise
/// focus the most marker-like cell not yet visited.
#[derive(Debug, Clone)]
pub struct OraclePolicy {
    pub perception: Arc<Perception>,
}

impl OraclePolicy {
    pub fn new(perception: Arc<Perception>) -> Self {
        Self { perception }
    }
}

impl Policy for OraclePolicy {
    fn act(&self, state: &EpisodeState, _sampling: Sampling, _rng: &mut ChaCha8Rng) -> Decision {
        let p = &self.perception;
        let arms = p.arms();
        if let Some(d) = p.best_decoding(state) {
            return scripted(p, state, d.class);
        }
        let visited: Vec<usize> = state
            .actions
            .iter()
            .filter_map(|a| arms.arm_of(a, state).ok())
            .collect();
        let marker = p.marker_likelihood(state);
        let mut order: Vec<usize> = (0..arms.num_cells()).collect();
        order.sort_by(|&a, &b| marker[b].total_cmp(&marker[a]).then(a.cmp(&b)));
        let last_turn = state.turn + 1 >= state.config.max_turns;
        match order.into_iter().find(|&c| !visited.contains(&arms.focus_arm(c))) {
            Some(c) if !last_turn => scripted(p, state, arms.focus_arm(c)),
            _ => scripted(p, state, 0),
        }
    }
}

/// Always answers the same class without looking.
#[derive(Debug, Clone)]
pub struct ConstantAnswerPolicy {
    pub perception: Arc<Perception>,
    pub class: usize,
}

impl Policy for ConstantAnswerPolicy {
    fn act(&self, state: &EpisodeState, _sampling: Sampling, _rng: &mut ChaCha8Rng) -> Decision {
        scripted(&self.perception, state, self.class)
    }
}

/// Plays a fixed arm sequence, repeating the last arm when it runs out.
#[derive(Debug, Clone)]
pub struct ScriptedPolicy {
    pub perception: Arc<Perception>,
    pub arms: Vec<usize>,
}

impl Policy for ScriptedPolicy {
    fn act(&self, state: &EpisodeState, _sampling: Sampling, _rng: &mut ChaCha8Rng) -> Decision {
        let arm = self
            .arms
            .get(state.turn)
            .or(self.arms.last())
            .copied()
            .unwrap_or(0);
        scripted(&self.perception, state, arm)
    }
}

/// Oracle that, with probability `1 - skill`, replaces its answer with a
/// wrong class. Draws one uniform per decision.
#[derive(Debug, Clone)]
pub struct NoisyOraclePolicy {
    pub oracle: OraclePolicy,
    pub skill: f64,
}

impl Policy for NoisyOraclePolicy {
    fn act(&self, state: &EpisodeState, sampling: Sampling, rng: &mut ChaCha8Rng) -> Decision {
        let mut d = self.oracle.act(state, sampling, rng);
        let u: f64 = rng.gen();
        let arms = self.oracle.perception.arms();
        if let Some(arm) = d.arm.filter(|&a| arms.is_answer(a)) {
            if u >= self.skill {
                let wrong = (arm + 1) % arms.num_classes;
                d = scripted(&self.oracle.perception, state, wrong);
            }
        }
        d
    }
}
