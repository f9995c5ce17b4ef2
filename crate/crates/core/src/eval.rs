//! Evaluation under constrained and unconstrained regimes, behaviour ratios,
//! degradation deltas, budget sweeps and report files.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::budget::BudgetConfig;
use crate::env::{EnvError, EpisodeConfig, Environment, OnProtocolError, Status};
use crate::policy::{Policy, Sampling};
use crate::rng::derive_seed;
use crate::scenes::{SceneError, SceneRecord};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("invalid eval config: {0}")]
    InvalidConfig(String),
    #[error("reports cover different scene sets")]
    MismatchedScenes,
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error("cannot write report: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot encode report: {0}")]
    Encode(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub constrained: bool,
    pub budget_override: Option<usize>,
    pub max_turns: usize,
    pub context_limit: usize,
    pub rollouts_per_query: usize,
    pub budgets_for_sweep: Vec<usize>,
    pub budget: BudgetConfig,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            constrained: true,
            budget_override: Some(256),
            max_turns: 3,
            context_limit: 30_000,
            rollouts_per_query: 1,
            budgets_for_sweep: vec![128, 256, 512, 1024],
            budget: BudgetConfig::default(),
            seed: 7,
        }
    }
}

impl EvalConfig {
    pub fn episode_config(&self) -> EpisodeConfig {
        EpisodeConfig {
            max_turns: self.max_turns,
            context_limit: self.context_limit,
            budget: self.budget,
            constrained: self.constrained,
            fixed_budget_override: self.budget_override,
            on_protocol_error: OnProtocolError::Terminate,
        }
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        if self.rollouts_per_query == 0 {
            return Err(EvalError::InvalidConfig("rollouts_per_query must be >= 1".into()));
        }
        self.episode_config().validate()?;
        Ok(())
    }

    /// Argmax decisions for single-rollout evaluation, sampling otherwise.
    pub fn sampling(&self) -> Sampling {
        if self.rollouts_per_query == 1 {
            Sampling::Greedy
        } else {
            Sampling::Sample
        }
    }
}

/// One scene's outcome across its rollouts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRow {
    pub scene_seed: u64,
    pub gold: String,
    pub target_row: usize,
    pub target_col: usize,
    pub rollouts: usize,
    pub correct: usize,
    pub focus_rollouts: usize,
    pub mean_turns: f64,
    pub visual_tokens: usize,
    pub truncated: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub constrained: bool,
    pub budget: Option<usize>,
    pub queries: usize,
    pub rollouts_per_query: usize,
    pub accuracy: f64,
    pub all_direct_ratio: f64,
    pub all_focus_ratio: f64,
    pub mixed_ratio: f64,
    pub mean_turns: f64,
    pub visual_tokens_total: usize,
    pub per_query: Vec<QueryRow>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BehaviorRatios {
    pub all_direct: f64,
    pub all_focus: f64,
    pub mixed: f64,
}

/// `focus_turns[q][i]` is the number of focus calls in rollout `i` of query `q`.
pub fn behavior_ratios(focus_turns: &[Vec<usize>]) -> BehaviorRatios {
    let n = focus_turns.len();
    if n == 0 {
        return BehaviorRatios {
            all_direct: 0.0,
            all_focus: 0.0,
            mixed: 0.0,
        };
    }
    let direct = focus_turns.iter().filter(|r| r.iter().all(|&f| f == 0)).count();
    let focus = focus_turns.iter().filter(|r| r.iter().all(|&f| f > 0)).count();
    let mixed = n - direct - focus;
    BehaviorRatios {
        all_direct: direct as f64 / n as f64,
        all_focus: focus as f64 / n as f64,
        mixed: mixed as f64 / n as f64,
    }
}

/// Runs `rollouts_per_query` episodes per scene. Rollout `i` of scene `s`
/// is seeded from `(config.seed, s.seed, i)`.
pub fn evaluate(policy: &dyn Policy, scenes: &[SceneRecord], config: &EvalConfig) -> Result<MetricsReport, EvalError> {
    config.validate()?;
    if scenes.is_empty() {
        return Err(EvalError::InvalidConfig("empty scene set".into()));
    }
    let episode = config.episode_config();
    let sampling = config.sampling();
    let k = config.rollouts_per_query;
    let results: Vec<(QueryRow, Vec<usize>, usize)> = scenes
        .par_iter()
        .map(|rec| -> Result<_, EvalError> {
            let scene = rec.regenerate()?;
            let env = Environment::new(scene.image.clone(), episode.clone())?;
            let mut focus = Vec::with_capacity(k);
            let (mut correct, mut turns, mut tokens, mut truncated) = (0, 0, 0, 0);
            for i in 0..k {
                let t = env.rollout(
                    policy,
                    sampling,
                    &scene.query,
                    &scene.gold,
                    derive_seed(config.seed, &[rec.seed, i as u64]),
                );
                correct += t.reward as usize;
                turns += t.episode.turn;
                tokens += t.visual_tokens();
                truncated += matches!(t.episode.status, Status::TruncatedTurns | Status::TruncatedContext) as usize;
                focus.push(t.focus_turns());
            }
            let row = QueryRow {
                scene_seed: rec.seed,
                gold: rec.gold.clone(),
                target_row: rec.target_cell.0,
                target_col: rec.target_cell.1,
                rollouts: k,
                correct,
                focus_rollouts: focus.iter().filter(|&&f| f > 0).count(),
                mean_turns: turns as f64 / k as f64,
                visual_tokens: tokens,
                truncated,
            };
            Ok((row, focus, turns))
        })
        .collect::<Result<_, _>>()?;
    let ratios = behavior_ratios(&results.iter().map(|r| r.1.clone()).collect::<Vec<_>>());
    let total = (scenes.len() * k) as f64;
    Ok(MetricsReport {
        constrained: config.constrained,
        budget: config.constrained.then_some(config.budget_override).flatten(),
        queries: scenes.len(),
        rollouts_per_query: k,
        accuracy: results.iter().map(|r| r.0.correct).sum::<usize>() as f64 / total,
        all_direct_ratio: ratios.all_direct,
        all_focus_ratio: ratios.all_focus,
        mixed_ratio: ratios.mixed,
        mean_turns: results.iter().map(|r| r.2).sum::<usize>() as f64 / total,
        visual_tokens_total: results.iter().map(|r| r.0.visual_tokens).sum(),
        per_query: results.into_iter().map(|r| r.0).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Degradation {
    /// Unconstrained accuracy minus baseline.
    pub gain: f64,
    /// Constrained accuracy minus baseline.
    pub loss: f64,
}

pub fn degradation_report(
    unconstrained: &MetricsReport,
    constrained: &MetricsReport,
    baseline_accuracy: f64,
) -> Result<Degradation, EvalError> {
    let seeds = |r: &MetricsReport| r.per_query.iter().map(|q| q.scene_seed).collect::<Vec<_>>();
    if seeds(unconstrained) != seeds(constrained) {
        return Err(EvalError::MismatchedScenes);
    }
    Ok(Degradation {
        gain: unconstrained.accuracy - baseline_accuracy,
        loss: constrained.accuracy - baseline_accuracy,
    })
}

/// One constrained evaluation per budget, each with that budget as the
/// fixed override.
pub fn budget_sweep(
    policy: &dyn Policy,
    scenes: &[SceneRecord],
    config: &EvalConfig,
    budgets: &[usize],
) -> Result<Vec<(usize, MetricsReport)>, EvalError> {
    if budgets.is_empty() {
        return Err(EvalError::InvalidConfig("empty budget list".into()));
    }
    budgets
        .iter()
        .map(|&b| {
            let cfg = EvalConfig {
                constrained: true,
                budget_override: Some(b),
                ..config.clone()
            };
            Ok((b, evaluate(policy, scenes, &cfg)?))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    /// Per-query CSV plus JSON summary.
    CsvJson,
    /// JSON summary only.
    Json,
}

fn summary_path(stem: &Path) -> PathBuf {
    stem.with_extension("summary.json")
}

fn rows_path(stem: &Path) -> PathBuf {
    stem.with_extension("per_query.csv")
}

fn ensure_parent(path: &Path) -> std::io::Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => fs::create_dir_all(p),
        _ => Ok(()),
    }
}

/// Writes `<stem>.summary.json` and, for [`ReportFormat::CsvJson`],
/// `<stem>.per_query.csv`. Returns the written paths.
pub fn emit_report(report: &MetricsReport, stem: &Path, format: ReportFormat) -> Result<Vec<PathBuf>, EvalError> {
    ensure_parent(stem)?;
    let mut written = Vec::new();
    let summary = summary_path(stem);
    let json = serde_json::to_string_pretty(report).map_err(|e| EvalError::Encode(e.to_string()))?;
    fs::write(&summary, json)?;
    written.push(summary);
    if format == ReportFormat::CsvJson {
        let rows = rows_path(stem);
        let mut w = csv::Writer::from_path(&rows).map_err(|e| EvalError::Encode(e.to_string()))?;
        for row in &report.per_query {
            w.serialize(row).map_err(|e| EvalError::Encode(e.to_string()))?;
        }
        w.flush()?;
        written.push(rows);
    }
    Ok(written)
}

pub fn read_summary(path: &Path) -> Result<MetricsReport, EvalError> {
    serde_json::from_str(&fs::read_to_string(path)?).map_err(|e| EvalError::Encode(e.to_string()))
}

/// Plot-ready row of a sweep: one per budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub budget: usize,
    pub accuracy: f64,
    pub all_direct_ratio: f64,
    pub all_focus_ratio: f64,
    pub mean_turns: f64,
    pub visual_tokens_total: usize,
}

/// Writes `<stem>.sweep.csv` (one row per budget) and one summary per budget.
pub fn emit_sweep(sweep: &[(usize, MetricsReport)], stem: &Path) -> Result<Vec<PathBuf>, EvalError> {
    ensure_parent(stem)?;
    let path = stem.with_extension("sweep.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| EvalError::Encode(e.to_string()))?;
    let mut written = vec![path.clone()];
    for (b, r) in sweep {
        w.serialize(SweepRow {
            budget: *b,
            accuracy: r.accuracy,
            all_direct_ratio: r.all_direct_ratio,
            all_focus_ratio: r.all_focus_ratio,
            mean_turns: r.mean_turns,
            visual_tokens_total: r.visual_tokens_total,
        })
        .map_err(|e| EvalError::Encode(e.to_string()))?;
        let per = stem.with_extension(format!("b{b}"));
        written.extend(emit_report(r, &per, ReportFormat::Json)?);
    }
    w.flush()?;
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ratio_examples() {
        let r = behavior_ratios(&[vec![1, 2, 1], vec![1, 0, 1], vec![0, 0, 0]]);
        assert!((r.all_focus - 1.0 / 3.0).abs() < 1e-12);
        assert!((r.all_direct - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(r.all_direct + r.all_focus + r.mixed, 1.0);
        let r = behavior_ratios(&[vec![2], vec![1]]);
        assert_eq!((r.all_direct, r.all_focus), (0.0, 1.0));
    }
}
