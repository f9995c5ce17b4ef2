use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use serde::Serialize;

use glimpse::config::{ConfigError, RunConfig};
use glimpse::env::EnvError;
use glimpse::eval::{budget_sweep, emit_report, emit_sweep, evaluate, EvalError, ReportFormat};
use glimpse::pipeline::{
    dedup_filter, difficulty_filter, read_records, record_from_trajectory, rejection_sample, rescale,
    resolution_filter, validate, write_records, AssetStore, PipelineError, RescaleMap, Verdict,
};
use glimpse::policy::{OraclePolicy, Perception, Policy, PolicyError, PolicyParams, SoftmaxPolicy};
use glimpse::scenes::{scene_manifest, SceneError, SceneRecord};
use glimpse::trainer::{rl_train, sft_train, Demonstration, SceneStream, TrainError};

#[derive(Parser, Debug)]
#[command(name = "glimpse", version, about = "Budgeted visual search: data, training and evaluation")]
struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Train and evaluate under the per-view budget (true) or at native resolution (false).
    #[arg(long, global = true)]
    constrained: Option<bool>,
    /// Fixed per-view token budget for training and evaluation.
    #[arg(long, global = true)]
    budget: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print the effective configuration as TOML.
    Config,
    /// Write scene manifests for the SFT and evaluation streams.
    GenScenes,
    /// Rejection-sample oracle demonstrations and fit the policy to them.
    Sft,
    /// GRPO training from a checkpoint (or from zero weights).
    Rl {
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Evaluate a checkpoint, or the oracle, on the evaluation stream.
    Eval {
        #[arg(long, conflicts_with = "oracle")]
        policy: Option<PathBuf>,
        #[arg(long)]
        oracle: bool,
    },
    /// Evaluate under every budget in `eval.budgets_for_sweep`.
    Sweep {
        #[arg(long, conflicts_with = "oracle")]
        policy: Option<PathBuf>,
        #[arg(long)]
        oracle: bool,
    },
    /// Check conversation records against the structural rules.
    Validate {
        #[arg(long)]
        input: PathBuf,
        /// Exit nonzero when any record fails.
        #[arg(long)]
        strict: bool,
    },
    /// Rescale every coordinate in conversation records.
    Rescale {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        sx: f64,
        #[arg(long)]
        sy: f64,
    },
    /// Filter records (dedup, structure) or scenes (resolution, difficulty).
    Filter {
        #[arg(long, conflicts_with = "scenes")]
        records: Option<PathBuf>,
        #[arg(long, requires = "policy")]
        scenes: Option<PathBuf>,
        #[arg(long)]
        policy: Option<PathBuf>,
    },
}

#[derive(Serialize)]
struct LossRow {
    epoch: usize,
    loss: f64,
}

#[derive(Serialize)]
struct ErrorRecord<'a> {
    error: &'a str,
    message: String,
}

fn error_kind(err: &anyhow::Error) -> &'static str {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<SceneError>() {
            return match e {
                SceneError::SpecInfeasible(_) => "SpecInfeasible",
                SceneError::ManifestMismatch(_) => "ManifestMismatch",
            };
        }
        if matches!(cause.downcast_ref::<ConfigError>(), Some(e) if !matches!(e, ConfigError::Scene(_))) {
            return "ConfigError";
        }
        if cause.is::<PolicyError>() {
            return "PolicyError";
        }
        if cause.is::<TrainError>() {
            return "TrainError";
        }
        if cause.is::<EvalError>() {
            return "EvalError";
        }
        if cause.is::<PipelineError>() {
            return "PipelineError";
        }
        if cause.is::<EnvError>() {
            return "EnvError";
        }
        if cause.is::<std::io::Error>() {
            return "IoError";
        }
    }
    "Error"
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let rec = ErrorRecord {
                error: error_kind(&e),
                message: format!("{e:#}"),
            };
            eprintln!("{}", serde_json::to_string(&rec).unwrap_or_else(|_| rec.message.clone()));
            ExitCode::from(2)
        }
    }
}

fn effective_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg = cfg.with_seed(s);
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    if let Some(c) = cli.constrained {
        cfg.train_env.constrained = c;
        cfg.eval.constrained = c;
    }
    if let Some(b) = cli.budget {
        cfg.train_env.fixed_budget_override = Some(b);
        cfg.eval.budget_override = Some(b);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn stage_dir(cfg: &RunConfig, stage: &str) -> anyhow::Result<PathBuf> {
    let dir = cfg.out.join(stage);
    fs::create_dir_all(&dir).with_context(|| format!("cannot create {}", dir.display()))?;
    fs::write(dir.join("config.toml"), cfg.to_toml())?;
    Ok(dir)
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> anyhow::Result<()> {
    let mut text = String::new();
    for it in items {
        text.push_str(&serde_json::to_string(it)?);
        text.push('\n');
    }
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

fn read_scenes(path: &Path) -> anyhow::Result<Vec<SceneRecord>> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("{} line {}", path.display(), i + 1)))
        .collect()
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn load_policy(cfg: &RunConfig, policy: Option<&Path>, oracle: bool) -> anyhow::Result<Box<dyn Policy>> {
    let perception = Arc::new(Perception::new(&cfg.scene_spec())?);
    if oracle {
        return Ok(Box::new(OraclePolicy::new(perception)));
    }
    let Some(path) = policy else {
        bail!("pass --policy <checkpoint> or --oracle");
    };
    let params = PolicyParams::load(path)?;
    Ok(Box::new(SoftmaxPolicy::new(Arc::new(params), perception)?))
}

fn regime(constrained: bool) -> &'static str {
    if constrained {
        "constrained"
    } else {
        "unconstrained"
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = effective_config(&cli)?;
    match cli.command {
        Command::Config => print!("{}", cfg.to_toml()),
        Command::GenScenes => {
            let dir = stage_dir(&cfg, "scenes")?;
            let spec = cfg.scene_spec();
            let sft = scene_manifest(&spec, cfg.data.sft_stream, cfg.data.sft_scenes)?;
            let eval = scene_manifest(&spec, cfg.data.eval_stream, cfg.data.eval_scenes)?;
            write_jsonl(&dir.join("sft.jsonl"), &sft)?;
            write_jsonl(&dir.join("eval.jsonl"), &eval)?;
            println!("{}", serde_json::json!({"sft": sft.len(), "eval": eval.len(), "dir": dir}));
        }
        Command::Sft => {
            let dir = stage_dir(&cfg, "sft")?;
            let spec = cfg.scene_spec();
            let perception = Arc::new(Perception::new(&spec)?);
            let teacher = OraclePolicy::new(perception.clone());
            let scenes = scene_manifest(&spec, cfg.data.sft_stream, cfg.data.sft_scenes)?;
            let store = if cfg.data.write_assets {
                Some(AssetStore::new(dir.join("assets"))?)
            } else {
                None
            };
            let kept = rejection_sample(
                &scenes,
                &teacher,
                &cfg.episode_config(),
                &cfg.rejection_config(),
                |_, scene, t| -> anyhow::Result<_> {
                    let (record, views) = record_from_trajectory(t, &scene.gold, "oracle");
                    if let Some(s) = &store {
                        s.put_all(&views)?;
                    }
                    Ok((record, Demonstration::from_trajectory(t, &perception)?))
                },
            )?;
            let (records, demos): (Vec<_>, Vec<_>) = kept.into_iter().collect::<anyhow::Result<Vec<_>>>()?.into_iter().unzip();
            write_records(&dir.join("records.jsonl"), &records)?;
            let (params, losses) = sft_train(&PolicyParams::zeros(perception.arms()), &demos, &cfg.sft_config())?;
            params.save(&dir.join("policy.ckpt"))?;
            let rows: Vec<_> = losses.iter().enumerate().map(|(epoch, &loss)| LossRow { epoch, loss }).collect();
            write_csv(&dir.join("losses.csv"), &rows)?;
            println!(
                "{}",
                serde_json::json!({"candidates": scenes.len(), "records": records.len(), "final_loss": losses.last()})
            );
        }
        Command::Rl { init } => {
            let dir = stage_dir(&cfg, &format!("rl-{}", regime(cfg.train_env.constrained)))?;
            let spec = cfg.scene_spec();
            let perception = Arc::new(Perception::new(&spec)?);
            let start = match &init {
                Some(p) => PolicyParams::load(p)?,
                None => PolicyParams::zeros(perception.arms()),
            };
            let mut stream = SceneStream::new(spec, cfg.data.rl_stream);
            let (params, log) = rl_train(&start, perception, &mut stream, &cfg.episode_config(), &cfg.grpo, cfg.seeds.rl)?;
            params.save(&dir.join("policy.ckpt"))?;
            write_csv(&dir.join("steps.csv"), &log)?;
            let tokens: usize = log.iter().map(|l| l.visual_tokens).sum();
            println!("{}", serde_json::json!({"steps": log.len(), "visual_tokens": tokens, "version": params.version}));
        }
        Command::Eval { policy, oracle } => {
            let dir = stage_dir(&cfg, "eval")?;
            let pol = load_policy(&cfg, policy.as_deref(), oracle)?;
            let scenes = scene_manifest(&cfg.scene_spec(), cfg.data.eval_stream, cfg.data.eval_scenes)?;
            let ecfg = cfg.eval_config();
            let report = evaluate(pol.as_ref(), &scenes, &ecfg)?;
            emit_report(&report, &dir.join(regime(ecfg.constrained)), ReportFormat::CsvJson)?;
            println!(
                "{}",
                serde_json::json!({
                    "constrained": report.constrained,
                    "accuracy": report.accuracy,
                    "all_focus_ratio": report.all_focus_ratio,
                    "all_direct_ratio": report.all_direct_ratio,
                    "visual_tokens_total": report.visual_tokens_total,
                })
            );
        }
        Command::Sweep { policy, oracle } => {
            let dir = stage_dir(&cfg, "sweep")?;
            let pol = load_policy(&cfg, policy.as_deref(), oracle)?;
            let scenes = scene_manifest(&cfg.scene_spec(), cfg.data.eval_stream, cfg.data.eval_scenes)?;
            let ecfg = cfg.eval_config();
            let sweep = budget_sweep(pol.as_ref(), &scenes, &ecfg, &ecfg.budgets_for_sweep)?;
            emit_sweep(&sweep, &dir.join("budgets"))?;
            let acc: Vec<_> = sweep.iter().map(|(b, r)| serde_json::json!({"budget": b, "accuracy": r.accuracy})).collect();
            println!("{}", serde_json::Value::Array(acc));
        }
        Command::Validate { input, strict } => {
            let dir = stage_dir(&cfg, "validate")?;
            let records = read_records(&input)?;
            let reports: Vec<_> = records.iter().map(validate).collect();
            write_jsonl(&dir.join("report.jsonl"), &reports)?;
            let failed = reports.iter().filter(|r| !r.pass).count();
            println!("{}", serde_json::json!({"records": records.len(), "passed": records.len() - failed, "failed": failed}));
            if strict && failed > 0 {
                bail!("{failed} of {} records failed validation", records.len());
            }
        }
        Command::Rescale { input, output, sx, sy } => {
            let Some(map) = RescaleMap::new(sx, sy) else {
                bail!("scale factors must be positive and finite");
            };
            let records = read_records(&input)?;
            let out: Vec<_> = records.iter().map(|r| rescale(r, &map)).collect();
            write_records(&output, &out)?;
            println!("{}", serde_json::json!({"records": out.len()}));
        }
        Command::Filter { records, scenes, policy } => {
            let dir = stage_dir(&cfg, "filter")?;
            if let Some(path) = records {
                let all = read_records(&path)?;
                let kept: Vec<_> = all
                    .iter()
                    .filter(|r| validate(r).pass)
                    .filter(|r| dedup_filter(&r.tool_call_boxes(), cfg.rejection.iou_threshold) == Verdict::Keep)
                    .cloned()
                    .collect();
                write_records(&dir.join("records.jsonl"), &kept)?;
                println!("{}", serde_json::json!({"input": all.len(), "kept": kept.len()}));
            } else if let Some(path) = scenes {
                let pol = load_policy(&cfg, policy.as_deref(), false)?;
                let all = read_scenes(&path)?;
                let mut kept = Vec::new();
                for rec in &all {
                    let scene = rec.regenerate()?;
                    if resolution_filter(scene.image.width(), scene.image.height()) == Verdict::Drop {
                        continue;
                    }
                    let (v, _) = difficulty_filter(
                        &scene,
                        pol.as_ref(),
                        cfg.difficulty.rollouts,
                        cfg.difficulty_band(),
                        &cfg.episode_config(),
                        cfg.seeds.data,
                    )?;
                    if v == Verdict::Keep {
                        kept.push(rec.clone());
                    }
                }
                write_jsonl(&dir.join("scenes.jsonl"), &kept)?;
                println!("{}", serde_json::json!({"input": all.len(), "kept": kept.len()}));
            } else {
                bail!("pass --records <file> or --scenes <file> --policy <checkpoint>");
            }
        }
    }
    Ok(())
}
