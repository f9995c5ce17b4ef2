use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use glimpse::config::RunConfig;
use glimpse::pipeline::{read_records, ConversationRecord};

fn glimpse(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_glimpse")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = glimpse(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn small_config(dir: &Path) -> PathBuf {
    let mut cfg = RunConfig::default();
    cfg.out = dir.join("run");
    cfg.data.sft_scenes = 12;
    cfg.data.eval_scenes = 6;
    cfg.sft.epochs = 5;
    cfg.grpo.max_steps = 2;
    cfg.grpo.batch_queries = 2;
    cfg.grpo.group_size = 4;
    cfg.grpo.minibatch = 8;
    cfg.eval.budgets_for_sweep = vec![128, 512];
    let path = dir.join("small.toml");
    std::fs::write(&path, cfg.to_toml()).unwrap();
    path
}

#[test]
fn config_round_trips_through_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let printed = ok(&["config", "--seed", "42"]);
    let cfg = RunConfig::from_toml(&printed).unwrap();
    assert_eq!(cfg.seeds.rl, 42);
    let path = dir.path().join("c.toml");
    std::fs::write(&path, &printed).unwrap();
    assert_eq!(ok(&["config", "--config", path.to_str().unwrap()]), printed);
}

#[test]
fn scene_manifests_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let c = cfg.to_str().unwrap();
    let read = |out: &str| std::fs::read_to_string(Path::new(out).join("scenes/eval.jsonl")).unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let other = dir.path().join("other");
    ok(&["gen-scenes", "--config", c, "--out", a.to_str().unwrap()]);
    ok(&["gen-scenes", "--config", c, "--out", b.to_str().unwrap()]);
    ok(&["gen-scenes", "--config", c, "--out", other.to_str().unwrap(), "--seed", "99"]);
    assert_eq!(read(a.to_str().unwrap()), read(b.to_str().unwrap()));
    assert_ne!(read(a.to_str().unwrap()), read(other.to_str().unwrap()));
    assert!(a.join("scenes/config.toml").exists());
}

#[test]
fn infeasible_spec_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::default();
    cfg.scenes.glyph_size = 4;
    cfg.scenes.num_classes = 300;
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, cfg.to_toml()).unwrap();
    let out = glimpse(&["gen-scenes", "--config", path.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "SpecInfeasible");
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, "out = \"x\"\nmystery = 3\n").unwrap();
    let out = glimpse(&["config", "--config", path.to_str().unwrap()]);
    assert!(!out.status.success());
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "ConfigError");
}

#[test]
fn train_and_evaluate_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let c = cfg.to_str().unwrap();
    let run = dir.path().join("run");

    let sft: serde_json::Value = serde_json::from_str(&ok(&["sft", "--config", c])).unwrap();
    assert_eq!(sft["records"], 12);
    let ckpt = run.join("sft/policy.ckpt");
    assert!(ckpt.exists());
    let losses = std::fs::read_to_string(run.join("sft/losses.csv")).unwrap();
    assert_eq!(losses.lines().count(), 6);

    let records = run.join("sft/records.jsonl");
    let v: serde_json::Value = serde_json::from_str(&ok(&["validate", "--config", c, "--input", records.to_str().unwrap(), "--strict"])).unwrap();
    assert_eq!(v["failed"], 0);

    let rl: serde_json::Value = serde_json::from_str(&ok(&["rl", "--config", c, "--init", ckpt.to_str().unwrap()])).unwrap();
    assert!(rl["steps"].as_u64().unwrap() >= 1);
    let tuned = run.join("rl-constrained/policy.ckpt");
    assert!(tuned.exists());

    let e: serde_json::Value = serde_json::from_str(&ok(&["eval", "--config", c, "--policy", tuned.to_str().unwrap()])).unwrap();
    assert!((0.0..=1.0).contains(&e["accuracy"].as_f64().unwrap()));
    assert!(run.join("eval/constrained.summary.json").exists());

    let o: serde_json::Value = serde_json::from_str(&ok(&["eval", "--config", c, "--oracle"])).unwrap();
    assert_eq!(o["accuracy"], 1.0);

    ok(&["sweep", "--config", c, "--oracle"]);
    let table = std::fs::read_to_string(run.join("sweep/budgets.sweep.csv")).unwrap();
    assert_eq!(table.lines().count(), 3);

    let bad = dir.path().join("bad.ckpt");
    std::fs::write(&bad, "not a checkpoint").unwrap();
    let out = glimpse(&["eval", "--config", c, "--policy", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "PolicyError");
}

fn fixture_records(dir: &Path) -> PathBuf {
    let mut cfg = RunConfig::default();
    cfg.out = dir.join("fx");
    cfg.data.sft_scenes = 4;
    cfg.sft.epochs = 1;
    let path = dir.join("fx.toml");
    std::fs::write(&path, cfg.to_toml()).unwrap();
    ok(&["sft", "--config", path.to_str().unwrap()]);
    dir.join("fx/sft/records.jsonl")
}

#[test]
fn rescale_and_filter_records() {
    let dir = tempfile::tempdir().unwrap();
    let input = fixture_records(dir.path());
    let same = dir.path().join("same.jsonl");
    ok(&["rescale", "--input", input.to_str().unwrap(), "--output", same.to_str().unwrap(), "--sx", "1", "--sy", "1"]);
    assert_eq!(std::fs::read(&input).unwrap(), std::fs::read(&same).unwrap());

    let half = dir.path().join("half.jsonl");
    ok(&["rescale", "--input", input.to_str().unwrap(), "--output", half.to_str().unwrap(), "--sx", "0.5", "--sy", "0.5"]);
    let a = read_records(&input).unwrap();
    let b = read_records(&half).unwrap();
    let first = |r: &ConversationRecord| r.meta.reference_bboxes.clone().unwrap()[0];
    let (x, y) = (first(&a[0]), first(&b[0]));
    for i in 0..4 {
        assert!((y[i] * 2 - x[i]).abs() <= 2, "{x:?} {y:?}");
    }

    let out = glimpse(&["rescale", "--input", input.to_str().unwrap(), "--output", half.to_str().unwrap(), "--sx", "0", "--sy", "1"]);
    assert!(!out.status.success());

    // Duplicate the first record with a second identical focus turn; dedup drops it.
    let mut dup = a[0].clone();
    let extra = dup.turns[1..3].to_vec();
    dup.turns.splice(3..3, extra);
    dup.images.push(dup.images[0].clone());
    let refs = dup.meta.reference_bboxes.as_mut().unwrap();
    refs.push(refs[0]);
    assert!(glimpse::pipeline::validate(&dup).pass);
    let mut mixed = a.clone();
    mixed.push(dup);
    let mixed_path = dir.path().join("mixed.jsonl");
    glimpse::pipeline::write_records(&mixed_path, &mixed).unwrap();
    let out_dir = dir.path().join("filtered");
    let f: serde_json::Value = serde_json::from_str(&ok(&[
        "filter",
        "--records",
        mixed_path.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]))
    .unwrap();
    assert_eq!(f["input"], a.len() + 1);
    assert_eq!(f["kept"], a.len());
}

#[test]
fn difficulty_filter_drops_trivial_scenes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let c = cfg.to_str().unwrap();
    ok(&["gen-scenes", "--config", c]);
    ok(&["sft", "--config", c]);
    let scenes = dir.path().join("run/scenes/eval.jsonl");
    let ckpt = dir.path().join("run/sft/policy.ckpt");
    let f: serde_json::Value =
        serde_json::from_str(&ok(&["filter", "--config", c, "--scenes", scenes.to_str().unwrap(), "--policy", ckpt.to_str().unwrap()]))
            .unwrap();
    assert_eq!(f["input"], 6);
    let kept = std::fs::read_to_string(dir.path().join("run/filter/scenes.jsonl")).unwrap();
    let all = std::fs::read_to_string(&scenes).unwrap();
    assert_eq!(kept.lines().count() as u64, f["kept"].as_u64().unwrap());
    assert!(kept.lines().all(|l| all.lines().any(|m| m == l)));
}
