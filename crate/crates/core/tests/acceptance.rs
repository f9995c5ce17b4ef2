//! End-to-end acceptance bars. Each test prints one `criterion N: PASS|FAIL`
//! line before asserting.

use std::sync::{Arc, OnceLock};
use std::time::Instant;

use glimpse::config::RunConfig;
use glimpse::budget::{budget_for_dims, compute_budget, crop, downsample, downsample_dims, token_count, BBox, BudgetConfig, ImageBuffer};
use glimpse::env::{run_episode, Action, EpisodeConfig, Environment};
use glimpse::eval::{budget_sweep, evaluate, EvalConfig, MetricsReport};
use glimpse::pipeline::{iou, rescale, validate, ConversationRecord, RecordMeta, RecordTurn, RescaleMap};
use glimpse::policy::{log_prob, log_prob_and_grad, OraclePolicy, Perception, PolicyParams, Sampling, SoftmaxPolicy};
use glimpse::protocol::render_tool_response;
use glimpse::scenes::{decode_answer, generate_scene, scene_manifest, SceneSpec};
use glimpse::trainer::{
    clipped_surrogate, group_advantages, grpo_step, rl_train, sft_loss, sft_loss_and_grad, sft_train,
    surrogate_objective_and_grad, Demonstration, GrpoConfig, RolloutGroup, SceneStream, Step, StepLog,
    SurrogateSample, TrainError,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn report(n: u8, pass: bool, detail: String) {
    println!("criterion {n}: {} {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "criterion {n} failed: {detail}");
}

// 1 -------------------------------------------------------------------------

#[test]
fn criterion_1_budget_law() {
    let cfg = BudgetConfig::default();
    let native = token_count(1024, 1024, 28);
    let mut ok = native == 1337 && native == cfg.b_max;
    let mut seen = vec![format!("1024^2 -> {native} tokens")];
    for (side, want) in [(280usize, 169usize), (1792, 655), (4480, 1337)] {
        let img = ImageBuffer::filled(side, side, 1, 0.0);
        let got = compute_budget(&img, &cfg);
        let raw = (side * side / 784) as f64 / 6.25;
        ok &= got == want && got == (raw.floor() as usize).clamp(169, 1337);
        seen.push(format!("{side}^2 -> B={got}"));
    }
    report(1, ok, seen.join(", "));
}

// 2 -------------------------------------------------------------------------

#[test]
fn criterion_2_downsample_contract() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let p = 28usize;
    let mut failures = Vec::new();
    for _ in 0..10_000 {
        let w = rng.gen_range(28..6000);
        let h = rng.gen_range(28..6000);
        let b = rng.gen_range(1..2000);
        let (dw, dh) = downsample_dims(w, h, b, p);
        if token_count(dw, dh, p) > b {
            failures.push(format!("{w}x{h}@{b} over budget"));
        }
        if token_count(w, h, p) <= b {
            if (dw, dh) != (w, h) {
                failures.push(format!("{w}x{h}@{b} not identity"));
            }
            continue;
        }
        if downsample_dims(dw, dh, b, p) != (dw, dh) {
            failures.push(format!("{w}x{h}@{b} not idempotent"));
        }
        let (long, short, dlong, dshort) = if w >= h { (w, h, dw, dh) } else { (h, w, dh, dw) };
        if long as f64 / short as f64 > b as f64 {
            // No patch grid within budget is that elongated; the output must be
            // the most elongated one available.
            if dshort != p || dlong != p * b.min(long / p) {
                failures.push(format!("{w}x{h}@{b} -> {dw}x{dh} is not the most elongated grid"));
            }
            continue;
        }
        // Within one patch of a common scale factor on each side.
        let s = (dw as f64 / w as f64).max(dh as f64 / h as f64);
        if (s * w as f64 - dw as f64).abs() > p as f64 || (s * h as f64 - dh as f64).abs() > p as f64 {
            failures.push(format!("{w}x{h}@{b} -> {dw}x{dh} distorts aspect"));
        }
    }
    for i in 0..200 {
        let w = rng.gen_range(28..300);
        let h = rng.gen_range(28..300);
        let b = rng.gen_range(1..80);
        let mut img = ImageBuffer::filled(w, h, 3, 0.0);
        for v in img.data_mut() {
            *v = rng.gen();
        }
        let out = downsample(&img, b, p);
        if (out.width(), out.height()) != downsample_dims(w, h, b, p) || out.tokens(p) > b || downsample(&out, b, p) != out {
            failures.push(format!("image {i}: {w}x{h}@{b}"));
        }
        if token_count(w, h, p) <= b && out != img {
            failures.push(format!("image {i}: within budget but changed"));
        }
    }
    report(2, failures.is_empty(), format!("10000 sizes + 200 images, {} violations {:?}", failures.len(), failures.first()));
}

// 3 -------------------------------------------------------------------------

#[test]
fn criterion_3_crop_at_source() {
    let spec = SceneSpec::default();
    let cfg = EpisodeConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut bad = Vec::new();
    for rec in scene_manifest(&spec, 30, 100).unwrap() {
        let s = rec.regenerate().unwrap();
        let env = Environment::new(s.image.clone(), cfg.clone()).unwrap();
        let st = env.reset(&s.query);
        let (ow, oh) = (st.overview().view.width() as i64, st.overview().view.height() as i64);
        let (sx, sy) = (s.image.width() as f64 / ow as f64, s.image.height() as f64 / oh as f64);
        let x1 = rng.gen_range(0..ow - 4);
        let y1 = rng.gen_range(0..oh - 4);
        let b = BBox::new(x1, y1, rng.gen_range(x1 + 1..=ow), rng.gen_range(y1 + 1..=oh));
        // Overview pixel edges mapped back onto the source grid.
        let src = BBox::new(
            (b.x1 as f64 * sx).floor() as i64,
            (b.y1 as f64 * sy).floor() as i64,
            (b.x2 as f64 * sx).ceil() as i64,
            (b.y2 as f64 * sy).ceil() as i64,
        );
        let expected = downsample(&crop(&s.image, &src).unwrap(), 256, 28);
        let st = env.step(st, Action::Focus(vec![b])).unwrap();
        let st = env.step(st, Action::Focus(vec![b])).unwrap();
        let (first, second) = (&st.observations[1], &st.observations[2]);
        if *first.view != expected || *second.view != expected || first.source_bbox != src {
            bad.push(rec.seed);
        }
    }
    report(3, bad.is_empty(), format!("100 scenes, mismatches {bad:?}"));
}

// 4 -------------------------------------------------------------------------

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

fn random_params(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> PolicyParams {
    PolicyParams { rows, cols, weights: (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect(), version: 0, seed: 0 }
}

fn fd<F: Fn(&PolicyParams) -> f64>(p: &PolicyParams, i: usize, f: F) -> f64 {
    let h = 1e-5;
    let mut plus = p.clone();
    plus.weights[i] += h;
    let mut minus = p.clone();
    minus.weights[i] -= h;
    (f(&plus) - f(&minus)) / (2.0 * h)
}

#[test]
fn criterion_4_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = [0.0f64; 3];
    let (rows, cols) = (5, 4);
    for _ in 0..100 {
        let p = random_params(&mut rng, rows, cols);
        let f: Vec<f64> = (0..cols).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let arm = rng.gen_range(0..rows);
        let (_, g) = log_prob_and_grad(&p, &f, arm).unwrap();
        for i in 0..p.weights.len() {
            worst[0] = worst[0].max(rel_err(g[i], fd(&p, i, |q| log_prob(q, &f, arm).unwrap())));
        }

        let demos: Vec<Demonstration> = (0..3)
            .map(|_| Demonstration {
                steps: (0..rng.gen_range(1..4))
                    .map(|_| Step { features: (0..cols).map(|_| rng.gen_range(-2.0..2.0)).collect(), arm: rng.gen_range(0..rows) })
                    .collect(),
            })
            .collect();
        let (_, g) = sft_loss_and_grad(&p, &demos).unwrap();
        for i in 0..p.weights.len() {
            worst[1] = worst[1].max(rel_err(g[i], fd(&p, i, |q| sft_loss(q, &demos).unwrap())));
        }

        let cfg = GrpoConfig::default();
        let samples: Vec<SurrogateSample> = (0..4)
            .map(|_| {
                let features: Vec<f64> = (0..cols).map(|_| rng.gen_range(-2.0..2.0)).collect();
                let arm = rng.gen_range(0..rows);
                let lp = log_prob(&p, &features, arm).unwrap();
                // Keep the ratio away from the clip kinks, where the objective
                // is not differentiable.
                let shift = loop {
                    let d: f64 = rng.gen_range(-0.4..0.4);
                    let r = d.exp();
                    if (r - (1.0 - cfg.clip_low)).abs() > 0.02 && (r - (1.0 + cfg.clip_high)).abs() > 0.02 {
                        break d;
                    }
                };
                SurrogateSample { features, arm, logp_old: lp - shift, advantage: rng.gen_range(-2.0..2.0) }
            })
            .collect();
        let (_, g) = surrogate_objective_and_grad(&p, &samples, &cfg).unwrap();
        let objective = |q: &PolicyParams| {
            samples
                .iter()
                .map(|s| clipped_surrogate(log_prob(q, &s.features, s.arm).unwrap(), s.logp_old, s.advantage, &cfg))
                .sum::<f64>()
                / samples.len() as f64
        };
        for i in 0..p.weights.len() {
            worst[2] = worst[2].max(rel_err(g[i], fd(&p, i, objective)));
        }
    }
    report(
        4,
        worst.iter().all(|&w| w <= 1e-4),
        format!("100 instances each, worst relative error log-prob {:.1e}, sft {:.1e}, surrogate {:.1e}", worst[0], worst[1], worst[2]),
    );
}

// 5 -------------------------------------------------------------------------

#[test]
fn criterion_5_grpo_arithmetic() {
    let cfg = GrpoConfig::default();
    let mut checks = Vec::new();
    checks.push(("[1,0,0,1]", group_advantages(&[1.0, 0.0, 0.0, 1.0]).advantages == vec![1.0, -1.0, -1.0, 1.0]));
    let same = group_advantages(&[1.0; 4]);
    checks.push(("degenerate", same.degenerate && same.advantages.iter().all(|&a| a == 0.0)));
    checks.push(("[1,0]", group_advantages(&[1.0, 0.0]).advantages == vec![1.0, -1.0]));
    checks.push(("clip high", clipped_surrogate(1.5f64.ln(), 0.0, 1.0, &cfg) == 1.28));
    checks.push(("clip low", (clipped_surrogate(0.5f64.ln(), 0.0, -1.0, &cfg) + 0.8).abs() < 1e-15));
    checks.push(("ratio 1", clipped_surrogate(-0.7, -0.7, 0.37, &cfg) == 0.37));

    let spec = SceneSpec::default();
    let per = Arc::new(Perception::new(&spec).unwrap());
    let s = generate_scene(&spec, 1).unwrap();
    let t = run_episode(&OraclePolicy::new(per.clone()), Sampling::Greedy, &s, &EpisodeConfig::default(), 0).unwrap();
    let groups = vec![RolloutGroup { trajectories: vec![t.clone(), t] }];
    let strict = GrpoConfig { dynamic_sampling: false, ..cfg };
    let err = grpo_step(&PolicyParams::zeros(per.arms()), &groups, &strict, 0);
    checks.push(("all-degenerate batch", matches!(err, Err(TrainError::AllGroupsDegenerate(_)))));
    let failed: Vec<_> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    report(5, failed.is_empty(), format!("{} checks, failed {failed:?}", checks.len()));
}

// 6 -------------------------------------------------------------------------

fn call(boxes: &[[i64; 4]]) -> String {
    let list: Vec<String> = boxes.iter().map(|b| format!("[{}, {}, {}, {}]", b[0], b[1], b[2], b[3])).collect();
    format!(
        "<think>Inspect {}.</think><tool_call>{{\"name\": \"focus\", \"arguments\": {{\"bboxes\": [{}]}}}}</tool_call>",
        list.join(" and "),
        list.join(", ")
    )
}

fn placeholders(n: usize) -> String {
    render_tool_response(n).unwrap().content
}

const ANSWER: &str = "<think>The glyph is readable.</think><answer>alfa</answer>";

fn fixture(turns: Vec<(&str, String)>, images: usize, refs: Option<Vec<[i64; 4]>>) -> ConversationRecord {
    ConversationRecord {
        meta: RecordMeta { query: "Which glyph?".into(), gold: "alfa".into(), source: "fixture".into(), reference_bboxes: refs },
        turns: turns.into_iter().map(|(f, v)| RecordTurn { from: f.into(), value: v }).collect(),
        images: (0..images).map(|i| format!("{i:064x}")).collect(),
    }
}

/// Records paired with the exact set of checks each must fail.
fn fixture_corpus() -> Vec<(&'static str, ConversationRecord, Vec<u8>)> {
    let b1 = [10, 20, 110, 220];
    let b2 = [300, 300, 420, 380];
    let human = |t: &str| ("human", t.to_string());
    let gpt = |t: &str| ("gpt", t.to_string());
    vec![
        ("one call, one placeholder", fixture(vec![gpt(&call(&[b1])), human(&placeholders(1)), gpt(ANSWER)], 1, Some(vec![b1])), vec![]),
        (
            "two calls",
            fixture(
                vec![gpt(&call(&[b1, b2])), human(&placeholders(2)), gpt(&call(&[b1])), human(&placeholders(1)), gpt(ANSWER)],
                3,
                Some(vec![b1, b1, b2]),
            ),
            vec![],
        ),
        ("no reference", fixture(vec![gpt(&call(&[b2])), human(&placeholders(1)), gpt(ANSWER)], 1, None), vec![]),
        ("too short", fixture(vec![gpt(ANSWER)], 0, None), vec![1]),
        ("not alternating", fixture(vec![gpt(&call(&[b1])), gpt(&call(&[b1])), human(&placeholders(1)), gpt(ANSWER)], 1, None), vec![1, 3]),
        ("empty think", fixture(vec![gpt(&call(&[b1])), human(&placeholders(1)), gpt("<think> </think><answer>alfa</answer>")], 1, None), vec![2]),
        ("missing think", fixture(vec![gpt(&call(&[b1])), human(&placeholders(1)), gpt("<answer>alfa</answer>")], 1, None), vec![2]),
        ("2 boxes, 1 placeholder", fixture(vec![gpt(&call(&[b1, b2])), human(&placeholders(1)), gpt(ANSWER)], 1, None), vec![3]),
        ("image list short", fixture(vec![gpt(&call(&[b1])), human(&placeholders(1)), gpt(ANSWER)], 0, None), vec![3]),
        (
            "multiset {b1,b1,b2} vs {b1,b2}",
            fixture(
                vec![gpt(&call(&[b1])), human(&placeholders(1)), gpt(&call(&[b2])), human(&placeholders(1)), gpt(ANSWER)],
                2,
                Some(vec![b1, b1, b2]),
            ),
            vec![4],
        ),
    ]
}

fn pixel_iou(a: &BBox, b: &BBox) -> f64 {
    let (mut inter, mut union) = (0u32, 0u32);
    for y in a.y1.min(b.y1)..a.y2.max(b.y2) {
        for x in a.x1.min(b.x1)..a.x2.max(b.x2) {
            let ia = x >= a.x1 && x < a.x2 && y >= a.y1 && y < a.y2;
            let ib = x >= b.x1 && x < b.x2 && y >= b.y1 && y < b.y2;
            inter += u32::from(ia && ib);
            union += u32::from(ia || ib);
        }
    }
    if union == 0 {
        0.0
    } else {
        f64::from(inter) / f64::from(union)
    }
}

#[test]
fn criterion_6_pipeline_fidelity() {
    let mut wrong = Vec::new();
    let corpus = fixture_corpus();
    for (name, rec, want) in &corpus {
        let r = validate(rec);
        if r.failed_checks() != *want || r.pass != want.is_empty() {
            wrong.push(format!("{name}: got {:?}", r.failed_checks()));
        }
    }

    let single = |sx: f64, b: [i64; 4]| {
        let rec = fixture(vec![("gpt", call(&[b]))], 0, Some(vec![b]));
        let out = rescale(&rec, &RescaleMap::new(sx, sx).unwrap());
        (out.meta.reference_bboxes.unwrap()[0], out.turns[0].value.clone(), rec)
    };
    let (b, text, _) = single(0.25, [100, 200, 300, 400]);
    if b != [25, 50, 75, 100] || !text.contains("[25, 50, 75, 100]") || text.contains("[100, 200, 300, 400]") {
        wrong.push(format!("rescale 0.25 -> {b:?}"));
    }
    let (b, _, _) = single(0.3, [5, 5, 6, 6]);
    if b != [2, 2, 3, 3] {
        wrong.push(format!("rescale 0.3 -> {b:?}"));
    }
    let (_, text, rec) = single(1.0, [7, 8, 9, 10]);
    if text != rec.turns[0].value {
        wrong.push("identity rescale changed text".into());
    }

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut iou_bad = 0;
    for _ in 0..10_000 {
        let mut bx = || {
            let x = rng.gen_range(0..40);
            let y = rng.gen_range(0..40);
            BBox::new(x, y, x + rng.gen_range(1..25), y + rng.gen_range(1..25))
        };
        let (a, b) = (bx(), bx());
        if (iou(&a, &b) - pixel_iou(&a, &b)).abs() > 1e-12 {
            iou_bad += 1;
        }
    }
    if iou_bad > 0 {
        wrong.push(format!("{iou_bad} iou mismatches"));
    }
    report(6, wrong.is_empty(), format!("{} fixtures, 3 rescale examples, 10000 iou pairs; problems {wrong:?}", corpus.len()));
}

// 7 -------------------------------------------------------------------------

#[test]
fn criterion_7_starvation_and_solvability() {
    let spec = SceneSpec::default();
    let (mut legible_overview, mut unreadable_crop) = (Vec::new(), Vec::new());
    let cell = spec.cell_size() as i64;
    for rec in scene_manifest(&spec, 70, 1000).unwrap() {
        let s = rec.regenerate().unwrap();
        let overview = downsample(&s.image, 256, 28);
        if decode_answer(&s, &overview, &s.image.bounds()).is_some() {
            legible_overview.push(rec.seed);
        }
        let (r, c) = (s.target_cell.0 as i64, s.target_cell.1 as i64);
        let target = BBox::new(c * cell, r * cell, (c + 1) * cell, (r + 1) * cell);
        let view = downsample(&crop(&s.image, &target).unwrap(), 256, 28);
        if decode_answer(&s, &view, &target) != Some(s.gold.clone()) {
            unreadable_crop.push(rec.seed);
        }
    }
    report(
        7,
        legible_overview.is_empty() && unreadable_crop.is_empty(),
        format!("1000 scenes, decodable overviews {legible_overview:?}, unreadable target crops {unreadable_crop:?}"),
    );
}

// 8 and 9 ---------------------------------------------------------------------

const EVAL_SCENES: usize = 100;

/// The shipped run configuration drives every training stage.
fn run_config() -> RunConfig {
    RunConfig::default()
}

struct Regime {
    constrained: MetricsReport,
    unconstrained: MetricsReport,
    log: Vec<StepLog>,
    params: PolicyParams,
}

struct Mechanism {
    sft: Regime,
    constrained_rl: Regime,
    unconstrained_rl: Regime,
    zero_init: Vec<StepLog>,
    perception: Arc<Perception>,
}

fn evaluate_both(params: &PolicyParams, per: &Arc<Perception>, log: Vec<StepLog>) -> Regime {
    let scenes = scene_manifest(&SceneSpec::default(), run_config().data.eval_stream, EVAL_SCENES).unwrap();
    let pol = SoftmaxPolicy::new(Arc::new(params.clone()), per.clone()).unwrap();
    Regime {
        constrained: evaluate(&pol, &scenes, &EvalConfig::default()).unwrap(),
        unconstrained: evaluate(&pol, &scenes, &EvalConfig { constrained: false, ..EvalConfig::default() }).unwrap(),
        log,
        params: params.clone(),
    }
}

fn mechanism() -> &'static Mechanism {
    static CELL: OnceLock<Mechanism> = OnceLock::new();
    CELL.get_or_init(|| {
        let t0 = Instant::now();
        let cfg = run_config();
        let spec = cfg.scene_spec();
        let per = Arc::new(Perception::new(&spec).unwrap());
        let oracle = OraclePolicy::new(per.clone());
        let train_env = cfg.episode_config();
        let demos: Vec<Demonstration> = scene_manifest(&spec, cfg.data.sft_stream, cfg.data.sft_scenes)
            .unwrap()
            .iter()
            .map(|r| {
                let s = r.regenerate().unwrap();
                let t = run_episode(&oracle, Sampling::Greedy, &s, &train_env, 0).unwrap();
                Demonstration::from_trajectory(&t, &per).unwrap()
            })
            .collect();
        let (init, _) = sft_train(&PolicyParams::zeros(per.arms()), &demos, &cfg.sft_config()).unwrap();
        let sft = evaluate_both(&init, &per, Vec::new());

        let train = |env: &EpisodeConfig| {
            let mut stream = SceneStream::new(spec.clone(), cfg.data.rl_stream);
            let (p, log) = rl_train(&init, per.clone(), &mut stream, env, &cfg.grpo, cfg.seeds.rl).unwrap();
            evaluate_both(&p, &per, log)
        };
        let constrained_rl = train(&train_env);
        let unconstrained_rl = train(&train_env.clone().unconstrained());

        let spec4 = SceneSpec { num_classes: 4, ..spec.clone() };
        let per4 = Arc::new(Perception::new(&spec4).unwrap());
        let mut stream = SceneStream::new(spec4, cfg.data.rl_stream);
        let (_, zero_init) =
            rl_train(&PolicyParams::zeros(per4.arms()), per4, &mut stream, &train_env, &cfg.grpo, cfg.seeds.rl).unwrap();
        println!("mechanism runs took {:?}", t0.elapsed());
        Mechanism { sft, constrained_rl, unconstrained_rl, zero_init, perception: per }
    })
}

fn window_mean(log: &[StepLog], f: impl Fn(&StepLog) -> f64) -> (f64, f64) {
    let k = (log.len() / 3).max(1);
    let mean = |xs: &[StepLog]| xs.iter().map(&f).sum::<f64>() / xs.len() as f64;
    (mean(&log[..k]), mean(&log[log.len() - k..]))
}

#[test]
fn criterion_8_mechanism() {
    let m = mechanism();
    let (a, b) = (&m.constrained_rl, &m.unconstrained_rl);
    println!(
        "  sft init: constrained acc {:.2}, unconstrained acc {:.2}",
        m.sft.constrained.accuracy, m.sft.unconstrained.accuracy
    );
    for (name, r) in [("constrained RL", a), ("unconstrained RL", b)] {
        println!(
            "  {name}: constrained acc {:.2} (all-focus {:.2}, all-direct {:.2}), unconstrained acc {:.2}",
            r.constrained.accuracy, r.constrained.all_focus_ratio, r.constrained.all_direct_ratio, r.unconstrained.accuracy
        );
    }
    let pass_a = a.constrained.accuracy >= 0.9 && a.constrained.all_focus_ratio >= 0.8;
    let pass_b = b.constrained.accuracy <= a.constrained.accuracy - 0.20
        && (b.unconstrained.accuracy - a.unconstrained.accuracy).abs() <= 0.05;
    let (early, late) = window_mean(&m.zero_init, |l| l.all_direct_ratio);
    let (early_share, late_share) = window_mean(&m.zero_init, |l| l.direct_rollouts);
    let series: Vec<String> = m.zero_init.iter().map(|l| format!("{:.2}", l.all_direct_ratio)).collect();
    println!("  zero-init all-direct ratio per step: {}", series.join(" "));
    let pass_c = late > early;
    let tokens = |r: &Regime| r.log.iter().map(|l| l.visual_tokens).sum::<usize>();
    let (ta, tb) = (tokens(a), tokens(b));
    let pass_d = 2 * ta <= tb;
    println!("  (a) {}  (b) {}  (c) {} all-direct {early:.3} -> {late:.3}, direct-rollout share {early_share:.3} -> {late_share:.3}  (d) {} tokens {ta} vs {tb}",
        verdict(pass_a), verdict(pass_b), verdict(pass_c), verdict(pass_d));
    report(
        8,
        pass_a && pass_b && pass_c && pass_d,
        format!(
            "a: {:.2}/{:.2} b: {:.2} vs {:.2} (unconstrained {:.2} vs {:.2}) c: {early:.3}->{late:.3} d: {ta}/{tb}",
            a.constrained.accuracy,
            a.constrained.all_focus_ratio,
            b.constrained.accuracy,
            a.constrained.accuracy,
            b.unconstrained.accuracy,
            a.unconstrained.accuracy
        ),
    );
}

fn verdict(ok: bool) -> &'static str {
    if ok {
        "ok"
    } else {
        "miss"
    }
}

#[test]
fn criterion_9_budget_sweep() {
    let m = mechanism();
    let scenes = scene_manifest(&SceneSpec::default(), run_config().data.eval_stream, EVAL_SCENES).unwrap();
    let budgets = [128, 256, 512, 1024];
    let cfg = EvalConfig::default();
    let pol = SoftmaxPolicy::new(Arc::new(m.constrained_rl.params.clone()), m.perception.clone()).unwrap();
    let trained = budget_sweep(&pol, &scenes, &cfg, &budgets).unwrap();
    let oracle = budget_sweep(&OraclePolicy::new(m.perception.clone()), &scenes, &cfg, &budgets).unwrap();
    let acc: Vec<f64> = trained.iter().map(|(_, r)| r.accuracy).collect();
    let monotone = acc.windows(2).all(|w| w[1] >= w[0] - 0.03);
    let flat = oracle.iter().all(|(_, r)| r.accuracy == 1.0);
    report(9, monotone && flat, format!("trained {acc:?}, oracle {:?}", oracle.iter().map(|(_, r)| r.accuracy).collect::<Vec<_>>()));
}

#[test]
fn budget_helpers_agree() {
    let cfg = BudgetConfig::default();
    for side in [280usize, 1024, 1792, 4480] {
        assert_eq!(budget_for_dims(side, side, &cfg), compute_budget(&ImageBuffer::filled(side, side, 1, 0.0), &cfg));
    }
}
