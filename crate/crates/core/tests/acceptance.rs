//! Acceptance gate: every criterion runs, prints one PASS/FAIL line, and the
//! test fails if any gating criterion failed.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use rand::Rng;

use common::*;
use ubs_core::data::{generate_synthetic, GeneratorConfig, SampleWindows, UbsSample, WindowPlan};
use ubs_core::finetune::{linear_probe_report, ProbeConfig};
use ubs_core::metrics::{auroc_binary, auroc_macro, ks_score};
use ubs_core::model::UbsModel;
use ubs_core::nn::Mlp;
use ubs_core::pretrain::{causal_loss, loss_ce, loss_mse, CeForm, LossConfig, LossKind};
use ubs_core::run::{self, RunConfig};
use ubs_core::seqmodel::SeqModelConfig;
use ubs_core::train::METRICS_HEADER;
use ubs_core::{Tape, Tensor};

const TASK: &str = "modal_category_10d";

struct Outcome {
    pass: bool,
    detail: String,
    /// Soft criteria are reported but never fail the gate.
    gating: bool,
}

fn hard(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail, gating: true }
}

fn within(limit: Duration, start: Instant) -> (bool, String) {
    let t = start.elapsed();
    (t <= limit, format!("{:.1}s of {}s", t.as_secs_f64(), limit.as_secs()))
}

// 1
fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let mut r = rng(1);
    let mut worst = 0.0f64;
    let mut worst_op = String::new();
    let mut checked = 0;
    for (n, half) in [(1, 1), (3, 2), (4, 2), (5, 3)] {
        for case in op_cases(&mut r, n, half) {
            let e = op_grad_error(&case, &mut r);
            checked += 1;
            if e > worst {
                worst = e;
                worst_op = case.name.clone();
            }
        }
    }
    let mut full = 0.0f64;
    let mut vacuous = 0;
    for (kind, form) in [
        (LossKind::CrossEntropy, CeForm::Distillation),
        (LossKind::CrossEntropy, CeForm::Literal),
        (LossKind::Mse, CeForm::Distillation),
    ] {
        let (e, tensors, nonzero) = byb_gradient_error(kind, form);
        full = full.max(e);
        vacuous += tensors - nonzero;
    }
    let (fast, t) = within(Duration::from_secs(60), start);
    hard(
        worst <= GRAD_RTOL && full <= GRAD_RTOL && vacuous == 0 && fast,
        format!(
            "{} op cases, worst {:.2e} ({}); full loss worst {:.2e} ({} tensors without gradient); {}",
            checked, worst, worst_op, full, vacuous, t
        ),
    )
}

// 2
fn stop_gradient() -> Outcome {
    let data = small_data(6, 8, 21);
    let model = tiny_model(8, 99, 21);
    let g = [LossKind::CrossEntropy, LossKind::Mse]
        .into_iter()
        .map(|k| teacher_gradient_max(&model, &data, 8, k))
        .fold(0.0, f64::max);
    let mut frozen = model.clone();
    frozen.encoders.momentum = 1.0;
    let before = frozen.encoders.teacher.clone();
    let opts = ubs_core::train::TrainOptions { epochs: 1, batch_size: 2, ..Default::default() };
    let steps = ubs_core::train::train(&mut frozen, &data, &mut byb(8, LossKind::CrossEntropy), &opts, |_, _| Ok(()))
        .unwrap()
        .len();
    let unchanged = frozen.encoders.teacher == before;
    hard(
        g == 0.0 && unchanged,
        format!("max |teacher grad| = {:e}; teacher bitwise unchanged after {} steps at m=1: {}", g, steps, unchanged),
    )
}

// 3
fn ema_exactness() -> Outcome {
    let data = small_data(16, 8, 31);
    let mut model = tiny_model(8, 99, 31);
    let m = model.encoders.momentum;
    let (err, steps) = ema_rule_error(&mut model, &data, 8);
    hard(m == 0.995 && err <= 1e-12, format!("m = {}, {} steps, max deviation {:.2e}", m, steps, err))
}

// 4
fn causality() -> Outcome {
    let bad = causality_violations(100, 41);
    hard(bad == 0, format!("{} of 100 perturbations changed an earlier output", bad))
}

// 5
fn parameter_counts() -> Outcome {
    let count = |name: &str| SeqModelConfig::preset(name).unwrap().count_params();
    let (b, b2) = (count("base"), count("base_x2"));
    let others: Vec<String> = ["base_x4", "base_x8", "base_x16"].iter().map(|n| format!("{}={}", n, count(n))).collect();
    hard(
        b == 395_264 && b2 == 790_528,
        format!("base={} base_x2={} (informational: {})", b, b2, others.join(" ")),
    )
}

// 6
fn pooling_length() -> Outcome {
    let data = generate_synthetic(&GeneratorConfig { num_users: 1000, seed: 61, ..Default::default() }).unwrap();
    let plan = WindowPlan::daily(60);
    let mean_raw = data.iter().map(|s| s.count_before(plan.observation_seconds)).sum::<usize>() as f64 / data.len() as f64;
    let mut lengths_ok = data.iter().all(|s| SampleWindows::build(s, &plan, 999, 8).unwrap().num_positions() == 60);
    for pool_days in [2u64, 3, 5, 12] {
        let p = WindowPlan::new(pool_days * 86_400, 86_400, 60 * 86_400).unwrap();
        lengths_ok &= data[..50]
            .iter()
            .all(|s| SampleWindows::build(s, &p, 999, 8).unwrap().num_positions() == (60 / pool_days) as usize);
    }
    hard(
        (1150.0..=1250.0).contains(&mean_raw) && lengths_ok,
        format!("mean raw length {:.1} -> pooled 60; T/dT1 holds for every sample and window size: {}", mean_raw, lengths_ok),
    )
}

// 7
fn throughput() -> Outcome {
    let start = Instant::now();
    let data = generate_synthetic(&GeneratorConfig { num_users: 120, seed: 71, ..Default::default() }).unwrap();
    let cfg = RunConfig { batch_size: 8, warmup_steps: 5, bench_steps: 10, ..desk_config(7) };
    let rep = run::bench(&cfg, &data).unwrap();
    let (fast, t) = within(Duration::from_secs(600), start);
    hard(
        rep.pooled_vs_unpooled_speedup >= 3.0 && fast,
        format!(
            "pooled {:.1} samples/s vs unpooled {:.2} samples/s = {:.1}x; peak tape bytes {} vs {}; {}",
            rep.pooled.samples_per_second,
            rep.unpooled.samples_per_second,
            rep.pooled_vs_unpooled_speedup,
            rep.pooled.peak_resident_bytes,
            rep.unpooled.peak_resident_bytes,
            t
        ),
    )
}

fn probe(model: &UbsModel, ft: &[UbsSample], te: &[UbsSample], plan: &WindowPlan) -> f64 {
    linear_probe_report(model, ft, te, TASK, 10, plan, &ProbeConfig::default()).unwrap().value
}

// 8
fn representation_quality() -> Outcome {
    let start = Instant::now();
    let gen = |users, seed| {
        generate_synthetic(&GeneratorConfig { num_users: users, seed, drift_strength: 0.5, periodicity_strength: 0.5, ..Default::default() })
            .unwrap()
    };
    let mut lines = Vec::new();
    let mut wins = 0;
    for seed in 0..3u64 {
        let cfg = desk_config(seed);
        let plan = cfg.plan().unwrap();
        let ft = gen(5000, 2000 + seed);
        let te = gen(5000, 3000 + seed);
        let random = UbsModel::init(cfg.model_config().unwrap(), seed).unwrap();
        let base = probe(&random, &ft, &te, &plan);
        let trained = {
            let pre = gen(20_000, 1000 + seed);
            run::pretrain(&cfg, &pre, None).unwrap().0
        };
        let got = probe(&trained, &ft, &te, &plan);
        if got >= base + 0.05 {
            wins += 1;
        }
        lines.push(format!("seed {}: {:.4} vs random {:.4} ({:+.4})", seed, got, base, got - base));
    }
    let (fast, t) = within(Duration::from_secs(1800), start);
    hard(wins == 3 && fast, format!("{}/3 seeds; {}; {}", wins, lines.join("; "), t))
}

// 9
fn metric_oracles() -> Outcome {
    let mut r = rng(9);
    let mut worst = [0.0f64; 3];
    for _ in 0..1000 {
        let n = r.random_range(2..80);
        let s = tied_scores(&mut r, n);
        let y = binary_labels(&mut r, n);
        worst[0] = worst[0].max((auroc_binary(&s, &y).unwrap() - auroc_pairs(&s, &y)).abs());
        worst[2] = worst[2].max((ks_score(&s, &y).unwrap() - ks_ecdf(&s, &y)).abs());
        let classes = r.random_range(2..7);
        let m = r.random_range(3..60);
        let scores: Vec<Vec<f64>> = (0..m).map(|_| tied_scores(&mut r, classes)).collect();
        let mut labels: Vec<usize> = (0..m).map(|_| r.random_range(0..classes)).collect();
        labels[0] = 0;
        labels[1] = 1;
        worst[1] = worst[1].max((auroc_macro(&scores, &labels).unwrap() - auroc_macro_pairs(&scores, &labels)).abs());
    }
    hard(
        worst.iter().all(|&w| w <= 1e-12),
        format!("1000 cases each; max |diff| binary {:.1e}, macro {:.1e}, ks {:.1e}", worst[0], worst[1], worst[2]),
    )
}

// 10
fn loss_identities() -> Outcome {
    let mut r = rng(10);
    let mut mse_max = 0.0f64;
    let mut shift_max = 0.0f64;
    for _ in 0..500 {
        let d = r.random_range(1..32);
        let p = rand_tensor(&mut r, &[d], -3.0, 3.0);
        let t = rand_tensor(&mut r, &[d], -3.0, 3.0);
        mse_max = mse_max.max(loss_mse(&p, &p).unwrap().abs());
        let c: f64 = r.random_range(-50.0..50.0);
        let tau: f64 = r.random_range(0.05..2.0);
        let shift = |x: &Tensor| Tensor::vector(x.data().iter().map(|v| v + c).collect());
        for form in [CeForm::Distillation, CeForm::Literal] {
            let base = loss_ce(&p, &t, tau, form).unwrap();
            shift_max = shift_max.max((loss_ce(&shift(&p), &t, tau, form).unwrap() - base).abs());
            shift_max = shift_max.max((loss_ce(&p, &shift(&t), tau, form).unwrap() - base).abs());
        }
    }
    let mut causal_max = 0.0f64;
    let mut mismatched = 0;
    let mut cases = 0;
    for seed in 0..200u64 {
        let days = r.random_range(2..10);
        let plan = WindowPlan::daily(days as u64);
        let data = small_data(1, days, seed);
        let w = windows(&data[0], &plan, 99);
        let d = r.random_range(2..8);
        let h = rand_tensor(&mut r, &[days, d], -2.0, 2.0);
        let targets = rand_tensor(&mut r, &[days, d], -2.0, 2.0);
        let mlp = Mlp::init(d, 6, d, &mut r);
        let use_pred = r.random_bool(0.5);
        let cfg = LossConfig {
            kind: if r.random_bool(0.5) { LossKind::Mse } else { LossKind::CrossEntropy },
            ce_form: if r.random_bool(0.5) { CeForm::Literal } else { CeForm::Distillation },
            temperature: r.random_range(0.05..1.0),
        };
        let tape = Tape::new();
        let pv = mlp.bind_mlp(&tape, false);
        let got = causal_loss(tape.constant(h.clone()), use_pred.then_some(&pv), tape.constant(targets.clone()), &w, &cfg).unwrap();
        let want = causal_loss_oracle(&h, use_pred.then_some(&mlp), &targets, &data[0], &plan, &cfg);
        match (got, want) {
            (Some((l, _)), Some(o)) => {
                causal_max = causal_max.max((l.item().unwrap() - o).abs());
                cases += 1;
            }
            (None, None) => {}
            _ => mismatched += 1,
        }
    }
    hard(
        mse_max == 0.0 && shift_max <= 1e-10 && causal_max <= 1e-12 && mismatched == 0,
        format!(
            "mse(x,x) max {:.1e}; ce shift max {:.1e}; causal vs oracle max {:.1e} over {} samples, {} skip mismatches",
            mse_max, shift_max, causal_max, cases, mismatched
        ),
    )
}

fn metrics_rows(path: &Path) -> Vec<String> {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines().map(String::from);
    assert_eq!(lines.next().as_deref(), Some(METRICS_HEADER));
    lines.collect()
}

// 11
fn ablations() -> Outcome {
    let gen = |users, seed| generate_synthetic(&GeneratorConfig { num_users: users, seed, ..Default::default() }).unwrap();
    let pre = gen(2000, 111);
    let ft = gen(1000, 112);
    let te = gen(1000, 113);
    let variants: [(&str, fn(&mut RunConfig)); 4] = [
        ("byb", |_| {}),
        ("no-ema", |c| c.use_ema = false),
        ("mse-loss", |c| c.loss = LossKind::Mse),
        ("no-predictor", |c| c.use_predictor = false),
    ];
    let mut ok = true;
    let mut parts = Vec::new();
    for (name, apply) in variants {
        let mut cfg = desk_config(11);
        apply(&mut cfg);
        let dir = tempfile::tempdir().unwrap();
        let (model, recs) = run::pretrain(&cfg, &pre, Some(dir.path())).unwrap();
        let rows = metrics_rows(&dir.path().join(run::METRICS_FILE));
        let auc = probe(&model, &ft, &te, &cfg.plan().unwrap());
        ok &= rows.len() == recs.len() && !rows.is_empty() && auc.is_finite() && dir.path().join(run::MANIFEST_FILE).exists();
        parts.push(format!("{} {:.4} ({} steps)", name, auc, rows.len()));
    }
    hard(ok, format!("probe AUROC: {}", parts.join(", ")))
}

// 12
fn attention_dump() -> Outcome {
    let mut structural = true;
    let mut worst_row = 0.0f64;
    let mut upper = 0.0f64;
    let mut lag_wins = 0;
    let mut parts = Vec::new();
    for seed in 0..3u64 {
        let data = generate_synthetic(&GeneratorConfig {
            num_users: 3000,
            seed: 120 + seed,
            periodicity_strength: 1.0,
            drift_strength: 0.0,
            ..Default::default()
        })
        .unwrap();
        let cfg = desk_config(seed);
        let plan = cfg.plan().unwrap();
        let model = run::pretrain(&cfg, &data, None).unwrap().0;
        let maps = run::attention_maps(&model, &data, &plan, 300, seed).unwrap();
        let dir = tempfile::tempdir().unwrap();
        structural &= run::write_attention(&maps, dir.path()).unwrap().len() == 2 * maps.len();
        let mut best = f64::NEG_INFINITY;
        for m in &maps {
            let k = m.shape()[0];
            for i in 0..k {
                worst_row = worst_row.max((m.row(i).iter().sum::<f64>() - 1.0).abs());
                upper = upper.max(m.row(i)[i + 1..].iter().cloned().fold(0.0, f64::max));
            }
            let on = run::last_row_lag_weight(m, &[7, 14]);
            let off = run::last_row_lag_weight(m, &[6, 8, 13, 15]);
            best = best.max(on - off);
        }
        if best > 0.0 {
            lag_wins += 1;
        }
        parts.push(format!("seed {} best layer lag{{7,14}} - lag{{6,8,13,15}} = {:+.2e}", seed, best));
    }
    structural &= worst_row <= 1e-9 && upper == 0.0;
    let lag_pass = lag_wins >= 2;
    let detail = format!(
        "rows sum to 1 within {:.1e}, max mass above diagonal {:e}; weekly lag preference {}/3 seeds (soft{}); {}",
        worst_row,
        upper,
        lag_wins,
        if lag_pass { "" } else { ", not gating" },
        parts.join("; ")
    );
    Outcome { pass: structural && lag_pass, detail, gating: structural }
}

fn without_wall_clock(rows: Vec<String>) -> Vec<String> {
    rows.into_iter().map(|r| r.rsplit_once(',').unwrap().0.to_string()).collect()
}

// 13
fn determinism() -> Outcome {
    let data = generate_synthetic(&GeneratorConfig { num_users: 400, seed: 131, ..Default::default() }).unwrap();
    let mut cfg = desk_config(13);
    cfg.task = Some(TASK.into());
    let run_once = || {
        let pre_dir = tempfile::tempdir().unwrap();
        let (mut model, _) = run::pretrain(&cfg, &data, Some(pre_dir.path())).unwrap();
        let ft_dir = tempfile::tempdir().unwrap();
        run::finetune_run(&cfg, &mut model, &data, Some(ft_dir.path())).unwrap();
        let pre = without_wall_clock(metrics_rows(&pre_dir.path().join(run::METRICS_FILE)));
        let ft = without_wall_clock(metrics_rows(&ft_dir.path().join(run::METRICS_FILE)));
        let ckpt = std::fs::read(ft_dir.path().join(run::CHECKPOINT_FILE)).unwrap();
        (pre, ft, ckpt)
    };
    let a = run_once();
    let b = run_once();
    let same = a.0 == b.0 && a.1 == b.1;
    hard(
        same && a.2 == b.2,
        format!(
            "pretrain {} rows, finetune {} rows identical (wall_ms excluded): {}; checkpoints identical: {}",
            a.0.len(),
            a.1.len(),
            same,
            a.2 == b.2
        ),
    )
}

#[test]
fn acceptance() {
    let criteria: [(&str, fn() -> Outcome); 13] = [
        ("gradient correctness", gradient_correctness),
        ("stop-gradient", stop_gradient),
        ("EMA exactness", ema_exactness),
        ("causality", causality),
        ("parameter counts", parameter_counts),
        ("pooling length contract", pooling_length),
        ("pooled throughput >= 3x unpooled", throughput),
        ("representation quality", representation_quality),
        ("metric oracles", metric_oracles),
        ("loss identities", loss_identities),
        ("ablation harness", ablations),
        ("attention dump", attention_dump),
        ("determinism", determinism),
    ];
    let mut failed = Vec::new();
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            hard(false, format!("panicked: {}", msg))
        });
        let tag = match (outcome.pass, outcome.gating) {
            (true, _) => "PASS",
            (false, true) => "FAIL",
            (false, false) => "FAIL (soft)",
        };
        println!(
            "[{}] {:>2}. {} — {} [{:.1}s]",
            tag,
            i + 1,
            name,
            outcome.detail,
            start.elapsed().as_secs_f64()
        );
        if !outcome.pass && outcome.gating {
            failed.push(i + 1);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {:?}", failed);
}
