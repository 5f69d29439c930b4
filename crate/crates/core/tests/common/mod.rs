//! Helpers shared by the integration tests: brute-force oracles, autodiff op
//! cases and small model fixtures.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ubs_core::data::{generate_synthetic, GeneratorConfig, SampleWindows, UbsSample, WindowPlan};
use ubs_core::model::{ModelConfig, UbsModel};
use ubs_core::nn::Mlp;
use ubs_core::pretrain::{BybObjective, LossConfig, LossKind, CeForm, PretrainConfig};
use ubs_core::seqmodel::SeqModelConfig;
use ubs_core::tensor::{
    causal_mask, check_gradients, finite_difference_gradient, GradCheckReport, OpKind,
};
use ubs_core::pretrain::AdamConfig;
use ubs_core::train::{bind_model, collect_gradients, train, Objective, TrainOptions};
use ubs_core::{Tape, Tensor};

pub const GRAD_RTOL: f64 = 1e-4;
pub const GRAD_FLOOR: f64 = 1e-8;

// ---- metric oracles ----

/// Pairwise AUROC: every (positive, negative) pair, ties count one half.
pub fn auroc_pairs(scores: &[f64], labels: &[u8]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        if labels[i] != 1 {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] != 0 {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                wins += 1.0;
            } else if si == sj {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

pub fn auroc_macro_pairs(scores: &[Vec<f64>], labels: &[usize]) -> f64 {
    let classes = scores[0].len();
    let mut total = 0.0;
    let mut used = 0;
    for c in 0..classes {
        let y: Vec<u8> = labels.iter().map(|&l| (l == c) as u8).collect();
        let pos = y.iter().filter(|&&v| v == 1).count();
        if pos == 0 || pos == y.len() {
            continue;
        }
        let s: Vec<f64> = scores.iter().map(|r| r[c]).collect();
        total += auroc_pairs(&s, &y);
        used += 1;
    }
    total / used as f64
}

/// KS by evaluating both empirical CDFs at every observed score.
pub fn ks_ecdf(scores: &[f64], labels: &[u8]) -> f64 {
    let pos: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| l == 1).map(|(s, _)| *s).collect();
    let neg: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| l == 0).map(|(s, _)| *s).collect();
    let cdf = |xs: &[f64], t: f64| xs.iter().filter(|&&x| x <= t).count() as f64 / xs.len() as f64;
    scores
        .iter()
        .map(|&t| (cdf(&pos, t) - cdf(&neg, t)).abs())
        .fold(0.0, f64::max)
}

/// Scores drawn from a small grid so ties are common.
pub fn tied_scores(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    let grid = rng.random_range(2..12);
    (0..n).map(|_| rng.random_range(0..grid) as f64 / grid as f64).collect()
}

/// Binary labels with both classes present.
pub fn binary_labels(rng: &mut impl Rng, n: usize) -> Vec<u8> {
    let mut y: Vec<u8> = (0..n).map(|_| rng.random_bool(0.4) as u8).collect();
    y[0] = 1;
    y[n - 1] = 0;
    y
}

// ---- autodiff op cases ----

pub fn rand_tensor(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Values bounded away from zero (for relu's kink).
fn off_zero(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.random_range(0.1..2.0);
            if rng.random_bool(0.5) { v } else { -v }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub struct OpCase {
    pub name: String,
    pub kind: OpKind,
    pub inputs: Vec<Tensor>,
}

/// Every catalog op on random inputs with `n` rows and `2 * half` columns.
pub fn op_cases(rng: &mut impl Rng, n: usize, half: usize) -> Vec<OpCase> {
    let d = 2 * half;
    let mut r = |s: &[usize]| rand_tensor(rng, s, -2.0, 2.0);
    let x = r(&[n, d]);
    let y = r(&[n, d]);
    let z = r(&[n, d]);
    let w = r(&[d, 3]);
    let bias = r(&[d]);
    let gamma = r(&[d]);
    let beta = r(&[d]);
    let small = r(&[1, d]);
    let weights = r(&[n]);
    let mut cases = vec![
        ("add", OpKind::Add, vec![x.clone(), y.clone()]),
        ("sub", OpKind::Sub, vec![x.clone(), y.clone()]),
        ("mul", OpKind::Mul, vec![x.clone(), y.clone()]),
        ("matmul", OpKind::MatMul, vec![x.clone(), w]),
        ("gather_rows", OpKind::GatherRows(vec![n - 1, 0, n - 1]), vec![x.clone()]),
        ("sigmoid", OpKind::Sigmoid, vec![x.clone()]),
        ("softmax", OpKind::Softmax { temperature: 0.5 }, vec![x.clone()]),
        ("log_softmax", OpKind::LogSoftmax { temperature: 0.1 }, vec![x.clone()]),
        ("exp", OpKind::Exp, vec![x.clone()]),
        ("mean_all", OpKind::Mean(None), vec![x.clone()]),
        ("mean_rows", OpKind::Mean(Some(0)), vec![x.clone()]),
        ("sum_cols", OpKind::Sum(Some(1)), vec![x.clone()]),
        ("sum_all", OpKind::Sum(None), vec![x.clone()]),
        ("layer_norm", OpKind::LayerNorm { eps: 1e-5 }, vec![x.clone(), gamma, beta]),
        (
            "attention",
            OpKind::Attention { heads: 2, mask: causal_mask(n) },
            vec![x.clone(), y.clone(), z.clone()],
        ),
        ("concat_rows", OpKind::Concat(0), vec![x.clone(), small]),
        ("concat_cols", OpKind::Concat(1), vec![x.clone(), y.clone()]),
        ("slice", OpKind::Slice { axis: 1, start: 1, end: d }, vec![x.clone()]),
        ("transpose", OpKind::Transpose, vec![x.clone()]),
        ("add_bias", OpKind::AddBias, vec![x.clone(), bias]),
        ("scale", OpKind::Scale(-1.7), vec![x.clone()]),
        ("row_scale", OpKind::RowScale, vec![x.clone(), weights]),
        (
            "segment_sum",
            OpKind::SegmentSum(vec![(0, n), (n - 1, n), (0, 0)]),
            vec![x.clone()],
        ),
        ("softplus", OpKind::Softplus, vec![x.clone()]),
        ("l2_normalize_rows", OpKind::L2NormalizeRows, vec![x.clone()]),
        ("reshape", OpKind::Reshape(vec![d, n]), vec![x.clone()]),
    ];
    cases.push(("relu", OpKind::Relu, vec![off_zero(rng, &[n, d])]));
    cases.push(("log", OpKind::Log, vec![rand_tensor(rng, &[n, d], 0.5, 2.0)]));
    cases
        .into_iter()
        .map(|(name, kind, inputs)| OpCase { name: name.into(), kind, inputs })
        .collect()
}

/// Worst relative gradient error of `case` over all of its inputs. The op
/// output is contracted with fixed random weights so every output element
/// carries a distinct upstream gradient.
pub fn op_grad_error(case: &OpCase, rng: &mut impl Rng) -> f64 {
    let out_shape = {
        let tape = Tape::new();
        let vs: Vec<_> = case.inputs.iter().map(|t| tape.constant(t.clone())).collect();
        tape.apply(&case.kind, &vs).unwrap().shape()
    };
    let contract = rand_tensor(rng, &out_shape, -1.0, 1.0);
    let mut worst = 0.0f64;
    for wrt in 0..case.inputs.len() {
        let report = check_gradients(
            |tape, leaf| {
                let vs: Vec<_> = case
                    .inputs
                    .iter()
                    .enumerate()
                    .map(|(i, t)| if i == wrt { leaf } else { tape.constant(t.clone()) })
                    .collect();
                tape.apply(&case.kind, &vs)?
                    .mul(tape.constant(contract.clone()))?
                    .sum(None)
            },
            &case.inputs[wrt],
            1e-4,
        )
        .unwrap();
        worst = worst.max(report.max_relative_error(GRAD_FLOOR));
    }
    worst
}

// ---- model fixtures ----

pub fn tiny_seq(d: usize, layers: usize, heads: usize) -> SeqModelConfig {
    SeqModelConfig {
        d_model: d,
        ff_dim: d,
        num_layers: layers,
        num_heads: heads,
        max_positions: 128,
        position_scale: 1.0,
    }
}

pub fn tiny_model(d: usize, max_id: u32, seed: u64) -> UbsModel {
    let cfg = ModelConfig {
        seq: tiny_seq(d, 2, 2),
        max_id,
        m_max: 4,
        predictor_hidden: 8,
        head_hidden: 8,
        ..Default::default()
    };
    UbsModel::init(cfg, seed).unwrap()
}

pub fn small_data(users: usize, days: usize, seed: u64) -> Vec<UbsSample> {
    generate_synthetic(&GeneratorConfig {
        num_users: users,
        num_days: days,
        horizon_days: 5,
        avg_events_per_day: 4.0,
        vocab_size: 99,
        num_categories: 5,
        seed,
        ..Default::default()
    })
    .unwrap()
}

pub fn byb(days: u64, kind: LossKind) -> BybObjective {
    BybObjective::new(PretrainConfig {
        plan: WindowPlan::daily(days),
        loss: LossConfig { kind, ..Default::default() },
        ..Default::default()
    })
    .unwrap()
}

/// Worst relative error between analytic and central-difference gradients of
/// the full pretraining loss, over every trainable tensor. Miniature model:
/// d = 8, two layers, 4 daily buckets, two users. The predictor's output
/// layer is randomized (it starts at zero, which would block every upstream
/// gradient). Also returns how many tensors got a nonzero gradient.
pub fn byb_gradient_error(kind: LossKind, form: CeForm) -> (f64, usize, usize) {
    let data = generate_synthetic(&GeneratorConfig {
        num_users: 2,
        num_days: 4,
        horizon_days: 1,
        avg_events_per_day: 3.0,
        vocab_size: 19,
        num_categories: 2,
        seed: 5,
        ..Default::default()
    })
    .unwrap();
    let batch: Vec<&UbsSample> = data.iter().collect();
    let mut model = tiny_model(8, 19, 3);
    let shape = model.predictor.w2.shape().to_vec();
    model.predictor.w2 = rand_tensor(&mut rng(3), &shape, -0.3, 0.3);
    let mut obj = BybObjective::new(PretrainConfig {
        plan: WindowPlan::daily(4),
        loss: LossConfig { kind, ce_form: form, ..Default::default() },
        ..Default::default()
    })
    .unwrap();
    let set = obj.trainable();
    let tape = Tape::new();
    let vars = bind_model(&model, &tape, &set);
    let loss = obj.batch_loss(&tape, &vars, &batch).unwrap().loss.unwrap();
    let grads = tape.backward(loss).unwrap();
    let named = collect_gradients(&vars, &grads, &set);
    let mut worst = 0.0f64;
    let nonzero = named.iter().filter(|(_, g)| g.data().iter().any(|&v| v.abs() > 1e-9)).count();
    for (name, analytic) in &named {
        let base = model.named_tensors().into_iter().find(|(n, _)| n == name).unwrap().1;
        let numeric = finite_difference_gradient(
            |x| {
                let entries = model
                    .named_tensors()
                    .into_iter()
                    .map(|(n, t)| if &n == name { (n, x.clone()) } else { (n, t) })
                    .collect();
                let m = UbsModel::from_tensors(entries)?;
                let tape = Tape::new();
                let vars = bind_model(&m, &tape, &set);
                obj.batch_loss(&tape, &vars, &batch)?.loss.unwrap().item()
            },
            &base,
            1e-5,
        )
        .unwrap();
        let r = GradCheckReport { analytic: analytic.clone(), numeric };
        worst = worst.max(r.max_relative_error(GRAD_FLOOR));
    }
    (worst, named.len(), nonzero)
}

// ---- causal loss oracle ----

fn softmax(x: &[f64], tau: f64) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| ((v - m) / tau).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn mlp_row(m: &Mlp, x: &[f64]) -> Vec<f64> {
    let (h, o) = (m.hidden_dim(), m.output_dim());
    let hid: Vec<f64> = (0..h)
        .map(|j| {
            let z = m.b1.data()[j] + x.iter().enumerate().map(|(i, v)| v * m.w1.data()[i * h + j]).sum::<f64>();
            z.max(0.0)
        })
        .collect();
    (0..o)
        .map(|k| m.b2.data()[k] + hid.iter().enumerate().map(|(j, v)| v * m.w2.data()[j * o + k]).sum::<f64>())
        .collect()
}

/// Mean row loss over windows found by scanning raw timestamps: position `p`
/// counts when day `p` and day `p + 1`'s prediction window both hold events.
pub fn causal_loss_oracle(
    h: &Tensor,
    predictor: Option<&Mlp>,
    targets: &Tensor,
    sample: &UbsSample,
    plan: &WindowPlan,
    cfg: &LossConfig,
) -> Option<f64> {
    let dt = plan.pool_window_seconds;
    let has = |lo: u64, hi: u64| sample.events.iter().any(|e| e.timestamp >= lo && e.timestamp < hi);
    let mut sum = 0.0;
    let mut count = 0;
    for p in 0..plan.num_buckets() {
        let start = p as u64 * dt;
        let next = start + dt;
        if !has(start, next) || !has(next, next + plan.prediction_window_seconds) {
            continue;
        }
        let pred = match predictor {
            Some(m) => mlp_row(m, h.row(p)),
            None => h.row(p).to_vec(),
        };
        let t = targets.row(p);
        let l = match cfg.kind {
            LossKind::Mse => pred.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / t.len() as f64,
            LossKind::CrossEntropy => {
                let (w, l) = match cfg.ce_form {
                    CeForm::Distillation => (softmax(t, cfg.temperature), softmax(&pred, cfg.temperature)),
                    CeForm::Literal => (softmax(&pred, cfg.temperature), softmax(t, cfg.temperature)),
                };
                -w.iter().zip(&l).map(|(a, b)| a * b.ln()).sum::<f64>()
            }
        };
        sum += l;
        count += 1;
    }
    (count > 0).then(|| sum / count as f64)
}

pub fn windows(sample: &UbsSample, plan: &WindowPlan, max_id: u32) -> SampleWindows {
    SampleWindows::build(sample, plan, max_id, 4).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---- teacher / causality checks ----

/// Largest |gradient| reaching any teacher tensor through one pretraining
/// loss, with the teacher leaves recorded as gradient-requiring.
pub fn teacher_gradient_max(model: &UbsModel, data: &[UbsSample], days: u64, kind: LossKind) -> f64 {
    let mut obj = byb(days, kind);
    obj.probe_teacher = true;
    let set = obj.trainable();
    let tape = Tape::new();
    let vars = bind_model(model, &tape, &set);
    let batch: Vec<&UbsSample> = data.iter().collect();
    let loss = obj.batch_loss(&tape, &vars, &batch).unwrap().loss.unwrap();
    let grads = tape.backward(loss).unwrap();
    vars.teacher
        .all()
        .into_iter()
        .flat_map(|v| grads.get_or_zeros(v).into_data())
        .fold(0.0, |a: f64, g| a.max(g.abs()))
}

/// Trains one epoch and returns the largest deviation of the teacher from
/// `m * previous_teacher + (1 - m) * updated_student`, checked after every step.
pub fn ema_rule_error(model: &mut UbsModel, data: &[UbsSample], days: u64) -> (f64, usize) {
    use ubs_core::nn::ParamSet;
    let m = model.encoders.momentum;
    let mut obj = byb(days, LossKind::CrossEntropy);
    let opts = TrainOptions { epochs: 1, batch_size: 4, seed: 1, adam: AdamConfig { lr: 1e-2, ..Default::default() }, max_steps: None };
    let mut prev = model.encoders.teacher.clone();
    let mut worst = 0.0f64;
    let recs = train(model, data, &mut obj, &opts, |_, model| {
        for (((_, t), (_, p)), (_, s)) in model
            .encoders
            .teacher
            .tensors()
            .into_iter()
            .zip(prev.tensors())
            .zip(model.encoders.student.tensors())
        {
            for ((tv, pv), sv) in t.data().iter().zip(p.data()).zip(s.data()) {
                worst = worst.max((tv - (m * pv + (1.0 - m) * sv)).abs());
            }
        }
        prev = model.encoders.teacher.clone();
        Ok(())
    })
    .unwrap();
    (worst, recs.len())
}

/// Random positions `j` of random inputs are perturbed; outputs before `j`
/// must stay bitwise identical. Returns the number of violating trials.
pub fn causality_violations(trials: usize, seed: u64) -> usize {
    use ubs_core::seqmodel::SeqModelParams;
    let mut r = rng(seed);
    let mut bad = 0;
    for t in 0..trials {
        let k = r.random_range(2..12);
        let d = 8;
        let params = SeqModelParams::init(tiny_seq(d, 2, 2), seed.wrapping_add(t as u64)).unwrap();
        let x = rand_tensor(&mut r, &[k, d], -2.0, 2.0);
        let mut valid: Vec<bool> = (0..k).map(|_| r.random_bool(0.8)).collect();
        valid[0] = true;
        let j = r.random_range(1..k);
        let mut y = x.clone();
        for c in 0..d {
            y.data_mut()[j * d + c] += r.random_range(-5.0..5.0);
        }
        // flipping validity at or after j must not matter either
        let mut valid_y = valid.clone();
        for v in valid_y.iter_mut().skip(j) {
            *v = r.random_bool(0.5);
        }
        let run = |x: &Tensor, valid: &[bool]| {
            let tape = Tape::new();
            params.bind_seq(&tape, false).forward(tape.constant(x.clone()), valid, true).unwrap().h.value()
        };
        let (a, b) = (run(&x, &valid), run(&y, &valid_y));
        if a.data()[..j * d] != b.data()[..j * d] {
            bad += 1;
        }
    }
    bad
}

// ---- desk-scale run settings ----

/// Small transformer used for the training-level checks: d = 32, two layers,
/// four heads, learning rate 1e-3, batch 32, one epoch.
pub fn desk_config(seed: u64) -> ubs_core::run::RunConfig {
    ubs_core::run::RunConfig {
        d_model: Some(32),
        ff_dim: Some(32),
        layers: Some(2),
        heads: Some(4),
        lr: 1e-3,
        batch_size: 32,
        epochs: 1,
        seed,
        ..Default::default()
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Mean loss of the first and of the last 10% of steps.
pub fn loss_ends(losses: &[f64]) -> (f64, f64) {
    let k = (losses.len() / 10).max(1);
    (mean(&losses[..k]), mean(&losses[losses.len() - k..]))
}
