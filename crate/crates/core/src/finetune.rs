//! Downstream training on frozen or unfrozen encoders, linear probes, and
//! evaluation reports.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{SampleWindows, UbsSample, WindowPlan};
use crate::encoder::pool_sequence;
use crate::error::{Error, Result};
use crate::metrics::{auroc_binary, auroc_macro, ks_score};
use crate::model::UbsModel;
use crate::pretrain::{Adam, AdamConfig};
use crate::tensor::{Tape, Tensor, Var};
use crate::train::{train, BatchLoss, ModelVars, Objective, StepRecord, TrainOptions, Trainable};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinetuneMode {
    /// Only the new head trains.
    Freeze,
    /// Head, sequence model and student encoder train.
    Unfreeze,
}

impl std::str::FromStr for FinetuneMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "freeze" => Ok(Self::Freeze),
            "unfreeze" => Ok(Self::Unfreeze),
            _ => Err(Error::Config(format!("mode must be freeze or unfreeze, got {:?}", s))),
        }
    }
}

/// Labeled samples of `task`; errors when none carry the label.
pub fn labeled<'a>(dataset: &'a [UbsSample], task: &str) -> Result<Vec<(&'a UbsSample, usize)>> {
    let out: Vec<_> = dataset
        .iter()
        .filter_map(|s| s.labels.get(task).map(|&l| (s, l)))
        .collect();
    if out.is_empty() {
        return Err(Error::Config(format!("no sample carries a label for task {}", task)));
    }
    Ok(out)
}

/// `E` (last valid position of the last layer) for every sample, `[N, d]`.
/// Samples without any observed behavior are dropped; the second value lists
/// the kept dataset indices.
pub fn representations(
    model: &UbsModel,
    dataset: &[UbsSample],
    plan: &WindowPlan,
) -> Result<(Tensor, Vec<usize>)> {
    let d = model.config.d_model();
    let mut data = Vec::with_capacity(dataset.len() * d);
    let mut kept = Vec::with_capacity(dataset.len());
    for (i, s) in dataset.iter().enumerate() {
        let w = SampleWindows::build(s, plan, model.config.max_id, model.config.m_max)?;
        if !w.valid_positions().iter().any(|&v| v) {
            log::warn!("user {}: no behavior in the observation window, skipped", s.user_id);
            continue;
        }
        let pooled = pool_sequence(&model.encoders.student, &w)?;
        let (_, e) = model.seq.encode_sequence(&pooled)?;
        data.extend_from_slice(e.data());
        kept.push(i);
    }
    Ok((Tensor::new(vec![kept.len(), d], data)?, kept))
}

fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    let mut t = vec![0.0; labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::Bounds {
                what: "class label",
                index: l,
                len: classes,
            });
        }
        t[i * classes + l] = 1.0;
    }
    Tensor::new(vec![labels.len(), classes], t)
}

/// Mean negative log-likelihood of `labels` under `logits` `[n, C]`.
pub fn classification_loss<'t>(logits: Var<'t>, labels: &[usize]) -> Result<Var<'t>> {
    let shape = logits.shape();
    let target = logits.tape().constant(one_hot(labels, shape[1])?);
    Ok(logits
        .log_softmax(1.0)?
        .mul(target)?
        .sum(None)?
        .scale(-1.0 / labels.len() as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub iterations: usize,
    pub lr: f64,
    pub weight_decay: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            iterations: 300,
            lr: 0.05,
            weight_decay: 1e-4,
        }
    }
}

/// Multinomial logistic regression on standardized features, trained full
/// batch from zero weights (so it is deterministic).
#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbe {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    pub w: Tensor,
    pub b: Tensor,
}

impl LinearProbe {
    fn standardize(&self, x: &Tensor) -> Result<Tensor> {
        let d = self.mean.len();
        if x.rank() != 2 || x.shape()[1] != d {
            return Err(crate::error::shape_err("probe", format!("features {:?}, expected d {}", x.shape(), d)));
        }
        let mut data = x.data().to_vec();
        for row in data.chunks_mut(d) {
            for c in 0..d {
                row[c] = (row[c] - self.mean[c]) * self.scale[c];
            }
        }
        Tensor::new(x.shape().to_vec(), data)
    }

    pub fn fit(x: &Tensor, labels: &[usize], classes: usize, cfg: &ProbeConfig) -> Result<Self> {
        let (n, d) = (x.shape()[0], x.shape()[1]);
        if n == 0 || n != labels.len() {
            return Err(Error::Contract(format!("{} feature rows for {} labels", n, labels.len())));
        }
        let mut mean = vec![0.0; d];
        let mut var = vec![0.0; d];
        for row in x.data().chunks(d) {
            mean.iter_mut().zip(row).for_each(|(m, v)| *m += v / n as f64);
        }
        for row in x.data().chunks(d) {
            for c in 0..d {
                var[c] += (row[c] - mean[c]).powi(2) / n as f64;
            }
        }
        let scale = var.iter().map(|v| 1.0 / (v.sqrt() + 1e-8)).collect();
        let mut probe = Self {
            mean,
            scale,
            w: Tensor::zeros(&[d, classes]),
            b: Tensor::zeros(&[classes]),
        };
        let xs = probe.standardize(x)?;
        let mut adam = Adam::new(AdamConfig {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            ..Default::default()
        });
        for _ in 0..cfg.iterations {
            let tape = Tape::new();
            let w = tape.leaf(probe.w.clone(), true);
            let b = tape.leaf(probe.b.clone(), true);
            let logits = tape.constant(xs.clone()).matmul(w)?.add_bias(b)?;
            let loss = classification_loss(logits, labels)?;
            let g = tape.backward(loss)?;
            let grads = [g.get_or_zeros(w), g.get_or_zeros(b)];
            adam.step(
                vec![("w".into(), &mut probe.w), ("b".into(), &mut probe.b)],
                &grads,
            )?;
        }
        Ok(probe)
    }

    /// Class probabilities per row.
    pub fn predict_proba(&self, x: &Tensor) -> Result<Vec<Vec<f64>>> {
        let xs = self.standardize(x)?;
        let tape = Tape::new();
        let p = tape
            .constant(xs)
            .matmul(tape.constant(self.w.clone()))?
            .add_bias(tape.constant(self.b.clone()))?
            .softmax(1.0)?
            .value();
        let c = self.b.numel();
        Ok(p.data().chunks(c).map(|r| r.to_vec()).collect())
    }
}

/// Supervised objective on one task's head over `E`.
pub struct FinetuneObjective {
    pub task: String,
    pub mode: FinetuneMode,
    pub plan: WindowPlan,
    /// Train everything from scratch (the supervised baseline).
    pub all_parameters: bool,
}

impl Objective for FinetuneObjective {
    fn trainable(&self) -> Trainable {
        let deep = self.all_parameters || self.mode == FinetuneMode::Unfreeze;
        Trainable {
            student: deep,
            seq: deep,
            heads: true,
            ..Default::default()
        }
    }

    fn batch_loss<'t>(
        &mut self,
        tape: &'t Tape,
        vars: &ModelVars<'t>,
        batch: &[&UbsSample],
    ) -> Result<BatchLoss<'t>> {
        let head = vars.head(&self.task)?;
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        let mut skipped = 0;
        for s in batch {
            let Some(&label) = s.labels.get(&self.task) else {
                skipped += 1;
                continue;
            };
            let w = SampleWindows::build(s, &self.plan, vars.config.max_id, vars.config.m_max)?;
            let valid = w.valid_positions();
            if !valid.iter().any(|&v| v) {
                skipped += 1;
                continue;
            }
            let out = vars.seq.forward(vars.student.pool_buckets(&w)?, &valid, true)?;
            rows.push(out.last_valid(&valid)?);
            labels.push(label);
        }
        if rows.is_empty() {
            return Ok(BatchLoss {
                loss: None,
                terms: 0,
                skipped,
            });
        }
        let e = tape.concat(&rows, 0)?;
        let loss = classification_loss(head.forward(e)?, &labels)?;
        Ok(BatchLoss {
            loss: Some(loss),
            terms: labels.len(),
            skipped,
        })
    }

    fn check_dataset(&self, dataset: &[UbsSample]) -> Result<()> {
        labeled(dataset, &self.task).map(|_| ())
    }
}

#[allow(clippy::too_many_arguments)]
/// Attaches a fresh head for `task` and trains it (plus the encoder in
/// unfreeze mode). The predictor is never touched.
pub fn finetune(
    model: &mut UbsModel,
    dataset: &[UbsSample],
    task: &str,
    num_classes: usize,
    mode: FinetuneMode,
    plan: &WindowPlan,
    opts: &TrainOptions,
    on_step: impl FnMut(&StepRecord, &UbsModel) -> Result<()>,
) -> Result<Vec<StepRecord>> {
    labeled(dataset, task)?;
    model.attach_head(task, num_classes, opts.seed)?;
    let mut obj = FinetuneObjective {
        task: task.to_string(),
        mode,
        plan: *plan,
        all_parameters: false,
    };
    train(model, dataset, &mut obj, opts, on_step)
}

/// Head probabilities for every labeled sample of `task`.
pub fn predict_task(
    model: &UbsModel,
    dataset: &[UbsSample],
    task: &str,
    plan: &WindowPlan,
) -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
    let head = model
        .heads
        .get(task)
        .ok_or_else(|| Error::Config(format!("model has no head for task {}", task)))?;
    let pairs = labeled(dataset, task)?;
    let subset: Vec<UbsSample> = pairs.iter().map(|(s, _)| (*s).clone()).collect();
    let (e, kept) = representations(model, &subset, plan)?;
    let tape = Tape::new();
    let hv = head.bind_mlp(&tape, false);
    let p = hv.forward(tape.constant(e))?.softmax(1.0)?.value();
    let c = head.output_dim();
    let scores = p.data().chunks(c).map(|r| r.to_vec()).collect();
    let labels = kept.iter().map(|&i| pairs[i].1).collect();
    Ok((scores, labels))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub task: String,
    /// `auroc` for two classes, `auroc_macro` otherwise.
    pub metric: String,
    pub value: f64,
    pub samples: usize,
    /// Fraction of class 1, for binary tasks.
    pub positive_rate: Option<f64>,
    pub ks: Option<f64>,
    pub class_histogram: Vec<usize>,
}

impl TaskReport {
    /// Scores a class-probability matrix against labels.
    pub fn from_scores(task: &str, scores: &[Vec<f64>], labels: &[usize]) -> Result<Self> {
        let classes = scores.first().map(|r| r.len()).unwrap_or(0);
        let mut hist = vec![0usize; classes];
        for &l in labels {
            if l < classes {
                hist[l] += 1;
            }
        }
        let (metric, value, positive_rate, ks) = if classes == 2 {
            let s: Vec<f64> = scores.iter().map(|r| r[1]).collect();
            let y: Vec<u8> = labels.iter().map(|&l| l as u8).collect();
            (
                "auroc",
                auroc_binary(&s, &y)?,
                Some(hist[1] as f64 / labels.len() as f64),
                Some(ks_score(&s, &y)?),
            )
        } else {
            ("auroc_macro", auroc_macro(scores, labels)?, None, None)
        };
        Ok(Self {
            task: task.to_string(),
            metric: metric.to_string(),
            value,
            samples: labels.len(),
            positive_rate,
            ks,
            class_histogram: hist,
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tasks: Vec<TaskReport>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("task,metric,value,samples,positive_rate,ks\n");
        for t in &self.tasks {
            let opt = |v: Option<f64>| v.map(|x| format!("{}", x)).unwrap_or_default();
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                t.task,
                t.metric,
                t.value,
                t.samples,
                opt(t.positive_rate),
                opt(t.ks)
            );
        }
        s
    }
}

/// Evaluates the model's head for `task` on `dataset`.
pub fn evaluate(model: &UbsModel, dataset: &[UbsSample], task: &str, plan: &WindowPlan) -> Result<TaskReport> {
    let (scores, labels) = predict_task(model, dataset, task, plan)?;
    TaskReport::from_scores(task, &scores, &labels)
}

/// Fits a linear probe on frozen `E` of `train_set` and scores `test_set`.
pub fn linear_probe_report(
    model: &UbsModel,
    train_set: &[UbsSample],
    test_set: &[UbsSample],
    task: &str,
    num_classes: usize,
    plan: &WindowPlan,
    cfg: &ProbeConfig,
) -> Result<TaskReport> {
    let fit_on = |set: &[UbsSample]| -> Result<(Tensor, Vec<usize>)> {
        let pairs = labeled(set, task)?;
        let subset: Vec<UbsSample> = pairs.iter().map(|(s, _)| (*s).clone()).collect();
        let (x, kept) = representations(model, &subset, plan)?;
        Ok((x, kept.iter().map(|&i| pairs[i].1).collect()))
    };
    let (xtr, ytr) = fit_on(train_set)?;
    let (xte, yte) = fit_on(test_set)?;
    let probe = LinearProbe::fit(&xtr, &ytr, num_classes, cfg)?;
    TaskReport::from_scores(task, &probe.predict_proba(&xte)?, &yte)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn probe_separates_clusters() {
        let mut data = Vec::new();
        let mut y = Vec::new();
        for i in 0..60 {
            let c = i % 3;
            let jitter = (i as f64 * 0.37).sin() * 0.3;
            data.extend_from_slice(&[c as f64 + jitter, -(c as f64) + jitter * 0.5]);
            y.push(c);
        }
        let x = Tensor::new(vec![60, 2], data).unwrap();
        let probe = LinearProbe::fit(&x, &y, 3, &ProbeConfig::default()).unwrap();
        let r = TaskReport::from_scores("t", &probe.predict_proba(&x).unwrap(), &y).unwrap();
        assert_eq!(r.metric, "auroc_macro");
        assert!(r.value > 0.95, "{}", r.value);
        assert_eq!(r.class_histogram, vec![20, 20, 20]);
    }

    #[test]
    fn binary_report_has_ks() {
        let scores = vec![vec![0.8, 0.2], vec![0.3, 0.7], vec![0.6, 0.4], vec![0.1, 0.9]];
        let r = TaskReport::from_scores("b", &scores, &[0, 1, 0, 1]).unwrap();
        assert_eq!(r.metric, "auroc");
        assert_eq!(r.value, 1.0);
        assert_eq!(r.ks, Some(1.0));
        assert_eq!(r.positive_rate, Some(0.5));
        let rep = EvalReport { tasks: vec![r] };
        assert!(rep.to_csv().starts_with("task,metric"));
        let back: EvalReport = serde_json::from_str(&rep.to_json().unwrap()).unwrap();
        assert_eq!(back, rep);
    }

    #[test]
    fn classification_loss_value() {
        let tape = Tape::new();
        let logits = tape.constant(Tensor::matrix(2, 2, vec![0.0, 0.0, 2.0, 0.0]).unwrap());
        let l = classification_loss(logits, &[1, 0]).unwrap().item().unwrap();
        let expect = 0.5 * (2f64.ln() + (1.0 + (-2f64).exp()).ln());
        assert!((l - expect).abs() < 1e-14);
    }
}
