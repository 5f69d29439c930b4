//! Shared training machinery: binding a model onto a tape, selecting the
//! trainable groups, the optimizer step, and the epoch/batch loop that every
//! objective (pretraining, baselines, finetuning) runs through.

use std::collections::BTreeMap;
use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::UbsSample;
use crate::encoder::EncoderVars;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, UbsModel};
use crate::nn::{MlpVars, ParamSet};
use crate::pretrain::{Adam, AdamConfig};
use crate::seqmodel::SeqModelVars;
use crate::tensor::{Gradients, Tape, Tensor, Var};

/// Parameter groups handed to the optimizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Trainable {
    pub student: bool,
    pub seq: bool,
    pub predictor: bool,
    pub heads: bool,
    pub aux: bool,
    /// Record teacher leaves as requiring gradients (never optimized); only
    /// useful for checking that no gradient reaches them.
    pub teacher_grad_probe: bool,
}

/// The model's tensors as tape leaves.
pub struct ModelVars<'t> {
    pub config: ModelConfig,
    pub student: EncoderVars<'t>,
    pub teacher: EncoderVars<'t>,
    pub seq: SeqModelVars<'t>,
    pub predictor: MlpVars<'t>,
    pub heads: BTreeMap<String, MlpVars<'t>>,
    pub aux: BTreeMap<String, Var<'t>>,
}

impl<'t> ModelVars<'t> {
    pub fn head(&self, task: &str) -> Result<&MlpVars<'t>> {
        self.heads
            .get(task)
            .ok_or_else(|| Error::Config(format!("no head for task {}", task)))
    }

    pub fn aux(&self, name: &str) -> Result<Var<'t>> {
        self.aux
            .get(name)
            .copied()
            .ok_or_else(|| Error::State(format!("missing auxiliary tensor {}", name)))
    }
}

pub fn bind_model<'t>(model: &UbsModel, tape: &'t Tape, set: &Trainable) -> ModelVars<'t> {
    ModelVars {
        config: model.config,
        student: model.encoders.student.bind_encoder(tape, set.student),
        teacher: model.encoders.teacher.bind_encoder(tape, set.teacher_grad_probe),
        seq: model.seq.bind_seq(tape, set.seq),
        predictor: model.predictor.bind_mlp(tape, set.predictor),
        heads: model
            .heads
            .iter()
            .map(|(k, h)| (k.clone(), h.bind_mlp(tape, set.heads)))
            .collect(),
        aux: model
            .aux
            .iter()
            .map(|(k, t)| (k.clone(), tape.leaf(t.clone(), set.aux)))
            .collect(),
    }
}

/// Gradients of the trainable groups, named like checkpoint entries.
pub fn collect_gradients(vars: &ModelVars<'_>, grads: &Gradients, set: &Trainable) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    let push = |out: &mut Vec<(String, Tensor)>, prefix: &str, names: Vec<String>, vs: Vec<Var<'_>>| {
        for (n, v) in names.into_iter().zip(vs) {
            out.push((format!("{}{}", prefix, n), grads.get_or_zeros(v)));
        }
    };
    if set.student {
        push(&mut out, "student.", encoder_names(), vars.student.all());
    }
    if set.seq {
        let names = (0..vars.seq.config.num_layers)
            .flat_map(|i| LAYER_NAMES.iter().map(move |n| format!("layer{}.{}", i, n)))
            .collect();
        push(&mut out, "seqmodel.", names, vars.seq.all());
    }
    if set.predictor {
        push(&mut out, "predictor.", mlp_names(), vars.predictor.all());
    }
    if set.heads {
        for (task, h) in &vars.heads {
            push(&mut out, &format!("head.{}.", task), mlp_names(), h.all());
        }
    }
    if set.aux {
        for (name, v) in &vars.aux {
            out.push((format!("aux.{}", name), grads.get_or_zeros(*v)));
        }
    }
    out
}

const LAYER_NAMES: [&str; 10] = [
    "wq", "wk", "wv", "wo", "ff1", "ff2", "ln1_gamma", "ln1_beta", "ln2_gamma", "ln2_beta",
];

fn encoder_names() -> Vec<String> {
    ["embedding", "w1", "b1", "w2", "b2"].iter().map(|s| s.to_string()).collect()
}

fn mlp_names() -> Vec<String> {
    ["w1", "b1", "w2", "b2"].iter().map(|s| s.to_string()).collect()
}

/// Mutable references to the trainable groups, in [`collect_gradients`] order.
fn trainable_tensors<'m>(model: &'m mut UbsModel, set: &Trainable) -> Vec<(String, &'m mut Tensor)> {
    let mut out = Vec::new();
    let prefixed = |prefix: String, v: Vec<(String, &'m mut Tensor)>| {
        v.into_iter().map(move |(n, t)| (format!("{}{}", prefix, n), t))
    };
    if set.student {
        out.extend(prefixed("student.".into(), model.encoders.student.tensors_mut()));
    }
    if set.seq {
        out.extend(prefixed("seqmodel.".into(), model.seq.tensors_mut()));
    }
    if set.predictor {
        out.extend(prefixed("predictor.".into(), model.predictor.tensors_mut()));
    }
    if set.heads {
        for (task, h) in model.heads.iter_mut() {
            out.extend(prefixed(format!("head.{}.", task), h.tensors_mut()));
        }
    }
    if set.aux {
        for (name, t) in model.aux.iter_mut() {
            out.push((format!("aux.{}", name), t));
        }
    }
    out
}

/// One optimizer update of the trainable groups.
pub fn apply_gradients(
    model: &mut UbsModel,
    vars: &ModelVars<'_>,
    grads: &Gradients,
    set: &Trainable,
    adam: &mut Adam,
) -> Result<()> {
    let named = collect_gradients(vars, grads, set);
    let params = trainable_tensors(model, set);
    debug_assert!(params.iter().zip(&named).all(|((a, _), (b, _))| a == b));
    let grads: Vec<Tensor> = named.into_iter().map(|(_, g)| g).collect();
    adam.step(params, &grads)
}

/// Loss of one batch as built by an [`Objective`].
pub struct BatchLoss<'t> {
    /// `None` when no sample contributed.
    pub loss: Option<Var<'t>>,
    /// Loss terms (windows, positions, pairs) behind the value.
    pub terms: usize,
    /// Samples that contributed nothing.
    pub skipped: usize,
}

pub trait Objective {
    fn trainable(&self) -> Trainable;

    fn batch_loss<'t>(
        &mut self,
        tape: &'t Tape,
        vars: &ModelVars<'t>,
        batch: &[&UbsSample],
    ) -> Result<BatchLoss<'t>>;

    /// Runs after every optimizer step (the EMA teacher update for pretraining).
    fn after_step(&mut self, _model: &mut UbsModel) -> Result<()> {
        Ok(())
    }

    /// Smallest usable batch; a shorter trailing batch is folded into the
    /// previous one.
    fn min_batch(&self) -> usize {
        1
    }

    /// Rejects datasets the objective cannot train on.
    fn check_dataset(&self, dataset: &[UbsSample]) -> Result<()> {
        if dataset.is_empty() {
            return Err(Error::Config("empty training dataset".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub loss: f64,
    pub terms: usize,
    pub skipped: usize,
    /// Peak live tensor bytes recorded by the tape.
    pub tape_bytes: usize,
    /// Whether an update was applied.
    pub updated: bool,
}

/// Forward, backward, optimizer step, post-step hook.
pub fn train_step(
    model: &mut UbsModel,
    adam: &mut Adam,
    objective: &mut dyn Objective,
    batch: &[&UbsSample],
) -> Result<StepOutcome> {
    let set = objective.trainable();
    let tape = Tape::new();
    let vars = bind_model(model, &tape, &set);
    let bl = objective.batch_loss(&tape, &vars, batch)?;
    let Some(loss) = bl.loss else {
        log::warn!("batch of {} samples had no contributing terms; step skipped", batch.len());
        return Ok(StepOutcome {
            loss: 0.0,
            terms: 0,
            skipped: bl.skipped,
            tape_bytes: tape.bytes_in_use(),
            updated: false,
        });
    };
    let value = loss.item()?;
    if !value.is_finite() {
        return Err(Error::Numeric(format!("loss became {}", value)));
    }
    let forward_bytes = tape.bytes_in_use();
    let grads = tape.backward(loss)?;
    let tape_bytes = forward_bytes.max(tape.bytes_in_use());
    apply_gradients(model, &vars, &grads, &set, adam)?;
    objective.after_step(model)?;
    Ok(StepOutcome {
        loss: value,
        terms: bl.terms,
        skipped: bl.skipped,
        tape_bytes,
        updated: true,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    /// Stop after this many steps in total, if set.
    pub max_steps: Option<usize>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs: 2,
            batch_size: 64,
            seed: 0,
            adam: AdamConfig::default(),
            max_steps: None,
        }
    }
}

impl TrainOptions {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        self.adam.validate()
    }
}

/// One row of `metrics.csv`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub windows_contributing: usize,
    pub samples_skipped: usize,
    pub wall_ms: f64,
}

pub const METRICS_HEADER: &str = "step,epoch,loss,windows_contributing,samples_skipped,wall_ms";

impl StepRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.17e},{},{},{:.3}",
            self.step, self.epoch, self.loss, self.windows_contributing, self.samples_skipped, self.wall_ms
        )
    }
}

/// Streams step records as CSV.
pub struct MetricsCsv<W: Write> {
    out: W,
}

impl<W: Write> MetricsCsv<W> {
    pub fn new(mut out: W) -> Result<Self> {
        writeln!(out, "{}", METRICS_HEADER)?;
        Ok(Self { out })
    }

    pub fn record(&mut self, r: &StepRecord) -> Result<()> {
        writeln!(self.out, "{}", r.csv_row())?;
        self.out.flush()?;
        Ok(())
    }
}

/// Epoch/batch loop. Each epoch visits the dataset in a fresh seeded
/// permutation; `on_step` sees every record and the updated model.
pub fn train(
    model: &mut UbsModel,
    dataset: &[UbsSample],
    objective: &mut dyn Objective,
    opts: &TrainOptions,
    mut on_step: impl FnMut(&StepRecord, &UbsModel) -> Result<()>,
) -> Result<Vec<StepRecord>> {
    opts.validate()?;
    objective.check_dataset(dataset)?;
    let mut adam = Adam::new(opts.adam);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut records = Vec::new();
    let mut step = 0;
    'epochs: for epoch in 0..opts.epochs {
        order.shuffle(&mut rng);
        let mut chunks: Vec<&[usize]> = order.chunks(opts.batch_size).collect();
        if chunks.len() > 1 && chunks.last().is_some_and(|c| c.len() < objective.min_batch()) {
            let tail = chunks.pop().expect("non-empty").len();
            let last = chunks.pop().expect("two chunks");
            let start = order.len() - tail - last.len();
            chunks.push(&order[start..]);
        }
        for chunk in chunks {
            if opts.max_steps.is_some_and(|m| step >= m) {
                break 'epochs;
            }
            let batch: Vec<&UbsSample> = chunk.iter().map(|&i| &dataset[i]).collect();
            let start = Instant::now();
            let out = train_step(model, &mut adam, objective, &batch)?;
            step += 1;
            let rec = StepRecord {
                step,
                epoch,
                loss: out.loss,
                windows_contributing: out.terms,
                samples_skipped: out.skipped,
                wall_ms: start.elapsed().as_secs_f64() * 1e3,
            };
            if out.skipped > 0 {
                log::warn!("step {}: {} samples had no contributing windows", step, out.skipped);
            }
            on_step(&rec, model)?;
            records.push(rec);
        }
    }
    Ok(records)
}
