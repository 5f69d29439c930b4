//! Comparison pretraining objectives sharing the encoder and sequence model:
//! next-behavior prediction, masked-day modeling, contrastive local shuffles,
//! multi-behavior presence prediction, and purely supervised training.
//!
//! A "behavior" here is the first id of an event. Method-specific output
//! layers live in the model's auxiliary tensors so checkpoints stay mutually
//! loadable on the shared prefixes.

use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{bucketize, SampleWindows, UbsSample, WindowPlan};
use crate::error::{Error, Result};
use crate::finetune::{classification_loss, FinetuneMode, FinetuneObjective};
use crate::model::UbsModel;
use crate::nn::uniform;
use crate::tensor::{Tape, Tensor, Var};
use crate::train::{BatchLoss, ModelVars, Objective, Trainable};

pub const MBM1_RATIO: f64 = 0.1;
pub const MBM2_RATIO: f64 = 0.2;
pub const MSDP_DEFAULT_VOCAB: usize = 200;
pub const CTS_TEMPERATURE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum BaselineKind {
    Nbp,
    Mbm { mask_ratio: f64 },
    Cts,
    Msdp { vocab_size: usize },
    Supervised,
}

fn first_id(w: &SampleWindows, event: usize) -> usize {
    w.ids[w.event_rows[event].0]
}

fn output_layer(model: &mut UbsModel, name: &str, outputs: usize, rng: &mut impl Rng) {
    let d = model.config.d_model();
    let bound = (1.0 / d as f64).sqrt();
    model
        .aux
        .insert(format!("{}.w", name), uniform(&[d, outputs], bound, rng));
    model.aux.insert(format!("{}.b", name), Tensor::zeros(&[outputs]));
}

/// `h[rows] W + b` with the auxiliary layer `name`.
fn aux_logits<'t>(vars: &ModelVars<'t>, name: &str, h: Var<'t>, rows: &[usize]) -> Result<Var<'t>> {
    h.gather_rows(rows)?
        .matmul(vars.aux(&format!("{}.w", name))?)?
        .add_bias(vars.aux(&format!("{}.b", name))?)
}

fn mean_of<'t>(losses: Vec<Var<'t>>) -> Result<Option<Var<'t>>> {
    let n = losses.len();
    let mut acc: Option<Var<'t>> = None;
    for l in losses {
        acc = Some(match acc {
            None => l,
            Some(a) => a.add(l)?,
        });
    }
    Ok(acc.map(|a| a.scale(1.0 / n as f64)))
}

fn shared_trainable() -> Trainable {
    Trainable {
        student: true,
        seq: true,
        aux: true,
        ..Default::default()
    }
}

// ---------------------------------------------------------------------------

/// `(position, target id)` pairs: each non-empty day predicts the first
/// behavior of the next non-empty day.
pub fn nbp_targets(w: &SampleWindows) -> Vec<(usize, usize)> {
    let days: Vec<usize> = (0..w.buckets.len())
        .filter(|&k| w.buckets[k].1 > w.buckets[k].0)
        .collect();
    days.windows(2)
        .map(|p| (p[0], first_id(w, w.buckets[p[1]].0)))
        .collect()
}

/// Next-behavior prediction with a causal softmax over all ids.
pub struct NbpObjective {
    pub plan: WindowPlan,
}

impl NbpObjective {
    pub const AUX: &'static str = "nbp";

    pub fn init_aux(model: &mut UbsModel, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let classes = model.config.max_id as usize + 1;
        output_layer(model, Self::AUX, classes, &mut rng);
    }
}

impl Objective for NbpObjective {
    fn trainable(&self) -> Trainable {
        shared_trainable()
    }

    fn batch_loss<'t>(
        &mut self,
        _tape: &'t Tape,
        vars: &ModelVars<'t>,
        batch: &[&UbsSample],
    ) -> Result<BatchLoss<'t>> {
        let mut losses = Vec::new();
        let mut terms = 0;
        let mut skipped = 0;
        for s in batch {
            let w = SampleWindows::build(s, &self.plan, vars.config.max_id, vars.config.m_max)?;
            let pairs = nbp_targets(&w);
            if pairs.is_empty() {
                log::warn!("user {}: fewer than two active days, skipped", s.user_id);
                skipped += 1;
                continue;
            }
            let valid = w.valid_positions();
            let h = vars.seq.forward(vars.student.pool_buckets(&w)?, &valid, true)?.h;
            let (rows, labels): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
            let logits = aux_logits(vars, Self::AUX, h, &rows)?;
            losses.push(classification_loss(logits, &labels)?);
            terms += rows.len();
        }
        Ok(BatchLoss {
            loss: mean_of(losses)?,
            terms,
            skipped,
        })
    }
}

// ---------------------------------------------------------------------------

/// Most frequent first id of each day (ties to the smallest id); `None` for
/// empty days.
pub fn modal_ids(w: &SampleWindows) -> Vec<Option<usize>> {
    w.buckets
        .iter()
        .map(|&(a, b)| {
            let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
            for e in a..b {
                *counts.entry(first_id(w, e)).or_default() += 1;
            }
            let mut best: Option<(usize, usize)> = None;
            for (id, n) in counts {
                if best.is_none_or(|(_, m)| n > m) {
                    best = Some((id, n));
                }
            }
            best.map(|(id, _)| id)
        })
        .collect()
}

/// Picks masked positions among `valid` ones: each independently with
/// probability `ratio`, falling back to one uniformly chosen position when
/// none was drawn.
pub fn sample_mask(valid: &[bool], ratio: f64, rng: &mut impl Rng) -> Vec<usize> {
    let candidates: Vec<usize> = (0..valid.len()).filter(|&k| valid[k]).collect();
    if candidates.is_empty() {
        return Vec::new();
    }
    let mut masked: Vec<usize> = candidates
        .iter()
        .copied()
        .filter(|_| rng.random::<f64>() < ratio)
        .collect();
    if masked.is_empty() {
        masked.push(*candidates.choose(rng).expect("non-empty"));
    }
    masked
}

/// Masked-day modeling: some days are replaced by a learned mask embedding
/// and the bidirectional model predicts each masked day's modal behavior.
pub struct MbmObjective {
    pub plan: WindowPlan,
    pub mask_ratio: f64,
    rng: ChaCha8Rng,
}

impl MbmObjective {
    pub const AUX: &'static str = "mbm";
    pub const MASK: &'static str = "mbm.mask";

    pub fn new(plan: WindowPlan, mask_ratio: f64, seed: u64) -> Result<Self> {
        if !(mask_ratio > 0.0 && mask_ratio <= 1.0) {
            return Err(Error::Config(format!("mask ratio must be in (0, 1], got {}", mask_ratio)));
        }
        Ok(Self {
            plan,
            mask_ratio,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn init_aux(model: &mut UbsModel, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = model.config.d_model();
        let classes = model.config.max_id as usize + 1;
        output_layer(model, Self::AUX, classes, &mut rng);
        model.aux.insert(Self::MASK.into(), uniform(&[d], 0.02, &mut rng));
    }
}

impl Objective for MbmObjective {
    fn trainable(&self) -> Trainable {
        shared_trainable()
    }

    fn batch_loss<'t>(
        &mut self,
        tape: &'t Tape,
        vars: &ModelVars<'t>,
        batch: &[&UbsSample],
    ) -> Result<BatchLoss<'t>> {
        let d = vars.config.d_model();
        let mask_row = vars.aux(Self::MASK)?.reshape(&[1, d])?;
        let mut losses = Vec::new();
        let mut terms = 0;
        let mut skipped = 0;
        for s in batch {
            let w = SampleWindows::build(s, &self.plan, vars.config.max_id, vars.config.m_max)?;
            let valid = w.valid_positions();
            let masked = sample_mask(&valid, self.mask_ratio, &mut self.rng);
            if masked.is_empty() {
                skipped += 1;
                continue;
            }
            let k = valid.len();
            let mut keep = vec![1.0; k];
            let mut hit = vec![0.0; k];
            for &p in &masked {
                keep[p] = 0.0;
                hit[p] = 1.0;
            }
            let x = vars
                .student
                .pool_buckets(&w)?
                .row_scale(tape.constant(Tensor::new(vec![k, 1], keep)?))?
                .add(tape.constant(Tensor::new(vec![k, 1], hit)?).matmul(mask_row)?)?;
            let h = vars.seq.forward(x, &valid, false)?.h;
            let modal = modal_ids(&w);
            let labels: Vec<usize> = masked.iter().map(|&p| modal[p].expect("valid day")).collect();
            let logits = aux_logits(vars, Self::AUX, h, &masked)?;
            losses.push(classification_loss(logits, &labels)?);
            terms += masked.len();
        }
        Ok(BatchLoss {
            loss: mean_of(losses)?,
            terms,
            skipped,
        })
    }
}

// ---------------------------------------------------------------------------

/// Copy of `sample` with the event order shuffled inside every pooling bucket.
pub fn shuffle_within_buckets(sample: &UbsSample, plan: &WindowPlan, rng: &mut impl Rng) -> UbsSample {
    let mut out = sample.clone();
    for r in bucketize(sample, plan) {
        // keep timestamps in place so the sequence stays sorted
        let mut ids: Vec<_> = out.events[r.clone()].iter().map(|e| e.ids.clone()).collect();
        ids.shuffle(rng);
        for (e, i) in out.events[r].iter_mut().zip(ids) {
            e.ids = i;
        }
    }
    out
}

/// InfoNCE of `a[i]` against `b[i]` with every other row of `b` as negative,
/// over l2-normalized rows.
pub fn info_nce<'t>(a: Var<'t>, b: Var<'t>, temperature: f64) -> Result<Var<'t>> {
    let n = a.shape()[0];
    let sim = a.l2_normalize_rows().matmul(b.l2_normalize_rows().transpose()?)?;
    let labels: Vec<usize> = (0..n).collect();
    let logits = sim.scale(1.0 / temperature);
    classification_loss(logits, &labels)
}

/// Contrastive learning: a user's within-day shuffled view is the positive,
/// other users in the batch are negatives.
pub struct CtsObjective {
    pub plan: WindowPlan,
    pub temperature: f64,
    rng: ChaCha8Rng,
}

impl CtsObjective {
    pub fn new(plan: WindowPlan, seed: u64) -> Self {
        Self {
            plan,
            temperature: CTS_TEMPERATURE,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn encode<'t>(&self, vars: &ModelVars<'t>, s: &UbsSample) -> Result<Option<Var<'t>>> {
        let w = SampleWindows::build(s, &self.plan, vars.config.max_id, vars.config.m_max)?;
        let valid = w.valid_positions();
        if !valid.iter().any(|&v| v) {
            return Ok(None);
        }
        let out = vars.seq.forward(vars.student.pool_buckets(&w)?, &valid, true)?;
        Ok(Some(out.last_valid(&valid)?))
    }
}

impl Objective for CtsObjective {
    fn trainable(&self) -> Trainable {
        Trainable {
            student: true,
            seq: true,
            ..Default::default()
        }
    }

    fn min_batch(&self) -> usize {
        2
    }

    fn batch_loss<'t>(
        &mut self,
        tape: &'t Tape,
        vars: &ModelVars<'t>,
        batch: &[&UbsSample],
    ) -> Result<BatchLoss<'t>> {
        if batch.len() < 2 {
            return Err(Error::Contract(
                "contrastive training needs at least two users per batch".into(),
            ));
        }
        let mut anchors = Vec::new();
        let mut positives = Vec::new();
        let mut skipped = 0;
        for s in batch {
            let view = shuffle_within_buckets(s, &self.plan, &mut self.rng);
            match (self.encode(vars, s)?, self.encode(vars, &view)?) {
                (Some(a), Some(b)) => {
                    anchors.push(a);
                    positives.push(b);
                }
                _ => skipped += 1,
            }
        }
        if anchors.len() < 2 {
            return Ok(BatchLoss {
                loss: None,
                terms: 0,
                skipped,
            });
        }
        let n = anchors.len();
        let loss = info_nce(tape.concat(&anchors, 0)?, tape.concat(&positives, 0)?, self.temperature)?;
        Ok(BatchLoss {
            loss: Some(loss),
            terms: n,
            skipped,
        })
    }
}

// ---------------------------------------------------------------------------

/// The `k` most frequent first ids (ties to the smaller id), clipped to the
/// number of distinct ids.
pub fn top_k_vocab(dataset: &[UbsSample], k: usize, max_id: u32) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::Config("presence vocabulary size must be positive".into()));
    }
    let modulus = max_id as u64 + 1;
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for s in dataset {
        for e in &s.events {
            *counts.entry((e.ids[0] as u64 % modulus) as usize).or_default() += 1;
        }
    }
    let mut ranked: Vec<(usize, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    if k > ranked.len() {
        log::warn!(
            "presence vocabulary of {} requested but only {} distinct behaviors; clipped",
            k,
            ranked.len()
        );
    }
    Ok(ranked.into_iter().take(k).map(|(id, _)| id).collect())
}

/// `[K, |vocab|]` 0/1 matrix: row `p` marks vocabulary behaviors present in
/// prediction window `p + 1`.
pub fn presence_targets(w: &SampleWindows, vocab: &[usize]) -> Tensor {
    let slot: BTreeMap<usize, usize> = vocab.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let v = vocab.len();
    let mut t = vec![0.0; w.targets.len() * v];
    for (p, &(a, b)) in w.targets.iter().enumerate() {
        for e in a..b {
            if let Some(&j) = slot.get(&first_id(w, e)) {
                t[p * v + j] = 1.0;
            }
        }
    }
    Tensor::new(vec![w.targets.len(), v], t).expect("shape")
}

/// Multi-behavior presence: per day, binary cross-entropy on whether each
/// vocabulary behavior occurs in the next prediction window.
pub struct MsdpObjective {
    pub plan: WindowPlan,
    pub vocab: Vec<usize>,
}

impl MsdpObjective {
    pub const AUX: &'static str = "msdp";

    pub fn new(plan: WindowPlan, dataset: &[UbsSample], k: usize, max_id: u32) -> Result<Self> {
        Ok(Self {
            plan,
            vocab: top_k_vocab(dataset, k, max_id)?,
        })
    }

    pub fn init_aux(&self, model: &mut UbsModel, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        output_layer(model, Self::AUX, self.vocab.len(), &mut rng);
    }
}

impl Objective for MsdpObjective {
    fn trainable(&self) -> Trainable {
        shared_trainable()
    }

    fn batch_loss<'t>(
        &mut self,
        tape: &'t Tape,
        vars: &ModelVars<'t>,
        batch: &[&UbsSample],
    ) -> Result<BatchLoss<'t>> {
        let mut losses = Vec::new();
        let mut terms = 0;
        let mut skipped = 0;
        for s in batch {
            let w = SampleWindows::build(s, &self.plan, vars.config.max_id, vars.config.m_max)?;
            let valid = w.valid_positions();
            let rows: Vec<usize> = (0..valid.len()).filter(|&k| valid[k]).collect();
            if rows.is_empty() {
                skipped += 1;
                continue;
            }
            let h = vars.seq.forward(vars.student.pool_buckets(&w)?, &valid, true)?.h;
            let z = aux_logits(vars, Self::AUX, h, &rows)?;
            let y = tape.constant(presence_targets(&w, &self.vocab)).gather_rows(&rows)?;
            // binary cross-entropy with logits: softplus(z) - y z
            losses.push(z.softplus().sub(z.mul(y)?)?.mean(None)?);
            terms += rows.len();
        }
        Ok(BatchLoss {
            loss: mean_of(losses)?,
            terms,
            skipped,
        })
    }
}

// ---------------------------------------------------------------------------

/// Head plus every encoder parameter trained from scratch on labels.
pub fn supervised_objective(task: &str, plan: WindowPlan) -> FinetuneObjective {
    FinetuneObjective {
        task: task.to_string(),
        mode: FinetuneMode::Unfreeze,
        plan,
        all_parameters: true,
    }
}
