//! Causal student/teacher pretraining.
//!
//! Per batch: student-encode and pool the observation buckets, run the causal
//! sequence model, predict each position's next-window teacher embedding,
//! backpropagate, step the optimizer over student + sequence model +
//! predictor, then move the teacher toward the student.

mod adam;
mod loss;

pub use adam::{Adam, AdamConfig};
pub use loss::{
    causal_loss, contributing_positions, loss_ce, loss_mse, row_losses, window_loss, CeForm,
    LossConfig, LossKind,
};

use serde::{Deserialize, Serialize};

use crate::data::{SampleWindows, UbsSample, WindowPlan};
use crate::encoder::ema_update;
use crate::error::{Error, Result};
use crate::model::UbsModel;
use crate::tensor::{Tape, Var};
use crate::train::{BatchLoss, ModelVars, Objective, Trainable};

/// Sequence fed to the transformer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SequenceMode {
    /// One position per pooling bucket.
    Pooled,
    /// One position per raw behavior, keeping the most recent `max_len`.
    Unpooled { max_len: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub plan: WindowPlan,
    pub loss: LossConfig,
    pub use_predictor: bool,
    /// `false` replaces the moving average with a plain copy (momentum 0).
    pub use_ema: bool,
    pub mode: SequenceMode,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            plan: WindowPlan::daily(60),
            loss: LossConfig::default(),
            use_predictor: true,
            use_ema: true,
            mode: SequenceMode::Pooled,
        }
    }
}

pub struct BybObjective {
    pub cfg: PretrainConfig,
    /// Also record teacher leaves as gradient-requiring (never optimized).
    pub probe_teacher: bool,
}

impl BybObjective {
    pub fn new(cfg: PretrainConfig) -> Result<Self> {
        cfg.plan.validate()?;
        cfg.loss.validate()?;
        if let SequenceMode::Unpooled { max_len: 0 } = cfg.mode {
            return Err(Error::Config("unpooled max_len must be positive".into()));
        }
        Ok(Self {
            cfg,
            probe_teacher: false,
        })
    }

    fn sample_loss<'t>(
        &self,
        vars: &ModelVars<'t>,
        w: &SampleWindows,
    ) -> Result<Option<(Var<'t>, usize)>> {
        let predictor = self.cfg.use_predictor.then_some(&vars.predictor);
        let targets = vars.teacher.pool_targets(w)?.detach();
        match self.cfg.mode {
            SequenceMode::Pooled => {
                let valid = w.valid_positions();
                if !valid.iter().any(|&v| v) {
                    return Ok(None);
                }
                let x = vars.student.pool_buckets(w)?;
                let h = vars.seq.forward(x, &valid, true)?.h;
                causal_loss(h, predictor, targets, w, &self.cfg.loss)
            }
            SequenceMode::Unpooled { max_len } => {
                let (segments, counts) = w.event_segments();
                let n = segments.len();
                let lo = n.saturating_sub(max_len);
                if lo == n {
                    return Ok(None);
                }
                // bucket of every kept event
                let mut bucket_of = Vec::with_capacity(n - lo);
                for (b, &(a, e)) in w.buckets.iter().enumerate() {
                    for ev in a.max(lo)..e {
                        debug_assert_eq!(ev - lo, bucket_of.len());
                        bucket_of.push(b);
                    }
                }
                let (rows, target_rows): (Vec<usize>, Vec<usize>) = bucket_of
                    .iter()
                    .enumerate()
                    .filter(|(_, &b)| w.targets[b].1 > w.targets[b].0)
                    .map(|(i, &b)| (i, b))
                    .unzip();
                if rows.is_empty() {
                    return Ok(None);
                }
                let x = vars
                    .student
                    .pooled(&w.ids, &w.slots, &segments[lo..], &counts[lo..])?;
                let h = vars.seq.forward(x, &vec![true; n - lo], true)?.h;
                let loss = window_loss(h, predictor, targets, &rows, &target_rows, &self.cfg.loss)?;
                Ok(Some((loss, rows.len())))
            }
        }
    }
}

impl Objective for BybObjective {
    fn trainable(&self) -> Trainable {
        Trainable {
            student: true,
            seq: true,
            predictor: self.cfg.use_predictor,
            teacher_grad_probe: self.probe_teacher,
            ..Default::default()
        }
    }

    fn batch_loss<'t>(
        &mut self,
        _tape: &'t Tape,
        vars: &ModelVars<'t>,
        batch: &[&UbsSample],
    ) -> Result<BatchLoss<'t>> {
        let mut total: Option<Var<'t>> = None;
        let mut used = 0;
        let mut terms = 0;
        let mut skipped = 0;
        for s in batch {
            let w = SampleWindows::build(s, &self.cfg.plan, vars.config.max_id, vars.config.m_max)?;
            match self.sample_loss(vars, &w)? {
                Some((l, n)) => {
                    total = Some(match total {
                        None => l,
                        Some(acc) => acc.add(l)?,
                    });
                    used += 1;
                    terms += n;
                }
                None => {
                    log::warn!("user {}: no contributing prediction windows, skipped", s.user_id);
                    skipped += 1;
                }
            }
        }
        Ok(BatchLoss {
            loss: total.map(|t| t.scale(1.0 / used as f64)),
            terms,
            skipped,
        })
    }

    fn after_step(&mut self, model: &mut UbsModel) -> Result<()> {
        let m = if self.cfg.use_ema {
            model.encoders.momentum
        } else {
            0.0
        };
        ema_update(&mut model.encoders.teacher, &model.encoders.student, m)
    }
}
