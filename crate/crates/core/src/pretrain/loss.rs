use serde::{Deserialize, Serialize};

use crate::data::SampleWindows;
use crate::error::{Error, Result};
use crate::nn::MlpVars;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
    Mse,
}

/// Which side of the cross entropy carries the soft target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CeForm {
    /// `-sum softmax(target/τ) · log softmax(pred/τ)`
    Distillation,
    /// `-sum softmax(pred/τ) · log softmax(target/τ)`
    Literal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub kind: LossKind,
    pub temperature: f64,
    pub ce_form: CeForm,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            kind: LossKind::CrossEntropy,
            temperature: 0.1,
            ce_form: CeForm::Distillation,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// Loss per row of `[n, d]` predictions against detached targets; returns `[n]`.
pub fn row_losses<'t>(pred: Var<'t>, target: Var<'t>, cfg: &LossConfig) -> Result<Var<'t>> {
    let ps = pred.shape();
    if ps != target.shape() {
        return Err(crate::error::shape_err(
            "loss",
            format!("pred {:?} vs target {:?}", ps, target.shape()),
        ));
    }
    let axis = ps.len() - 1;
    match cfg.kind {
        LossKind::Mse => {
            let diff = pred.sub(target)?;
            diff.mul(diff)?.mean(Some(axis))
        }
        LossKind::CrossEntropy => {
            let tau = cfg.temperature;
            let (weights, logp) = match cfg.ce_form {
                CeForm::Distillation => (target.softmax(tau)?, pred.log_softmax(tau)?),
                CeForm::Literal => (pred.softmax(tau)?, target.log_softmax(tau)?),
            };
            Ok(weights.mul(logp)?.sum(Some(axis))?.scale(-1.0))
        }
    }
}

fn check_pair(pred: &Tensor, target: &Tensor) -> Result<()> {
    if pred.shape() != target.shape() {
        return Err(crate::error::shape_err(
            "loss",
            format!("pred {:?} vs target {:?}", pred.shape(), target.shape()),
        ));
    }
    if !pred.all_finite() || !target.all_finite() {
        return Err(Error::Numeric("loss input is not finite".into()));
    }
    Ok(())
}

fn scalar_loss(pred: &Tensor, target: &Tensor, cfg: &LossConfig) -> Result<f64> {
    check_pair(pred, target)?;
    cfg.validate()?;
    let tape = Tape::new();
    let p = tape.constant(pred.clone());
    let t = tape.constant(target.clone());
    row_losses(p, t, cfg)?.sum(None)?.item()
}

/// Temperature-scaled cross entropy between two `[d]` vectors.
pub fn loss_ce(pred: &Tensor, target: &Tensor, temperature: f64, form: CeForm) -> Result<f64> {
    scalar_loss(
        pred,
        target,
        &LossConfig {
            kind: LossKind::CrossEntropy,
            temperature,
            ce_form: form,
        },
    )
}

/// `(1/d) · ||pred - target||^2`.
pub fn loss_mse(pred: &Tensor, target: &Tensor) -> Result<f64> {
    scalar_loss(
        pred,
        target,
        &LossConfig {
            kind: LossKind::Mse,
            ..Default::default()
        },
    )
}

/// 0-based positions `p` whose bucket is non-empty and whose prediction
/// window `k = p + 1` holds at least one event.
pub fn contributing_positions(w: &SampleWindows) -> Vec<usize> {
    w.buckets
        .iter()
        .zip(&w.targets)
        .enumerate()
        .filter(|(_, (b, t))| b.1 > b.0 && t.1 > t.0)
        .map(|(p, _)| p)
        .collect()
}

/// Mean over rows of `loss(predict(h[rows]), targets[target_rows])`.
pub fn window_loss<'t>(
    h: Var<'t>,
    predictor: Option<&MlpVars<'t>>,
    targets: Var<'t>,
    rows: &[usize],
    target_rows: &[usize],
    cfg: &LossConfig,
) -> Result<Var<'t>> {
    let x = h.gather_rows(rows)?;
    let pred = match predictor {
        Some(p) => p.forward(x)?,
        None => x,
    };
    let target = targets.gather_rows(target_rows)?.detach();
    row_losses(pred, target, cfg)?.mean(None)
}

/// Causal objective for one sample.
///
/// `h` is the `[K, d]` sequence output and `targets` the `[K, d]` pooled
/// teacher embeddings of the prediction windows (row `p` for `k = p + 1`).
/// Returns the mean over contributing windows and their count, or `None` when
/// no window contributes.
pub fn causal_loss<'t>(
    h: Var<'t>,
    predictor: Option<&MlpVars<'t>>,
    targets: Var<'t>,
    w: &SampleWindows,
    cfg: &LossConfig,
) -> Result<Option<(Var<'t>, usize)>> {
    let rows = contributing_positions(w);
    if rows.is_empty() {
        return Ok(None);
    }
    let loss = window_loss(h, predictor, targets, &rows, &rows, cfg)?;
    Ok(Some((loss, rows.len())))
}
