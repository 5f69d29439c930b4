use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Central-difference gradient of a scalar function.
pub fn finite_difference_gradient<F>(mut f: F, x: &Tensor, eps: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if !(eps > 0.0) {
        return Err(Error::Contract(format!("eps must be positive, got {}", eps)));
    }
    let mut probe = x.clone();
    let mut grad = vec![0.0; x.numel()];
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite function value while perturbing coordinate {}",
                i
            )));
        }
        grad[i] = (plus - minus) / (2.0 * eps);
    }
    Tensor::new(x.shape().to_vec(), grad)
}

/// Analytic vs numeric gradient comparison for one input.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub analytic: Tensor,
    pub numeric: Tensor,
}

impl GradCheckReport {
    /// Largest `|a - n| / max(|a|, |n|)` over coordinates whose absolute
    /// difference exceeds `abs_floor`; coordinates under the floor count as 0.
    pub fn max_relative_error(&self, abs_floor: f64) -> f64 {
        self.analytic
            .data()
            .iter()
            .zip(self.numeric.data())
            .map(|(a, n)| {
                let diff = (a - n).abs();
                if diff <= abs_floor {
                    0.0
                } else {
                    diff / a.abs().max(n.abs())
                }
            })
            .fold(0.0, f64::max)
    }

    pub fn passes(&self, rel_tol: f64, abs_floor: f64) -> bool {
        self.max_relative_error(abs_floor) <= rel_tol
    }
}

/// Compares [`Tape::backward`] against [`finite_difference_gradient`] for a
/// graph built by `build` from the leaf `x`.
pub fn check_gradients<F>(build: F, x: &Tensor, eps: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let leaf = tape.leaf(x.clone(), true);
    let loss = build(&tape, leaf)?;
    let grads = tape.backward(loss)?;
    let analytic = grads.get_or_zeros(leaf);
    let numeric = finite_difference_gradient(
        |probe| {
            let tape = Tape::new();
            let leaf = tape.constant(probe.clone());
            build(&tape, leaf)?.item()
        },
        x,
        eps,
    )?;
    Ok(GradCheckReport { analytic, numeric })
}
