//! Central finite-difference gradient checking for anything built on a
//! [`Tape`].
//!
//! The numeric side only evaluates forward passes, so it is independent of
//! the backward rules it is used to check.

use crate::error::Result;
use crate::tensor::{Tape, Tensor, Var};

/// Outcome of checking one input tensor.
#[derive(Debug, Clone)]
pub struct GradReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    /// Worst element-wise relative error, see [`relative_error`].
    pub max_rel_err: f64,
}

/// `|a - n| / max(|a|, |n|, floor)`. The floor is `1e-3` of the largest
/// numeric gradient magnitude, so entries that are zero up to rounding are
/// compared on an absolute scale.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = numeric.iter().chain(analytic).fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (1e-3 * scale).max(1e-12);
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Compares backward-pass gradients of the scalar built by `loss` against
/// central differences with step `eps`, for every tensor in `inputs`.
pub fn check_gradients<F>(inputs: &[Tensor], loss: F, eps: f64) -> Result<Vec<GradReport>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let l = loss(&mut tape, &vars)?;
    tape.backward(l)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| tape.grad(v).map(|g| g.data().to_vec()).unwrap_or_default())
        .collect();

    let eval = |ts: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ts.iter().map(|t| tape.constant(t.clone())).collect();
        let l = loss(&mut tape, &vars)?;
        Ok(tape.value(l).data()[0])
    };

    let mut reports = Vec::with_capacity(inputs.len());
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (k, a) in analytic.into_iter().enumerate() {
        let mut numeric = Vec::with_capacity(a.len());
        for e in 0..work[k].len() {
            let orig = work[k].data()[e];
            work[k].data_mut()[e] = orig + eps;
            let up = eval(&work)?;
            work[k].data_mut()[e] = orig - eps;
            let down = eval(&work)?;
            work[k].data_mut()[e] = orig;
            numeric.push((up - down) / (2.0 * eps));
        }
        let max_rel_err = relative_error(&a, &numeric);
        reports.push(GradReport { analytic: a, numeric, max_rel_err });
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_correct_and_wrong_gradients() {
        let x = Tensor::from_vec(&[3], vec![0.3, -1.2, 2.0]).unwrap();
        let r = check_gradients(
            &[x],
            |t, v| {
                let sq = t.square(v[0])?;
                t.sum(sq)
            },
            1e-5,
        )
        .unwrap();
        assert!(r[0].max_rel_err < 1e-8);
        assert!(relative_error(&[1.0, 2.0], &[1.0, 2.5]) > 0.1);
    }
}
