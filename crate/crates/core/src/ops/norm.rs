//! Instance normalization: per sample and channel, standardize over the
//! spatial extent, then apply a learned scale and shift.

use rayon::prelude::*;

use crate::error::{ensure, Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;

/// Forward result plus what the backward pass needs.
pub(crate) struct NormForward {
    pub output: Tensor,
    pub normalized: Vec<f64>,
    pub inv_std: Vec<f64>,
}

pub(crate) fn instance_norm_forward(
    x: &Tensor,
    scale: &[f64],
    shift: &[f64],
    eps: f64,
) -> Result<NormForward> {
    let [b, c, h, w, d] = x.dims5()?;
    ensure!(
        scale.len() == c && shift.len() == c,
        Contract,
        "scale/shift need {c} entries, got {}/{}",
        scale.len(),
        shift.len()
    );
    ensure!(eps >= 0.0, Contract, "eps must be non-negative");
    let n = h * w * d;
    let mut normalized = vec![0.0; x.len()];
    let inv_std: Vec<f64> = normalized
        .par_chunks_mut(n)
        .zip(x.data().par_chunks(n))
        .map(|(dst, src)| {
            let mean = src.iter().sum::<f64>() / n as f64;
            let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let denom = var + eps;
            if denom <= 0.0 {
                return Err(Error::Contract(
                    "instance norm over zero-variance input with eps = 0".into(),
                ));
            }
            let inv = 1.0 / denom.sqrt();
            for (o, v) in dst.iter_mut().zip(src) {
                *o = (v - mean) * inv;
            }
            Ok(inv)
        })
        .collect::<Result<_>>()?;
    let mut out = normalized.clone();
    for (idx, plane) in out.chunks_mut(n).enumerate() {
        let ch = idx % c;
        for v in plane {
            *v = scale[ch] * *v + shift[ch];
        }
    }
    Ok(NormForward { output: Tensor::from_vec(&[b, c, h, w, d], out)?, normalized, inv_std })
}

/// Returns `(d input, d scale, d shift)`.
pub(crate) fn instance_norm_backward(
    gout: &Tensor,
    normalized: &[f64],
    inv_std: &[f64],
    scale: &[f64],
) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
    let [_, c, h, w, d] = gout.dims5()?;
    let n = h * w * d;
    let nf = n as f64;
    let mut gscale = vec![0.0; c];
    let mut gshift = vec![0.0; c];
    let mut gx = vec![0.0; gout.len()];
    for (idx, ((dst, g), xhat)) in gx
        .chunks_mut(n)
        .zip(gout.data().chunks(n))
        .zip(normalized.chunks(n))
        .enumerate()
    {
        let ch = idx % c;
        let sum_g: f64 = g.iter().sum();
        let sum_gx: f64 = g.iter().zip(xhat).map(|(a, b)| a * b).sum();
        gscale[ch] += sum_gx;
        gshift[ch] += sum_g;
        let k = scale[ch] * inv_std[idx] / nf;
        for ((o, gi), xi) in dst.iter_mut().zip(g).zip(xhat) {
            *o = k * (nf * gi - sum_g - xi * sum_gx);
        }
    }
    Ok((Tensor::from_vec(gout.shape(), gx)?, gscale, gshift))
}

pub fn instance_norm(x: &Tensor, scale: &[f64], shift: &[f64], eps: f64) -> Result<Tensor> {
    Ok(instance_norm_forward(x, scale, shift, eps)?.output)
}
