//! Trilinear ×2 upsampling with the half-pixel (align-corners = false)
//! convention, applied as three separable linear passes.

use crate::error::Result;
use crate::tensor::Tensor;

/// For each of the `2n` output positions: lower source index, upper source
/// index, and the weight of the upper one.
fn axis_taps(n: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * n)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Resamples axis `axis` of `shape` (viewed as `[outer, n, inner]`).
fn resample_axis(src: &[f64], shape: &[usize; 5], axis: usize) -> (Vec<f64>, [usize; 5]) {
    let n = shape[axis];
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let taps = axis_taps(n);
    let mut out_shape = *shape;
    out_shape[axis] = 2 * n;
    let mut out = vec![0.0; outer * 2 * n * inner];
    for o in 0..outer {
        let s = &src[o * n * inner..][..n * inner];
        let dst = &mut out[o * 2 * n * inner..][..2 * n * inner];
        for (m, &(i0, i1, lam)) in taps.iter().enumerate() {
            let row = &mut dst[m * inner..][..inner];
            let a = &s[i0 * inner..][..inner];
            let b = &s[i1 * inner..][..inner];
            for ((r, x0), x1) in row.iter_mut().zip(a).zip(b) {
                *r = (1.0 - lam) * x0 + lam * x1;
            }
        }
    }
    (out, out_shape)
}

/// Adjoint of [`resample_axis`]; `shape` is the pre-resampling shape.
fn resample_axis_adjoint(grad: &[f64], shape: &[usize; 5], axis: usize) -> Vec<f64> {
    let n = shape[axis];
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let taps = axis_taps(n);
    let mut out = vec![0.0; outer * n * inner];
    for o in 0..outer {
        let g = &grad[o * 2 * n * inner..][..2 * n * inner];
        let dst = &mut out[o * n * inner..][..n * inner];
        for (m, &(i0, i1, lam)) in taps.iter().enumerate() {
            let row = &g[m * inner..][..inner];
            for (k, gv) in row.iter().enumerate() {
                dst[i0 * inner + k] += (1.0 - lam) * gv;
                dst[i1 * inner + k] += lam * gv;
            }
        }
    }
    out
}

/// Doubles height, width and depth.
pub fn upsample_trilinear(x: &Tensor) -> Result<Tensor> {
    let shape = x.dims5()?;
    let (a, s) = resample_axis(x.data(), &shape, 4);
    let (b, s) = resample_axis(&a, &s, 3);
    let (c, s) = resample_axis(&b, &s, 2);
    Tensor::from_vec(&s, c)
}

pub(crate) fn upsample_trilinear_backward(gout: &Tensor, input_shape: [usize; 5]) -> Result<Tensor> {
    let mut s1 = input_shape;
    s1[4] *= 2;
    let mut s2 = s1;
    s2[3] *= 2;
    let g2 = resample_axis_adjoint(gout.data(), &s2, 2);
    let g1 = resample_axis_adjoint(&g2, &s1, 3);
    let g0 = resample_axis_adjoint(&g1, &input_shape, 4);
    Tensor::from_vec(&input_shape, g0)
}
