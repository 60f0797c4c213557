//! Direct-loop 3D cross-correlation with "same" zero padding.
//!
//! Weights are stored output-major, `[c_out, c_in, k_h, k_w, k_d]`. Axial
//! (`k×k×1`) and slice (`1×1×k`) convolutions are the same kernel with
//! degenerate extents.

use rayon::prelude::*;

use crate::error::{ensure, Result};
use crate::tensor::{SeededRng, Tensor};
use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ConvSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
}

impl ConvSpec {
    pub fn new(c_in: usize, c_out: usize, kernel: [usize; 3], stride: [usize; 3]) -> Result<Self> {
        ensure!(c_in >= 1 && c_out >= 1, InvalidConfig, "channel counts must be >= 1");
        ensure!(
            kernel.iter().all(|&k| k >= 1 && k % 2 == 1),
            InvalidConfig,
            "kernel extents must be odd, got {kernel:?}"
        );
        ensure!(stride.iter().all(|&s| s >= 1), InvalidConfig, "strides must be >= 1");
        Ok(ConvSpec { c_in, c_out, kernel, stride })
    }

    /// `3×3×3` volumetric convolution with an isotropic stride.
    pub fn regular(c_in: usize, c_out: usize, stride: usize) -> Self {
        ConvSpec { c_in, c_out, kernel: [3, 3, 3], stride: [stride; 3] }
    }

    /// `3×3×1` axial convolution; downsampling halves height and width.
    pub fn axial(c_in: usize, c_out: usize, downsample: bool) -> Self {
        let s = if downsample { 2 } else { 1 };
        ConvSpec { c_in, c_out, kernel: [3, 3, 1], stride: [s, s, 1] }
    }

    /// `1×1×3` slice convolution; downsampling halves depth.
    pub fn slice(c_in: usize, c_out: usize, downsample: bool) -> Self {
        let s = if downsample { 2 } else { 1 };
        ConvSpec { c_in, c_out, kernel: [1, 1, 3], stride: [1, 1, s] }
    }

    pub fn padding(&self) -> [usize; 3] {
        self.kernel.map(|k| (k - 1) / 2)
    }

    pub fn output_extents(&self, input: [usize; 3]) -> [usize; 3] {
        let pad = self.padding();
        std::array::from_fn(|i| (input[i] + 2 * pad[i] - self.kernel[i]) / self.stride[i] + 1)
    }

    pub fn kernel_volume(&self) -> usize {
        self.kernel.iter().product()
    }

    pub fn weight_shape(&self) -> [usize; 5] {
        [self.c_out, self.c_in, self.kernel[0], self.kernel[1], self.kernel[2]]
    }

    pub fn weight_count(&self) -> usize {
        self.c_out * self.c_in * self.kernel_volume()
    }

    /// Weights plus bias.
    pub fn param_count(&self) -> usize {
        self.weight_count() + self.c_out
    }

    /// `2 · C_in · k_h · k_w · k_d · C_out · H_out · W_out · D_out`.
    pub fn flops(&self, input: [usize; 3]) -> u64 {
        let out: u64 = self.output_extents(input).iter().map(|&e| e as u64).product();
        2 * (self.c_in as u64) * (self.kernel_volume() as u64) * (self.c_out as u64) * out
    }
}

/// A convolution with its weights and bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv {
    pub spec: ConvSpec,
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Conv {
    pub fn new(spec: ConvSpec, weight: Tensor, bias: Tensor) -> Result<Self> {
        ensure!(
            weight.shape() == spec.weight_shape(),
            InvalidShape,
            "weight shape {:?} does not match spec {:?}",
            weight.shape(),
            spec.weight_shape()
        );
        ensure!(bias.shape() == [spec.c_out], InvalidShape, "bias must have shape [{}]", spec.c_out);
        Ok(Conv { spec, weight, bias })
    }

    pub fn zeros(spec: ConvSpec) -> Self {
        Conv {
            spec,
            weight: Tensor::zeros(&spec.weight_shape()).expect("spec extents are positive"),
            bias: Tensor::zeros(&[spec.c_out]).expect("c_out is positive"),
        }
    }

    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`, zero bias.
    pub fn glorot(spec: ConvSpec, rng: &mut SeededRng) -> Self {
        Self::glorot_scaled(spec, 1.0, rng)
    }

    /// Uniform in `±gain·sqrt(6 / ((c_in + c_out)·k_h·k_w·k_d))`, zero bias.
    pub fn glorot_scaled(spec: ConvSpec, gain: f64, rng: &mut SeededRng) -> Self {
        let kv = spec.kernel_volume() as f64;
        let bound = gain * (6.0 / ((spec.c_in as f64 + spec.c_out as f64) * kv)).sqrt();
        let mut conv = Conv::zeros(spec);
        for w in conv.weight.data_mut() {
            *w = rng.random_range(-bound..bound);
        }
        conv
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        conv3d(x, self)
    }
}

pub fn conv3d(x: &Tensor, conv: &Conv) -> Result<Tensor> {
    let [_, c, ..] = x.dims5()?;
    ensure!(
        c == conv.spec.c_in,
        Contract,
        "input has {c} channels, convolution expects {}",
        conv.spec.c_in
    );
    conv3d_forward(x, &conv.weight, Some(&conv.bias), conv.spec.stride)
}

/// `k×k×1` convolution over the axial plane.
pub fn conv_axial(x: &Tensor, conv: &Conv) -> Result<Tensor> {
    ensure!(
        conv.spec.kernel[2] == 1,
        Contract,
        "axial convolution needs a k×k×1 kernel, got {:?}",
        conv.spec.kernel
    );
    conv3d(x, conv)
}

/// `1×1×k` convolution along the slice axis.
pub fn conv_slice(x: &Tensor, conv: &Conv) -> Result<Tensor> {
    ensure!(
        conv.spec.kernel[0] == 1 && conv.spec.kernel[1] == 1,
        Contract,
        "slice convolution needs a 1×1×k kernel, got {:?}",
        conv.spec.kernel
    );
    conv3d(x, conv)
}

/// Output positions `o` with `0 <= o*stride + tap - pad < n`.
#[inline]
fn valid_range(out_n: usize, stride: usize, tap: usize, pad: usize, n: usize) -> (usize, usize) {
    let lo = if pad > tap { (pad - tap).div_ceil(stride) } else { 0 };
    if n + pad < tap + 1 {
        return (0, 0);
    }
    let hi = ((n - 1 + pad - tap) / stride + 1).min(out_n);
    (lo.min(hi), hi)
}

pub(crate) fn check_conv_operands(x: &Tensor, w: &Tensor) -> Result<([usize; 5], [usize; 5])> {
    let xd = x.dims5()?;
    let wd = w.dims5()?;
    ensure!(
        xd[1] == wd[1],
        Contract,
        "input has {} channels, weights expect {}",
        xd[1],
        wd[1]
    );
    ensure!(
        wd[2..].iter().all(|&k| k % 2 == 1),
        Contract,
        "kernel extents must be odd, got {:?}",
        &wd[2..]
    );
    Ok((xd, wd))
}

/// Odd kernels with `(k - 1) / 2` padding give `ceil(n / stride)`.
fn out_extents(xd: &[usize; 5], stride: [usize; 3]) -> [usize; 3] {
    std::array::from_fn(|i| (xd[2 + i] - 1) / stride[i] + 1)
}

pub(crate) fn conv3d_forward(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    stride: [usize; 3],
) -> Result<Tensor> {
    let (xd, wd) = check_conv_operands(x, w)?;
    let [bn, cin, h, wi, d] = xd;
    let [cout, _, kh, kw, kd] = wd;
    if let Some(b) = bias {
        ensure!(b.len() == cout, Contract, "bias has {} entries, expected {cout}", b.len());
    }
    ensure!(stride.iter().all(|&s| s >= 1), Contract, "strides must be >= 1");
    let [ph, pw, pd] = [(kh - 1) / 2, (kw - 1) / 2, (kd - 1) / 2];
    let [oh, ow, od] = out_extents(&xd, stride);
    let [sh, sw, sd] = stride;
    let in_plane = h * wi * d;
    let out_plane = oh * ow * od;
    let kvol = kh * kw * kd;
    let xs = x.data();
    let ws = w.data();

    let mut out = vec![0.0; bn * cout * out_plane];
    out.par_chunks_mut(out_plane).enumerate().for_each(|(idx, plane)| {
        let b = idx / cout;
        let co = idx % cout;
        plane.fill(bias.map_or(0.0, |t| t.data()[co]));
        for ci in 0..cin {
            let xin = &xs[(b * cin + ci) * in_plane..][..in_plane];
            let wbase = (co * cin + ci) * kvol;
            for a in 0..kh {
                let (oh_lo, oh_hi) = valid_range(oh, sh, a, ph, h);
                for bb in 0..kw {
                    let (ow_lo, ow_hi) = valid_range(ow, sw, bb, pw, wi);
                    for c in 0..kd {
                        let wv = ws[wbase + (a * kw + bb) * kd + c];
                        let (od_lo, od_hi) = valid_range(od, sd, c, pd, d);
                        if od_lo >= od_hi {
                            continue;
                        }
                        for y in oh_lo..oh_hi {
                            let ih = y * sh + a - ph;
                            for xx in ow_lo..ow_hi {
                                let iw = xx * sw + bb - pw;
                                let orow = &mut plane[(y * ow + xx) * od..][..od];
                                let irow = &xin[(ih * wi + iw) * d..][..d];
                                if sd == 1 {
                                    let shift = od_lo + c - pd;
                                    let n = od_hi - od_lo;
                                    for (o, i) in orow[od_lo..od_hi].iter_mut().zip(&irow[shift..shift + n]) {
                                        *o += wv * i;
                                    }
                                } else {
                                    for z in od_lo..od_hi {
                                        orow[z] += wv * irow[z * sd + c - pd];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    Tensor::from_vec(&[bn, cout, oh, ow, od], out)
}

/// Gradients of a convolution with respect to input, weights and bias.
pub(crate) struct ConvGrads {
    pub input: Option<Tensor>,
    pub weight: Tensor,
    pub bias: Tensor,
}

pub(crate) fn conv3d_backward(
    x: &Tensor,
    w: &Tensor,
    gout: &Tensor,
    stride: [usize; 3],
    need_input: bool,
) -> Result<ConvGrads> {
    let (xd, wd) = check_conv_operands(x, w)?;
    let [bn, cin, h, wi, d] = xd;
    let [cout, _, kh, kw, kd] = wd;
    let [ph, pw, pd] = [(kh - 1) / 2, (kw - 1) / 2, (kd - 1) / 2];
    let [oh, ow, od] = out_extents(&xd, stride);
    ensure!(
        gout.shape() == [bn, cout, oh, ow, od],
        Internal,
        "output gradient shape {:?} does not match convolution output",
        gout.shape()
    );
    let [sh, sw, sd] = stride;
    let in_plane = h * wi * d;
    let out_plane = oh * ow * od;
    let kvol = kh * kw * kd;
    let xs = x.data();
    let ws = w.data();
    let gs = gout.data();

    let gb: Vec<f64> = (0..cout)
        .map(|co| (0..bn).map(|b| gs[(b * cout + co) * out_plane..][..out_plane].iter().sum::<f64>()).sum())
        .collect();

    let mut gw = vec![0.0; cout * cin * kvol];
    gw.par_chunks_mut(cin * kvol).enumerate().for_each(|(co, gwc)| {
        for b in 0..bn {
            let g = &gs[(b * cout + co) * out_plane..][..out_plane];
            for ci in 0..cin {
                let xin = &xs[(b * cin + ci) * in_plane..][..in_plane];
                for a in 0..kh {
                    let (oh_lo, oh_hi) = valid_range(oh, sh, a, ph, h);
                    for bb in 0..kw {
                        let (ow_lo, ow_hi) = valid_range(ow, sw, bb, pw, wi);
                        for c in 0..kd {
                            let (od_lo, od_hi) = valid_range(od, sd, c, pd, d);
                            let mut acc = 0.0;
                            for y in oh_lo..oh_hi {
                                let ih = y * sh + a - ph;
                                for xx in ow_lo..ow_hi {
                                    let iw = xx * sw + bb - pw;
                                    let grow = &g[(y * ow + xx) * od..][..od];
                                    let irow = &xin[(ih * wi + iw) * d..][..d];
                                    for z in od_lo..od_hi {
                                        acc += grow[z] * irow[z * sd + c - pd];
                                    }
                                }
                            }
                            gwc[ci * kvol + (a * kw + bb) * kd + c] += acc;
                        }
                    }
                }
            }
        }
    });

    let input = if need_input {
        let mut gx = vec![0.0; bn * cin * in_plane];
        gx.par_chunks_mut(in_plane).enumerate().for_each(|(idx, gplane)| {
            let b = idx / cin;
            let ci = idx % cin;
            for co in 0..cout {
                let g = &gs[(b * cout + co) * out_plane..][..out_plane];
                let wbase = (co * cin + ci) * kvol;
                for a in 0..kh {
                    let (oh_lo, oh_hi) = valid_range(oh, sh, a, ph, h);
                    for bb in 0..kw {
                        let (ow_lo, ow_hi) = valid_range(ow, sw, bb, pw, wi);
                        for c in 0..kd {
                            let wv = ws[wbase + (a * kw + bb) * kd + c];
                            let (od_lo, od_hi) = valid_range(od, sd, c, pd, d);
                            for y in oh_lo..oh_hi {
                                let ih = y * sh + a - ph;
                                for xx in ow_lo..ow_hi {
                                    let iw = xx * sw + bb - pw;
                                    let grow = &g[(y * ow + xx) * od..][..od];
                                    let xrow = &mut gplane[(ih * wi + iw) * d..][..d];
                                    for z in od_lo..od_hi {
                                        xrow[z * sd + c - pd] += wv * grow[z];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
        Some(Tensor::from_vec(&xd, gx)?)
    } else {
        None
    };

    Ok(ConvGrads {
        input,
        weight: Tensor::from_vec(&wd, gw)?,
        bias: Tensor::from_vec(&[cout], gb)?,
    })
}

impl From<ConvSpec> for Conv {
    fn from(spec: ConvSpec) -> Self {
        Conv::zeros(spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use crate::tensor::seeded_rng;

    /// Six nested loops over output voxel and kernel tap, padding by bounds checks.
    fn naive_conv(x: &Tensor, conv: &Conv) -> Tensor {
        let [bn, cin, h, w, d] = x.dims5().unwrap();
        let s = conv.spec;
        let pad = s.padding();
        let [oh, ow, od] = s.output_extents([h, w, d]);
        let mut out = Tensor::zeros(&[bn, s.c_out, oh, ow, od]).unwrap();
        let mut k = 0;
        for b in 0..bn {
            for co in 0..s.c_out {
                for y in 0..oh {
                    for xx in 0..ow {
                        for z in 0..od {
                            let mut acc = conv.bias.data()[co];
                            for ci in 0..cin {
                                for a in 0..s.kernel[0] {
                                    for bb in 0..s.kernel[1] {
                                        for c in 0..s.kernel[2] {
                                            let ih = (y * s.stride[0] + a) as isize - pad[0] as isize;
                                            let iw = (xx * s.stride[1] + bb) as isize - pad[1] as isize;
                                            let id = (z * s.stride[2] + c) as isize - pad[2] as isize;
                                            if ih < 0 || iw < 0 || id < 0 {
                                                continue;
                                            }
                                            let (ih, iw, id) = (ih as usize, iw as usize, id as usize);
                                            if ih >= h || iw >= w || id >= d {
                                                continue;
                                            }
                                            acc += conv.weight.get(&[co, ci, a, bb, c]).unwrap()
                                                * x.get(&[b, ci, ih, iw, id]).unwrap();
                                        }
                                    }
                                }
                            }
                            out.data_mut()[k] = acc;
                            k += 1;
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn identity_kernel() {
        let mut rng = seeded_rng(1);
        let x = Tensor::randn(&[1, 1, 4, 3, 5], 1.0, &mut rng).unwrap();
        let mut conv = Conv::zeros(ConvSpec::new(1, 1, [1, 1, 1], [1, 1, 1]).unwrap());
        conv.weight.data_mut()[0] = 1.0;
        assert_eq!(conv3d(&x, &conv).unwrap(), x);
    }

    #[test]
    fn ones_kernel_interior_sum() {
        let x = Tensor::full(&[1, 1, 5, 5, 5], 1.0).unwrap();
        let mut conv = Conv::zeros(ConvSpec::regular(1, 1, 1));
        conv.weight.data_mut().fill(1.0);
        let y = conv3d(&x, &conv).unwrap();
        assert_eq!(y.get(&[0, 0, 2, 2, 2]).unwrap(), 27.0);
        // corner sees 2×2×2 of the input
        assert_eq!(y.get(&[0, 0, 0, 0, 0]).unwrap(), 8.0);
    }

    #[test]
    fn matches_naive_loops() {
        let mut rng = seeded_rng(2);
        for (spec, ext) in [
            (ConvSpec::regular(2, 3, 1), [5, 5, 4]),
            (ConvSpec::regular(3, 2, 2), [5, 6, 4]),
            (ConvSpec::axial(2, 3, true), [6, 5, 4]),
            (ConvSpec::slice(3, 2, true), [3, 4, 7]),
            (ConvSpec::new(2, 2, [1, 3, 5], [1, 2, 3]).unwrap(), [4, 5, 7]),
        ] {
            let x = Tensor::randn(&[2, spec.c_in, ext[0], ext[1], ext[2]], 1.0, &mut rng).unwrap();
            let mut conv = Conv::glorot(spec, &mut rng);
            conv.bias = Tensor::randn(&[spec.c_out], 1.0, &mut rng).unwrap();
            let y = conv3d(&x, &conv).unwrap();
            let want = naive_conv(&x, &conv);
            assert_eq!(y.shape(), want.shape());
            assert!(y.max_abs_diff(&want) < 1e-10);
        }
    }

    #[test]
    fn stride_arithmetic() {
        let x = Tensor::zeros(&[1, 1, 8, 8, 8]).unwrap();
        let y = conv_axial(&x, &Conv::zeros(ConvSpec::axial(1, 1, true))).unwrap();
        assert_eq!(&y.shape()[2..], &[4, 4, 8]);
        let x = Tensor::zeros(&[1, 1, 4, 4, 8]).unwrap();
        let y = conv_slice(&x, &Conv::zeros(ConvSpec::slice(1, 1, true))).unwrap();
        assert_eq!(&y.shape()[2..], &[4, 4, 4]);
    }

    #[test]
    fn channel_mismatch_is_contract_error() {
        let x = Tensor::zeros(&[1, 2, 4, 4, 4]).unwrap();
        let conv = Conv::zeros(ConvSpec::regular(3, 1, 1));
        assert!(matches!(conv3d(&x, &conv), Err(Error::Contract(_))));
        assert!(conv_axial(&x, &Conv::zeros(ConvSpec::slice(2, 1, false))).is_err());
        assert!(ConvSpec::new(1, 1, [2, 3, 3], [1, 1, 1]).is_err());
    }

    #[test]
    fn flops_formula() {
        let s = ConvSpec::regular(1, 64, 2);
        assert_eq!(s.flops([256, 256, 64]), 1_811_939_328);
        let one = ConvSpec::new(1, 1, [1, 1, 1], [1, 1, 1]).unwrap();
        assert_eq!(one.flops([1, 1, 1]), 2);
        assert_eq!(ConvSpec::regular(1, 64, 1).param_count(), 1792);
    }
}
