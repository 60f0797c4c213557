//! Lossless rearrangement between a volume and its eight `2×2×2` phases.
//!
//! Phase `(i, j, k)` (offsets along height, width, depth) of input channel `c`
//! lands in output channel `8c + 4k + 2j + i`.

use crate::error::{ensure, Result};
use crate::tensor::Tensor;

#[inline]
fn phase_channel(c: usize, i: usize, j: usize, k: usize) -> usize {
    8 * c + 4 * k + 2 * j + i
}

/// `[B, C, H, W, D] -> [B, 8C, H/2, W/2, D/2]`.
pub fn voxel_unshuffle(x: &Tensor) -> Result<Tensor> {
    let [b, c, h, w, d] = x.dims5()?;
    ensure!(
        h % 2 == 0 && w % 2 == 0 && d % 2 == 0,
        InvalidShape,
        "voxel unshuffle needs even spatial extents, got {h}×{w}×{d}"
    );
    let (h2, w2, d2) = (h / 2, w / 2, d / 2);
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    for bi in 0..b {
        for ci in 0..c {
            let in_base = (bi * c + ci) * h * w * d;
            for y in 0..h {
                for xx in 0..w {
                    for z in 0..d {
                        let oc = phase_channel(ci, y % 2, xx % 2, z % 2);
                        let o = (((bi * 8 * c + oc) * h2 + y / 2) * w2 + xx / 2) * d2 + z / 2;
                        out[o] = src[in_base + (y * w + xx) * d + z];
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[b, 8 * c, h2, w2, d2], out)
}

/// `[B, 8C, H, W, D] -> [B, C, 2H, 2W, 2D]`, the inverse of [`voxel_unshuffle`].
pub fn voxel_shuffle(x: &Tensor) -> Result<Tensor> {
    let [b, c8, h2, w2, d2] = x.dims5()?;
    ensure!(
        c8 % 8 == 0,
        InvalidShape,
        "voxel shuffle needs a channel count divisible by 8, got {c8}"
    );
    let c = c8 / 8;
    let (h, w, d) = (2 * h2, 2 * w2, 2 * d2);
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    for bi in 0..b {
        for ci in 0..c {
            let out_base = (bi * c + ci) * h * w * d;
            for y in 0..h {
                for xx in 0..w {
                    for z in 0..d {
                        let ic = phase_channel(ci, y % 2, xx % 2, z % 2);
                        let i = (((bi * c8 + ic) * h2 + y / 2) * w2 + xx / 2) * d2 + z / 2;
                        out[out_base + (y * w + xx) * d + z] = src[i];
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[b, c, h, w, d], out)
}
