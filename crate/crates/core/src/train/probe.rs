//! Least-squares check that noisy targets and clean targets lead to the
//! same denoiser when the target noise has zero mean.
//!
//! The denoiser is the scalar affine map `y ↦ a·y + b` applied to
//! `y = x + ε₁`, with clean `x ~ N(1, 1)` and `ε₁, ε₂ ~ N(0, 1)`. The
//! population minimizer is `a = 1/2, b = 1/2` for both objectives.

use rand_distr::{Distribution, StandardNormal};

use crate::tensor::seeded_rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeReport {
    pub n_samples: usize,
    /// `(a, b)` fitted against clean targets.
    pub noise_to_clean: (f64, f64),
    /// `(a, b)` fitted against noisy targets.
    pub noise_to_noise: (f64, f64),
    pub gap_a: f64,
    pub gap_b: f64,
}

/// Normal-equation solution of `t ≈ a·y + b`.
fn fit(y: &[f64], t: &[f64]) -> (f64, f64) {
    let n = y.len() as f64;
    let my = y.iter().sum::<f64>() / n;
    let mt = t.iter().sum::<f64>() / n;
    let (mut cov, mut var) = (0.0, 0.0);
    for (a, b) in y.iter().zip(t) {
        cov += (a - my) * (b - mt);
        var += (a - my) * (a - my);
    }
    let a = if var > 0.0 { cov / var } else { 0.0 };
    (a, mt - a * my)
}

/// `target_bias` shifts the mean of the target noise; zero reproduces the
/// unbiased setting.
pub fn n2n_equivalence_probe(n_samples: usize, target_bias: f64, seed: u64) -> ProbeReport {
    let mut rng = seeded_rng(seed);
    let mut y = Vec::with_capacity(n_samples);
    let mut clean = Vec::with_capacity(n_samples);
    let mut noisy = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let z: f64 = StandardNormal.sample(&mut rng);
        let x = 1.0 + z;
        let e1: f64 = StandardNormal.sample(&mut rng);
        let e2: f64 = StandardNormal.sample(&mut rng);
        y.push(x + e1);
        clean.push(x);
        noisy.push(x + e2 + target_bias);
    }
    let n2c = fit(&y, &clean);
    let n2n = fit(&y, &noisy);
    ProbeReport {
        n_samples,
        noise_to_clean: n2c,
        noise_to_noise: n2n,
        gap_a: (n2n.0 - n2c.0).abs(),
        gap_b: (n2n.1 - n2c.1).abs(),
    }
}
