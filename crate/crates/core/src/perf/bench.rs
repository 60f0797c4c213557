use std::fmt::Write as _;
use std::time::Instant;

use crate::error::{ensure, Error, Result};
use crate::ops::{conv3d, instance_norm, Conv, ConvSpec, DEFAULT_EPS};
use crate::tensor::{seeded_rng, Tensor};

pub const BENCH_CSV_HEADER: &str = "module,median_ms,iqr_ms,repeats,workers";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BenchConfig {
    pub channels: usize,
    pub extents: [usize; 3],
    pub repeats: usize,
    pub warmup: usize,
    pub workers: usize,
    /// Stride-2 modules instead of stride-1.
    pub downsample: bool,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            channels: 64,
            extents: [32, 32, 16],
            repeats: 100,
            warmup: 2,
            workers: 1,
            downsample: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub module: &'static str,
    pub flops: u64,
    pub samples_ms: Vec<f64>,
    pub median_ms: f64,
    pub iqr_ms: f64,
    pub workers: usize,
}

impl BenchRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{:.6},{:.6},{},{}",
            self.module,
            self.median_ms,
            self.iqr_ms,
            self.samples_ms.len(),
            self.workers
        )
    }
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut s = format!("{BENCH_CSV_HEADER}\n");
    for r in rows {
        writeln!(s, "{}", r.csv_line()).unwrap();
    }
    s
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn module_specs(c: usize, downsample: bool) -> (ConvSpec, [ConvSpec; 2]) {
    let regular = ConvSpec::regular(c, c, if downsample { 2 } else { 1 });
    (regular, [ConvSpec::axial(c, c, downsample), ConvSpec::slice(c, c, downsample)])
}

/// Convolution FLOPs of one regular module and one decoupled module on a
/// `channels`-channel input of `extents`.
pub fn module_flops(channels: usize, extents: [usize; 3], downsample: bool) -> (u64, u64) {
    let (regular, [axial, slice]) = module_specs(channels, downsample);
    let mid = axial.output_extents(extents);
    (regular.flops(extents), axial.flops(extents) + slice.flops(mid))
}

/// Convolution, instance norm and ReLU.
fn block(x: &Tensor, conv: &Conv) -> Result<Tensor> {
    let c = conv.spec.c_out;
    let y = instance_norm(&conv3d(x, conv)?, &vec![1.0; c], &vec![0.0; c], DEFAULT_EPS)?;
    Ok(y.map(|v| v.max(0.0)))
}

/// Median and interquartile range of the wall time of one regular
/// `3×3×3` module and one axial+slice module at equal shapes, on a pool of
/// `cfg.workers` threads.
pub fn bench_modules(cfg: &BenchConfig) -> Result<Vec<BenchRow>> {
    ensure!(cfg.repeats >= 10, InvalidConfig, "benchmark needs at least 10 repeats");
    ensure!(cfg.workers >= 1 && cfg.channels >= 1, InvalidConfig, "workers and channels must be >= 1");
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::Internal(format!("thread pool: {e}")))?;
    let mut rng = seeded_rng(cfg.seed);
    let [h, w, d] = cfg.extents;
    let x = Tensor::randn(&[1, cfg.channels, h, w, d], 1.0, &mut rng)?;
    let (regular, [axial, slice]) = module_specs(cfg.channels, cfg.downsample);
    let regular = Conv::glorot(regular, &mut rng);
    let (axial, slice) = (Conv::glorot(axial, &mut rng), Conv::glorot(slice, &mut rng));
    let (flops_regular, flops_decoupled) = module_flops(cfg.channels, cfg.extents, cfg.downsample);

    let time = |f: &(dyn Fn() -> Result<Tensor> + Sync)| -> Result<Vec<f64>> {
        pool.install(|| {
            for _ in 0..cfg.warmup {
                std::hint::black_box(f()?);
            }
            (0..cfg.repeats)
                .map(|_| {
                    let t = Instant::now();
                    std::hint::black_box(f()?);
                    Ok(t.elapsed().as_secs_f64() * 1e3)
                })
                .collect()
        })
    };
    let runs: [(&'static str, u64, Vec<f64>); 2] = [
        ("regular_3x3x3", flops_regular, time(&|| block(&x, &regular))?),
        ("decoupled_axial_slice", flops_decoupled, time(&|| block(&block(&x, &axial)?, &slice))?),
    ];
    Ok(runs
        .into_iter()
        .map(|(module, flops, samples_ms)| {
            let mut sorted = samples_ms.clone();
            sorted.sort_by(f64::total_cmp);
            BenchRow {
                module,
                flops,
                median_ms: quantile(&sorted, 0.5),
                iqr_ms: quantile(&sorted, 0.75) - quantile(&sorted, 0.25),
                samples_ms,
                workers: cfg.workers,
            }
        })
        .collect())
}
