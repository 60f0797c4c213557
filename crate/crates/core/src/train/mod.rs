//! Noise-to-noise training: the network maps one noisy realization to
//! another, never seeing clean data.

mod config;
mod probe;

pub use config::TrainConfig;
pub use probe::{n2n_equivalence_probe, ProbeReport};

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;

use crate::error::{ensure, Error, Result};
use crate::model::Network;
use crate::phantom::{DoseVolume, PhantomCase};
use crate::tensor::{seeded_rng, SeededRng, Tape, Tensor, Var};

/// Steps between loss log rows.
pub const LOG_EVERY: usize = 50;

/// Mean squared error between a prediction and a noisy target.
pub fn n2n_loss(tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    tape.mse(pred, target)
}

/// First and second moment estimates for every parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        let zeros = || params.iter().map(|p| p.map(|_| 0.0)).collect();
        AdamState { m: zeros(), v: zeros(), t: 0 }
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(params: &mut [Tensor], grads: &[Tensor], state: &mut AdamState, cfg: &TrainConfig) -> Result<()> {
    ensure!(
        params.len() == grads.len() && params.len() == state.m.len(),
        Contract,
        "adam: {} params, {} grads, {} moments",
        params.len(),
        grads.len(),
        state.m.len()
    );
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        ensure!(
            p.shape() == g.shape() && p.shape() == state.m[i].shape(),
            Contract,
            "adam: parameter {i} shape {:?} vs gradient {:?}",
            p.shape(),
            g.shape()
        );
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        let it = p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut().iter_mut().zip(v.data_mut()));
        for ((p, &g), (m, v)) in it {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            *p -= cfg.lr * (*m / c1) / ((*v / c2).sqrt() + cfg.adam_eps);
        }
    }
    Ok(())
}

/// Where a preprocessed sample came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropWindow {
    /// Window origin in padded coordinates.
    pub offset: [usize; 3],
    pub pad: [usize; 3],
    pub swapped: bool,
}

pub fn effective_pad(extents: [usize; 3], pad: usize) -> [usize; 3] {
    extents.map(|e| pad.min(e / 4))
}

/// Crops `[offset, offset + crop)` of the zero-padded, normalized volume.
fn crop_padded(v: &DoseVolume, pad: [usize; 3], offset: [usize; 3], crop: [usize; 3], scale: f64) -> Tensor {
    let [ch, cw, cd] = crop;
    let mut out = Vec::with_capacity(ch * cw * cd);
    for i in 0..ch {
        let h = (offset[0] + i).checked_sub(pad[0]).filter(|&h| h < v.extents[0]);
        for j in 0..cw {
            let w = (offset[1] + j).checked_sub(pad[1]).filter(|&w| w < v.extents[1]);
            for k in 0..cd {
                let d = (offset[2] + k).checked_sub(pad[2]).filter(|&d| d < v.extents[2]);
                out.push(match (h, w, d) {
                    (Some(h), Some(w), Some(d)) => v.get([h, w, d]) * scale,
                    _ => 0.0,
                });
            }
        }
    }
    Tensor::from_vec(&[1, 1, ch, cw, cd], out).expect("crop extents are positive")
}

/// Normalizes, pads and crops both volumes with one shared window, then
/// swaps their roles with probability one half when enabled.
pub fn preprocess(
    input: &DoseVolume,
    target: &DoseVolume,
    cfg: &TrainConfig,
    rng: &mut SeededRng,
) -> Result<(Tensor, Tensor, CropWindow)> {
    ensure!(input.extents == target.extents, Contract, "input and target extents differ");
    let pad = effective_pad(input.extents, cfg.pad);
    let padded: [usize; 3] = std::array::from_fn(|i| input.extents[i] + 2 * pad[i]);
    ensure!(
        (0..3).all(|i| cfg.crop_extents[i] <= padded[i]),
        InvalidConfig,
        "crop {:?} larger than padded volume {padded:?}",
        cfg.crop_extents
    );
    let offset: [usize; 3] = std::array::from_fn(|i| rng.random_range(0..=padded[i] - cfg.crop_extents[i]));
    let swapped = cfg.swap_input_target && rng.random_bool(0.5);
    let scale = 1.0 / cfg.normalization_dose;
    let a = crop_padded(input, pad, offset, cfg.crop_extents, scale);
    let b = crop_padded(target, pad, offset, cfg.crop_extents, scale);
    let window = CropWindow { offset, pad, swapped };
    Ok(if swapped { (b, a, window) } else { (a, b, window) })
}

/// Mean loss over each block of [`LOG_EVERY`] steps.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossLog {
    pub rows: Vec<(usize, f64)>,
}

impl LossLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss\n");
        for (step, loss) in &self.rows {
            let _ = writeln!(s, "{step},{loss:.9e}");
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// Runs `cfg.iterations` steps. Each step draws a case uniformly, two
/// distinct noisy realizations of it, a crop window and a swap decision
/// from one generator seeded with `cfg.seed`.
pub fn train(net: &mut Network, cases: &[PhantomCase], cfg: &TrainConfig) -> Result<LossLog> {
    cfg.validate()?;
    ensure!(!cases.is_empty(), InvalidConfig, "training needs at least one case");
    for c in cases {
        ensure!(c.noisy.len() >= 2, InvalidConfig, "case {} has fewer than two noisy realizations", c.id);
    }
    net.graph.check_input(cfg.crop_extents)?;

    let mut rng = seeded_rng(cfg.seed);
    let mut adam = AdamState::new(&net.params);
    let mut log = LossLog::default();
    let mut window_sum = 0.0;
    for step in 1..=cfg.iterations {
        let case = &cases[rng.random_range(0..cases.len())];
        let n = case.noisy.len();
        let a = rng.random_range(0..n);
        let b = (a + rng.random_range(1..n)) % n;
        let (x, y, _) = preprocess(&case.noisy[a], &case.noisy[b], cfg, &mut rng)?;

        let mut tape = Tape::new();
        let params = net.bind(&mut tape);
        let xv = tape.constant(x);
        let yv = tape.constant(y);
        let loss = net
            .forward_on(&mut tape, xv, &params)
            .and_then(|pred| n2n_loss(&mut tape, pred, yv))
            .map_err(|e| if e.is_numeric() { Error::NonFiniteLoss { step } } else { e })?;
        let value = tape.value(loss).data()[0];
        ensure_finite(value, step)?;
        tape.backward(loss).map_err(|e| if e.is_numeric() { Error::NonFiniteLoss { step } } else { e })?;
        let grads: Vec<Tensor> = params
            .iter()
            .map(|&p| tape.take_grad(p).ok_or_else(|| Error::Internal("missing parameter gradient".into())))
            .collect::<Result<_>>()?;
        adam_step(&mut net.params, &grads, &mut adam, cfg)?;

        window_sum += value;
        if step % LOG_EVERY == 0 {
            log.rows.push((step, window_sum / LOG_EVERY as f64));
            window_sum = 0.0;
        }
    }
    Ok(log)
}

fn ensure_finite(v: f64, step: usize) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss { step })
    }
}

/// Runs `net` on a whole volume in Gy. Extents that do not meet the
/// network's divisibility contract are zero-padded at the high end and the
/// result is cropped back.
pub fn denoise(net: &Network, volume: &DoseVolume, normalization_dose: f64) -> Result<DoseVolume> {
    ensure!(normalization_dose > 0.0, InvalidConfig, "normalization dose must be positive");
    let div = net.graph.divisor();
    let padded = volume.extents.map(|e| e.div_ceil(div) * div);
    let x = crop_padded(volume, [0; 3], [0; 3], padded, 1.0 / normalization_dose);
    let y = net.forward(&x)?;
    let [_, w, d] = padded;
    let mut values = Vec::with_capacity(volume.len());
    for i in 0..volume.extents[0] {
        for j in 0..volume.extents[1] {
            let row = (i * w + j) * d;
            values.extend(y.data()[row..row + volume.extents[2]].iter().map(|v| v * normalization_dose));
        }
    }
    let mut out = volume.with_values(values)?;
    out.histories = volume.histories;
    Ok(out)
}
