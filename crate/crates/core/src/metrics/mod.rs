//! Dose comparison metrics: MSE, cumulative DVHs and their area difference,
//! D95/D98/D99 and isodose Dice.

mod report;

pub use report::{MetricsRow, MetricsTable, CSV_HEADER};

use crate::error::{ensure, Result};
use crate::phantom::{DoseVolume, Mask};

/// Isodose levels in percent of the reference dose.
pub const ISODOSE_LEVELS: [u32; 6] = [10, 30, 50, 70, 80, 90];
pub const DVH_BINS: usize = 100;
pub const DVH_MAX_DOSE: f64 = 1.3;

fn same_extents(a: [usize; 3], b: [usize; 3], what: &str) -> Result<()> {
    ensure!(a == b, Contract, "{what}: extents {a:?} and {b:?} differ");
    Ok(())
}

/// Mean squared voxel difference over the whole grid.
pub fn mse(a: &DoseVolume, b: &DoseVolume) -> Result<f64> {
    same_extents(a.extents, b.extents, "mse")?;
    let s: f64 = a.values.iter().zip(&b.values).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(s / a.len() as f64)
}

/// Mean squared voxel difference over the voxels of `mask`.
pub fn mse_masked(a: &DoseVolume, b: &DoseVolume, mask: &Mask) -> Result<f64> {
    same_extents(a.extents, b.extents, "mse")?;
    same_extents(a.extents, mask.extents, "mse mask")?;
    let (s, n) = a
        .values
        .iter()
        .zip(&b.values)
        .zip(&mask.values)
        .filter(|(_, &m)| m)
        .fold((0.0, 0usize), |(s, n), ((x, y), _)| (s + (x - y) * (x - y), n + 1));
    ensure!(n > 0, Contract, "mse over an empty mask");
    Ok(s / n as f64)
}

/// Cumulative dose-volume histogram. `fractions[i]` is the fraction of the
/// structure receiving at least `edges[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DvhCurve {
    pub structure: String,
    pub edges: Vec<f64>,
    pub fractions: Vec<f64>,
}

impl DvhCurve {
    pub fn bin_width(&self) -> f64 {
        match self.edges.as_slice() {
            [a, b, ..] => b - a,
            _ => 0.0,
        }
    }
}

/// `bins` left edges `i · max_dose / bins`. Negative doses count as zero.
pub fn dvh(volume: &DoseVolume, mask: &Mask, bins: usize, max_dose: f64, structure: &str) -> Result<DvhCurve> {
    same_extents(volume.extents, mask.extents, "dvh")?;
    ensure!(bins >= 1 && max_dose > 0.0, Contract, "dvh needs bins >= 1 and max_dose > 0");
    let mut doses: Vec<f64> = volume
        .values
        .iter()
        .zip(&mask.values)
        .filter(|(_, &m)| m)
        .map(|(v, _)| v.max(0.0))
        .collect();
    ensure!(!doses.is_empty(), Contract, "dvh of an empty structure '{structure}'");
    doses.sort_by(f64::total_cmp);
    let n = doses.len() as f64;
    let width = max_dose / bins as f64;
    let edges: Vec<f64> = (0..bins).map(|i| i as f64 * width).collect();
    let fractions = edges
        .iter()
        .map(|&e| {
            let below = doses.partition_point(|&d| d < e);
            (doses.len() - below) as f64 / n
        })
        .collect();
    Ok(DvhCurve { structure: structure.to_string(), edges, fractions })
}

/// `Σ |hᵃ − hᵇ| · ΔD` over bins.
pub fn dvh_error(a: &DvhCurve, b: &DvhCurve) -> Result<f64> {
    ensure!(a.edges == b.edges, Contract, "dvh curves use different bins");
    let width = a.bin_width();
    Ok(a.fractions.iter().zip(&b.fractions).map(|(x, y)| (x - y).abs() * width).sum())
}

/// Largest dose received by at least `percent`% of the masked voxels.
pub fn d_number(volume: &DoseVolume, mask: &Mask, percent: f64) -> Result<f64> {
    same_extents(volume.extents, mask.extents, "d_number")?;
    ensure!(percent > 0.0 && percent <= 100.0, Contract, "percent must lie in (0, 100]");
    let mut doses: Vec<f64> =
        volume.values.iter().zip(&mask.values).filter(|(_, &m)| m).map(|(v, _)| *v).collect();
    ensure!(!doses.is_empty(), Contract, "d_number over an empty mask");
    doses.sort_by(f64::total_cmp);
    let n = doses.len();
    let k = ((percent * n as f64 / 100.0).ceil() as usize).clamp(1, n);
    Ok(doses[n - k])
}

/// Dice of `{a > t}` and `{b > t}` with `t = level_percent / 100 · reference`.
/// Two empty masks score 1.
pub fn isodose_dice(a: &DoseVolume, b: &DoseVolume, level_percent: f64, reference: f64) -> Result<f64> {
    same_extents(a.extents, b.extents, "isodose_dice")?;
    ensure!(reference > 0.0, Contract, "isodose reference dose must be positive");
    let t = level_percent / 100.0 * reference;
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (x, y) in a.values.iter().zip(&b.values) {
        let (ia, ib) = (*x > t, *y > t);
        na += ia as usize;
        nb += ib as usize;
        inter += (ia && ib) as usize;
    }
    Ok(if na + nb == 0 { 1.0 } else { 2.0 * inter as f64 / (na + nb) as f64 })
}

/// Metrics of one dose map against the ground truth, both divided by the
/// ground truth's PTV D95.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    /// Ground-truth PTV D95 in Gy.
    pub reference_d95: f64,
    pub mse: f64,
    pub mse_body: f64,
    pub dvh_error_ptv: f64,
    pub dvh_error_body: f64,
    pub d95: f64,
    pub d98: f64,
    pub d99: f64,
    /// `|D# − D#ᵍᵗ|` on the normalized scale, i.e. relative to the ground truth D95.
    pub d95_error: f64,
    pub d98_error: f64,
    pub d99_error: f64,
    /// One entry per [`ISODOSE_LEVELS`] level.
    pub dice: [f64; 6],
    pub dice_mean: f64,
}

pub fn evaluate(denoised: &DoseVolume, truth: &DoseVolume, ptv: &Mask, body: &Mask) -> Result<MetricsReport> {
    same_extents(denoised.extents, truth.extents, "evaluate")?;
    let reference = d_number(truth, ptv, 95.0)?;
    ensure!(
        reference > 0.0 && reference.is_finite(),
        Contract,
        "ground-truth PTV D95 is {reference}; cannot normalize"
    );
    let scale = |v: &DoseVolume| v.with_values(v.values.iter().map(|x| x / reference).collect());
    let (x, gt) = (scale(denoised)?, scale(truth)?);
    let curve = |v: &DoseVolume, m: &Mask, s: &str| dvh(v, m, DVH_BINS, DVH_MAX_DOSE, s);
    let dn = |v: &DoseVolume, p: f64| d_number(v, ptv, p);
    let (d95, d98, d99) = (dn(&x, 95.0)?, dn(&x, 98.0)?, dn(&x, 99.0)?);
    let mut dice = [0.0; 6];
    for (d, &level) in dice.iter_mut().zip(&ISODOSE_LEVELS) {
        *d = isodose_dice(&x, &gt, level as f64, 1.0)?;
    }
    Ok(MetricsReport {
        reference_d95: reference,
        mse: mse(&x, &gt)?,
        mse_body: mse_masked(&x, &gt, body)?,
        dvh_error_ptv: dvh_error(&curve(&x, ptv, "ptv")?, &curve(&gt, ptv, "ptv")?)?,
        dvh_error_body: dvh_error(&curve(&x, body, "body")?, &curve(&gt, body, "body")?)?,
        d95,
        d98,
        d99,
        d95_error: (d95 - dn(&gt, 95.0)?).abs(),
        d98_error: (d98 - dn(&gt, 98.0)?).abs(),
        d99_error: (d99 - dn(&gt, 99.0)?).abs(),
        dice,
        dice_mean: dice.iter().sum::<f64>() / dice.len() as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vol(extents: [usize; 3], values: Vec<f64>) -> DoseVolume {
        DoseVolume::new(extents, [1.0; 3], values).unwrap()
    }

    fn full_mask(extents: [usize; 3]) -> Mask {
        Mask::from_fn(extents, [1.0; 3], |_| true)
    }

    #[test]
    fn mse_examples() {
        let a = vol([2, 2, 2], (0..8).map(f64::from).collect());
        let b = a.with_values(a.values.iter().map(|v| v + 0.3).collect()).unwrap();
        assert_eq!(mse(&a, &a).unwrap(), 0.0);
        assert!((mse(&a, &b).unwrap() - 0.09).abs() < 1e-15);
        assert!(mse(&a, &vol([2, 2, 1], vec![0.0; 4])).is_err());
    }

    #[test]
    fn dvh_examples() {
        let m = full_mask([2, 2, 2]);
        let c = dvh(&vol([2, 2, 2], vec![0.8; 8]), &m, 100, 1.3, "ptv").unwrap();
        for (e, f) in c.edges.iter().zip(&c.fractions) {
            assert_eq!(*f, if *e <= 0.8 { 1.0 } else { 0.0 }, "edge {e}");
        }
        let two = vol([2, 2, 2], vec![0.4, 0.4, 0.4, 0.4, 1.0, 1.0, 1.0, 1.0]);
        let c = dvh(&two, &m, 100, 1.3, "ptv").unwrap();
        for (e, f) in c.edges.iter().zip(&c.fractions) {
            let want = if *e <= 0.4 { 1.0 } else if *e <= 1.0 { 0.5 } else { 0.0 };
            assert_eq!(*f, want, "edge {e}");
        }
        let empty = Mask::from_fn([2, 2, 2], [1.0; 3], |_| false);
        assert!(dvh(&two, &empty, 100, 1.3, "ptv").is_err());
    }

    #[test]
    fn dvh_error_single_bin() {
        let m = full_mask([1, 1, 1]);
        let a = dvh(&vol([1, 1, 1], vec![0.5]), &m, 100, 1.3, "x").unwrap();
        let mut b = a.clone();
        b.fractions[10] -= 0.1;
        assert!((dvh_error(&a, &b).unwrap() - 0.0013).abs() < 1e-15);
        assert_eq!(dvh_error(&a, &a).unwrap(), 0.0);
        let c = dvh(&vol([1, 1, 1], vec![0.5]), &m, 50, 1.3, "x").unwrap();
        assert!(dvh_error(&a, &c).is_err());
    }

    #[test]
    fn d_number_examples() {
        let v = vol([10, 10, 1], (1..=100).map(f64::from).collect());
        let m = full_mask([10, 10, 1]);
        assert_eq!(d_number(&v, &m, 95.0).unwrap(), 6.0);
        assert_eq!(d_number(&v, &m, 98.0).unwrap(), 3.0);
        assert_eq!(d_number(&v, &m, 99.0).unwrap(), 2.0);
        let u = vol([2, 2, 1], vec![0.7; 4]);
        for p in [95.0, 98.0, 99.0] {
            assert_eq!(d_number(&u, &full_mask([2, 2, 1]), p).unwrap(), 0.7);
        }
    }

    #[test]
    fn dice_examples() {
        let block = |shift: usize| {
            vol([4, 4, 1], (0..16).map(|i| {
                let (h, w) = (i / 4, i % 4);
                if (shift..shift + 2).contains(&h) && w < 2 { 1.0 } else { 0.0 }
            }).collect())
        };
        assert_eq!(isodose_dice(&block(0), &block(0), 50.0, 1.0).unwrap(), 1.0);
        assert_eq!(isodose_dice(&block(0), &block(1), 50.0, 1.0).unwrap(), 0.5);
        assert_eq!(isodose_dice(&block(0), &block(2), 50.0, 1.0).unwrap(), 0.0);
        let zero = vol([4, 4, 1], vec![0.0; 16]);
        assert_eq!(isodose_dice(&zero, &zero, 90.0, 1.0).unwrap(), 1.0);
        assert_eq!(isodose_dice(&zero, &block(0), 90.0, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn evaluate_identity_and_degenerate() {
        let spec = crate::phantom::PhantomSpec::three_beam([16, 16, 8]);
        let clean = crate::phantom::generate_clean(&spec).unwrap();
        let r = evaluate(&clean, &clean, &spec.ptv_mask(), &spec.body_mask()).unwrap();
        assert_eq!((r.mse, r.dvh_error_ptv, r.dvh_error_body), (0.0, 0.0, 0.0));
        assert_eq!(r.d95, 1.0);
        assert!(r.dice.iter().all(|&d| d == 1.0));
        let zero = clean.with_values(vec![0.0; clean.len()]).unwrap();
        assert!(evaluate(&clean, &zero, &spec.ptv_mask(), &spec.body_mask()).is_err());
    }
}
