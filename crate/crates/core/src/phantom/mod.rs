//! Synthetic dose phantoms: clean dose maps from a toy beam model and
//! zero-mean quantum-noise realizations whose variance scales as
//! `1 / histories`.
//!
//! Coordinates are voxel indices `(h, w, d)`; a voxel's position in mm is
//! its index times the voxel size.

mod io;

pub use io::{
    load_case, read_mask, read_volume, write_case, write_mask, write_volume, CaseManifest,
};

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{ensure, Error, Result};
use crate::tensor::{derive_seed, seeded_rng, Tensor};

pub const DEFAULT_VOXEL_SIZE: [f64; 3] = [2.34, 2.34, 3.0];
pub const DEFAULT_PRESCRIPTION: f64 = 80.0;
/// Noise calibration: at the prescription dose and `10^6` histories the
/// per-voxel standard deviation is 25% of the dose.
pub const DEFAULT_NOISE_ALPHA: f64 = 250.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Beam {
    /// Point on the central axis, voxel coordinates. Dose is deposited
    /// downstream of it only.
    pub entry: [f64; 3],
    pub direction: [f64; 3],
    pub sigma_mm: f64,
    /// Attenuation per mm of depth.
    pub mu_per_mm: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sphere {
    pub center: [f64; 3],
    pub radius_mm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipsoid {
    pub center: [f64; 3],
    pub semi_axes_mm: [f64; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub extents: [usize; 3],
    pub voxel_size: [f64; 3],
    pub beams: Vec<Beam>,
    pub ptv: Sphere,
    pub body: Ellipsoid,
    pub prescription_dose: f64,
    pub seed: u64,
}

impl PhantomSpec {
    /// Centered PTV inside an elliptical body, irradiated by three coplanar
    /// beams 120° apart in the axial plane.
    pub fn three_beam(extents: [usize; 3]) -> Self {
        Self::three_beam_at(extents, 0.0)
    }

    fn three_beam_at(extents: [usize; 3], angle: f64) -> Self {
        let vs = DEFAULT_VOXEL_SIZE;
        let center = extents.map(|e| (e as f64 - 1.0) / 2.0);
        let span = std::array::from_fn::<f64, 3, _>(|i| extents[i] as f64 * vs[i]);
        let radius = (0.12 * span[0].min(span[1])).min(0.35 * span[2]);
        let body = Ellipsoid {
            center,
            semi_axes_mm: [0.65 * span[0], 0.65 * span[1], 0.75 * span[2]],
        };
        let ptv = Sphere { center, radius_mm: radius };
        let mut spec = PhantomSpec {
            extents,
            voxel_size: vs,
            beams: Vec::new(),
            ptv,
            body,
            prescription_dose: DEFAULT_PRESCRIPTION,
            seed: 0,
        };
        spec.beams = (0..3).map(|k| spec.beam_towards_ptv(angle + 2.0 * PI * k as f64 / 3.0)).collect();
        spec
    }

    /// Axial-plane beam at `angle` whose central axis passes through the
    /// PTV center, entering outside the grid.
    fn beam_towards_ptv(&self, angle: f64) -> Beam {
        let dir = [angle.cos(), angle.sin(), 0.0];
        let diag: f64 = (0..3)
            .map(|i| (self.extents[i] as f64 * self.voxel_size[i]).powi(2))
            .sum::<f64>()
            .sqrt();
        let entry = std::array::from_fn(|i| self.ptv.center[i] - diag * dir[i] / self.voxel_size[i]);
        Beam {
            entry,
            direction: dir,
            sigma_mm: 0.8 * self.ptv.radius_mm,
            mu_per_mm: 0.004,
            weight: 1.0,
        }
    }

    fn mm(&self, idx: [usize; 3], origin: [f64; 3]) -> [f64; 3] {
        std::array::from_fn(|i| (idx[i] as f64 - origin[i]) * self.voxel_size[i])
    }

    pub fn in_body(&self, idx: [usize; 3]) -> bool {
        let p = self.mm(idx, self.body.center);
        (0..3).map(|i| (p[i] / self.body.semi_axes_mm[i]).powi(2)).sum::<f64>() <= 1.0
    }

    pub fn in_ptv(&self, idx: [usize; 3]) -> bool {
        let p = self.mm(idx, self.ptv.center);
        p.iter().map(|v| v * v).sum::<f64>() <= self.ptv.radius_mm.powi(2)
    }

    fn voxels(&self) -> impl Iterator<Item = [usize; 3]> + '_ {
        let [h, w, d] = self.extents;
        (0..h).flat_map(move |i| (0..w).flat_map(move |j| (0..d).map(move |k| [i, j, k])))
    }

    pub fn body_mask(&self) -> Mask {
        Mask::from_fn(self.extents, self.voxel_size, |v| self.in_body(v))
    }

    pub fn ptv_mask(&self) -> Mask {
        Mask::from_fn(self.extents, self.voxel_size, |v| self.in_ptv(v))
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.extents.iter().all(|&e| e >= 1), InvalidSpec, "extents must be >= 1");
        ensure!(
            self.voxel_size.iter().all(|&v| v.is_finite() && v > 0.0),
            InvalidSpec,
            "voxel sizes must be positive"
        );
        ensure!(
            self.prescription_dose.is_finite() && self.prescription_dose > 0.0,
            InvalidSpec,
            "prescription dose must be positive"
        );
        ensure!(
            self.ptv.radius_mm > 0.0 && self.body.semi_axes_mm.iter().all(|&a| a > 0.0),
            InvalidSpec,
            "PTV radius and body semi-axes must be positive"
        );
        for (i, b) in self.beams.iter().enumerate() {
            let n: f64 = b.direction.iter().map(|v| v * v).sum::<f64>().sqrt();
            ensure!(n.is_finite() && n > 0.0, InvalidSpec, "beam {i} has a zero direction");
            ensure!(b.sigma_mm > 0.0, InvalidSpec, "beam {i} needs sigma > 0");
            ensure!(b.mu_per_mm >= 0.0, InvalidSpec, "beam {i} needs mu >= 0");
            ensure!(b.weight >= 0.0 && b.weight.is_finite(), InvalidSpec, "beam {i} weight must be >= 0");
        }
        let mut ptv_voxels = 0usize;
        for v in self.voxels().filter(|&v| self.in_ptv(v)) {
            ptv_voxels += 1;
            ensure!(self.in_body(v), InvalidSpec, "PTV voxel {v:?} lies outside the body");
        }
        ensure!(ptv_voxels > 0, InvalidSpec, "PTV contains no voxels");
        Ok(())
    }
}

/// A dose grid in Gy. `histories == None` marks a clean volume.
#[derive(Debug, Clone, PartialEq)]
pub struct DoseVolume {
    pub extents: [usize; 3],
    pub voxel_size: [f64; 3],
    pub values: Vec<f64>,
    pub histories: Option<u64>,
    pub seed: u64,
}

impl DoseVolume {
    pub fn new(extents: [usize; 3], voxel_size: [f64; 3], values: Vec<f64>) -> Result<Self> {
        let n: usize = extents.iter().product();
        ensure!(values.len() == n, InvalidShape, "{} values for extents {extents:?}", values.len());
        ensure!(values.iter().all(|v| v.is_finite()), Contract, "dose values must be finite");
        Ok(DoseVolume { extents, voxel_size, values, histories: None, seed: 0 })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn index(&self, [h, w, d]: [usize; 3]) -> usize {
        (h * self.extents[1] + w) * self.extents[2] + d
    }

    pub fn get(&self, idx: [usize; 3]) -> f64 {
        self.values[self.index(idx)]
    }

    /// `[1, 1, H, W, D]` tensor view.
    pub fn to_tensor(&self) -> Tensor {
        let [h, w, d] = self.extents;
        Tensor::from_vec(&[1, 1, h, w, d], self.values.clone()).expect("extents match values")
    }

    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        let mut v = DoseVolume::new(self.extents, self.voxel_size, values)?;
        v.histories = self.histories;
        v.seed = self.seed;
        Ok(v)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub extents: [usize; 3],
    pub voxel_size: [f64; 3],
    pub values: Vec<bool>,
}

impl Mask {
    pub fn from_fn(extents: [usize; 3], voxel_size: [f64; 3], f: impl Fn([usize; 3]) -> bool) -> Self {
        let [h, w, d] = extents;
        let mut values = Vec::with_capacity(h * w * d);
        for i in 0..h {
            for j in 0..w {
                for k in 0..d {
                    values.push(f([i, j, k]));
                }
            }
        }
        Mask { extents, voxel_size, values }
    }

    pub fn count(&self) -> usize {
        self.values.iter().filter(|&&m| m).count()
    }
}

/// Beam sum masked to the body and scaled to the prescription on the PTV.
pub fn generate_clean(spec: &PhantomSpec) -> Result<DoseVolume> {
    spec.validate()?;
    let body = spec.body_mask();
    let ptv = spec.ptv_mask();
    let vs = spec.voxel_size;
    let beams: Vec<([f64; 3], [f64; 3], &Beam)> = spec
        .beams
        .iter()
        .map(|b| {
            let n: f64 = b.direction.iter().map(|v| v * v).sum::<f64>().sqrt();
            let u = b.direction.map(|v| v / n);
            let e = std::array::from_fn(|i| b.entry[i] * vs[i]);
            (e, u, b)
        })
        .collect();
    let raw: Vec<f64> = spec
        .voxels()
        .zip(&body.values)
        .map(|(idx, &inside)| {
            if !inside {
                return 0.0;
            }
            let p: [f64; 3] = std::array::from_fn(|i| idx[i] as f64 * vs[i]);
            beams
                .iter()
                .map(|(e, u, b)| {
                    let rel: [f64; 3] = std::array::from_fn(|i| p[i] - e[i]);
                    let depth: f64 = (0..3).map(|i| rel[i] * u[i]).sum();
                    if depth < 0.0 {
                        return 0.0;
                    }
                    let r2: f64 = (0..3).map(|i| (rel[i] - depth * u[i]).powi(2)).sum();
                    b.weight * (-b.mu_per_mm * depth).exp() * (-r2 / (2.0 * b.sigma_mm * b.sigma_mm)).exp()
                })
                .sum()
        })
        .collect();
    let mut values = raw;
    if !spec.beams.is_empty() {
        let (sum, n) = values
            .iter()
            .zip(&ptv.values)
            .filter(|(_, &m)| m)
            .fold((0.0, 0usize), |(s, n), (v, _)| (s + v, n + 1));
        let mean = sum / n as f64;
        if mean > 0.0 {
            let scale = spec.prescription_dose / mean;
            values.iter_mut().for_each(|v| *v *= scale);
        } else if values.iter().any(|&v| v > 0.0) {
            return Err(Error::InvalidSpec("beams deliver no dose to the PTV".into()));
        }
    }
    let mut vol = DoseVolume::new(spec.extents, spec.voxel_size, values)?;
    vol.seed = spec.seed;
    Ok(vol)
}

/// Per-voxel Gaussian noise with standard deviation
/// `alpha * sqrt(max(x, 0) * reference_dose / histories)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseModel {
    pub alpha: f64,
    pub reference_dose: f64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        NoiseModel { alpha: DEFAULT_NOISE_ALPHA, reference_dose: DEFAULT_PRESCRIPTION }
    }
}

impl NoiseModel {
    pub fn std_at(&self, dose: f64, histories: u64) -> f64 {
        self.alpha * (dose.max(0.0) * self.reference_dose / histories as f64).sqrt()
    }

    pub fn apply(&self, clean: &DoseVolume, histories: u64, seed: u64) -> Result<DoseVolume> {
        ensure!(histories >= 1, Contract, "histories must be >= 1");
        ensure!(
            self.alpha >= 0.0 && self.reference_dose >= 0.0,
            Contract,
            "noise alpha and reference dose must be nonnegative"
        );
        let mut rng = seeded_rng(seed);
        let values = clean
            .values
            .iter()
            .map(|&x| {
                let z: f64 = StandardNormal.sample(&mut rng);
                x + self.std_at(x, histories) * z
            })
            .collect();
        let mut out = clean.with_values(values)?;
        out.histories = Some(histories);
        out.seed = seed;
        Ok(out)
    }
}

/// [`NoiseModel::default`] applied to `clean`.
pub fn add_quantum_noise(clean: &DoseVolume, histories: u64, seed: u64) -> Result<DoseVolume> {
    NoiseModel::default().apply(clean, histories, seed)
}

/// Two noisy realizations of the same clean case.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisePair {
    pub input: DoseVolume,
    pub target: DoseVolume,
    pub case_id: usize,
}

/// One patient stand-in: a clean map, its masks and noisy realizations.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomCase {
    pub id: usize,
    pub spec: PhantomSpec,
    pub clean: DoseVolume,
    pub noisy: Vec<DoseVolume>,
    pub ptv: Mask,
    pub body: Mask,
}

impl PhantomCase {
    /// Realizations `a` and `b` as an input/target pair.
    pub fn pair(&self, a: usize, b: usize) -> Result<NoisePair> {
        let n = self.noisy.len();
        ensure!(a < n && b < n && a != b, Contract, "need two distinct realizations of {n}");
        Ok(NoisePair { input: self.noisy[a].clone(), target: self.noisy[b].clone(), case_id: self.id })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetConfig {
    pub extents: [usize; 3],
    pub n_cases: usize,
    pub histories: u64,
    pub realizations: usize,
    pub noise: NoiseModel,
    pub seed: u64,
}

impl DatasetConfig {
    pub fn new(extents: [usize; 3], n_cases: usize, histories: u64, realizations: usize, seed: u64) -> Self {
        DatasetConfig { extents, n_cases, histories, realizations, noise: NoiseModel::default(), seed }
    }
}

/// Three-beam spec with rotated beams and a jittered, resized PTV.
pub fn jittered_spec(extents: [usize; 3], seed: u64) -> Result<PhantomSpec> {
    let mut rng = seeded_rng(seed);
    for _ in 0..64 {
        let angle = rng.random_range(0.0..2.0 * PI);
        let mut spec = PhantomSpec::three_beam_at(extents, angle);
        let span: [f64; 3] = std::array::from_fn(|i| extents[i] as f64);
        let jitter = [0.1, 0.1, 0.05];
        for i in 0..3 {
            spec.ptv.center[i] += rng.random_range(-1.0..1.0) * jitter[i] * span[i];
        }
        spec.ptv.radius_mm *= rng.random_range(0.8..1.2);
        spec.beams = (0..3).map(|k| spec.beam_towards_ptv(angle + 2.0 * PI * k as f64 / 3.0)).collect();
        spec.seed = seed;
        if spec.validate().is_ok() {
            return Ok(spec);
        }
    }
    Err(Error::InvalidSpec(format!("no valid jittered phantom for extents {extents:?}")))
}

fn generate_case(cfg: &DatasetConfig, id: usize) -> Result<PhantomCase> {
    let case_seed = derive_seed(cfg.seed, id as u64);
    let spec = jittered_spec(cfg.extents, case_seed)?;
    let clean = generate_clean(&spec)?;
    let noisy = (0..cfg.realizations)
        .map(|r| cfg.noise.apply(&clean, cfg.histories, derive_seed(case_seed, 1 + r as u64)))
        .collect::<Result<Vec<_>>>()?;
    Ok(PhantomCase { id, ptv: spec.ptv_mask(), body: spec.body_mask(), spec, clean, noisy })
}

/// Generates `n_cases` cases in parallel; each is a pure function of
/// `(seed, case index)`. With `out`, every case is also written to
/// `out/case_NNN/`.
pub fn generate_dataset(cfg: &DatasetConfig, out: Option<&Path>) -> Result<Vec<PhantomCase>> {
    ensure!(cfg.n_cases >= 1, InvalidConfig, "n_cases must be >= 1");
    ensure!(cfg.histories >= 1, InvalidConfig, "histories must be >= 1");
    let cases = (0..cfg.n_cases)
        .into_par_iter()
        .map(|id| generate_case(cfg, id))
        .collect::<Result<Vec<_>>>()?;
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        for case in &cases {
            write_case(case, &dir.join(format!("case_{:03}", case.id)))?;
        }
    }
    Ok(cases)
}

/// Reads every `case_*` directory below `dir`, in name order.
pub fn load_dataset(dir: &Path) -> Result<Vec<PhantomCase>> {
    let mut dirs: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir() && p.file_name().is_some_and(|n| n.to_string_lossy().starts_with("case_")))
        .collect();
    dirs.sort();
    ensure!(!dirs.is_empty(), Format, "no case_* directories in {}", dir.display());
    dirs.iter().map(|d| load_case(d)).collect()
}
