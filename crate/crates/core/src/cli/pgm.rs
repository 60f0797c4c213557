//! 8-bit binary PGM (`P5`) exports of the middle slices of a volume.

use std::path::{Path, PathBuf};

use crate::error::Result;
use crate::phantom::DoseVolume;

/// Display window for doses, in Gy.
pub const DOSE_WINDOW: (f64, f64) = (0.0, 80.0);
/// Display window for dose differences, in Gy.
pub const DIFF_WINDOW: (f64, f64) = (-8.0, 8.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Plane {
    /// Fixed depth index, rows along H, columns along W.
    Axial,
    /// Fixed H index, rows along D, columns along W.
    Coronal,
    /// Fixed W index, rows along D, columns along H.
    Sagittal,
}

impl Plane {
    pub const ALL: [Plane; 3] = [Plane::Axial, Plane::Coronal, Plane::Sagittal];

    pub fn name(self) -> &'static str {
        match self {
            Plane::Axial => "axial",
            Plane::Coronal => "coronal",
            Plane::Sagittal => "sagittal",
        }
    }
}

fn to_byte(v: f64, (lo, hi): (f64, f64)) -> u8 {
    (255.0 * ((v - lo) / (hi - lo)).clamp(0.0, 1.0)).round() as u8
}

/// Middle slice of `volume` in `plane` as `(width, height, pixels)`.
pub fn middle_slice(volume: &DoseVolume, plane: Plane, window: (f64, f64)) -> (usize, usize, Vec<u8>) {
    let [h, w, d] = volume.extents;
    let at = |i, j, k| to_byte(volume.get([i, j, k]), window);
    match plane {
        Plane::Axial => (w, h, (0..h).flat_map(|i| (0..w).map(move |j| (i, j))).map(|(i, j)| at(i, j, d / 2)).collect()),
        Plane::Coronal => {
            (w, d, (0..d).flat_map(|k| (0..w).map(move |j| (k, j))).map(|(k, j)| at(h / 2, j, k)).collect())
        }
        Plane::Sagittal => {
            (h, d, (0..d).flat_map(|k| (0..h).map(move |i| (k, i))).map(|(k, i)| at(i, w / 2, k)).collect())
        }
    }
}

pub fn pgm_bytes(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Writes `{prefix}_{plane}.pgm` for the three planes and returns the paths.
pub fn write_slices(volume: &DoseVolume, dir: &Path, prefix: &str, window: (f64, f64)) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    Plane::ALL
        .iter()
        .map(|&p| {
            let (w, h, px) = middle_slice(volume, p, window);
            let path = dir.join(format!("{prefix}_{}.pgm", p.name()));
            std::fs::write(&path, pgm_bytes(w, h, &px))?;
            Ok(path)
        })
        .collect()
}
