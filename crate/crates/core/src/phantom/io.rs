//! `DVOL` dose volumes, `DMSK` masks and per-case manifests.
//!
//! Both binary formats share one header, little-endian throughout:
//!
//! ```text
//! magic[4]  u32 version=1  u32 H  u32 W  u32 D  f32 voxel size ×3 (mm)
//! u64 histories (0 = clean)  u64 seed  then H·W·D f32 values, depth fastest
//! ```

use std::path::Path;

use super::{jittered_spec, DoseVolume, Mask, PhantomCase};
use crate::error::{ensure, Error, Result};
use crate::kv::{format_extents, parse_extents, KeyValues};

const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 12 + 12 + 8 + 8;

struct Header {
    extents: [usize; 3],
    voxel_size: [f64; 3],
    histories: u64,
    seed: u64,
}

fn encode(magic: &[u8; 4], h: &Header, values: impl ExactSizeIterator<Item = f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * values.len());
    out.extend_from_slice(magic);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for e in h.extents {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for v in h.voxel_size {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out.extend_from_slice(&h.histories.to_le_bytes());
    out.extend_from_slice(&h.seed.to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn decode(magic: &[u8; 4], bytes: &[u8]) -> Result<(Header, Vec<f32>)> {
    let name = String::from_utf8_lossy(magic);
    ensure!(bytes.len() >= HEADER_LEN, Format, "{name} file truncated in header ({} bytes)", bytes.len());
    ensure!(&bytes[..4] == magic, Format, "bad magic {:?}, expected {name}", &bytes[..4]);
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().expect("8 bytes"));
    let f32_at = |o: usize| f32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    let version = u32_at(4);
    ensure!(version == VERSION, Format, "unsupported {name} version {version}");
    let extents = [u32_at(8) as usize, u32_at(12) as usize, u32_at(16) as usize];
    ensure!(extents.iter().all(|&e| e >= 1), Format, "{name} extents {extents:?} must be >= 1");
    let voxel_size = [f32_at(20) as f64, f32_at(24) as f64, f32_at(28) as f64];
    let header = Header { extents, voxel_size, histories: u64_at(32), seed: u64_at(40) };
    let n = extents.iter().try_fold(1usize, |a, &e| a.checked_mul(e));
    let n = n.ok_or_else(|| Error::Format(format!("{name} extents overflow")))?;
    let want = n.checked_mul(4).and_then(|b| b.checked_add(HEADER_LEN));
    ensure!(
        want == Some(bytes.len()),
        Format,
        "{name} payload is {} bytes, extents {extents:?} need {}",
        bytes.len() - HEADER_LEN,
        4 * n
    );
    let values = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok((header, values))
}

pub(crate) fn volume_bytes(v: &DoseVolume) -> Vec<u8> {
    let h = Header {
        extents: v.extents,
        voxel_size: v.voxel_size,
        histories: v.histories.unwrap_or(0),
        seed: v.seed,
    };
    encode(b"DVOL", &h, v.values.iter().map(|&x| x as f32))
}

pub(crate) fn volume_from_bytes(bytes: &[u8]) -> Result<DoseVolume> {
    let (h, vals) = decode(b"DVOL", bytes)?;
    ensure!(vals.iter().all(|v| v.is_finite()), Format, "DVOL contains non-finite values");
    let mut v = DoseVolume::new(h.extents, h.voxel_size, vals.into_iter().map(f64::from).collect())?;
    v.histories = (h.histories != 0).then_some(h.histories);
    v.seed = h.seed;
    Ok(v)
}

pub fn write_volume(path: &Path, v: &DoseVolume) -> Result<()> {
    std::fs::write(path, volume_bytes(v))?;
    Ok(())
}

pub fn read_volume(path: &Path) -> Result<DoseVolume> {
    volume_from_bytes(&std::fs::read(path)?)
        .map_err(|e| annotate(e, path))
}

pub fn write_mask(path: &Path, m: &Mask) -> Result<()> {
    let h = Header { extents: m.extents, voxel_size: m.voxel_size, histories: 0, seed: 0 };
    std::fs::write(path, encode(b"DMSK", &h, m.values.iter().map(|&b| if b { 1.0 } else { 0.0 })))?;
    Ok(())
}

pub fn read_mask(path: &Path) -> Result<Mask> {
    let (h, vals) = decode(b"DMSK", &std::fs::read(path)?).map_err(|e| annotate(e, path))?;
    ensure!(
        vals.iter().all(|&v| v == 0.0 || v == 1.0),
        Format,
        "{}: mask values must be 0 or 1",
        path.display()
    );
    Ok(Mask { extents: h.extents, voxel_size: h.voxel_size, values: vals.iter().map(|&v| v == 1.0).collect() })
}

fn annotate(e: Error, path: &Path) -> Error {
    match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    }
}

/// Contents of `manifest.txt` in a case directory. File names are relative
/// to that directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaseManifest {
    pub case_id: usize,
    pub spec_seed: u64,
    pub extents: [usize; 3],
    pub histories: u64,
    pub clean: String,
    pub noisy: Vec<String>,
    pub ptv: String,
    pub body: String,
}

impl CaseManifest {
    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("case_id", self.case_id)
            .set("spec", "jittered-three-beam")
            .set("spec_seed", self.spec_seed)
            .set("extents", format_extents(self.extents))
            .set("histories", self.histories)
            .set("clean", &self.clean)
            .set("noisy", self.noisy.join(","))
            .set("ptv", &self.ptv)
            .set("body", &self.body);
        kv
    }

    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let noisy: Vec<String> = kv
            .require("noisy")?
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(String::from)
            .collect();
        Ok(CaseManifest {
            case_id: kv.parse_value("case_id")?,
            spec_seed: kv.parse_value("spec_seed")?,
            extents: parse_extents(kv.require("extents")?).map_err(|e| Error::Format(e.to_string()))?,
            histories: kv.parse_value("histories")?,
            clean: kv.require("clean")?.to_string(),
            noisy,
            ptv: kv.require("ptv")?.to_string(),
            body: kv.require("body")?.to_string(),
        })
    }
}

/// Writes clean and noisy volumes, masks and `manifest.txt` into `dir`.
pub fn write_case(case: &PhantomCase, dir: &Path) -> Result<CaseManifest> {
    std::fs::create_dir_all(dir)?;
    let manifest = CaseManifest {
        case_id: case.id,
        spec_seed: case.spec.seed,
        extents: case.spec.extents,
        histories: case.noisy.first().and_then(|v| v.histories).unwrap_or(0),
        clean: "clean.dvol".into(),
        noisy: (0..case.noisy.len()).map(|r| format!("noisy_{r:02}.dvol")).collect(),
        ptv: "ptv.dmsk".into(),
        body: "body.dmsk".into(),
    };
    write_volume(&dir.join(&manifest.clean), &case.clean)?;
    for (name, v) in manifest.noisy.iter().zip(&case.noisy) {
        write_volume(&dir.join(name), v)?;
    }
    write_mask(&dir.join(&manifest.ptv), &case.ptv)?;
    write_mask(&dir.join(&manifest.body), &case.body)?;
    manifest.to_kv().write(&dir.join("manifest.txt"))?;
    Ok(manifest)
}

/// Reads a directory written by [`write_case`]. The geometry spec is
/// regenerated from the recorded seed.
pub fn load_case(dir: &Path) -> Result<PhantomCase> {
    let m = CaseManifest::from_kv(&KeyValues::read(&dir.join("manifest.txt"))?)
        .map_err(|e| annotate(e, &dir.join("manifest.txt")))?;
    let clean = read_volume(&dir.join(&m.clean))?;
    let noisy = m.noisy.iter().map(|n| read_volume(&dir.join(n))).collect::<Result<Vec<_>>>()?;
    let ptv = read_mask(&dir.join(&m.ptv))?;
    let body = read_mask(&dir.join(&m.body))?;
    for (what, e) in [("clean", clean.extents), ("ptv", ptv.extents), ("body", body.extents)]
        .into_iter()
        .chain(noisy.iter().map(|v| ("noisy", v.extents)))
    {
        ensure!(e == m.extents, Format, "{}: {what} extents {e:?} != manifest {:?}", dir.display(), m.extents);
    }
    let spec = jittered_spec(m.extents, m.spec_seed)?;
    Ok(PhantomCase { id: m.case_id, spec, clean, noisy, ptv, body })
}
