//! `DDPK` checkpoint files.
//!
//! ```text
//! "DDPK"  u32 version  u64 seed  u32 model tag  u32 base_features  u32 num_down
//! repeated per parameter tensor: u32 id  u64 element count  f64 values
//! ```
//!
//! All integers and floats are little-endian. Parameter ids run from zero in
//! the order weight, bias (per convolution) and scale, shift (per instance
//! norm) as the layers appear in the plan.

use std::fs;
use std::path::Path;

use super::{build, ModelKind, Network, ScaledConfig};
use crate::error::{ensure, Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"DDPK";
const HEADER_LEN: u64 = 4 + 4 + 8 + 3 * 4;

/// Exact size in bytes of the checkpoint written for a network with these
/// parameter tensor lengths.
pub fn checkpoint_size(param_lens: impl IntoIterator<Item = usize>) -> u64 {
    HEADER_LEN + param_lens.into_iter().map(|n| 12 + 8 * n as u64).sum::<u64>()
}

pub(crate) fn encode(net: &Network) -> Vec<u8> {
    let size = checkpoint_size(net.params.iter().map(Tensor::len));
    let mut out = Vec::with_capacity(size as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&net.seed.to_le_bytes());
    out.extend_from_slice(&net.graph.kind.tag().to_le_bytes());
    out.extend_from_slice(&(net.graph.base_features as u32).to_le_bytes());
    out.extend_from_slice(&(net.graph.num_down as u32).to_le_bytes());
    for (id, p) in net.params.iter().enumerate() {
        out.extend_from_slice(&(id as u32).to_le_bytes());
        out.extend_from_slice(&(p.len() as u64).to_le_bytes());
        for v in p.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| {
            Error::Format(format!("checkpoint truncated while reading {what} at byte {}", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

pub(crate) fn decode(bytes: &[u8]) -> Result<Network> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    ensure!(magic == MAGIC, Format, "not a DDPK checkpoint (magic {magic:?})");
    let version = r.u32("version")?;
    ensure!(
        version == CHECKPOINT_VERSION,
        Format,
        "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
    );
    let seed = r.u64("seed")?;
    let kind = ModelKind::from_tag(r.u32("model tag")?)?;
    let base = r.u32("base_features")? as usize;
    let num_down = r.u32("num_down")? as usize;

    let probe = ScaledConfig::new(base, num_down, [1; 3]);
    let extents = [probe.divisor(kind); 3];
    let graph = build(kind, &ScaledConfig::new(base, num_down, extents))
        .map_err(|e| Error::Format(format!("checkpoint config rejected: {e}")))?;

    let mut params = Vec::with_capacity(graph.param_shapes().len());
    for (id, shape) in graph.param_shapes().iter().enumerate() {
        let got_id = r.u32("parameter id")?;
        ensure!(got_id as usize == id, Format, "expected parameter id {id}, found {got_id}");
        let count = r.u64("element count")?;
        let want: usize = shape.iter().product();
        ensure!(
            count == want as u64,
            Format,
            "parameter {id} holds {count} values, the {kind} plan needs {want}"
        );
        let raw = r.take(8 * want, "parameter values")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        params.push(Tensor::from_vec(shape, data)?);
    }
    ensure!(
        r.pos == bytes.len(),
        Format,
        "{} trailing bytes after the last parameter",
        bytes.len() - r.pos
    );
    Network::from_params(graph, params, seed)
}

pub fn save_checkpoint(net: &Network, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode(net))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Network> {
    decode(&fs::read(path)?)
}
