//! Binary checkpoint, little-endian throughout:
//!
//! ```text
//! magic      8 bytes  "MILFCN1\0"
//! version    u32      1
//! config     u32 num_fg_classes, u32 stage count, u32 width per stage,
//!            u32 kernel size, u32 downsample
//! params     u32 count, then per tensor:
//!            u32 name length, UTF-8 name, u32 rank, u32 per dim, f64 per value
//! velocities same framing as params
//! iteration  u64
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::net::{Network, NetworkConfig, Param};
use crate::tensor::Tensor;
use crate::train::optim::OptimState;

pub const MAGIC: &[u8; 8] = b"MILFCN1\0";
pub const VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_tensors<'a>(out: &mut Vec<u8>, tensors: impl ExactSizeIterator<Item = (&'a str, &'a Tensor)>) {
    put_u32(out, tensors.len());
    for (name, t) in tensors {
        put_u32(out, name.len());
        out.extend_from_slice(name.as_bytes());
        put_u32(out, t.rank());
        for &d in t.shape() {
            put_u32(out, d);
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

pub fn encode_checkpoint(net: &Network, state: &OptimState) -> Result<Vec<u8>> {
    let cfg = net.config();
    if state.velocities.len() != net.params().len() {
        return Err(Error::Checkpoint(format!(
            "{} velocity buffers for {} parameters",
            state.velocities.len(),
            net.params().len()
        )));
    }
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION as usize);
    put_u32(&mut out, cfg.num_fg_classes);
    put_u32(&mut out, cfg.widths.len());
    for &w in &cfg.widths {
        put_u32(&mut out, w);
    }
    put_u32(&mut out, cfg.kernel_size);
    put_u32(&mut out, cfg.downsample);
    put_tensors(
        &mut out,
        net.params().iter().map(|p| (p.name.as_str(), &p.value)),
    );
    put_tensors(
        &mut out,
        net.params()
            .iter()
            .zip(&state.velocities)
            .map(|(p, v)| (p.name.as_str(), v)),
    );
    out.extend_from_slice(&state.iteration.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint(format!(
                "truncated at byte {} while reading {}",
                self.pos, what
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }

    fn tensors(&mut self) -> Result<Vec<Param>> {
        let count = self.u32("tensor count")?;
        let mut out = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let len = self.u32("name length")?;
            let name = std::str::from_utf8(self.take(len, "tensor name")?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = self.u32("rank")?;
            if !(1..=4).contains(&rank) {
                return Err(Error::Checkpoint(format!("tensor {name} has rank {rank}")));
            }
            let shape = (0..rank)
                .map(|_| self.u32("dims"))
                .collect::<Result<Vec<_>>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|&n| n.checked_mul(8).is_some_and(|b| b <= self.bytes.len()))
                .ok_or_else(|| {
                    Error::Checkpoint(format!("tensor {name} shape {shape:?} is too large"))
                })?;
            let raw = self.take(8 * numel, "tensor values")?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            out.push(Param {
                name,
                value: Tensor::new(&shape, data)?,
            });
        }
        Ok(out)
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(Network, OptimState)> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Checkpoint(
            "bad magic, expected \"MILFCN1\\0\"".into(),
        ));
    }
    let mut r = Reader { bytes, pos: 8 };
    let version = r.u32("version")?;
    if version != VERSION as usize {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version}, expected {VERSION}"
        )));
    }
    let num_fg_classes = r.u32("num_fg_classes")?;
    let stages = r.u32("stage count")?;
    if stages > 64 {
        return Err(Error::Checkpoint(format!("implausible stage count {stages}")));
    }
    let widths = (0..stages)
        .map(|_| r.u32("stage width"))
        .collect::<Result<Vec<_>>>()?;
    let kernel_size = r.u32("kernel size")?;
    let downsample = r.u32("downsample")?;

    let params = r.tensors()?;
    let velocities = r.tensors()?;
    let iteration = u64::from_le_bytes(r.take(8, "iteration")?.try_into().expect("8 bytes"));
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }

    let input_channels = params
        .first()
        .and_then(|p| p.value.shape().get(1).copied())
        .ok_or_else(|| Error::Checkpoint("no parameters".into()))?;
    let config = NetworkConfig {
        num_fg_classes,
        widths,
        kernel_size,
        downsample,
        input_channels,
    };
    let net = Network::from_params(config, params)
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    if velocities.len() != net.params().len()
        || velocities
            .iter()
            .zip(net.params())
            .any(|(v, p)| v.value.shape() != p.value.shape())
    {
        return Err(Error::Checkpoint(
            "velocity buffers do not mirror parameters".into(),
        ));
    }
    let state = OptimState {
        velocities: velocities.into_iter().map(|p| p.value).collect(),
        iteration,
    };
    Ok((net, state))
}

pub fn save_checkpoint(net: &Network, state: &OptimState, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(net, state)?;
    fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn load_checkpoint(path: &Path) -> Result<(Network, OptimState)> {
    let bytes =
        fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    decode_checkpoint(&bytes)
}
