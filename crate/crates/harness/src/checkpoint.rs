//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "IBRAR1"  u32 version
//! u32 len, NetworkConfig text (UTF-8)
//! u32 param count; per param: u32 rank, rank × u32 dims, f32 values
//! u8 mask flag; if 1: u32 channels, ceil(channels/8) keep bytes (LSB first),
//!                    f64 threshold, u32 epoch (u32::MAX = none), u32 batches
//! u64 seed, u32 epoch, 32-byte config hash
//! ```
//!
//! Parameters are narrowed to f32; everything else is exact, so saving a
//! loaded checkpoint reproduces the file byte for byte.

use crate::error::{HarnessError, Result};
use ibrar_core::{ChannelMask, Network, NetworkConfig, Tensor};
use std::fs;
use std::path::{Path, PathBuf};

pub const MAGIC: &[u8; 6] = b"IBRAR1";
pub const VERSION: u32 = 1;
const NO_EPOCH: u32 = u32::MAX;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CheckpointMeta {
    pub seed: u64,
    /// Number of completed training epochs.
    pub epoch: u32,
    pub config_hash: [u8; 32],
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub network: Network,
    pub meta: CheckpointMeta,
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn push_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&u32::try_from(v).expect("checkpoint field exceeds u32").to_le_bytes());
}

pub fn encode(net: &Network, meta: &CheckpointMeta) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + 4 * net.param_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let text = net.config().to_text();
    push_u32(&mut out, text.len());
    out.extend_from_slice(text.as_bytes());
    push_u32(&mut out, net.params().len());
    for p in net.params() {
        push_u32(&mut out, p.shape().len());
        for &d in p.shape() {
            push_u32(&mut out, d);
        }
        for &v in p.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    match net.mask() {
        None => out.push(0),
        Some(mask) => {
            out.push(1);
            push_u32(&mut out, mask.channels());
            let mut bits = vec![0u8; mask.channels().div_ceil(8)];
            for (i, _) in mask.keep().iter().enumerate().filter(|(_, &k)| k) {
                bits[i / 8] |= 1 << (i % 8);
            }
            out.extend_from_slice(&bits);
            out.extend_from_slice(&mask.threshold().to_le_bytes());
            match mask.epoch {
                Some(e) => push_u32(&mut out, e),
                None => out.extend_from_slice(&NO_EPOCH.to_le_bytes()),
            }
            push_u32(&mut out, mask.batches);
        }
    }
    out.extend_from_slice(&meta.seed.to_le_bytes());
    out.extend_from_slice(&meta.epoch.to_le_bytes());
    out.extend_from_slice(&meta.config_hash);
    out
}

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(HarnessError::CheckpointTruncated {
                path: self.path.to_path_buf(),
                what,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn usize(&mut self, what: &'static str) -> Result<usize> {
        Ok(self.u32(what)? as usize)
    }

    fn malformed(&self, reason: impl Into<String>) -> HarnessError {
        HarnessError::CheckpointMalformed {
            path: self.path.to_path_buf(),
            reason: reason.into(),
        }
    }
}

pub fn decode(path: &Path, bytes: &[u8]) -> Result<Checkpoint> {
    let head = &bytes[..bytes.len().min(MAGIC.len())];
    if head != MAGIC {
        return Err(HarnessError::CheckpointMagic {
            path: path.to_path_buf(),
            observed: head.to_vec(),
        });
    }
    let mut r = Reader {
        path,
        bytes,
        pos: MAGIC.len(),
    };
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(HarnessError::CheckpointVersion {
            path: path.to_path_buf(),
            found: version,
            supported: VERSION,
        });
    }
    let len = r.usize("config length")?;
    let text =
        std::str::from_utf8(r.take(len, "network config")?).map_err(|_| r.malformed("network config is not UTF-8"))?;
    let config = NetworkConfig::from_text(text).map_err(|e| r.malformed(format!("network config: {e}")))?;

    let count = r.usize("parameter count")?;
    let expected: Vec<Vec<usize>> = Network::new(config.clone(), 0)
        .map_err(|e| r.malformed(format!("network config: {e}")))?
        .params()
        .iter()
        .map(|p| p.shape().to_vec())
        .collect();
    if count != expected.len() {
        return Err(r.malformed(format!("{count} parameter arrays, the network has {}", expected.len())));
    }
    let mut params = Vec::with_capacity(count);
    for want in &expected {
        let rank = r.usize("parameter rank")?;
        if rank != want.len() {
            return Err(r.malformed(format!(
                "parameter {} has rank {rank}, expected {}",
                params.len(),
                want.len()
            )));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.usize("parameter shape")?);
        }
        if &shape != want {
            return Err(r.malformed(format!(
                "parameter {} has shape {shape:?}, expected {want:?}",
                params.len()
            )));
        }
        let n: usize = shape.iter().product();
        let raw = r.take(4 * n, "parameter values")?;
        let data: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(r.malformed(format!("parameter {} contains non-finite values", params.len())));
        }
        params.push(Tensor::new(shape, data)?);
    }
    let mut network = Network::from_params(config, params).map_err(|e| r.malformed(e.to_string()))?;

    match r.take(1, "mask flag")?[0] {
        0 => {}
        1 => {
            let channels = r.usize("mask width")?;
            let bits = r.take(channels.div_ceil(8), "mask bits")?;
            let keep: Vec<bool> = (0..channels).map(|i| bits[i / 8] >> (i % 8) & 1 == 1).collect();
            if channels % 8 != 0 && bits[channels / 8] >> (channels % 8) != 0 {
                return Err(r.malformed("mask padding bits are set"));
            }
            let threshold = f64::from_le_bytes(r.take(8, "mask threshold")?.try_into().unwrap());
            let epoch = r.u32("mask epoch")?;
            let batches = r.usize("mask batches")?;
            let mut mask = ChannelMask::from_parts(keep, threshold);
            mask.epoch = (epoch != NO_EPOCH).then_some(epoch as usize);
            mask.batches = batches;
            network.set_mask(mask).map_err(|e| r.malformed(e.to_string()))?;
        }
        f => return Err(r.malformed(format!("mask flag {f} is neither 0 nor 1"))),
    }

    let seed = u64::from_le_bytes(r.take(8, "seed")?.try_into().unwrap());
    let epoch = r.u32("epoch")?;
    let config_hash: [u8; 32] = r.take(32, "config hash")?.try_into().unwrap();
    if r.pos != bytes.len() {
        return Err(r.malformed(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(Checkpoint {
        network,
        meta: CheckpointMeta {
            seed,
            epoch,
            config_hash,
        },
    })
}

pub fn save_checkpoint(net: &Network, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    }
    fs::write(path, encode(net, meta)).map_err(|e| HarnessError::io(path, e))
}

/// Reads a checkpoint. With `expect_hash`, a checkpoint written under a
/// different configuration is refused.
pub fn load_checkpoint(path: &Path, expect_hash: Option<&[u8; 32]>) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| HarnessError::io(path, e))?;
    let ck = decode(path, &bytes)?;
    if let Some(expected) = expect_hash {
        if &ck.meta.config_hash != expected {
            return Err(HarnessError::CheckpointHash {
                path: PathBuf::from(path),
                found: hex(&ck.meta.config_hash),
                expected: hex(expected),
            });
        }
    }
    Ok(ck)
}
