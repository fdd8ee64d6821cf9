//! Binary checkpoint format (all integers and floats little-endian):
//!
//! ```text
//! magic            8 bytes  "RFDCKPT\0"
//! format_version   u32
//! hyperparameters  6 x u32  data_dim width depth classes time_pairs cond_dim
//! meta_len         u32      followed by meta_len bytes of UTF-8 JSON (CheckpointMeta)
//! tensor_count     u32
//! per tensor:      u32 name_len, name bytes, u32 rank, rank x u64 dims,
//!                  prod(dims) x f64
//! checksum         u64      FNV-1a over every preceding byte
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::net::{NetConfig, VelocityNet};
use super::params::ParamSet;
use crate::error::{Error, Result};
use crate::ndcore::{RngState, Tensor};

pub const MAGIC: &[u8; 8] = b"RFDCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub stage: String,
    pub iteration: u64,
    #[serde(default)]
    pub schedule: Vec<f64>,
    #[serde(default)]
    pub rng: Option<RngState>,
    #[serde(default)]
    pub extra: BTreeMap<String, String>,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

pub fn encode(net: &VelocityNet, meta: &CheckpointMeta) -> Vec<u8> {
    let cfg = net.config();
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for v in [cfg.data_dim, cfg.width, cfg.depth, cfg.classes, cfg.time_pairs, cfg.cond_dim] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    let meta_json = serde_json::to_vec(meta).expect("metadata serializes");
    buf.extend_from_slice(&(meta_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&meta_json);
    buf.extend_from_slice(&(net.params().len() as u32).to_le_bytes());
    for (name, t) in net.params().iter() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let sum = fnv1a(&buf);
    buf.extend_from_slice(&sum.to_le_bytes());
    buf
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        if self.buf.len() - self.pos < n {
            return Err(format!("truncated at byte {} (wanted {n} more)", self.pos));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(buf: &[u8]) -> std::result::Result<(NetConfig, ParamSet, CheckpointMeta), String> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(MAGIC.len()).map_err(|_| "file too short for magic".to_string())? != MAGIC {
        return Err("bad magic bytes".into());
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(format!("format version {version}, expected {FORMAT_VERSION}"));
    }
    if buf.len() < r.pos + 8 {
        return Err("truncated before checksum".into());
    }
    let body_end = buf.len() - 8;
    let stored = u64::from_le_bytes(buf[body_end..].try_into().unwrap());
    let r_body = &buf[..body_end];
    let mut h = [0u32; 6];
    for v in h.iter_mut() {
        *v = r.u32()?;
    }
    let cfg = NetConfig {
        data_dim: h[0] as usize,
        width: h[1] as usize,
        depth: h[2] as usize,
        classes: h[3] as usize,
        time_pairs: h[4] as usize,
        cond_dim: h[5] as usize,
    };
    let meta_len = r.u32()? as usize;
    let meta: CheckpointMeta =
        serde_json::from_slice(r.take(meta_len)?).map_err(|e| format!("metadata: {e}"))?;
    let count = r.u32()? as usize;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let nlen = r.u32()? as usize;
        let name = String::from_utf8(r.take(nlen)?.to_vec()).map_err(|_| "tensor name is not UTF-8".to_string())?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(8).ok_or("tensor size overflow")?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.push(name, Tensor::new(&shape, data).map_err(|e| e.to_string())?);
    }
    if r.pos != body_end {
        return Err(format!("{} trailing bytes before checksum", body_end as isize - r.pos as isize));
    }
    if fnv1a(r_body) != stored {
        return Err("checksum mismatch".into());
    }
    Ok((cfg, params, meta))
}

pub fn save_checkpoint(net: &VelocityNet, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(path, encode(net, meta))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(VelocityNet, CheckpointMeta)> {
    let bytes = fs::read(path)?;
    let ck = |reason: String| Error::Checkpoint {
        path: path.to_path_buf(),
        reason,
    };
    let (cfg, params, meta) = decode(&bytes).map_err(ck)?;
    let net = VelocityNet::from_params(cfg, params).map_err(|e| ck(e.to_string()))?;
    Ok((net, meta))
}

/// Loads and additionally requires the stored hyperparameters to equal `expected`.
pub fn load_checkpoint_expecting(path: &Path, expected: &NetConfig) -> Result<(VelocityNet, CheckpointMeta)> {
    let (net, meta) = load_checkpoint(path)?;
    if net.config() != expected {
        let (a, b) = (net.config(), expected);
        return Err(Error::Checkpoint {
            path: path.to_path_buf(),
            reason: format!(
                "shape mismatch: stored width {} depth {} classes {}, configured width {} depth {} classes {}",
                a.width, a.depth, a.classes, b.width, b.depth, b.classes
            ),
        });
    }
    Ok((net, meta))
}
