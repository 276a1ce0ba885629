//! Checkpoint container: versioned header, named tensor manifest,
//! little-endian f32 payloads, and a whole-file SHA-256 trailer.
//!
//! Tensors load by name, so a permuted manifest still restores correctly.

use crate::error::{Error, Result};
use crate::mabg::DESCRIPTOR_ORDER;
use crate::net::{build_network, Network, NetworkConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::Path;

const MAGIC: &[u8; 4] = b"BMNC";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: NetworkConfig,
    descriptor_order: String,
}

fn encode(net: &Network, order: Option<&[usize]>) -> Vec<u8> {
    let infos = net.param_infos();
    let indices: Vec<usize> = match order {
        Some(o) => o.to_vec(),
        None => (0..infos.len()).collect(),
    };
    let header = Header {
        config: net.cfg.clone(),
        descriptor_order: DESCRIPTOR_ORDER.to_string(),
    };
    let header_json = serde_json::to_vec(&header).expect("header serializes");

    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header_json);
    buf.extend_from_slice(&(indices.len() as u32).to_le_bytes());
    for &i in &indices {
        let info = &infos[i];
        let name = info.name.as_bytes();
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name);
        let role = info.name.split_once('.').map(|(_, s)| s).unwrap_or("param");
        buf.push(role.len() as u8);
        buf.extend_from_slice(role.as_bytes());
        let flags = (info.binarized as u8) | ((info.gated as u8) << 1);
        buf.push(flags);
        buf.push(info.shape.len() as u8);
        for &d in &info.shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in net.param_slice(&info.name).expect("listed param exists") {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    buf
}

pub fn save_checkpoint(net: &Network, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode(net, None))?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::CorruptCheckpoint("unexpected end of file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Network> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 4 + 4 + 32 {
        return Err(Error::CorruptCheckpoint("file too small".into()));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::CorruptCheckpoint("bad magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::VersionMismatch { found: version, expected: VERSION });
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 32);
    let digest = Sha256::digest(body);
    if digest.as_slice() != trailer {
        return Err(Error::ChecksumMismatch);
    }

    let mut cur = Cursor { bytes: body, pos: 8 };
    let header_len = cur.u32()? as usize;
    let header: Header = serde_json::from_slice(cur.take(header_len)?)
        .map_err(|e| Error::CorruptCheckpoint(format!("header: {e}")))?;
    if header.descriptor_order != DESCRIPTOR_ORDER {
        return Err(Error::CorruptCheckpoint(format!(
            "descriptor order '{}' unsupported",
            header.descriptor_order
        )));
    }
    let count = cur.u32()? as usize;
    let mut tensors: BTreeMap<String, (Vec<usize>, Vec<f32>)> = BTreeMap::new();
    for _ in 0..count {
        let name_len = cur.u16()? as usize;
        let name = String::from_utf8(cur.take(name_len)?.to_vec())
            .map_err(|_| Error::CorruptCheckpoint("tensor name not utf-8".into()))?;
        let role_len = cur.u8()? as usize;
        let _role = cur.take(role_len)?;
        let _flags = cur.u8()?;
        let rank = cur.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = cur.take(numel * 4)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if tensors.insert(name.clone(), (shape, data)).is_some() {
            return Err(Error::CorruptCheckpoint(format!("duplicate tensor {name}")));
        }
    }
    if cur.pos != body.len() {
        return Err(Error::CorruptCheckpoint("trailing bytes after manifest".into()));
    }

    let mut net = build_network(&header.config, 0)?;
    for info in net.param_infos() {
        let (shape, data) = tensors.remove(&info.name).ok_or_else(|| {
            Error::CorruptCheckpoint(format!("missing tensor {}", info.name))
        })?;
        if shape != info.shape {
            return Err(Error::CorruptCheckpoint(format!(
                "tensor {} has shape {shape:?}, expected {:?}",
                info.name, info.shape
            )));
        }
        net.param_slice_mut(&info.name).unwrap().copy_from_slice(&data);
    }
    if let Some((name, _)) = tensors.into_iter().next() {
        return Err(Error::CorruptCheckpoint(format!("unexpected tensor {name}")));
    }
    Ok(net)
}
