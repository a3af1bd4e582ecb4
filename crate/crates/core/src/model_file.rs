//! Binary model container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "MBSN"  u32 version  u32 spec_len  spec (JSON, spec_len bytes)
//! u32 record_count
//! record_count x { u32 tag  u32 ndim  u32 dims[ndim]  f32 data[prod(dims)] }
//! u32 crc32 of every preceding byte
//! ```
//!
//! Records follow the canonical tensor order of the network.

use std::path::Path;

use crate::error::{Error, Result};
use crate::network::{LayerParams, Network, NetworkSpec, TensorTag};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MBSN";
pub const VERSION: u32 = 1;

pub fn encode_model(net: &Network) -> Vec<u8> {
    let spec = serde_json::to_vec(net.spec()).expect("spec serializes");
    let tensors = net.tensors();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(spec.len() as u32).to_le_bytes());
    out.extend_from_slice(&spec);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (tag, t) in tensors {
        out.extend_from_slice(&(tag as u32).to_le_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Parse(format!("model file truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn decode_model(bytes: &[u8]) -> Result<Network> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::Parse("not a model file (bad magic)".into()));
    }
    if bytes.len() < 16 {
        return Err(Error::Parse("model file truncated".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes([tail[0], tail[1], tail[2], tail[3]]);
    if crc32fast::hash(body) != stored {
        return Err(Error::Parse("model file checksum mismatch".into()));
    }
    let mut r = Reader { buf: body, pos: 4 };
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Parse(format!("unsupported model file version {version}")));
    }
    let spec_len = r.u32()? as usize;
    let spec: NetworkSpec = serde_json::from_slice(r.take(spec_len)?)?;
    spec.validate()?;
    let mut layers: Vec<LayerParams> = spec.layers.iter().map(LayerParams::zeros_for).collect();
    let count = r.u32()? as usize;
    let mut slots: Vec<(TensorTag, &mut Tensor)> = layers.iter_mut().flat_map(|l| l.tensors_mut()).collect();
    if count != slots.len() {
        return Err(Error::Parse(format!("{count} tensor records, spec needs {}", slots.len())));
    }
    for (i, (tag, slot)) in slots.iter_mut().enumerate() {
        let raw = r.u32()?;
        if TensorTag::from_u32(raw) != Some(*tag) {
            return Err(Error::Parse(format!("record {i}: tag {raw}, expected {}", *tag as u32)));
        }
        let ndim = r.u32()? as usize;
        let dims = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        if dims != slot.shape() {
            return Err(Error::Parse(format!("record {i}: dims {dims:?}, expected {:?}", slot.shape())));
        }
        let data = r.take(4 * slot.len())?;
        for (v, b) in slot.data_mut().iter_mut().zip(data.chunks_exact(4)) {
            *v = f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64;
        }
    }
    if r.pos != body.len() {
        return Err(Error::Parse(format!("{} trailing bytes before checksum", body.len() - r.pos)));
    }
    for layer in &layers {
        if let LayerParams::BatchNorm(b) = layer {
            b.validate().map_err(|e| Error::Parse(format!("invalid batch norm record: {e}")))?;
        }
    }
    Network::new(spec, layers)
}

pub fn save_model(net: &Network, path: &Path) -> Result<()> {
    std::fs::write(path, encode_model(net)).map_err(|e| Error::io_at(path, e))?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<Network> {
    decode_model(&std::fs::read(path).map_err(|e| Error::io_at(path, e))?)
}
