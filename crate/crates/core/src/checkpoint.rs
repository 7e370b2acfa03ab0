//! `ICEP` checkpoint files.
//!
//! Layout (all integers little-endian `u32` unless noted):
//!
//! ```text
//! "ICEP" | version | input rank | input dims... | layer count
//! per layer: kind u8 | frozen u8 | geometry | weight rank | weight dims...
//! per parameterized layer: weight f32s, then bias f32s
//! per prunable layer: mask bits packed LSB-first, ceil(n / 8) bytes, 1 = retained
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::layer::{Layer, LayerKind};
use crate::network::Network;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"ICEP";
pub const VERSION: u32 = 1;

fn kind_code(k: LayerKind) -> u8 {
    match k {
        LayerKind::Dense => 0,
        LayerKind::Conv2d => 1,
        LayerKind::Relu => 2,
        LayerKind::MaxPool2d => 3,
        LayerKind::Flatten => 4,
    }
}

fn kind_from(code: u8) -> Option<LayerKind> {
    Some(match code {
        0 => LayerKind::Dense,
        1 => LayerKind::Conv2d,
        2 => LayerKind::Relu,
        3 => LayerKind::MaxPool2d,
        4 => LayerKind::Flatten,
        _ => return None,
    })
}

pub fn encode(net: &Network) -> Vec<u8> {
    let mut b = Vec::new();
    let u32le = |b: &mut Vec<u8>, v: usize| b.extend_from_slice(&(v as u32).to_le_bytes());
    b.extend_from_slice(MAGIC);
    b.extend_from_slice(&VERSION.to_le_bytes());
    u32le(&mut b, net.input_shape().len());
    for &d in net.input_shape() {
        u32le(&mut b, d);
    }
    u32le(&mut b, net.layers().len());
    for l in net.layers() {
        b.push(kind_code(l.kind()));
        b.push(l.frozen() as u8);
        u32le(&mut b, l.geometry);
        let dims = l.weight().map(|w| w.shape().to_vec()).unwrap_or_default();
        u32le(&mut b, dims.len());
        for d in dims {
            u32le(&mut b, d);
        }
    }
    for l in net.layers() {
        for (_, t) in l.params() {
            for v in t.data() {
                b.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    for m in net.masks().iter().flatten() {
        let mut bytes = vec![0u8; m.len().div_ceil(8)];
        for (i, &keep) in m.iter().enumerate() {
            if keep {
                bytes[i / 8] |= 1 << (i % 8);
            }
        }
        b.extend_from_slice(&bytes);
    }
    b
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos + n).ok_or_else(|| Error::Parse {
            offset: self.pos as u64,
            message: format!("truncated checkpoint while reading {what}"),
        })?;
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()) as usize)
    }

    fn err(&self, at: usize, message: impl Into<String>) -> Error {
        Error::Parse {
            offset: at as u64,
            message: message.into(),
        }
    }
}

pub fn decode(bytes: &[u8]) -> Result<Network> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(r.err(0, "not an ICEP checkpoint"));
    }
    let version = r.u32("version")?;
    if version != VERSION as usize {
        return Err(r.err(4, format!("unsupported checkpoint version {version}")));
    }
    let rank = r.u32("input rank")?;
    if rank == 0 || rank > 8 {
        return Err(r.err(r.pos - 4, format!("bad input rank {rank}")));
    }
    let input: Vec<usize> = (0..rank).map(|_| r.u32("input dims")).collect::<Result<_>>()?;
    let count = r.u32("layer count")?;
    let mut descs = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let at = r.pos;
        let kind = kind_from(r.u8("layer kind")?).ok_or_else(|| r.err(at, "unknown layer kind"))?;
        let frozen = match r.u8("frozen flag")? {
            0 => false,
            1 => true,
            _ => return Err(r.err(at + 1, "bad frozen flag")),
        };
        let geometry = r.u32("geometry")?;
        let wrank = r.u32("weight rank")?;
        let expected_rank = match kind {
            LayerKind::Dense => 2,
            LayerKind::Conv2d => 4,
            _ => 0,
        };
        if wrank != expected_rank {
            return Err(r.err(r.pos - 4, format!("{kind:?} layer with weight rank {wrank}")));
        }
        let dims: Vec<usize> = (0..wrank).map(|_| r.u32("weight dims")).collect::<Result<_>>()?;
        descs.push((kind, frozen, geometry, dims));
    }
    let mut layers = Vec::with_capacity(count);
    for (kind, frozen, geometry, dims) in descs {
        let (weight, bias) = if dims.is_empty() {
            (None, None)
        } else {
            let n: usize = dims.iter().product();
            let w = read_f32s(&mut r, n, "weights")?;
            let b = read_f32s(&mut r, dims[0], "biases")?;
            let out = dims[0];
            (Some(Tensor::new(dims, w)?), Some(Tensor::new(vec![out], b)?))
        };
        layers.push(Layer::from_parts(kind, weight, bias, geometry, frozen));
    }
    let mut masks = Vec::with_capacity(layers.len());
    for l in &layers {
        if l.prunable() {
            let n = l.structure_count();
            let raw = r.take(n.div_ceil(8), "mask bits")?;
            masks.push(Some((0..n).map(|i| raw[i / 8] >> (i % 8) & 1 == 1).collect()));
        } else {
            masks.push(None);
        }
    }
    if r.pos != bytes.len() {
        return Err(r.err(r.pos, "trailing bytes after checkpoint"));
    }
    Network::from_parts(input, layers, masks)
}

fn read_f32s(r: &mut Reader<'_>, n: usize, what: &str) -> Result<Vec<f32>> {
    let raw = r.take(n.checked_mul(4).ok_or_else(|| r.err(r.pos, "size overflow"))?, what)?;
    Ok(raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

pub fn save(net: &Network, path: &Path) -> Result<()> {
    std::fs::write(path, encode(net))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Network> {
    decode(&std::fs::read(path)?)
}
