//! The `LSEG` model file.
//!
//! ```text
//! "LSEG" | version u16 | record count u32 | records... | CRC32 of all preceding bytes
//! record = kind u8 | geometry 4×u32 | payload f32...      (all little-endian)
//! ```
//!
//! Record kinds:
//!
//! | kind | meaning | geometry | payload |
//! |------|---------|----------|---------|
//! | 0x01 | network header | variant, classes, seed low, seed high | none |
//! | 0x02 | block start | block kind, in, out, internal | none |
//! | 0x10–0x13 | conv (standard, depthwise, pointwise, transposed); bit 0x80 set when a bias follows the kernel | kernel shape | kernel, then bias |
//! | 0x20 | batchnorm | C, 1, 1, 1 | gamma, beta, running mean, running variance |
//!
//! Blocks are rebuilt from their block-start records, so stride and padding
//! are implied. A file holding `R` records and `P` parameters is exactly
//! `14 + 17·R + 4·P` bytes.

use std::path::Path;

use crate::blocks::{BlockKind, BlockSpec, Network, NetworkSpec, Variant};
use crate::error::{Error, Result};
use crate::layer::Layer;
use crate::ops::ConvKind;
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"LSEG";
pub const VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 4;
const RECORD_HEADER_LEN: usize = 1 + 16;
const CRC_LEN: usize = 4;

const KIND_NETWORK: u8 = 0x01;
const KIND_BLOCK: u8 = 0x02;
const KIND_CONV: u8 = 0x10;
const KIND_BN: u8 = 0x20;
const HAS_BIAS: u8 = 0x80;

fn conv_code(kind: ConvKind) -> u8 {
    KIND_CONV
        + match kind {
            ConvKind::Standard => 0,
            ConvKind::Depthwise => 1,
            ConvKind::Pointwise => 2,
            ConvKind::Transposed => 3,
        }
}

fn format_err(msg: impl Into<String>) -> Error {
    Error::ModelFormat(msg.into())
}

fn param_layers<T: Scalar>(net: &Network<T>) -> impl Iterator<Item = &Layer<T>> {
    net.layers().map(|(_, l)| l).filter(|l| l.param_count() > 0)
}

/// Exact encoded size of `net` in bytes.
pub fn encoded_len<T: Scalar>(net: &Network<T>) -> usize {
    let records = 1 + net.blocks.len() + param_layers(net).count();
    HEADER_LEN + RECORD_HEADER_LEN * records + 4 * net.param_count() + CRC_LEN
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn record(&mut self, kind: u8, geometry: [usize; 4], payload: &[&[f32]]) {
        self.buf.push(kind);
        for g in geometry {
            self.buf.extend_from_slice(&(g as u32).to_le_bytes());
        }
        for part in payload {
            for v in *part {
                self.buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
}

pub fn encode(net: &Network<f32>) -> Vec<u8> {
    let records = 1 + net.blocks.len() + param_layers(net).count();
    let mut w = Writer {
        buf: Vec::with_capacity(encoded_len(net)),
    };
    w.buf.extend_from_slice(MAGIC);
    w.buf.extend_from_slice(&VERSION.to_le_bytes());
    w.buf.extend_from_slice(&(records as u32).to_le_bytes());
    let variant = match net.spec.variant {
        Variant::Full => 0,
        Variant::Pruned => 1,
    };
    let seed = net.meta.seed;
    w.record(
        KIND_NETWORK,
        [variant, net.spec.num_classes, (seed & 0xffff_ffff) as usize, (seed >> 32) as usize],
        &[],
    );
    for b in &net.blocks {
        let s = b.spec;
        w.record(
            KIND_BLOCK,
            [s.kind.code() as usize, s.in_channels, s.out_channels, s.internal_channels],
            &[],
        );
        for l in b.main.layers.iter().chain(b.shortcut_layers()) {
            match l {
                Layer::Conv(_) => {
                    let c = l.as_conv().expect("conv layer");
                    let ks = c.kernel.shape();
                    let geometry = [ks.n, ks.c, ks.h, ks.w];
                    match &c.bias {
                        Some(bias) => w.record(conv_code(c.kind) | HAS_BIAS, geometry, &[c.kernel.data(), bias.data()]),
                        None => w.record(conv_code(c.kind), geometry, &[c.kernel.data()]),
                    }
                }
                Layer::BatchNorm(_) => {
                    let p = l.as_batchnorm().expect("batchnorm layer");
                    w.record(
                        KIND_BN,
                        [p.channels(), 1, 1, 1],
                        &[p.gamma.data(), p.beta.data(), &p.running_mean, &p.running_var],
                    );
                }
                _ => {}
            }
        }
    }
    let crc = crc32fast::hash(&w.buf);
    w.buf.extend_from_slice(&crc.to_le_bytes());
    w.buf
}

struct Record<'a> {
    offset: usize,
    kind: u8,
    geometry: [usize; 4],
    payload: &'a [u8],
}

impl Record<'_> {
    fn floats(&self) -> Vec<f32> {
        self.payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4-byte chunk")))
            .collect()
    }
}

fn payload_len(kind: u8, g: &[usize; 4], offset: usize) -> Result<usize> {
    let prod = |v: &[usize]| v.iter().try_fold(1usize, |a, &b| a.checked_mul(b));
    let floats = match kind {
        KIND_NETWORK | KIND_BLOCK => Some(0),
        KIND_BN => g[0].checked_mul(4),
        k if (k & !HAS_BIAS) >= KIND_CONV && (k & !HAS_BIAS) <= KIND_CONV + 3 => {
            let bias = if k & HAS_BIAS != 0 { g[0] } else { 0 };
            prod(g).and_then(|n| n.checked_add(bias))
        }
        other => return Err(format_err(format!("unknown record kind {other:#04x} at byte {offset}"))),
    };
    floats
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| format_err(format!("record geometry at byte {offset} overflows")))
}

/// Structural walk: magic, version, record framing, then checksum.
fn split_records(bytes: &[u8]) -> Result<Vec<Record<'_>>> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(format_err("bad magic: not an LSEG model file"));
    }
    if bytes.len() < HEADER_LEN + CRC_LEN {
        return Err(format_err(format!("truncated: {} bytes is shorter than the fixed header", bytes.len())));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(format_err(format!("unsupported version {version} (expected {VERSION})")));
    }
    let count = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes")) as usize;
    let body_end = bytes.len() - CRC_LEN;
    let mut pos = HEADER_LEN;
    let mut records = Vec::with_capacity(count.min(4096));
    for i in 0..count {
        if pos + RECORD_HEADER_LEN > body_end {
            return Err(format_err(format!("truncated: record {i} of {count} starts past the end at byte {pos}")));
        }
        let kind = bytes[pos];
        let mut geometry = [0usize; 4];
        for (j, g) in geometry.iter_mut().enumerate() {
            let at = pos + 1 + 4 * j;
            *g = u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes")) as usize;
        }
        let len = payload_len(kind, &geometry, pos)?;
        let start = pos + RECORD_HEADER_LEN;
        if len > body_end - start {
            return Err(format_err(format!(
                "truncated: record {i} at byte {pos} needs {len} payload bytes, {} remain",
                body_end - start
            )));
        }
        records.push(Record {
            offset: pos,
            kind,
            geometry,
            payload: &bytes[start..start + len],
        });
        pos = start + len;
    }
    if pos != body_end {
        return Err(format_err(format!("{} unexpected bytes after the last record", body_end - pos)));
    }
    let stored = u32::from_le_bytes(bytes[body_end..].try_into().expect("4 bytes"));
    let computed = crc32fast::hash(&bytes[..body_end]);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    Ok(records)
}

pub fn decode(bytes: &[u8]) -> Result<Network<f32>> {
    let records = split_records(bytes)?;
    let mut it = records.iter().peekable();
    let head = it
        .next()
        .filter(|r| r.kind == KIND_NETWORK)
        .ok_or_else(|| format_err("first record must be the network header"))?;
    let variant = match head.geometry[0] {
        0 => Variant::Full,
        1 => Variant::Pruned,
        v => return Err(format_err(format!("unknown variant code {v}"))),
    };
    let seed = head.geometry[2] as u64 | ((head.geometry[3] as u64) << 32);

    let mut blocks = Vec::new();
    let mut groups: Vec<Vec<&Record>> = Vec::new();
    for r in it {
        if r.kind == KIND_BLOCK {
            let kind = BlockKind::from_code(r.geometry[0] as u32)
                .ok_or_else(|| format_err(format!("unknown block kind {} at byte {}", r.geometry[0], r.offset)))?;
            blocks.push(BlockSpec {
                kind,
                in_channels: r.geometry[1],
                out_channels: r.geometry[2],
                internal_channels: r.geometry[3],
            });
            groups.push(Vec::new());
        } else {
            groups
                .last_mut()
                .ok_or_else(|| format_err(format!("layer record at byte {} precedes any block", r.offset)))?
                .push(r);
        }
    }
    let spec = NetworkSpec {
        blocks,
        num_classes: head.geometry[1],
        variant,
    };
    let mut net = Network::<f32>::zeroed(spec).map_err(|e| format_err(format!("invalid architecture: {e}")))?;
    net.meta.seed = seed;

    for (bi, (block, recs)) in net.blocks.iter_mut().zip(groups).enumerate() {
        let mut recs = recs.into_iter();
        let mut fill = |l: &mut Layer<f32>| -> Result<()> {
            if l.param_count() == 0 {
                return Ok(());
            }
            let r = recs
                .next()
                .ok_or_else(|| format_err(format!("block {} is missing a {} record", bi + 1, l.name())))?;
            let name = l.name();
            let mismatch = || {
                format_err(format!(
                    "record at byte {} does not fit {name} of block {}",
                    r.offset,
                    bi + 1
                ))
            };
            let values = r.floats();
            if let Some(c) = l.as_conv_mut() {
                let ks = c.kernel.shape();
                let bias = r.kind & HAS_BIAS != 0;
                if r.kind & !HAS_BIAS != conv_code(c.kind) || r.geometry != [ks.n, ks.c, ks.h, ks.w] {
                    return Err(mismatch());
                }
                let (k, b) = values.split_at(ks.numel());
                c.kernel = Tensor::from_vec(ks, k.to_vec())?;
                c.bias = if bias { Some(Tensor::from_vec((1, ks.n, 1, 1), b.to_vec())?) } else { None };
            } else if let Some(p) = l.as_batchnorm_mut() {
                let ch = p.channels();
                if r.kind != KIND_BN || r.geometry != [ch, 1, 1, 1] {
                    return Err(mismatch());
                }
                let mut parts = values.chunks_exact(ch);
                p.gamma = Tensor::from_vec((1, ch, 1, 1), parts.next().expect("4 parts").to_vec())?;
                p.beta = Tensor::from_vec((1, ch, 1, 1), parts.next().expect("4 parts").to_vec())?;
                p.running_mean = parts.next().expect("4 parts").to_vec();
                p.running_var = parts.next().expect("4 parts").to_vec();
            }
            Ok(())
        };
        for l in block.main.layers.iter_mut() {
            fill(l)?;
        }
        for l in block.shortcut_layers_mut() {
            fill(l)?;
        }
        if let Some(extra) = recs.next() {
            return Err(format_err(format!("unexpected record at byte {} in block {}", extra.offset, bi + 1)));
        }
    }
    Ok(net)
}

pub fn save_model(net: &Network<f32>, path: impl AsRef<Path>) -> Result<usize> {
    let bytes = encode(net);
    std::fs::write(path, &bytes)?;
    Ok(bytes.len())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Network<f32>> {
    decode(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::build_network;

    #[test]
    fn round_trip_and_size() {
        let net = build_network(Variant::Pruned, 3);
        let bytes = encode(&net);
        assert_eq!(bytes.len(), encoded_len(&net));
        let back = decode(&bytes).unwrap();
        assert_eq!(back.spec, net.spec);
        assert_eq!(back.meta.seed, 3);
        assert_eq!(encode(&back), bytes);
    }

    #[test]
    fn distinct_diagnostics() {
        let net = build_network(Variant::Pruned, 0);
        let bytes = encode(&net);

        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(decode(&bad_magic).unwrap_err().to_string().contains("magic"));

        let mut bad_version = bytes.clone();
        bad_version[4] = 9;
        assert!(decode(&bad_version).unwrap_err().to_string().contains("version"));

        let truncated = &bytes[..bytes.len() - 100];
        assert!(decode(truncated).unwrap_err().to_string().contains("truncated"));

        let mut flipped = bytes.clone();
        let mid = bytes.len() / 2;
        flipped[mid] ^= 0x01;
        assert!(matches!(decode(&flipped).unwrap_err(), Error::Checksum { .. }));
    }
}
