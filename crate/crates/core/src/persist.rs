//! Mask files and parameter checkpoints.
//!
//! Both share one container, with every integer little-endian:
//!
//! ```text
//! magic (6 bytes) | version u16 | header length u32 | JSON header | payload
//! ```
//!
//! A mask payload holds, for each maskable segment in layout order, a `u32`
//! bit count followed by the bits packed LSB-first into bytes. A checkpoint
//! payload is a `u64` value count followed by `f64` values.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::accountant::LedgerReport;
use crate::error::{Error, Result};
use crate::mask::{AlwaysTrainable, GroupingKind, Mask};
use crate::params::{Layout, ParamVector};

pub const MASK_MAGIC: &[u8; 6] = b"DPMASK";
pub const PARAM_MAGIC: &[u8; 6] = b"DPPARM";
pub const FORMAT_VERSION: u16 = 1;

/// Hex SHA-256 of the layout's canonical JSON form.
pub fn layout_hash(layout: &Layout) -> String {
    let json = serde_json::to_vec(layout).expect("layout serialises");
    let digest = Sha256::digest(&json);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentBits {
    pub name: String,
    pub bits: usize,
    pub selected: usize,
}

/// JSON header of a mask file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskHeader {
    pub model_hash: String,
    pub strategy: Option<String>,
    pub grouping: Option<GroupingKind>,
    pub sparsity: Option<f64>,
    pub seed: Option<u64>,
    pub always_trainable: AlwaysTrainable,
    /// `false` for selections that read data without accounting for it.
    pub private: bool,
    pub ledger: Option<LedgerReport>,
    pub segments: Vec<SegmentBits>,
}

/// Provenance written alongside the bits.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MaskMeta {
    pub strategy: Option<String>,
    pub sparsity: Option<f64>,
    pub seed: Option<u64>,
    pub private: bool,
    pub ledger: Option<LedgerReport>,
}

fn container(magic: &[u8; 6], header: &[u8], payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + header.len() + payload.len());
    out.extend_from_slice(magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header);
    out.extend_from_slice(payload);
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::parse(self.pos as u64, format!("truncated {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

fn open_container<'a>(bytes: &'a [u8], magic: &[u8; 6]) -> Result<(Reader<'a>, &'a [u8])> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(6, "magic")? != magic {
        return Err(Error::parse(0, "bad magic"));
    }
    let version = u16::from_le_bytes(r.take(2, "version")?.try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::parse(6, format!("unsupported version {version}")));
    }
    let len = r.u32("header length")? as usize;
    let header = r.take(len, "header")?;
    Ok((r, header))
}

pub fn encode_mask(mask: &Mask, meta: &MaskMeta) -> Result<Vec<u8>> {
    let layout = mask.layout();
    let mut payload = Vec::new();
    let mut segments = Vec::new();
    for (s, seg) in layout.maskable() {
        let bits = mask.segment_bits(s);
        payload.extend_from_slice(&(bits.len() as u32).to_le_bytes());
        let mut packed = vec![0u8; bits.len().div_ceil(8)];
        for (i, &b) in bits.iter().enumerate() {
            if b {
                packed[i / 8] |= 1 << (i % 8);
            }
        }
        payload.extend_from_slice(&packed);
        segments.push(SegmentBits {
            name: seg.spec.name.clone(),
            bits: bits.len(),
            selected: bits.iter().filter(|&&b| b).count(),
        });
    }
    let header = MaskHeader {
        model_hash: layout_hash(layout),
        strategy: meta.strategy.clone(),
        grouping: mask.grouping_kind(),
        sparsity: meta.sparsity,
        seed: meta.seed,
        always_trainable: mask.always(),
        private: meta.private,
        ledger: meta.ledger.clone(),
        segments,
    };
    Ok(container(MASK_MAGIC, &serde_json::to_vec(&header)?, &payload))
}

/// Parses a mask file without a model: the header and one bit vector per
/// maskable segment.
pub fn decode_mask_raw(bytes: &[u8]) -> Result<(MaskHeader, Vec<Vec<bool>>)> {
    let (mut r, header_bytes) = open_container(bytes, MASK_MAGIC)?;
    let header: MaskHeader =
        serde_json::from_slice(header_bytes).map_err(|e| Error::parse(12, format!("bad header: {e}")))?;
    let mut all = Vec::with_capacity(header.segments.len());
    for seg in &header.segments {
        let at = r.pos as u64;
        let n = r.u32("bit count")? as usize;
        if n != seg.bits {
            return Err(Error::parse(at, format!("segment {} has {n} bits, header says {}", seg.name, seg.bits)));
        }
        let packed = r.take(n.div_ceil(8), "bit array")?;
        all.push((0..n).map(|i| packed[i / 8] >> (i % 8) & 1 == 1).collect());
    }
    if r.pos != bytes.len() {
        return Err(Error::parse(r.pos as u64, "trailing bytes after mask payload"));
    }
    Ok((header, all))
}

/// Parses a mask file against `layout`, rejecting files written for another model.
pub fn decode_mask(bytes: &[u8], layout: Arc<Layout>) -> Result<(MaskHeader, Mask)> {
    let (header, maskable_bits) = decode_mask_raw(bytes)?;
    if header.model_hash != layout_hash(&layout) {
        return Err(Error::Config("mask file was written for a different model".into()));
    }
    let mut it = maskable_bits.into_iter();
    let bits = layout
        .segments()
        .iter()
        .map(|s| if s.spec.is_maskable() { it.next().unwrap_or_default() } else { Vec::new() })
        .collect();
    let mask = Mask::from_bits(layout, bits, header.always_trainable)?;
    Ok((header, mask))
}

pub fn write_mask(path: impl AsRef<Path>, mask: &Mask, meta: &MaskMeta) -> Result<()> {
    std::fs::File::create(path)?.write_all(&encode_mask(mask, meta)?)?;
    Ok(())
}

pub fn read_mask(path: impl AsRef<Path>, layout: Arc<Layout>) -> Result<(MaskHeader, Mask)> {
    decode_mask(&std::fs::read(path)?, layout)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ParamHeader {
    layout: Layout,
    model_hash: String,
}

pub fn encode_params(params: &ParamVector) -> Result<Vec<u8>> {
    let header = ParamHeader {
        layout: params.layout().as_ref().clone(),
        model_hash: layout_hash(params.layout()),
    };
    let mut payload = Vec::with_capacity(8 + 8 * params.len());
    payload.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for v in params.as_slice() {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    Ok(container(PARAM_MAGIC, &serde_json::to_vec(&header)?, &payload))
}

pub fn decode_params(bytes: &[u8]) -> Result<ParamVector> {
    let (mut r, header_bytes) = open_container(bytes, PARAM_MAGIC)?;
    let header: ParamHeader =
        serde_json::from_slice(header_bytes).map_err(|e| Error::parse(12, format!("bad header: {e}")))?;
    let at = r.pos as u64;
    let n = u64::from_le_bytes(r.take(8, "value count")?.try_into().unwrap()) as usize;
    if n != header.layout.dim() {
        return Err(Error::parse(at, format!("{n} values for a layout of dimension {}", header.layout.dim())));
    }
    let raw = r.take(8 * n, "values")?;
    let values = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    if r.pos != bytes.len() {
        return Err(Error::parse(r.pos as u64, "trailing bytes after parameters"));
    }
    ParamVector::from_values(Arc::new(header.layout), values)
}
