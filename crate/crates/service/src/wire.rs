//! Little-endian binary blocks for bulk numeric payloads.
//!
//! See `docs/wire-format.md` for the byte layout.

use cellvista_core::presentation::{quantize_unit, NormalizationInfo};
use cellvista_core::store::EmbeddingBlock;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const EXPRESSION_MAGIC: [u8; 4] = *b"CXPR";
pub const EMBEDDING_MAGIC: [u8; 4] = *b"CEMB";
pub const ANNOTATION_MAGIC: [u8; 4] = *b"CANN";
pub const WIRE_VERSION: u32 = 1;
pub const EMBEDDING_FLAG_PADDED: u32 = 1;

pub const CONTENT_TYPE: &str = "application/octet-stream";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum WireError {
    #[error("block too short")]
    Truncated,
    #[error("unexpected magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported block version {0}")]
    UnsupportedVersion(u32),
    #[error("invalid metadata: {0}")]
    BadMeta(String),
}

/// JSON header of an expression block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpressionMeta {
    pub gene_index: u32,
    pub nonzero_count: usize,
    pub normalization: NormalizationInfo,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn u32_at(b: &[u8], at: usize) -> Result<u32, WireError> {
    b.get(at..at + 4)
        .map(|s| u32::from_le_bytes(s.try_into().unwrap()))
        .ok_or(WireError::Truncated)
}

fn check_head(b: &[u8], magic: [u8; 4]) -> Result<usize, WireError> {
    let m: [u8; 4] = b.get(0..4).ok_or(WireError::Truncated)?.try_into().unwrap();
    if m != magic {
        return Err(WireError::BadMagic(m));
    }
    let v = u32_at(b, 4)?;
    if v != WIRE_VERSION {
        return Err(WireError::UnsupportedVersion(v));
    }
    Ok(u32_at(b, 8)? as usize)
}

/// Expression block: 16-byte header, padded JSON metadata, then one u16
/// per cell holding `round(normalized * 65535)`.
pub fn encode_expression(meta: &ExpressionMeta, normalized: &[f64]) -> Vec<u8> {
    let mut json = serde_json::to_vec(meta).expect("plain struct");
    // pad with spaces so the values start 4-byte aligned
    while !json.len().is_multiple_of(4) {
        json.push(b' ');
    }
    let mut out = Vec::with_capacity(16 + json.len() + 2 * normalized.len());
    out.extend_from_slice(&EXPRESSION_MAGIC);
    put_u32(&mut out, WIRE_VERSION);
    put_u32(&mut out, normalized.len() as u32);
    put_u32(&mut out, json.len() as u32);
    out.extend_from_slice(&json);
    for &v in normalized {
        out.extend_from_slice(&quantize_unit(v).to_le_bytes());
    }
    out
}

pub fn decode_expression(b: &[u8]) -> Result<(ExpressionMeta, Vec<u16>), WireError> {
    let n = check_head(b, EXPRESSION_MAGIC)?;
    let meta_len = u32_at(b, 12)? as usize;
    let json = b.get(16..16 + meta_len).ok_or(WireError::Truncated)?;
    let meta = serde_json::from_slice(json).map_err(|e| WireError::BadMeta(e.to_string()))?;
    let body = &b[16 + meta_len..];
    if body.len() != 2 * n {
        return Err(WireError::Truncated);
    }
    let values = body
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]))
        .collect();
    Ok((meta, values))
}

/// Embedding block: 28-byte header then `n` xyz triples of f32.
pub fn encode_embedding(block: &EmbeddingBlock) -> Vec<u8> {
    let n = block.xyz.len() / 3;
    let mut out = Vec::with_capacity(28 + 4 * block.xyz.len());
    out.extend_from_slice(&EMBEDDING_MAGIC);
    put_u32(&mut out, WIRE_VERSION);
    put_u32(&mut out, n as u32);
    put_u32(&mut out, 3);
    put_u32(&mut out, if block.padded { EMBEDDING_FLAG_PADDED } else { 0 });
    put_u32(&mut out, block.native_dims as u32);
    put_u32(&mut out, 0);
    for v in &block.xyz {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Returns (native dims, padded, xyz).
pub fn decode_embedding(b: &[u8]) -> Result<(usize, bool, Vec<f32>), WireError> {
    let n = check_head(b, EMBEDDING_MAGIC)?;
    if u32_at(b, 12)? != 3 {
        return Err(WireError::BadMeta("dims must be 3".into()));
    }
    let flags = u32_at(b, 16)?;
    let native = u32_at(b, 20)? as usize;
    let body = b.get(28..).ok_or(WireError::Truncated)?;
    if body.len() != 12 * n {
        return Err(WireError::Truncated);
    }
    let xyz = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((native, flags & EMBEDDING_FLAG_PADDED != 0, xyz))
}

/// Annotation block: 16-byte header then one u32 category code per cell.
pub fn encode_annotation(codes: &[u32], n_categories: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * codes.len());
    out.extend_from_slice(&ANNOTATION_MAGIC);
    put_u32(&mut out, WIRE_VERSION);
    put_u32(&mut out, codes.len() as u32);
    put_u32(&mut out, n_categories as u32);
    for c in codes {
        put_u32(&mut out, *c);
    }
    out
}

/// Returns (category count, codes).
pub fn decode_annotation(b: &[u8]) -> Result<(usize, Vec<u32>), WireError> {
    let n = check_head(b, ANNOTATION_MAGIC)?;
    let k = u32_at(b, 12)? as usize;
    let body = b.get(16..).ok_or(WireError::Truncated)?;
    if body.len() != 4 * n {
        return Err(WireError::Truncated);
    }
    Ok((
        k,
        body.chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    ))
}
