//! Weight deltas for online synchronization: instead of shipping full
//! weights, a client ships the difference between its current and
//! session-start parameters.
//!
//! Deltas are taken and applied in the two's-complement space of the IEEE-754
//! bit patterns. Arithmetic `current - initial` in f64 rounds whenever the
//! two values differ in scale, which would break the contract that
//! `initial + delta` reproduces `current` bitwise; wrapping bit arithmetic is
//! exact and composes across sessions.

use crate::engine::{AliceState, EngineError};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
struct DeltaTensor {
    shape: Vec<usize>,
    bits: Vec<u64>,
}

/// Per-parameter difference between current and initial weights,
/// layer-ordered.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightDelta {
    items: Vec<DeltaTensor>,
}

pub const DELTA_MAGIC: &[u8; 4] = b"SPND";
pub const DELTA_VERSION: u8 = 1;

impl WeightDelta {
    /// Difference of two parameter lists with identical shapes.
    pub fn between(initial: &[Tensor], current: &[Tensor]) -> Result<WeightDelta, EngineError> {
        if initial.len() != current.len() {
            return Err(EngineError::DeltaShapeMismatch(initial.len().min(current.len())));
        }
        let mut items = Vec::with_capacity(initial.len());
        for (i, (a, b)) in initial.iter().zip(current).enumerate() {
            if a.shape() != b.shape() {
                return Err(EngineError::DeltaShapeMismatch(i));
            }
            let bits = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(x, y)| y.to_bits().wrapping_sub(x.to_bits()))
                .collect();
            items.push(DeltaTensor {
                shape: a.shape().to_vec(),
                bits,
            });
        }
        Ok(WeightDelta { items })
    }

    pub fn is_empty(&self) -> bool {
        self.items.iter().all(|d| d.bits.iter().all(|&b| b == 0))
    }

    /// Serialized form: `SPND`, version byte, item count, then per item the
    /// rank/dims header (big-endian u32) and bits as little-endian u64.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(DELTA_MAGIC);
        out.push(DELTA_VERSION);
        out.extend_from_slice(&(self.items.len() as u32).to_be_bytes());
        for item in &self.items {
            out.extend_from_slice(&(item.shape.len() as u32).to_be_bytes());
            for &d in &item.shape {
                out.extend_from_slice(&(d as u32).to_be_bytes());
            }
            for &b in &item.bits {
                out.extend_from_slice(&b.to_le_bytes());
            }
        }
        out
    }

    /// Parses one delta blob starting at `offset`; returns the delta and
    /// bytes consumed. Multiple blobs may be concatenated in one stream.
    pub fn parse_at(bytes: &[u8], offset: usize) -> Result<(WeightDelta, usize), EngineError> {
        let err = |m: &str| EngineError::Net(crate::nn::NetError::WeightFormat(m.into()));
        let mut pos = offset;
        let magic = bytes.get(pos..pos + 5).ok_or_else(|| err("truncated"))?;
        if &magic[0..4] != DELTA_MAGIC || magic[4] != DELTA_VERSION {
            return Err(err("bad delta magic/version"));
        }
        pos += 5;
        let count_bytes = bytes.get(pos..pos + 4).ok_or_else(|| err("truncated"))?;
        let count = u32::from_be_bytes(count_bytes.try_into().unwrap()) as usize;
        pos += 4;
        let mut items = Vec::with_capacity(count);
        for _ in 0..count {
            let rank_bytes = bytes.get(pos..pos + 4).ok_or_else(|| err("truncated"))?;
            let rank = u32::from_be_bytes(rank_bytes.try_into().unwrap()) as usize;
            if rank == 0 || rank > 8 {
                return Err(err("bad delta rank"));
            }
            pos += 4;
            let mut shape = Vec::with_capacity(rank);
            let mut n: usize = 1;
            for _ in 0..rank {
                let d_bytes = bytes.get(pos..pos + 4).ok_or_else(|| err("truncated"))?;
                let d = u32::from_be_bytes(d_bytes.try_into().unwrap()) as usize;
                if d == 0 {
                    return Err(err("zero dim"));
                }
                n = n.checked_mul(d).ok_or_else(|| err("overflow"))?;
                shape.push(d);
                pos += 4;
            }
            let mut bits = Vec::with_capacity(n);
            for _ in 0..n {
                let raw = bytes.get(pos..pos + 8).ok_or_else(|| err("truncated"))?;
                bits.push(u64::from_le_bytes(raw.try_into().unwrap()));
                pos += 8;
            }
            items.push(DeltaTensor { shape, bits });
        }
        Ok((WeightDelta { items }, pos - offset))
    }

    /// Parses a stream of concatenated delta blobs.
    pub fn parse_stream(bytes: &[u8]) -> Result<Vec<WeightDelta>, EngineError> {
        let mut out = Vec::new();
        let mut pos = 0;
        while pos < bytes.len() {
            let (d, used) = WeightDelta::parse_at(bytes, pos)?;
            out.push(d);
            pos += used;
        }
        Ok(out)
    }
}

/// Delta between a client's session-start snapshot and its current weights.
pub fn compute_delta(alice: &AliceState) -> WeightDelta {
    WeightDelta::between(alice.initial_params(), &alice.parameters())
        .expect("snapshot shapes always match live parameters")
}

/// Applies an ordered list of deltas to initial weights. With deltas
/// `d_i = w_i - w_{i-1}` from consecutive sessions, the result reproduces the
/// final session's weights bitwise.
pub fn apply_delta(
    initial: &[Tensor],
    deltas: &[WeightDelta],
) -> Result<Vec<Tensor>, EngineError> {
    let mut acc: Vec<DeltaTensor> = initial
        .iter()
        .map(|t| DeltaTensor {
            shape: t.shape().to_vec(),
            bits: t.data().iter().map(|x| x.to_bits()).collect(),
        })
        .collect();
    for delta in deltas {
        if delta.items.len() != acc.len() {
            return Err(EngineError::DeltaShapeMismatch(
                delta.items.len().min(acc.len()),
            ));
        }
        for (i, (a, d)) in acc.iter_mut().zip(&delta.items).enumerate() {
            if a.shape != d.shape {
                return Err(EngineError::DeltaShapeMismatch(i));
            }
            for (x, y) in a.bits.iter_mut().zip(&d.bits) {
                *x = x.wrapping_add(*y);
            }
        }
    }
    acc.into_iter()
        .enumerate()
        .map(|(i, d)| {
            let data: Vec<f64> = d.bits.iter().map(|&b| f64::from_bits(b)).collect();
            Tensor::new(d.shape, data).map_err(|_| EngineError::DeltaShapeMismatch(i))
        })
        .collect()
}
