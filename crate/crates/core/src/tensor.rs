//! Dense f64 tensors with deterministic evaluation order, a canonical byte
//! serialization, and SHA-256 content checksums.
//!
//! Every payload that crosses a wire in this system is one of these tensors,
//! so the layout here is load-bearing: the canonical bytes produced by
//! [`Tensor::to_bytes`] are used verbatim as the `raw_data` field of wire
//! messages, and all digests are computed over them.

use sha2::{Digest, Sha256};
use thiserror::Error;

/// Maximum rank accepted when deserializing (guards against garbage headers).
const MAX_RANK: u32 = 8;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TensorError {
    #[error("shape {shape:?} implies {expected} elements, got {actual}")]
    ShapeDataMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("invalid shape {0:?}: shape must be non-empty with every dimension >= 1")]
    InvalidShape(Vec<usize>),
    #[error("non-finite element at index {0}")]
    NonFinite(usize),
    #[error("dimension mismatch in {op}: left shape {left:?}, right shape {right:?}")]
    DimensionMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("expected rank-{expected} tensor, got shape {shape:?}")]
    RankMismatch { expected: usize, shape: Vec<usize> },
    #[error("malformed tensor bytes: {0}")]
    MalformedBytes(String),
}

/// Dense n-dimensional array of 64-bit floats, row-major, immutable after
/// construction. All elements are finite; all shape dimensions are >= 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(TensorError::InvalidShape(shape));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::ShapeDataMismatch {
                shape,
                expected,
                actual: data.len(),
            });
        }
        if let Some(i) = data.iter().position(|x| !x.is_finite()) {
            return Err(TensorError::NonFinite(i));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self, TensorError> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(TensorError::InvalidShape(shape));
        }
        let n = shape.iter().product();
        Ok(Self {
            shape,
            data: vec![0.0; n],
        })
    }

    /// 2-D constructor from rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, TensorError> {
        let r = rows.len();
        let c = rows.first().map(|row| row.len()).unwrap_or(0);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(TensorError::InvalidShape(vec![r, row.len()]));
            }
            data.extend_from_slice(row);
        }
        Tensor::new(vec![r, c], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rows of a rank-2 tensor.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Columns of a rank-2 tensor.
    pub fn cols(&self) -> usize {
        self.shape[self.shape.len() - 1]
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols() + col]
    }

    fn require_rank(&self, rank: usize, _op: &'static str) -> Result<(), TensorError> {
        if self.rank() != rank {
            return Err(TensorError::RankMismatch {
                expected: rank,
                shape: self.shape.clone(),
            });
        }
        Ok(())
    }

    /// Matrix product of two rank-2 tensors. The inner loop accumulates in
    /// ascending index order, which pins the floating-point result bitwise.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        self.require_rank(2, "matmul")?;
        other.require_rank(2, "matmul")?;
        let (m, k) = (self.shape[0], self.shape[1]);
        let (k2, n) = (other.shape[0], other.shape[1]);
        if k != k2 {
            return Err(TensorError::DimensionMismatch {
                op: "matmul",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        // i-k-j ordering: cache-friendly and still ascending in k for every
        // (i, j) accumulator.
        let mut out = vec![0.0f64; m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let o_row = &mut out[i * n..(i + 1) * n];
            for (kk, &a) in a_row.iter().enumerate() {
                let b_row = &other.data[kk * n..(kk + 1) * n];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Tensor::new(vec![m, n], out)
    }

    /// Transposed rank-2 tensor.
    pub fn transpose(&self) -> Result<Tensor, TensorError> {
        self.require_rank(2, "transpose")?;
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0f64; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor::new(vec![n, m], out)
    }

    fn zip_with(
        &self,
        other: &Tensor,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor, TensorError> {
        if self.shape != other.shape {
            return Err(TensorError::DimensionMismatch {
                op,
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Tensor::new(self.shape.clone(), data)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Result<Tensor, TensorError> {
        let data = self.data.iter().map(|&a| a * s).collect();
        Tensor::new(self.shape.clone(), data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Tensor, TensorError> {
        let data = self.data.iter().map(|&a| f(a)).collect();
        Tensor::new(self.shape.clone(), data)
    }

    /// Canonical serialization: 4-byte big-endian rank, each dimension as a
    /// 4-byte big-endian unsigned, then elements as little-endian IEEE-754
    /// float64 in row-major order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + 4 * self.shape.len() + 8 * self.data.len());
        out.extend_from_slice(&(self.shape.len() as u32).to_be_bytes());
        for &d in &self.shape {
            out.extend_from_slice(&(d as u32).to_be_bytes());
        }
        for &x in &self.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    /// Inverse of [`Tensor::to_bytes`]; validates the header and element
    /// count and rejects non-finite payloads.
    pub fn from_bytes(bytes: &[u8]) -> Result<Tensor, TensorError> {
        let take = |off: usize| -> Result<[u8; 4], TensorError> {
            bytes
                .get(off..off + 4)
                .and_then(|s| <[u8; 4]>::try_from(s).ok())
                .ok_or_else(|| TensorError::MalformedBytes("truncated header".into()))
        };
        let rank = u32::from_be_bytes(take(0)?);
        if rank == 0 || rank > MAX_RANK {
            return Err(TensorError::MalformedBytes(format!("bad rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank as usize);
        let mut elems: usize = 1;
        for i in 0..rank as usize {
            let d = u32::from_be_bytes(take(4 + 4 * i)?) as usize;
            if d == 0 {
                return Err(TensorError::MalformedBytes("zero dimension".into()));
            }
            elems = elems
                .checked_mul(d)
                .ok_or_else(|| TensorError::MalformedBytes("element count overflow".into()))?;
            shape.push(d);
        }
        let payload_off = 4 + 4 * rank as usize;
        let expected_len = payload_off + 8 * elems;
        if bytes.len() != expected_len {
            return Err(TensorError::MalformedBytes(format!(
                "expected {expected_len} bytes, got {}",
                bytes.len()
            )));
        }
        let mut data = Vec::with_capacity(elems);
        for i in 0..elems {
            let off = payload_off + 8 * i;
            let raw: [u8; 8] = bytes[off..off + 8].try_into().unwrap();
            data.push(f64::from_le_bytes(raw));
        }
        Tensor::new(shape, data)
    }

    /// Digest of the canonical serialization.
    pub fn checksum(&self) -> TensorChecksum {
        checksum(&self.to_bytes())
    }

    /// Bitwise equality (exact f64 bit patterns, not `==` on NaN-free floats;
    /// the two coincide here because tensors hold no NaNs).
    pub fn bitwise_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// 32-byte SHA-256 digest over a canonical tensor serialization (or any byte
/// stream the protocol hashes: weight files, message payloads).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorChecksum(pub [u8; 32]);

impl TensorChecksum {
    /// Lowercase 64-character hex form used in wire messages.
    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Option<TensorChecksum> {
        if s.len() != 64 || !s.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f')) {
            return None;
        }
        let bytes = hex::decode(s).ok()?;
        Some(TensorChecksum(bytes.try_into().ok()?))
    }
}

impl std::fmt::Display for TensorChecksum {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.to_hex())
    }
}

/// SHA-256 of an arbitrary byte sequence.
pub fn checksum(bytes: &[u8]) -> TensorChecksum {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    TensorChecksum(hasher.finalize().into())
}
