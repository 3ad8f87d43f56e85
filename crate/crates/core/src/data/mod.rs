//! Datasets: labeled example collections, contiguous/shuffled sharding, and
//! batch construction.

pub mod digits;
pub mod mnist;
pub mod synth;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

use crate::nn::{Batch, NetError};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic: expected {expected:#010x}, got {got:#010x}")]
    BadMagic { expected: u32, got: u32 },
    #[error("truncated file: {0}")]
    Truncated(String),
    #[error("inconsistent dataset: {0}")]
    Inconsistent(String),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// How examples are assigned to shards.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShardPolicy {
    /// Uniform contiguous index ranges (the default).
    Contiguous,
    /// A seeded permutation applied before contiguous assignment.
    SeededShuffle(u64),
}

/// A labeled dataset: `n` examples of `input_dim` features with one-hot
/// labels over `classes`. May be empty (tensors are built per batch).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: Vec<f64>,
    labels: Vec<f64>,
    n: usize,
    dim: usize,
    classes: usize,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Tensor) -> Result<Self, DataError> {
        if inputs.rank() != 2 || labels.rank() != 2 || inputs.rows() != labels.rows() {
            return Err(DataError::Inconsistent(format!(
                "inputs {:?} vs labels {:?}",
                inputs.shape(),
                labels.shape()
            )));
        }
        crate::nn::validate_one_hot(&labels)?;
        Ok(Dataset {
            n: inputs.rows(),
            dim: inputs.cols(),
            classes: labels.cols(),
            inputs: inputs.data().to_vec(),
            labels: labels.data().to_vec(),
        })
    }

    pub fn from_raw(
        inputs: Vec<f64>,
        labels: Vec<f64>,
        dim: usize,
        classes: usize,
    ) -> Result<Self, DataError> {
        if dim == 0 || classes == 0 || !inputs.len().is_multiple_of(dim) {
            return Err(DataError::Inconsistent("raw buffer shape".into()));
        }
        let n = inputs.len() / dim;
        if labels.len() != n * classes {
            return Err(DataError::Inconsistent(format!(
                "{n} examples but {} label entries",
                labels.len()
            )));
        }
        Ok(Dataset {
            inputs,
            labels,
            n,
            dim,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn input_dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn inputs_raw(&self) -> &[f64] {
        &self.inputs
    }

    pub fn labels_raw(&self) -> &[f64] {
        &self.labels
    }

    /// Class index of example `i` (first maximum).
    pub fn label_index(&self, i: usize) -> usize {
        let row = &self.labels[i * self.classes..(i + 1) * self.classes];
        crate::eval::argmax_row(row)
    }

    /// Rows `start..end` as a new dataset.
    pub fn slice(&self, start: usize, end: usize) -> Dataset {
        Dataset {
            inputs: self.inputs[start * self.dim..end * self.dim].to_vec(),
            labels: self.labels[start * self.classes..end * self.classes].to_vec(),
            n: end - start,
            dim: self.dim,
            classes: self.classes,
        }
    }

    /// First `n` examples.
    pub fn take(&self, n: usize) -> Dataset {
        self.slice(0, n.min(self.n))
    }

    /// Row permutation by a seeded shuffle.
    pub fn shuffled(&self, seed: u64) -> Dataset {
        let mut order: Vec<usize> = (0..self.n).collect();
        order.shuffle(&mut ChaCha12Rng::seed_from_u64(seed));
        self.reindex(&order)
    }

    fn reindex(&self, order: &[usize]) -> Dataset {
        let mut inputs = Vec::with_capacity(order.len() * self.dim);
        let mut labels = Vec::with_capacity(order.len() * self.classes);
        for &i in order {
            inputs.extend_from_slice(&self.inputs[i * self.dim..(i + 1) * self.dim]);
            labels.extend_from_slice(&self.labels[i * self.classes..(i + 1) * self.classes]);
        }
        Dataset {
            inputs,
            labels,
            n: order.len(),
            dim: self.dim,
            classes: self.classes,
        }
    }

    /// Contiguous batches in index order; the final batch may be short.
    pub fn batches(&self, batch_size: usize) -> Vec<Batch> {
        assert!(batch_size > 0, "batch size must be positive");
        let mut out = Vec::new();
        let mut start = 0;
        while start < self.n {
            let end = (start + batch_size).min(self.n);
            let s = self.slice(start, end);
            let inputs = Tensor::new(vec![s.n, s.dim], s.inputs).expect("non-empty batch");
            let labels = Tensor::new(vec![s.n, s.classes], s.labels).expect("non-empty batch");
            out.push(Batch::new(inputs, Some(labels)).expect("dataset rows are valid batches"));
            start = end;
        }
        out
    }

    /// Uniform shards; per-shard sizes differ by at most one.
    pub fn shard(&self, k: usize, policy: ShardPolicy) -> Vec<Dataset> {
        assert!(k > 0, "shard count must be positive");
        let base = match policy {
            ShardPolicy::Contiguous => self.clone(),
            ShardPolicy::SeededShuffle(seed) => self.shuffled(seed),
        };
        let n = base.len();
        let size = n / k;
        let rem = n % k;
        let mut out = Vec::with_capacity(k);
        let mut start = 0;
        for i in 0..k {
            let this = size + usize::from(i < rem);
            out.push(base.slice(start, start + this));
            start += this;
        }
        out
    }
}

/// One-hot encodes class indices.
pub fn one_hot(indices: &[usize], classes: usize) -> Result<Tensor, TensorError> {
    let mut data = vec![0.0; indices.len() * classes];
    for (i, &c) in indices.iter().enumerate() {
        data[i * classes + c] = 1.0;
    }
    Tensor::new(vec![indices.len(), classes], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(n: usize) -> Dataset {
        let inputs = Tensor::new(vec![n, 2], (0..n * 2).map(|i| i as f64).collect()).unwrap();
        let labels = one_hot(&(0..n).map(|i| i % 3).collect::<Vec<_>>(), 3).unwrap();
        Dataset::new(inputs, labels).unwrap()
    }

    #[test]
    fn shard_sizes_differ_by_at_most_one() {
        let d = tiny(10);
        let shards = d.shard(3, ShardPolicy::Contiguous);
        let sizes: Vec<usize> = shards.iter().map(|s| s.len()).collect();
        assert_eq!(sizes, vec![4, 3, 3]);
        assert_eq!(sizes.iter().sum::<usize>(), 10);
    }

    #[test]
    fn oversharding_yields_empty_shards() {
        let d = tiny(2);
        let shards = d.shard(4, ShardPolicy::Contiguous);
        assert_eq!(shards.len(), 4);
        assert!(shards[3].is_empty());
        assert!(shards[3].batches(5).is_empty());
    }

    #[test]
    fn contiguous_shards_preserve_order() {
        let d = tiny(6);
        let shards = d.shard(2, ShardPolicy::Contiguous);
        assert_eq!(shards[0].inputs_raw()[0], 0.0);
        assert_eq!(shards[1].inputs_raw()[0], 6.0);
    }

    #[test]
    fn shuffle_is_seed_deterministic() {
        let d = tiny(20);
        assert_eq!(d.shuffled(7), d.shuffled(7));
        assert_ne!(d.shuffled(7), d.shuffled(8));
    }

    #[test]
    fn batches_cover_everything_in_order() {
        let d = tiny(7);
        let batches = d.batches(3);
        assert_eq!(batches.len(), 3);
        assert_eq!(batches[0].size(), 3);
        assert_eq!(batches[2].size(), 1);
        assert_eq!(batches[1].data().data()[0], 6.0);
    }
}
