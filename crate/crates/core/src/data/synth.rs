//! Seeded synthetic classification data: one Gaussian blob per class.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::data::{one_hot, Dataset};
use crate::tensor::Tensor;

fn standard_normal(rng: &mut ChaCha12Rng) -> f64 {
    // Box-Muller on two uniforms; u1 in (0,1].
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Class mean: `spread` on coordinate `c % dim`, a secondary offset on
/// `(c / dim) % dim` when classes exceed the dimensionality.
fn class_mean(c: usize, dim: usize, spread: f64) -> Vec<f64> {
    let mut mean = vec![0.0; dim];
    mean[c % dim] += spread;
    if c >= dim {
        mean[(c / dim) % dim] += 0.7 * spread;
    }
    mean
}

/// Seeded Gaussian blobs, one per class, linearly separable at the default
/// spread. Classes are assigned round-robin so per-class counts differ by at
/// most one.
pub fn synth_dataset(classes: usize, dim: usize, n: usize, seed: u64) -> Dataset {
    synth_dataset_with(classes, dim, n, seed, 3.0, 1.0)
}

/// Like [`synth_dataset`] with explicit blob spread and standard deviation;
/// tighter spreads make the task harder.
pub fn synth_dataset_with(
    classes: usize,
    dim: usize,
    n: usize,
    seed: u64,
    spread: f64,
    stddev: f64,
) -> Dataset {
    assert!(classes >= 2, "need at least two classes");
    assert!(dim >= 1 && n >= 1);
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let means: Vec<Vec<f64>> = (0..classes).map(|c| class_mean(c, dim, spread)).collect();
    let mut inputs = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        labels.push(c);
        for j in 0..dim {
            inputs.push(means[c][j] + stddev * standard_normal(&mut rng));
        }
    }
    Dataset::new(
        Tensor::new(vec![n, dim], inputs).expect("finite synthetic data"),
        one_hot(&labels, classes).expect("valid one-hot"),
    )
    .expect("consistent synthetic dataset")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_is_identical() {
        let a = synth_dataset(3, 4, 30, 9);
        let b = synth_dataset(3, 4, 30, 9);
        assert_eq!(a, b);
    }

    #[test]
    fn class_counts_differ_by_at_most_one() {
        let d = synth_dataset(4, 3, 10, 1);
        let mut counts = [0usize; 4];
        for i in 0..d.len() {
            counts[d.label_index(i)] += 1;
        }
        let max = counts.iter().max().unwrap();
        let min = counts.iter().min().unwrap();
        assert!(max - min <= 1, "counts {counts:?}");
    }

    #[test]
    fn well_separated_classes_are_nearly_linearly_separable() {
        // Nearest-mean classification should be near-perfect at spread 3.
        let d = synth_dataset(2, 8, 200, 5);
        let means = [class_mean(0, 8, 3.0), class_mean(1, 8, 3.0)];
        let mut correct = 0;
        for i in 0..d.len() {
            let x = &d.inputs_raw()[i * 8..(i + 1) * 8];
            let dist = |m: &Vec<f64>| -> f64 {
                x.iter().zip(m).map(|(a, b)| (a - b) * (a - b)).sum()
            };
            let pred = usize::from(dist(&means[1]) < dist(&means[0]));
            if pred == d.label_index(i) {
                correct += 1;
            }
        }
        assert!(correct as f64 / d.len() as f64 > 0.95);
    }
}
