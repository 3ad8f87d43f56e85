//! Shared evaluation helpers: classification accuracy and mean loss over a
//! dataset.

use crate::data::Dataset;
use crate::nn::{loss_and_gradient, LossKind, NetError, SegmentNet};

const EVAL_BATCH: usize = 256;

/// Argmax with ties broken toward the lowest class index.
pub fn argmax_row(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// correct / total over the dataset.
pub fn accuracy(segment: &mut SegmentNet, ds: &Dataset) -> Result<f64, NetError> {
    let mut correct = 0usize;
    for batch in ds.batches(EVAL_BATCH) {
        let out = segment.forward(batch.data())?;
        let c = out.cols();
        let labels = batch.label().expect("dataset batches carry labels");
        for i in 0..out.rows() {
            let pred = argmax_row(&out.data()[i * c..(i + 1) * c]);
            let truth = argmax_row(&labels.data()[i * c..(i + 1) * c]);
            if pred == truth {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / ds.len() as f64)
}

/// Mean loss over the dataset under the segment's own head.
pub fn mean_loss(segment: &mut SegmentNet, ds: &Dataset) -> Result<f64, NetError> {
    let kind = segment
        .loss_kind()
        .unwrap_or(LossKind::SoftmaxCrossEntropy);
    let mut total = 0.0;
    let mut n = 0usize;
    for batch in ds.batches(EVAL_BATCH) {
        let out = segment.forward(batch.data())?;
        let (loss, _) = loss_and_gradient(kind, &out, batch.label().expect("labeled"))?;
        total += loss * batch.size() as f64;
        n += batch.size();
    }
    Ok(total / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_breaks_ties_toward_lowest_index() {
        assert_eq!(argmax_row(&[1.0, 1.0, 0.5]), 0);
        assert_eq!(argmax_row(&[0.2, 0.9, 0.9]), 1);
        assert_eq!(argmax_row(&[0.0]), 0);
    }
}
