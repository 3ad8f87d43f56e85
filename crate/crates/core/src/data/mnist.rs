//! IDX-format image/label files: the MNIST on-disk layout.
//!
//! Readers parse the big-endian IDX headers (magic 0x00000803 for images,
//! 0x00000801 for labels), scale pixels to [0,1], and one-hot labels over 10
//! classes. Writers emit the same layout and exist for tests and for the
//! generated stand-in corpus.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::data::{one_hot, DataError, Dataset};
use crate::tensor::Tensor;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

pub const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

/// Environment variable naming the directory holding the four IDX files.
pub const MNIST_DIR_ENV: &str = "SPLITNN_MNIST_DIR";

fn read_u32(reader: &mut impl Read, what: &str) -> Result<u32, DataError> {
    let mut buf = [0u8; 4];
    reader
        .read_exact(&mut buf)
        .map_err(|_| DataError::Truncated(what.to_string()))?;
    Ok(u32::from_be_bytes(buf))
}

/// Raw images from an IDX3 file: (count, rows, cols, pixel bytes).
pub fn read_idx_images(path: &Path) -> Result<(usize, usize, usize, Vec<u8>), DataError> {
    let mut r = BufReader::new(File::open(path)?);
    let magic = read_u32(&mut r, "image magic")?;
    if magic != IMAGE_MAGIC {
        return Err(DataError::BadMagic {
            expected: IMAGE_MAGIC,
            got: magic,
        });
    }
    let n = read_u32(&mut r, "image count")? as usize;
    let rows = read_u32(&mut r, "rows")? as usize;
    let cols = read_u32(&mut r, "cols")? as usize;
    let mut data = vec![0u8; n * rows * cols];
    r.read_exact(&mut data)
        .map_err(|_| DataError::Truncated("image data".into()))?;
    Ok((n, rows, cols, data))
}

/// Raw labels from an IDX1 file.
pub fn read_idx_labels(path: &Path) -> Result<Vec<u8>, DataError> {
    let mut r = BufReader::new(File::open(path)?);
    let magic = read_u32(&mut r, "label magic")?;
    if magic != LABEL_MAGIC {
        return Err(DataError::BadMagic {
            expected: LABEL_MAGIC,
            got: magic,
        });
    }
    let n = read_u32(&mut r, "label count")? as usize;
    let mut data = vec![0u8; n];
    r.read_exact(&mut data)
        .map_err(|_| DataError::Truncated("label data".into()))?;
    Ok(data)
}

pub fn write_idx_images(
    path: &Path,
    rows: usize,
    cols: usize,
    images: &[u8],
) -> Result<(), DataError> {
    let n = images.len() / (rows * cols);
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&IMAGE_MAGIC.to_be_bytes())?;
    w.write_all(&(n as u32).to_be_bytes())?;
    w.write_all(&(rows as u32).to_be_bytes())?;
    w.write_all(&(cols as u32).to_be_bytes())?;
    w.write_all(images)?;
    Ok(())
}

pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<(), DataError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&LABEL_MAGIC.to_be_bytes())?;
    w.write_all(&(labels.len() as u32).to_be_bytes())?;
    w.write_all(labels)?;
    Ok(())
}

fn load_pair(images: &Path, labels: &Path, subset: Option<usize>) -> Result<Dataset, DataError> {
    let (n, rows, cols, pixels) = read_idx_images(images)?;
    let raw_labels = read_idx_labels(labels)?;
    if raw_labels.len() != n {
        return Err(DataError::Inconsistent(format!(
            "{n} images but {} labels",
            raw_labels.len()
        )));
    }
    let keep = subset.map_or(n, |s| s.min(n));
    let dim = rows * cols;
    let inputs: Vec<f64> = pixels[..keep * dim]
        .iter()
        .map(|&p| p as f64 / 255.0)
        .collect();
    let indices: Vec<usize> = raw_labels[..keep].iter().map(|&l| l as usize).collect();
    if let Some(&bad) = raw_labels[..keep].iter().find(|&&l| l > 9) {
        return Err(DataError::Inconsistent(format!("label {bad} out of range")));
    }
    let dataset = Dataset::new(
        Tensor::new(vec![keep, dim], inputs)?,
        one_hot(&indices, 10)?,
    )?;
    Ok(dataset)
}

/// Loads the four-file MNIST layout from a directory, keeping the first
/// `subset` examples of each split when given.
pub fn load_mnist(
    dir: &Path,
    train_subset: Option<usize>,
    test_subset: Option<usize>,
) -> Result<(Dataset, Dataset), DataError> {
    let train = load_pair(
        &dir.join(TRAIN_IMAGES),
        &dir.join(TRAIN_LABELS),
        train_subset,
    )?;
    let test = load_pair(&dir.join(TEST_IMAGES), &dir.join(TEST_LABELS), test_subset)?;
    Ok((train, test))
}
