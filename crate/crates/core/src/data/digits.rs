//! Procedurally rendered 28x28 digit corpus, written out as standard IDX
//! files.
//!
//! Stands in for MNIST in environments without the real files: glyph bitmaps
//! are rotated, scaled, shifted, thickness-jittered, and noised per sample,
//! which gives enough intra-class variance that accuracy degrades visibly
//! with
//! less training data. The corpus flows through the same IDX loader as real
//! MNIST, so every code path downstream is identical.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::data::mnist::{
    write_idx_images, write_idx_labels, TEST_IMAGES, TEST_LABELS, TRAIN_IMAGES, TRAIN_LABELS,
};
use crate::data::DataError;

/// 7x5 glyphs, one per digit; rows top to bottom.
const GLYPHS: [[u8; 7]; 10] = [
    // Each row is 5 bits, MSB = leftmost column.
    [0b01110, 0b10001, 0b10011, 0b10101, 0b11001, 0b10001, 0b01110], // 0
    [0b00100, 0b01100, 0b00100, 0b00100, 0b00100, 0b00100, 0b01110], // 1
    [0b01110, 0b10001, 0b00001, 0b00110, 0b01000, 0b10000, 0b11111], // 2
    [0b01110, 0b10001, 0b00001, 0b00110, 0b00001, 0b10001, 0b01110], // 3
    [0b00010, 0b00110, 0b01010, 0b10010, 0b11111, 0b00010, 0b00010], // 4
    [0b11111, 0b10000, 0b11110, 0b00001, 0b00001, 0b10001, 0b01110], // 5
    [0b00110, 0b01000, 0b10000, 0b11110, 0b10001, 0b10001, 0b01110], // 6
    [0b11111, 0b00001, 0b00010, 0b00100, 0b01000, 0b01000, 0b01000], // 7
    [0b01110, 0b10001, 0b10001, 0b01110, 0b10001, 0b10001, 0b01110], // 8
    [0b01110, 0b10001, 0b10001, 0b01111, 0b00001, 0b00010, 0b01100], // 9
];

fn glyph_at(digit: usize, u: f64, v: f64) -> f64 {
    // Nearest-cell lookup with soft edges from supersampling offsets.
    if !(0.0..5.0).contains(&u) || !(0.0..7.0).contains(&v) {
        return 0.0;
    }
    let col = u as usize;
    let row = v as usize;
    if (GLYPHS[digit][row] >> (4 - col)) & 1 == 1 {
        1.0
    } else {
        0.0
    }
}

/// Renders one 28x28 digit with random affine jitter and pixel noise.
fn render(digit: usize, rng: &mut ChaCha12Rng) -> [u8; 784] {
    let scale_x: f64 = rng.gen_range(2.4..3.4);
    let scale_y: f64 = rng.gen_range(2.4..3.4);
    let theta: f64 = rng.gen_range(-0.30..0.30);
    let dx: f64 = rng.gen_range(-3.5..3.5);
    let dy: f64 = rng.gen_range(-3.5..3.5);
    let shear: f64 = rng.gen_range(-0.2..0.2);
    let intensity: f64 = rng.gen_range(0.65..1.0);
    let thickness: f64 = rng.gen_range(0.25..0.55);
    let noise_sigma = 0.12;

    let (sin_t, cos_t) = theta.sin_cos();
    let mut out = [0u8; 784];
    for y in 0..28 {
        for x in 0..28 {
            let px = x as f64 - 13.5 - dx;
            let py = y as f64 - 13.5 - dy;
            let rx = px * cos_t + py * sin_t;
            let ry = -px * sin_t + py * cos_t;
            let u = rx / scale_x + ry * shear + 2.5;
            let v = ry / scale_y + 3.5;
            // Supersample a small neighborhood for soft, thickness-varied
            // strokes.
            let mut acc = 0.0;
            for (ou, ov) in [(0.0, 0.0), (thickness, 0.0), (-thickness, 0.0), (0.0, thickness)] {
                acc += glyph_at(digit, u + ou, v + ov);
            }
            let ink = (acc / 4.0).min(1.0) * intensity;
            let u1: f64 = 1.0 - rng.gen::<f64>();
            let u2: f64 = rng.gen();
            let noise =
                noise_sigma * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
            let value = (ink + noise).clamp(0.0, 1.0);
            out[y * 28 + x] = (value * 255.0).round() as u8;
        }
    }
    out
}

/// Renders `n` digits (balanced classes, interleaved) into pixel and label
/// buffers.
fn render_split(n: usize, rng: &mut ChaCha12Rng) -> (Vec<u8>, Vec<u8>) {
    let mut images = Vec::with_capacity(n * 784);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let digit = i % 10;
        labels.push(digit as u8);
        images.extend_from_slice(&render(digit, rng));
    }
    (images, labels)
}

/// Writes a rendered corpus in the four-file MNIST layout. Train and test
/// draws come from the same distribution but disjoint generator streams.
pub fn generate_digit_corpus(
    dir: &Path,
    n_train: usize,
    n_test: usize,
    seed: u64,
) -> Result<(), DataError> {
    let mut train_rng = ChaCha12Rng::seed_from_u64(seed);
    let mut test_rng = ChaCha12Rng::seed_from_u64(seed ^ 0x7E57_DA7A);
    let (train_images, train_labels) = render_split(n_train, &mut train_rng);
    let (test_images, test_labels) = render_split(n_test, &mut test_rng);
    write_idx_images(&dir.join(TRAIN_IMAGES), 28, 28, &train_images)?;
    write_idx_labels(&dir.join(TRAIN_LABELS), &train_labels)?;
    write_idx_images(&dir.join(TEST_IMAGES), 28, 28, &test_images)?;
    write_idx_labels(&dir.join(TEST_LABELS), &test_labels)?;
    Ok(())
}
