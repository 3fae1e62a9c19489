//! Deterministic synthetic classification task at MNIST scale, written in
//! IDX layout. Ten classes are distinguished by the angular position of a
//! bright blob around a central anchor; jitter, shifts and pixel noise keep
//! the task nontrivial while a small CNN still separates it cleanly. The
//! acceptance suite trains on this task instead of shipping real data.

use std::f64::consts::TAU;
use std::path::Path;

use muse_core::error::Result;
use muse_core::rng::SplitMix64;

use crate::dataset::{write_idx, Split};

pub const SYNTH_RESOLUTION: usize = 28;
pub const SYNTH_CLASSES: usize = 10;

fn render(label: usize, rng: &mut SplitMix64, pixels: &mut [u8]) {
    let res = SYNTH_RESOLUTION;
    debug_assert_eq!(pixels.len(), res * res);
    let shift_r = rng.uniform(-2.0, 2.0);
    let shift_c = rng.uniform(-2.0, 2.0);
    let center = (res as f64 - 1.0) / 2.0;
    let (cr, cc) = (center + shift_r, center + shift_c);
    let theta = TAU * label as f64 / SYNTH_CLASSES as f64 + rng.uniform(-0.12, 0.12);
    let radius = 8.0 + rng.uniform(-0.6, 0.6);
    let (br, bc) = (cr + radius * theta.sin(), cc + radius * theta.cos());
    let anchor_amp = 130.0 + rng.uniform(-15.0, 15.0);
    let blob_amp = 210.0 + rng.uniform(-25.0, 25.0);
    let (s1, s2) = (2.0f64, 2.0f64);
    for r in 0..res {
        for c in 0..res {
            let d_anchor = (r as f64 - cr).powi(2) + (c as f64 - cc).powi(2);
            let d_blob = (r as f64 - br).powi(2) + (c as f64 - bc).powi(2);
            let v = anchor_amp * (-d_anchor / (2.0 * s1 * s1)).exp()
                + blob_amp * (-d_blob / (2.0 * s2 * s2)).exp()
                + rng.uniform(0.0, 30.0);
            pixels[r * res + c] = v.clamp(0.0, 255.0) as u8;
        }
    }
}

fn make_split(n: usize, rng: &mut SplitMix64) -> (Vec<u8>, Vec<u8>) {
    let px = SYNTH_RESOLUTION * SYNTH_RESOLUTION;
    let mut images = vec![0u8; n * px];
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = (i % SYNTH_CLASSES) as u8;
        render(y as usize, rng, &mut images[i * px..(i + 1) * px]);
        labels.push(y);
    }
    (images, labels)
}

/// Write train/test IDX files for the synthetic task into `dir`.
pub fn write_task(dir: &Path, n_train: usize, n_test: usize, seed: u64) -> Result<()> {
    let mut rng = SplitMix64::new(seed);
    let (train_images, train_labels) = make_split(n_train, &mut rng);
    write_idx(dir, Split::Train, &train_images, &train_labels, SYNTH_RESOLUTION, SYNTH_RESOLUTION)?;
    let (test_images, test_labels) = make_split(n_test, &mut rng);
    write_idx(dir, Split::Test, &test_images, &test_labels, SYNTH_RESOLUTION, SYNTH_RESOLUTION)?;
    Ok(())
}
