//! Seeded synthetic stand-ins for the X-ray corpus.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Dataset, DEFAULT_CLASSES};
use crate::tensor::{Shape, Tensor};

/// Side length of synthetic images (single channel).
pub const SYNTH_SIZE: usize = 32;

const BACKGROUND: f64 = -0.5;
const NOISE_SIGMA: f64 = 0.1;
const BLOB_AMPLITUDE: f64 = 1.0;
const BLOB_SIGMA: f64 = 4.5;
const BAND_AMPLITUDE: f64 = 0.4;

fn noise(rng: &mut ChaCha8Rng) -> Vec<f64> {
    let normal = Normal::new(0.0, NOISE_SIGMA).expect("valid sigma");
    (0..SYNTH_SIZE * SYNTH_SIZE)
        .map(|_| BACKGROUND + normal.sample(rng))
        .collect()
}

fn add_blob(px: &mut [f64], cy: f64, cx: f64, amplitude: f64) {
    for (i, v) in px.iter_mut().enumerate() {
        let (y, x) = ((i / SYNTH_SIZE) as f64, (i % SYNTH_SIZE) as f64);
        let d2 = (y - cy).powi(2) + (x - cx).powi(2);
        *v += amplitude * (-d2 / (2.0 * BLOB_SIGMA * BLOB_SIGMA)).exp();
    }
}

fn finish(px: Vec<f64>) -> Tensor {
    let px = px.into_iter().map(|v| v.clamp(-1.0, 1.0)).collect();
    Tensor::from_vec(Shape::new(vec![SYNTH_SIZE, SYNTH_SIZE, 1]).expect("constant"), px).expect("sized")
}

/// Three classes with `n_per_class` samples each, interleaved `0, 1, 2, 0, ..`:
///
/// * 0: a bright blob in the lower-left quadrant,
/// * 1: horizontal bands of random period and phase,
/// * 2: noise only.
///
/// Every image has a background of -0.5 plus Gaussian noise of standard
/// deviation 0.1.
pub fn synthesize(n_per_class: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(3 * n_per_class);
    let mut labels = Vec::with_capacity(3 * n_per_class);
    for _ in 0..n_per_class {
        for label in 0..3 {
            let mut px = noise(&mut rng);
            match label {
                0 => {
                    let cy = rng.random_range(22.0..26.0);
                    let cx = rng.random_range(6.0..10.0);
                    add_blob(&mut px, cy, cx, BLOB_AMPLITUDE);
                }
                1 => {
                    let period = rng.random_range(6.0..10.0);
                    let phase = rng.random_range(0.0..TAU);
                    for (i, v) in px.iter_mut().enumerate() {
                        let y = (i / SYNTH_SIZE) as f64;
                        *v += BAND_AMPLITUDE * (TAU * y / period + phase).sin();
                    }
                }
                _ => {}
            }
            images.push(finish(px));
            labels.push(label);
        }
    }
    let classes = DEFAULT_CLASSES.iter().map(|c| c.to_string()).collect();
    Dataset::new(classes, images, labels).expect("consistent by construction")
}

/// Quadrant index of pixel `(y, x)`: 0 top-left, 1 top-right, 2 bottom-left,
/// 3 bottom-right.
pub fn quadrant_of(h: usize, w: usize, y: usize, x: usize) -> usize {
    usize::from(2 * y >= h) * 2 + usize::from(2 * x >= w)
}

/// Localization task: class 0 has one bright blob, class 1 one dark blob,
/// placed in a uniformly random quadrant (at least 4 px from the quadrant
/// edges). Returns the dataset and each sample's blob quadrant, which is
/// independent of the label.
pub fn synthesize_quadrants(n_per_class: usize, seed: u64) -> (Dataset, Vec<usize>) {
    let half = (SYNTH_SIZE / 2) as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(2 * n_per_class);
    let mut labels = Vec::with_capacity(2 * n_per_class);
    let mut quadrants = Vec::with_capacity(2 * n_per_class);
    for _ in 0..n_per_class {
        for (label, amplitude) in [(0, 1.0), (1, -1.0)] {
            let q = rng.random_range(0..4);
            let mut px = noise(&mut rng);
            let cy = (q / 2) as f64 * half + rng.random_range(4.0..half - 4.0);
            let cx = (q % 2) as f64 * half + rng.random_range(4.0..half - 4.0);
            add_blob(&mut px, cy, cx, amplitude);
            images.push(finish(px));
            labels.push(label);
            quadrants.push(q);
        }
    }
    let classes = ["bright", "dark"].map(String::from).to_vec();
    (
        Dataset::new(classes, images, labels).expect("consistent by construction"),
        quadrants,
    )
}
