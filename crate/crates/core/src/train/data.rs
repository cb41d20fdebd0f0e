use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::Tensor;

/// Standard deviation of the pixel noise added to every image.
pub const TOY_NOISE: f64 = 0.35;

/// Single-channel images of one short bar whose orientation encodes the
/// class. Position and polarity are random, so per-pixel averages carry
/// almost no class signal and a linear readout does poorly.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyDataset {
    pub classes: usize,
    pub train_x: Tensor,
    pub train_y: Vec<usize>,
    pub test_x: Tensor,
    pub test_y: Vec<usize>,
}

impl ToyDataset {
    pub fn image_shape(&self) -> &[usize] {
        &self.train_x.shape()[1..]
    }
}

fn render(class: usize, classes: usize, size: usize, rng: &mut ChaCha8Rng, noise: &Normal<f64>) -> Vec<f32> {
    let theta = PI * class as f64 / classes as f64;
    let (c, s) = (theta.cos(), theta.sin());
    let margin = size as f64 * 0.25;
    let cx = rng.random_range(margin..size as f64 - 1.0 - margin);
    let cy = rng.random_range(margin..size as f64 - 1.0 - margin);
    let polarity = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let half_len = size as f64 * 0.35;
    let mut img = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            let along = dx * c + dy * s;
            let across = -dx * s + dy * c;
            let fade = (half_len - along.abs() + 0.5).clamp(0.0, 1.0);
            let v = polarity * fade * (-across * across / 0.5).exp();
            img.push((v + noise.sample(rng)) as f32);
        }
    }
    img
}

fn split(classes: usize, per_class: usize, size: usize, rng: &mut ChaCha8Rng) -> (Tensor, Vec<usize>) {
    let noise = Normal::new(0.0, TOY_NOISE).expect("valid noise");
    let mut labels: Vec<usize> = (0..classes).flat_map(|c| std::iter::repeat_n(c, per_class)).collect();
    labels.shuffle(rng);
    let data = labels
        .iter()
        .flat_map(|&c| render(c, classes, size, rng, &noise))
        .collect();
    let x = Tensor::new(vec![labels.len(), 1, size, size], data).expect("consistent dataset shape");
    (x, labels)
}

/// Balanced train and test splits with `per_class` images of each class in
/// each split.
pub fn make_toy_dataset(classes: usize, per_class: usize, size: usize, seed: u64) -> ToyDataset {
    let classes = classes.max(1);
    let per_class = per_class.max(1);
    let size = size.max(4);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (train_x, train_y) = split(classes, per_class, size, &mut rng);
    let (test_x, test_y) = split(classes, per_class, size, &mut rng);
    ToyDataset {
        classes,
        train_x,
        train_y,
        test_x,
        test_y,
    }
}

/// Rows `idx` of a batch-major tensor.
pub fn gather(x: &Tensor, idx: &[usize]) -> Tensor {
    let per: usize = x.shape()[1..].iter().product();
    let mut data = Vec::with_capacity(idx.len() * per);
    for &i in idx {
        data.extend_from_slice(&x.data()[i * per..(i + 1) * per]);
    }
    let mut shape = x.shape().to_vec();
    shape[0] = idx.len();
    Tensor::new(shape, data).expect("gathered rows match shape")
}
