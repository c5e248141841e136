//! Labelled image sets, the train/validation split and per-epoch mini-batches.
//!
//! Parsing the on-disk format is the companion crate's job; this module only
//! sees decoded matrices and labels.

use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::numerics::Matrix;
use crate::{Error, Result, Rng};

/// Number of digit classes.
pub const MNIST_CLASSES: usize = 10;

/// Training and test images, one flattened image per row, with their labels.
#[derive(Clone, Debug, PartialEq)]
pub struct MnistDataset {
    pub train_images: Matrix,
    pub train_labels: Vec<usize>,
    pub test_images: Matrix,
    pub test_labels: Vec<usize>,
}

impl MnistDataset {
    pub fn new(
        train_images: Matrix,
        train_labels: Vec<usize>,
        test_images: Matrix,
        test_labels: Vec<usize>,
    ) -> Result<Self> {
        if train_images.rows() != train_labels.len() || test_images.rows() != test_labels.len() {
            return Err(Error::Data(format!(
                "image/label counts differ: train {}/{}, test {}/{}",
                train_images.rows(),
                train_labels.len(),
                test_images.rows(),
                test_labels.len()
            )));
        }
        if train_images.cols() != test_images.cols() {
            return Err(Error::Data(format!(
                "train images have {} pixels, test images {}",
                train_images.cols(),
                test_images.cols()
            )));
        }
        if let Some(bad) = train_labels.iter().chain(&test_labels).find(|&&y| y >= MNIST_CLASSES) {
            return Err(Error::Data(format!("label {bad} is not a digit")));
        }
        if !train_images.is_finite() || !test_images.is_finite() {
            return Err(Error::Data("non-finite pixel value".into()));
        }
        Ok(MnistDataset { train_images, train_labels, test_images, test_labels })
    }

    pub fn n_train(&self) -> usize {
        self.train_labels.len()
    }

    pub fn n_test(&self) -> usize {
        self.test_labels.len()
    }

    pub fn input_dim(&self) -> usize {
        self.train_images.cols()
    }
}

/// Disjoint training and validation index sets over the training images.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

/// Random partition of `0..total` into `train_n` training and `val_n` validation indices.
pub fn split(total: usize, train_n: usize, val_n: usize, rng: &mut Rng) -> Result<Split> {
    if train_n + val_n != total {
        return Err(Error::Protocol(format!("split sizes {train_n} + {val_n} do not cover {total} samples")));
    }
    let mut idx: Vec<usize> = (0..total).collect();
    idx.shuffle(rng);
    let val = idx.split_off(train_n);
    Ok(Split { train: idx, val })
}

/// Random disjoint subsets of sizes `a` and `b` drawn from `pool`.
pub fn sample_disjoint(pool: &[usize], a: usize, b: usize, rng: &mut Rng) -> Result<(Vec<usize>, Vec<usize>)> {
    if a + b > pool.len() {
        return Err(Error::Protocol(format!("cannot draw {a} + {b} samples from {}", pool.len())));
    }
    let mut idx = pool.to_vec();
    let (picked, _) = idx.partial_shuffle(rng, a + b);
    let mut first = picked.to_vec();
    let second = first.split_off(a);
    Ok((first, second))
}

/// One epoch of mini-batches: a fresh permutation of `indices`, chunked into
/// `batch_size` pieces. A trailing chunk of a single sample is dropped because
/// batch norm is undefined on it.
pub fn epoch_batches(indices: &[usize], batch_size: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    assert!(batch_size >= 2, "batch norm needs batches of at least 2");
    let mut perm = indices.to_vec();
    perm.shuffle(rng);
    perm.chunks(batch_size).filter(|c| c.len() >= 2).map(|c| c.to_vec()).collect()
}

/// Gaussian clusters around random class centers: an easy, linearly separable
/// stand-in for real digits in tests and self-checks.
pub fn synthetic_clusters(
    n_train: usize,
    n_test: usize,
    dim: usize,
    n_classes: usize,
    separation: f64,
    rng: &mut Rng,
) -> Result<MnistDataset> {
    use rand::Rng as _;
    use rand_distr::StandardNormal;
    if n_classes == 0 || n_classes > MNIST_CLASSES {
        return Err(Error::Precondition(format!("n_classes must lie in 1..=10, got {n_classes}")));
    }
    let centers: Vec<f64> = (0..n_classes * dim).map(|_| separation * rng.sample::<f64, _>(StandardNormal)).collect();
    let mut draw = |n: usize| {
        let mut data = Vec::with_capacity(n * dim);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let c = i % n_classes;
            labels.push(c);
            for k in 0..dim {
                data.push(centers[c * dim + k] + rng.sample::<f64, _>(StandardNormal));
            }
        }
        (Matrix::from_raw(n, dim, data), labels)
    };
    let (train_images, train_labels) = draw(n_train);
    let (test_images, test_labels) = draw(n_test);
    MnistDataset::new(train_images, train_labels, test_images, test_labels)
}
