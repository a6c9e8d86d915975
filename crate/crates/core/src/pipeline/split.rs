use std::cell::Cell;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Held-out indices that count every read, so a test can assert they were
/// untouched until final evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct SealedIndices {
    indices: Vec<usize>,
    reads: Cell<usize>,
}

impl SealedIndices {
    fn new(indices: Vec<usize>) -> Self {
        Self {
            indices,
            reads: Cell::new(0),
        }
    }

    pub fn open(&self) -> &[usize] {
        self.reads.set(self.reads.get() + 1);
        &self.indices
    }

    pub fn reads(&self) -> usize {
        self.reads.get()
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Disjoint train/validation/test indices.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: SealedIndices,
}

/// Shuffles `0..n` with `seed` and cuts it by `ratios` (train, val, test).
/// Train and validation sizes are rounded; the test set takes the rest.
pub fn split(n: usize, ratios: (f64, f64, f64), seed: u64) -> Result<Split> {
    let (a, b, c) = ratios;
    if [a, b, c].iter().any(|r| !(0.0..=1.0).contains(r)) || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split ratios {ratios:?} must be probabilities summing to 1")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((n as f64) * a).round() as usize;
    let n_val = (((n as f64) * b).round() as usize).min(n - n_train.min(n));
    let n_train = n_train.min(n);
    let test = order.split_off(n_train + n_val);
    let val = order.split_off(n_train);
    Ok(Split {
        train: order,
        val,
        test: SealedIndices::new(test),
    })
}
