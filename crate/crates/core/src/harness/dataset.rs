//! Synthetic Gaussian-blob classification data with one under-represented
//! class in the training split.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{DroError, Result};
use crate::tinynet::Dataset;

const TRAIN_STREAM: u64 = 0;
const TEST_STREAM: u64 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub num_classes: usize,
    pub dim: usize,
    /// Training points per class before subsampling.
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// One mean per class, each of length `dim`.
    pub means: Vec<Vec<f64>>,
    /// Isotropic standard deviation of every blob.
    pub std_dev: f64,
    /// Class thinned out of the training split.
    pub minority_class: usize,
    /// Fraction of the minority class kept for training, in `(0, 1]`.
    pub imbalance_ratio: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            num_classes: 3,
            dim: 2,
            train_per_class: 1000,
            test_per_class: 500,
            means: vec![vec![0.0, 1.0], vec![-0.866, -0.5], vec![0.866, -0.5]],
            std_dev: 0.3,
            minority_class: 2,
            imbalance_ratio: 0.01,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.dim == 0 {
            return Err(DroError::arg("need at least two classes and one dimension"));
        }
        if self.train_per_class == 0 || self.test_per_class == 0 {
            return Err(DroError::arg("class sizes must be at least 1"));
        }
        if self.means.len() != self.num_classes || self.means.iter().any(|m| m.len() != self.dim) {
            return Err(DroError::arg(format!(
                "expected {} means of dimension {}",
                self.num_classes, self.dim
            )));
        }
        if self.means.iter().flatten().any(|v| !v.is_finite()) {
            return Err(DroError::arg("class means must be finite"));
        }
        if !(self.std_dev.is_finite() && self.std_dev > 0.0) {
            return Err(DroError::arg(format!(
                "std_dev must be > 0, got {}",
                self.std_dev
            )));
        }
        if self.minority_class >= self.num_classes {
            return Err(DroError::arg(format!(
                "minority class {} out of range",
                self.minority_class
            )));
        }
        if !(self.imbalance_ratio > 0.0 && self.imbalance_ratio <= 1.0) {
            return Err(DroError::arg(format!(
                "imbalance ratio must lie in (0, 1], got {}",
                self.imbalance_ratio
            )));
        }
        Ok(())
    }

    /// Training size of the minority class: `⌈ratio · size⌉`.
    pub fn minority_train_size(&self) -> usize {
        // guard against 0.01 * 1000 = 10.000000000000002 style rounding
        let raw = self.imbalance_ratio * self.train_per_class as f64;
        ((raw - 1e-9).ceil() as usize).clamp(1, self.train_per_class)
    }

    pub fn train_class_sizes(&self) -> Vec<usize> {
        (0..self.num_classes)
            .map(|c| {
                if c == self.minority_class {
                    self.minority_train_size()
                } else {
                    self.train_per_class
                }
            })
            .collect()
    }
}

fn blobs(spec: &DatasetSpec, sizes: &[usize], stream: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(stream);
    let noise = Normal::new(0.0, spec.std_dev).expect("validated std_dev");
    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    for (c, mean) in spec.means.iter().enumerate() {
        // draw the full class so the kept prefix does not depend on the ratio
        let full = if stream == TRAIN_STREAM {
            spec.train_per_class
        } else {
            spec.test_per_class
        };
        for k in 0..full {
            let x: Vec<f64> = mean.iter().map(|m| m + noise.sample(&mut rng)).collect();
            if k < sizes[c] {
                inputs.push(x);
                labels.push(c);
            }
        }
    }
    Dataset::classification(inputs, labels, spec.num_classes)
}

/// Returns `(train, test)`; the test split is balanced.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    let train = blobs(spec, &spec.train_class_sizes(), TRAIN_STREAM)?;
    let test = blobs(
        spec,
        &vec![spec.test_per_class; spec.num_classes],
        TEST_STREAM,
    )?;
    Ok((train, test))
}

/// SHA-256 over the exact bytes of every input and label.
pub fn dataset_digest(data: &Dataset) -> String {
    let mut h = Sha256::new();
    h.update((data.len() as u64).to_le_bytes());
    for (x, y) in data.inputs.iter().zip(&data.targets) {
        for v in x {
            h.update(v.to_le_bytes());
        }
        h.update((y.class() as u64).to_le_bytes());
    }
    hex::encode(h.finalize())
}
