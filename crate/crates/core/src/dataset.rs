//! Seeded train/validation/test partitioning of labeled description rows.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::describe::{DatasetRow, Granularity};

const RATIO_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DatasetError {
    #[error("dataset has no rows")]
    EmptyDataset,
    #[error("split ratios must be positive and sum to 1 (got {train}, {val}, {test})")]
    BadRatios { train: f64, val: f64, test: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self { train: 0.8, val: 0.1, test: 0.1 }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<(), DatasetError> {
        let parts = [self.train, self.val, self.test];
        let ok = parts.iter().all(|r| r.is_finite() && *r > 0.0)
            && (parts.iter().sum::<f64>() - 1.0).abs() <= RATIO_TOLERANCE;
        if ok {
            Ok(())
        } else {
            Err(DatasetError::BadRatios { train: self.train, val: self.val, test: self.test })
        }
    }

    /// Largest-remainder apportionment of `n` rows; leftover rows go to the
    /// largest fractional parts, ties in train/val/test order.
    pub fn sizes(&self, n: usize) -> [usize; 3] {
        let exact = [self.train, self.val, self.test].map(|r| r * n as f64);
        let mut sizes = exact.map(|x| libm::floor(x) as usize);
        let assigned: usize = sizes.iter().sum();
        let mut order = [0usize, 1, 2];
        order.sort_by(|&a, &b| {
            let fa = exact[a] - libm::floor(exact[a]);
            let fb = exact[b] - libm::floor(exact[b]);
            fb.total_cmp(&fa).then(a.cmp(&b))
        });
        for &i in order.iter().take(n.saturating_sub(assigned)) {
            sizes[i] += 1;
        }
        sizes
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub total: usize,
}

/// Hyperparameters handed to the external fine-tuning job. Nothing in this
/// workspace trains a model; the values travel with the exported splits.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainingHyperparameters {
    pub learning_rate: f64,
    pub batch_size: u32,
    pub epochs: u32,
    pub objective: &'static str,
    pub classification_head: &'static str,
    pub label_encoding: &'static str,
}

impl Default for TrainingHyperparameters {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 1,
            epochs: 1,
            objective: "cross-entropy",
            classification_head: "final layer replaced by a linear layer with a binary output",
            label_encoding: "0 = benign, 1 = malicious",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub shuffle: &'static str,
    pub granularity: Granularity,
    pub ratios: SplitRatios,
    pub counts: SplitCounts,
    pub training: TrainingHyperparameters,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<DatasetRow>,
    pub val: Vec<DatasetRow>,
    pub test: Vec<DatasetRow>,
    pub manifest: SplitManifest,
}

/// Sorts rows canonically, applies a seeded Fisher-Yates shuffle
/// (ChaCha8 stream) and cuts the result into three contiguous splits.
pub fn build_dataset(
    mut rows: Vec<DatasetRow>,
    ratios: SplitRatios,
    seed: u64,
    granularity: Granularity,
) -> Result<DatasetSplit, DatasetError> {
    ratios.validate()?;
    if rows.is_empty() {
        return Err(DatasetError::EmptyDataset);
    }
    rows.sort();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rows.shuffle(&mut rng);

    let [n_train, n_val, n_test] = ratios.sizes(rows.len());
    let total = rows.len();
    let test = rows.split_off(n_train + n_val);
    let val = rows.split_off(n_train);
    let train = rows;
    debug_assert_eq!(test.len(), n_test);

    Ok(DatasetSplit {
        manifest: SplitManifest {
            seed,
            shuffle: "fisher-yates/chacha8",
            granularity,
            ratios,
            counts: SplitCounts { train: train.len(), val: val.len(), test: test.len(), total },
            training: TrainingHyperparameters::default(),
        },
        train,
        val,
        test,
    })
}
