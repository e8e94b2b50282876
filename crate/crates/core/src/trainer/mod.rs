//! Fine-tuning of one task module (adapter + head) on a frozen backbone.

mod run;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::adapters::LoraAdapter;
use crate::dataset::TaskDataset;
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Reduction, Rng, CE_LOG_FLOOR};

pub use run::{objective, objective_gradients, train_task, EpochRecord, ObjectiveGrads, TrainReport};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub warmup_fraction: f64,
    pub clip_norm: f64,
    /// Weight of `Σ ‖ΔW‖²_F` in the total loss.
    pub lambda: f64,
    pub reduction: Reduction,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-5,
            batch_size: 32,
            max_epochs: 5,
            patience: 2,
            warmup_fraction: 0.10,
            clip_norm: 1.0,
            lambda: 1e-4,
            reduction: Reduction::Mean,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::contract(format!("train config: {m}")));
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return bad("batch_size, max_epochs and patience must be positive");
        }
        if self.patience > self.max_epochs {
            return bad("patience exceeds max_epochs");
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return bad("warmup_fraction must lie in [0, 1)");
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm must be positive");
        }
        if !(self.lambda >= 0.0) {
            return bad("lambda must be non-negative");
        }
        Ok(())
    }
}

/// `−Σ_j log p_j[y_j]`, averaged over rows under [`Reduction::Mean`]; the
/// log argument is clamped at 1e-12.
pub fn cross_entropy(probs: &Matrix, labels: &[usize], reduction: Reduction) -> Result<f64> {
    if probs.rows() != labels.len() {
        return Err(Error::Shape {
            op: "cross_entropy",
            left: probs.shape(),
            right: (labels.len(), 1),
        });
    }
    if probs.rows() == 0 {
        return Err(Error::contract("cross_entropy of an empty batch"));
    }
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = probs.row(i);
        if y >= row.len() {
            return Err(Error::contract(format!("label {y} outside [0, {})", row.len())));
        }
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-4 {
            return Err(Error::contract(format!("probability row {i} sums to {sum}")));
        }
        total -= row[y].max(CE_LOG_FLOOR).ln();
    }
    Ok(match reduction {
        Reduction::Mean => total / labels.len() as f64,
        Reduction::Sum => total,
    })
}

/// `ce + λ · Σ_patches ‖ΔW‖²_F`; exactly `ce` when `λ = 0`.
pub fn total_loss(ce: f64, adapter: &LoraAdapter, lambda: f64) -> Result<f64> {
    if lambda < 0.0 {
        return Err(Error::contract("lambda must be non-negative"));
    }
    if lambda == 0.0 {
        return Ok(ce);
    }
    Ok(ce + lambda * adapter.delta_sq_norm()?)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Splits {
    pub train: TaskDataset,
    pub val: TaskDataset,
    pub test: TaskDataset,
}

/// Seeded 80/10/10 split. Examples with identical text are kept together,
/// so the split sizes are exact only when all texts are distinct.
pub fn split_dataset(dataset: &TaskDataset, seed: u64) -> Result<Splits> {
    let n = dataset.len();
    if n < 10 {
        return Err(Error::contract(format!("{n} examples is too few to split (need 10)")));
    }
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut by_text: HashMap<&str, usize> = HashMap::new();
    for (i, e) in dataset.examples.iter().enumerate() {
        match by_text.get(e.text.as_str()) {
            Some(&g) => groups[g].push(i),
            None => {
                by_text.insert(&e.text, groups.len());
                groups.push(vec![i]);
            }
        }
    }
    Rng::new(seed).split("split").shuffle(&mut groups);

    let n_train = n * 8 / 10;
    let n_val = n / 10;
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for g in groups {
        let dst = if train.len() < n_train {
            &mut train
        } else if val.len() < n_val {
            &mut val
        } else {
            &mut test
        };
        dst.extend(g.into_iter().map(|i| dataset.examples[i].clone()));
    }
    if val.is_empty() || test.is_empty() {
        return Err(Error::contract("duplicate texts leave a split empty"));
    }
    Ok(Splits {
        train: dataset.with_examples(train),
        val: dataset.with_examples(val),
        test: dataset.with_examples(test),
    })
}

/// Tracks validation loss and says when `patience` epochs in a row have
/// failed to improve on the best value.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: usize,
    epoch: usize,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            epoch: 0,
            stale: 0,
        }
    }

    /// Records the next epoch's loss. Returns `(improved, stop)`.
    pub fn observe(&mut self, val_loss: f64) -> (bool, bool) {
        self.epoch += 1;
        let improved = val_loss < self.best;
        if improved {
            self.best = val_loss;
            self.best_epoch = self.epoch;
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        (improved, self.stale >= self.patience)
    }

    /// 1-based epoch of the best loss so far (0 before any epoch).
    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn best_loss(&self) -> f64 {
        self.best
    }
}
