//! Agreement metrics, the paired t-test, and per-task evaluation reports.

mod metrics;
mod ttest;

use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::dataset::TaskDataset;
use crate::error::{Error, Result};
use crate::orchestrator::Registry;

pub use metrics::{accuracy, confusion_matrix, macro_f1, qwk, qwk_detailed, Kappa};
pub use ttest::{ln_gamma, paired_t_test, regularized_beta, student_t_two_sided, TTest};

/// Test-set results for one task. Serialized keys keep this field order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task_id: String,
    pub n_test: usize,
    pub num_classes: usize,
    pub qwk: f64,
    pub qwk_degenerate: bool,
    pub accuracy: f64,
    pub macro_f1: f64,
    /// Rows are gold labels, columns predictions.
    pub confusion: Vec<Vec<usize>>,
}

impl EvalReport {
    pub fn from_labels(task_id: &str, golds: &[usize], preds: &[usize], num_classes: usize) -> Result<Self> {
        let confusion = confusion_matrix(golds, preds, num_classes)?;
        let kappa = qwk_detailed(golds, preds, num_classes)?;
        Ok(Self {
            task_id: task_id.to_string(),
            n_test: golds.len(),
            num_classes,
            qwk: kappa.value,
            qwk_degenerate: kappa.degenerate,
            accuracy: accuracy(golds, preds)?,
            macro_f1: macro_f1(golds, preds, num_classes)?,
            confusion,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain struct serializes")
    }
}

/// Scores every test example through the registry and summarizes.
pub fn evaluate(registry: &Registry, backbone: &Backbone, task_id: &str, test: &TaskDataset) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(Error::contract("empty test split"));
    }
    let mut preds = Vec::with_capacity(test.len());
    let mut num_classes = 0;
    for e in &test.examples {
        let r = registry.score(backbone, task_id, &e.text)?;
        num_classes = r.probs.len();
        preds.push(r.label);
    }
    if test.num_classes > num_classes {
        return Err(Error::contract(format!(
            "test split has {} classes but module {task_id:?} predicts {num_classes}",
            test.num_classes
        )));
    }
    EvalReport::from_labels(task_id, &test.labels(), &preds, num_classes)
}
