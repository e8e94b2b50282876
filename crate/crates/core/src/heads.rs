//! Per-task classification head: `z = W_h·h + b_h`, `P(y|x) = softmax(z)`.

use crate::error::{Error, Result};
use crate::numerics::{softmax, Matrix, Precision, Rng, Tape, Var};

pub const MIN_CLASSES: usize = 2;
pub const MAX_CLASSES: usize = 6;

#[derive(Debug, Clone, PartialEq)]
pub struct ClassificationHead {
    pub task_id: String,
    /// `C × d_model`.
    pub weight: Matrix,
    /// `1 × C`.
    pub bias: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub label: usize,
    pub probs: Vec<f64>,
}

pub(crate) fn check_classes(c: usize) -> Result<()> {
    if !(MIN_CLASSES..=MAX_CLASSES).contains(&c) {
        return Err(Error::contract(format!(
            "num_classes {c} outside [{MIN_CLASSES}, {MAX_CLASSES}]"
        )));
    }
    Ok(())
}

impl ClassificationHead {
    /// `W_h ~ N(0, 0.02²)`, `b_h = 0`.
    pub fn new(task_id: &str, num_classes: usize, d_model: usize, rng: &Rng, precision: Precision) -> Result<Self> {
        check_classes(num_classes)?;
        let mut r = rng.split("head");
        Ok(Self {
            task_id: task_id.to_string(),
            weight: Matrix::random_normal(num_classes, d_model, 0.02, &mut r, precision),
            bias: Matrix::zeros(1, num_classes, precision),
        })
    }

    pub fn from_parts(task_id: &str, weight: Matrix, bias: Matrix) -> Result<Self> {
        check_classes(weight.rows())?;
        if bias.shape() != (1, weight.rows()) {
            return Err(Error::Shape {
                op: "head bias",
                left: weight.shape(),
                right: bias.shape(),
            });
        }
        Ok(Self {
            task_id: task_id.to_string(),
            weight,
            bias,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.weight.rows()
    }

    pub fn d_model(&self) -> usize {
        self.weight.cols()
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn precision(&self) -> Precision {
        self.weight.precision()
    }

    pub fn to_precision(&self, precision: Precision) -> Self {
        Self {
            task_id: self.task_id.clone(),
            weight: self.weight.to_precision(precision),
            bias: self.bias.to_precision(precision),
        }
    }

    /// Logits for one feature vector.
    pub fn forward(&self, h: &[f64]) -> Result<Vec<f64>> {
        if h.len() != self.d_model() {
            return Err(Error::Shape {
                op: "head_forward",
                left: self.weight.shape(),
                right: (h.len(), 1),
            });
        }
        let p = self.precision();
        Ok((0..self.num_classes())
            .map(|c| {
                let dot: f64 = self.weight.row(c).iter().zip(h).map(|(w, x)| w * x).sum();
                p.round(p.round(dot) + self.bias.as_slice()[c])
            })
            .collect())
    }

    pub fn predict(&self, h: &[f64]) -> Result<Prediction> {
        let z = self.forward(h)?;
        let probs = softmax(&z, self.precision())?;
        Ok(Prediction {
            label: argmax(&probs),
            probs,
        })
    }

    /// Records `H·W_hᵀ + b_h` for a batch of rows `H` (`N × d`).
    pub(crate) fn record(&self, tape: &mut Tape, h: Var, vars: (Var, Var)) -> Result<Var> {
        let z = tape.matmul_nt(h, vars.0)?;
        tape.add_row(z, vars.1)
    }

    pub(crate) fn bind(&self, tape: &mut Tape, trainable: bool) -> (Var, Var) {
        if trainable {
            (tape.leaf(self.weight.clone()), tape.leaf(self.bias.clone()))
        } else {
            (tape.constant(self.weight.clone()), tape.constant(self.bias.clone()))
        }
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
