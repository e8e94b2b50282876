//! Dense matrices, a seeded random source, and a reverse-mode gradient tape.

mod matrix;
mod rng;
mod tape;

pub use matrix::{frobenius_norm, layer_norm, matmul, softmax, Matrix, Precision};
pub use rng::Rng;
pub use tape::{Gradients, Reduction, Tape, Var};

pub(crate) use tape::CE_LOG_FLOOR;
