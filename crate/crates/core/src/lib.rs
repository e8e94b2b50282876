//! Multi-task short-answer scoring over one shared, frozen transformer
//! encoder with a small LoRA adapter and classification head per task.

pub mod adapters;
pub mod backbone;
mod codec;
pub mod dataset;
mod error;
pub mod evalkit;
pub mod hash;
pub mod heads;
pub mod numerics;
pub mod optim;
pub mod orchestrator;
pub mod trainer;
pub mod workbench;

pub use error::{Error, Result};

/// The guide's code listings, compiled and run as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/backbone.md")]
    mod backbone {}
    #[doc = include_str!("../../../book/src/adapters.md")]
    mod adapters {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/serving.md")]
    mod serving {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/formats.md")]
    mod formats {}
}
