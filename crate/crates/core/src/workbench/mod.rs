//! Synthetic task generation and the efficiency benchmark.

mod bench;
mod generate;

pub use bench::{
    run_benchmark, write_baseline_copies, BenchConfig, BenchReport, BenchTask, LatencySummary, ReplaySummary,
};
pub use generate::{
    default_specs, generate_task, generate_tasks, DataManifest, Difficulty, ManifestEntry, TaskSpec, TaskVocabulary,
    DATA_MANIFEST, FILLER_WORDS, KEYWORDS_PER_CLASS, KEYWORD_RATE, LABEL_NOISE, MEAN_LENGTH, MIN_LENGTH,
};
