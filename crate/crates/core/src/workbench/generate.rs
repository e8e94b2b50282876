//! Synthetic stand-in for a set of scored short-answer items.
//!
//! Every task has a pool of filler words shared by all classes and one
//! keyword pool per class. A response of length `max(3, Poisson(20))` draws
//! each word from its class's keyword pool with probability
//! [`KEYWORD_RATE`], otherwise from the filler pool. Difficulty controls how
//! much the keyword pools overlap and whether labels are noisy.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::{Example, TaskDataset};
use crate::error::{Error, Result};
use crate::heads::check_classes;
use crate::numerics::Rng;

pub const MEAN_LENGTH: f64 = 20.0;
pub const MIN_LENGTH: usize = 3;
pub const KEYWORD_RATE: f64 = 0.35;
pub const KEYWORDS_PER_CLASS: usize = 10;
pub const FILLER_WORDS: usize = 150;
pub const LABEL_NOISE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    Easy,
    Medium,
    Hard,
}

impl Difficulty {
    /// Fraction of each class's keywords taken from a pool common to all
    /// classes.
    pub fn shared_fraction(self) -> f64 {
        match self {
            Difficulty::Easy => 0.0,
            Difficulty::Medium => 0.3,
            Difficulty::Hard => 0.6,
        }
    }

    pub fn label_noise(self) -> f64 {
        match self {
            Difficulty::Easy => 0.0,
            Difficulty::Medium | Difficulty::Hard => LABEL_NOISE,
        }
    }
}

fn default_items() -> usize {
    1000
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: String,
    pub num_classes: usize,
    #[serde(default = "default_items")]
    pub n_items: usize,
    pub difficulty: Difficulty,
    #[serde(default)]
    pub seed: u64,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        check_classes(self.num_classes)?;
        if self.n_items < 10 * self.num_classes {
            return Err(Error::contract(format!(
                "task {}: {} items is fewer than 10 per class",
                self.task_id, self.n_items
            )));
        }
        Ok(())
    }
}

/// `n` specs named `T01`, `T02`, ... with class counts cycling through
/// 2..=6 and difficulty alternating easy/medium.
pub fn default_specs(n: usize, n_items: usize, seed: u64) -> Vec<TaskSpec> {
    (0..n)
        .map(|i| TaskSpec {
            task_id: format!("T{:02}", i + 1),
            num_classes: 2 + i % 5,
            n_items,
            difficulty: if i % 2 == 0 { Difficulty::Easy } else { Difficulty::Medium },
            seed: seed.wrapping_add(i as u64),
        })
        .collect()
}

const ONSETS: [&str; 18] = [
    "b", "d", "f", "g", "h", "k", "l", "m", "n", "p", "r", "s", "t", "w", "z", "st", "sch", "kr",
];
const NUCLEI: [&str; 8] = ["a", "e", "i", "o", "u", "ei", "au", "ie"];
const CODAS: [&str; 8] = ["", "n", "r", "t", "s", "l", "ng", "ch"];

fn pseudo_word(rng: &mut Rng) -> String {
    let syllables = 2 + rng.below(2);
    let mut w = String::new();
    for _ in 0..syllables {
        w.push_str(ONSETS[rng.below(ONSETS.len())]);
        w.push_str(NUCLEI[rng.below(NUCLEI.len())]);
        w.push_str(CODAS[rng.below(CODAS.len())]);
    }
    w
}

/// Vocabulary of one task; all words distinct.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskVocabulary {
    pub filler: Vec<String>,
    /// Per class; overlapping words appear in every class's pool.
    pub keywords: Vec<Vec<String>>,
    /// Words unique to each class.
    pub unique: Vec<Vec<String>>,
}

impl TaskVocabulary {
    pub fn new(num_classes: usize, difficulty: Difficulty, rng: &mut Rng) -> Self {
        let mut seen = HashSet::new();
        let mut fresh = |rng: &mut Rng, n: usize| -> Vec<String> {
            let mut out = Vec::with_capacity(n);
            while out.len() < n {
                let w = pseudo_word(rng);
                if seen.insert(w.clone()) {
                    out.push(w);
                }
            }
            out
        };
        let n_shared = (difficulty.shared_fraction() * KEYWORDS_PER_CLASS as f64).round() as usize;
        let filler = fresh(rng, FILLER_WORDS);
        let shared = fresh(rng, n_shared);
        let unique: Vec<Vec<String>> = (0..num_classes)
            .map(|_| fresh(rng, KEYWORDS_PER_CLASS - n_shared))
            .collect();
        let keywords = unique
            .iter()
            .map(|u| shared.iter().chain(u).cloned().collect())
            .collect();
        Self {
            filler,
            keywords,
            unique,
        }
    }
}

/// Builds one task's examples. Labels are balanced before noise.
pub fn generate_task(spec: &TaskSpec) -> Result<TaskDataset> {
    spec.validate()?;
    let root = Rng::new(spec.seed).split(&format!("task/{}", spec.task_id));
    let vocab = TaskVocabulary::new(spec.num_classes, spec.difficulty, &mut root.split("vocabulary"));

    let mut labels: Vec<usize> = (0..spec.n_items).map(|i| i % spec.num_classes).collect();
    root.split("labels").shuffle(&mut labels);

    let mut text_rng = root.split("text");
    let mut noise_rng = root.split("noise");
    let noise = spec.difficulty.label_noise();
    let examples = labels
        .into_iter()
        .map(|label| {
            let len = (text_rng.poisson(MEAN_LENGTH) as usize).max(MIN_LENGTH);
            let words: Vec<&str> = (0..len)
                .map(|_| {
                    let pool = if text_rng.uniform() < KEYWORD_RATE {
                        &vocab.keywords[label]
                    } else {
                        &vocab.filler
                    };
                    pool[text_rng.below(pool.len())].as_str()
                })
                .collect();
            let mut label = label;
            if noise > 0.0 && noise_rng.uniform() < noise {
                label = (label + 1 + noise_rng.below(spec.num_classes - 1)) % spec.num_classes;
            }
            Example {
                text: words.join(" "),
                label,
            }
        })
        .collect();
    TaskDataset::new(spec.task_id.clone(), spec.num_classes, examples)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub num_classes: usize,
    pub path: PathBuf,
}

/// `{"tasks": [{"id", "num_classes", "path"}, ...]}`; paths are relative
/// to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DataManifest {
    pub tasks: Vec<ManifestEntry>,
}

pub const DATA_MANIFEST: &str = "manifest.json";

impl DataManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    /// Loads every listed dataset, resolving paths against `dir`.
    pub fn load_datasets(&self, dir: &Path) -> Result<Vec<TaskDataset>> {
        self.tasks
            .iter()
            .map(|t| TaskDataset::load(dir.join(&t.path), Some(&t.id), Some(t.num_classes)))
            .collect()
    }
}

/// Writes `<task_id>.jsonl` per spec plus `manifest.json` into `out_dir`.
pub fn generate_tasks(specs: &[TaskSpec], out_dir: impl AsRef<Path>) -> Result<DataManifest> {
    let out_dir = out_dir.as_ref();
    let mut ids = HashSet::new();
    for s in specs {
        if !ids.insert(s.task_id.as_str()) {
            return Err(Error::contract(format!("duplicate task id {:?}", s.task_id)));
        }
        s.validate()?;
    }
    std::fs::create_dir_all(out_dir)?;
    let mut manifest = DataManifest::default();
    for s in specs {
        let ds = generate_task(s)?;
        let file = PathBuf::from(format!("{}.jsonl", s.task_id));
        ds.save(out_dir.join(&file))?;
        manifest.tasks.push(ManifestEntry {
            id: s.task_id.clone(),
            num_classes: s.num_classes,
            path: file,
        });
    }
    manifest.save(out_dir.join(DATA_MANIFEST))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(difficulty: Difficulty, c: usize) -> TaskSpec {
        TaskSpec {
            task_id: "T01".into(),
            num_classes: c,
            n_items: 600,
            difficulty,
            seed: 3,
        }
    }

    #[test]
    fn deterministic_and_balanced() {
        let a = generate_task(&spec(Difficulty::Medium, 4)).unwrap();
        assert_eq!(a, generate_task(&spec(Difficulty::Medium, 4)).unwrap());
        for count in a.class_histogram() {
            assert!((135..=165).contains(&count), "{count}");
        }
    }

    #[test]
    fn easy_pools_are_disjoint_and_hard_pools_overlap() {
        let mut rng = Rng::new(0);
        let easy = TaskVocabulary::new(3, Difficulty::Easy, &mut rng);
        let a: HashSet<_> = easy.keywords[0].iter().collect();
        assert!(easy.keywords[1].iter().all(|w| !a.contains(w)));
        let hard = TaskVocabulary::new(3, Difficulty::Hard, &mut rng);
        let a: HashSet<_> = hard.keywords[0].iter().collect();
        assert_eq!(hard.keywords[1].iter().filter(|w| a.contains(w)).count(), 6);
    }

    #[test]
    fn short_responses_are_padded_to_minimum() {
        let ds = generate_task(&spec(Difficulty::Easy, 2)).unwrap();
        assert!(ds.examples.iter().all(|e| e.text.split(' ').count() >= MIN_LENGTH));
    }

    #[test]
    fn duplicate_ids_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let s = spec(Difficulty::Easy, 2);
        assert!(generate_tasks(&[s.clone(), s], dir.path()).is_err());
    }

    #[test]
    fn too_few_items_rejected() {
        let mut s = spec(Difficulty::Easy, 6);
        s.n_items = 59;
        assert!(generate_task(&s).is_err());
    }
}
