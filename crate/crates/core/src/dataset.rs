//! Scored text responses for one task, stored as JSONL.
//!
//! One record per line: `{"task": "T01", "text": "...", "score": 2}`.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::check_classes;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub task: String,
    pub text: String,
    pub score: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub text: String,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskDataset {
    pub task_id: String,
    pub num_classes: usize,
    pub examples: Vec<Example>,
}

impl TaskDataset {
    pub fn new(task_id: impl Into<String>, num_classes: usize, examples: Vec<Example>) -> Result<Self> {
        check_classes(num_classes)?;
        if let Some(e) = examples.iter().find(|e| e.label >= num_classes) {
            return Err(Error::contract(format!(
                "score {} outside [0, {num_classes})",
                e.label
            )));
        }
        Ok(Self {
            task_id: task_id.into(),
            num_classes,
            examples,
        })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.examples.iter().map(|e| e.label).collect()
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for e in &self.examples {
            h[e.label] += 1;
        }
        h
    }

    /// Same task and class count, different examples.
    pub fn with_examples(&self, examples: Vec<Example>) -> Self {
        Self {
            task_id: self.task_id.clone(),
            num_classes: self.num_classes,
            examples,
        }
    }

    pub fn write_jsonl(&self, mut out: impl Write) -> Result<()> {
        for e in &self.examples {
            let rec = Record {
                task: self.task_id.clone(),
                text: e.text.clone(),
                score: e.label,
            };
            serde_json::to_writer(&mut out, &rec)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_jsonl(&mut w)?;
        w.flush()?;
        Ok(())
    }

    /// Reads JSONL records. `num_classes` defaults to the largest score + 1;
    /// `task_id` defaults to the task named in the first record.
    pub fn read_jsonl(input: impl BufRead, task_id: Option<&str>, num_classes: Option<usize>) -> Result<Self> {
        let mut task = task_id.map(str::to_string);
        let mut examples = Vec::new();
        for (n, line) in input.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: Record = serde_json::from_str(&line)
                .map_err(|e| Error::Malformed(format!("line {}: {e}", n + 1)))?;
            match &task {
                None => task = Some(rec.task.clone()),
                Some(t) if *t != rec.task => {
                    return Err(Error::Malformed(format!(
                        "line {}: task {:?} in a file for {t:?}",
                        n + 1,
                        rec.task
                    )))
                }
                Some(_) => {}
            }
            examples.push(Example {
                text: rec.text,
                label: rec.score,
            });
        }
        let task = task.ok_or_else(|| Error::contract("dataset file has no records"))?;
        let c = num_classes.unwrap_or_else(|| examples.iter().map(|e| e.label + 1).max().unwrap_or(0));
        Self::new(task, c, examples)
    }

    pub fn load(path: impl AsRef<Path>, task_id: Option<&str>, num_classes: Option<usize>) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_jsonl(BufReader::new(f), task_id, num_classes)
    }
}
