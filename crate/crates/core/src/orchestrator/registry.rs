use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::time::Instant;

use indexmap::IndexMap;
use serde::Serialize;

use crate::adapters::attach;
use crate::backbone::{tokenize, Backbone};
use crate::error::{Error, Result};
use crate::numerics::Precision;
use crate::orchestrator::module::{peek_task_id, TaskModule};

pub const DEFAULT_CAPACITY: usize = 4;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct RegistryStats {
    pub hits: u64,
    pub misses: u64,
    pub evictions: u64,
    pub loads: u64,
    /// Total time spent reading and decoding module files.
    pub load_us: u64,
    /// Total time spent encoding and predicting.
    pub compute_us: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoreResult {
    pub task_id: String,
    pub label: usize,
    pub probs: Vec<f64>,
    pub cache_hit: bool,
    pub latency_us: u64,
    /// The text had more tokens than the backbone accepts and was cut.
    pub truncated: bool,
}

#[derive(Default)]
struct State {
    manifest: IndexMap<String, PathBuf>,
    /// Least recently used first.
    loaded: IndexMap<String, Arc<TaskModule>>,
    pins: HashMap<String, usize>,
    stats: RegistryStats,
}

/// Task manifest plus an LRU cache of loaded task modules.
///
/// Safe to share between threads. Loading and eviction happen under one
/// lock; a module that is being scored is pinned and is never chosen for
/// eviction until the scoring call releases it.
pub struct Registry {
    capacity: usize,
    precision: Precision,
    state: Mutex<State>,
    unpinned: Condvar,
}

/// Releases a pin when dropped.
pub struct Pinned<'a> {
    registry: &'a Registry,
    pub module: Arc<TaskModule>,
    pub cache_hit: bool,
}

impl Drop for Pinned<'_> {
    fn drop(&mut self) {
        let mut state = self.registry.lock();
        if let Some(n) = state.pins.get_mut(&self.module.task_id) {
            *n -= 1;
            if *n == 0 {
                state.pins.remove(&self.module.task_id);
            }
        }
        drop(state);
        self.registry.unpinned.notify_all();
    }
}

impl Registry {
    /// Empty registry holding at most `capacity` modules, converted to
    /// `precision` as they are loaded.
    pub fn new(capacity: usize, precision: Precision) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::contract("registry capacity must be positive"));
        }
        Ok(Self {
            capacity,
            precision,
            state: Mutex::new(State::default()),
            unpinned: Condvar::new(),
        })
    }

    /// Registers every entry of a JSON manifest (`{"task_id": "path", ...}`).
    /// Relative paths are resolved against the manifest's directory.
    pub fn from_manifest(path: impl AsRef<Path>, capacity: usize, precision: Precision) -> Result<Self> {
        let path = path.as_ref();
        let map: IndexMap<String, PathBuf> = serde_json::from_slice(&std::fs::read(path)?)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let registry = Self::new(capacity, precision)?;
        for (task, p) in map {
            registry.register(&task, base.join(p))?;
        }
        Ok(registry)
    }

    /// Writes the manifest as a JSON map of task id to module path.
    pub fn manifest_json(&self) -> Result<String> {
        let state = self.lock();
        Ok(serde_json::to_string_pretty(&state.manifest)?)
    }

    fn lock(&self) -> MutexGuard<'_, State> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn stats(&self) -> RegistryStats {
        self.lock().stats
    }

    pub fn manifest_len(&self) -> usize {
        self.lock().manifest.len()
    }

    pub fn task_ids(&self) -> Vec<String> {
        self.lock().manifest.keys().cloned().collect()
    }

    pub fn path_of(&self, task_id: &str) -> Option<PathBuf> {
        self.lock().manifest.get(task_id).cloned()
    }

    /// Loaded task ids, least recently used first.
    pub fn loaded(&self) -> Vec<String> {
        self.lock().loaded.keys().cloned().collect()
    }

    /// Parameter bytes of all loaded modules.
    pub fn resident_bytes(&self) -> usize {
        self.lock()
            .loaded
            .values()
            .map(|m| m.param_bytes(self.precision))
            .sum()
    }

    /// Adds a task. Only the file header is read; the module itself is
    /// loaded on first use.
    pub fn register(&self, task_id: &str, path: impl Into<PathBuf>) -> Result<()> {
        let path = path.into();
        if self.lock().manifest.contains_key(task_id) {
            return Err(Error::DuplicateTask(task_id.to_string()));
        }
        let found = peek_task_id(&path).map_err(|e| Error::Registration {
            task: task_id.to_string(),
            reason: format!("{}: {e}", path.display()),
        })?;
        if found != task_id {
            return Err(Error::Registration {
                task: task_id.to_string(),
                reason: format!("{} holds task {found:?}", path.display()),
            });
        }
        let mut state = self.lock();
        if state.manifest.contains_key(task_id) {
            return Err(Error::DuplicateTask(task_id.to_string()));
        }
        state.manifest.insert(task_id.to_string(), path);
        Ok(())
    }

    /// Returns the module for `task_id`, loading it (and evicting the least
    /// recently used unpinned module when full) on a miss.
    pub fn ensure_loaded(&self, task_id: &str) -> Result<Arc<TaskModule>> {
        self.acquire(task_id).map(|p| p.module.clone())
    }

    /// Like [`Registry::ensure_loaded`], but keeps the module pinned until
    /// the returned guard is dropped.
    pub fn acquire(&self, task_id: &str) -> Result<Pinned<'_>> {
        let mut state = self.lock();
        if let Some(module) = state.loaded.get(task_id).cloned() {
            let idx = state.loaded.get_index_of(task_id).expect("present");
            let last = state.loaded.len() - 1;
            state.loaded.move_index(idx, last);
            state.stats.hits += 1;
            *state.pins.entry(task_id.to_string()).or_default() += 1;
            return Ok(Pinned {
                registry: self,
                module,
                cache_hit: true,
            });
        }
        let path = state
            .manifest
            .get(task_id)
            .cloned()
            .ok_or_else(|| Error::UnknownTask(task_id.to_string()))?;

        let started = Instant::now();
        let module = TaskModule::load(&path)?;
        if module.task_id != task_id {
            return Err(Error::Registration {
                task: task_id.to_string(),
                reason: format!("{} now holds task {:?}", path.display(), module.task_id),
            });
        }
        let module = Arc::new(module.to_precision(self.precision));
        let load_us = started.elapsed().as_micros() as u64;

        while state.loaded.len() >= self.capacity {
            let victim = state
                .loaded
                .keys()
                .find(|k| !state.pins.contains_key(*k))
                .cloned();
            match victim {
                Some(v) => {
                    state.loaded.shift_remove(&v);
                    state.stats.evictions += 1;
                }
                None => {
                    state = self.unpinned.wait(state).unwrap_or_else(|e| e.into_inner());
                    // another thread may have loaded it meanwhile
                    if state.loaded.contains_key(task_id) {
                        drop(state);
                        return self.acquire(task_id);
                    }
                }
            }
        }
        state.loaded.insert(task_id.to_string(), module.clone());
        state.stats.misses += 1;
        state.stats.loads += 1;
        state.stats.load_us += load_us;
        *state.pins.entry(task_id.to_string()).or_default() += 1;
        Ok(Pinned {
            registry: self,
            module,
            cache_hit: false,
        })
    }

    /// The three-step workflow: shared backbone features, task module
    /// lookup, prediction through the unmerged adapter path.
    pub fn score(&self, backbone: &Backbone, task_id: &str, text: &str) -> Result<ScoreResult> {
        let started = Instant::now();
        let pinned = self.acquire(task_id)?;
        let compute_start = Instant::now();
        let result = score_with(backbone, &pinned.module, text);
        let compute_us = compute_start.elapsed().as_micros() as u64;
        let cache_hit = pinned.cache_hit;
        drop(pinned);
        self.lock().stats.compute_us += compute_us;
        let (label, probs, truncated) = result?;
        Ok(ScoreResult {
            task_id: task_id.to_string(),
            label,
            probs,
            cache_hit,
            latency_us: started.elapsed().as_micros() as u64,
            truncated,
        })
    }
}

/// Scores `text` with one module; shared by the registry and by callers that
/// hold a module directly.
pub fn score_with(backbone: &Backbone, module: &TaskModule, text: &str) -> Result<(usize, Vec<f64>, bool)> {
    if backbone.frozen_fingerprint() != Some(module.metadata.backbone_fingerprint.as_str()) {
        return Err(Error::contract(format!(
            "module {:?} was trained on a different (or unfrozen) backbone",
            module.task_id
        )));
    }
    let tokens = tokenize(text, backbone.config());
    let h = attach(backbone, &module.adapter)?.encode(&tokens)?;
    let pred = module.head.predict(&h)?;
    Ok((pred.label, pred.probs, tokens.truncated))
}
