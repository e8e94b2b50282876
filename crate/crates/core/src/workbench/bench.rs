//! Framework-versus-baseline efficiency measurement.
//!
//! The framework keeps one backbone resident and switches tasks by loading a
//! task module file. The baseline stands for one fully fine-tuned model per
//! task: each switch reloads a complete backbone checkpoint plus the task's
//! head. Byte totals come from parameter shapes, latencies from wall-clock
//! timing of the two load paths.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::adapters::attach;
use crate::backbone::Backbone;
use crate::error::{Error, Result};
use crate::orchestrator::{Registry, TaskModule};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    /// Registry capacity for the workload replay.
    pub capacity: usize,
    /// Timed task switches per path.
    pub switches: usize,
    /// Untimed switches run first on each path.
    pub warmup: usize,
    /// Threads used to replay the workload.
    pub threads: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            capacity: 4,
            switches: 100,
            warmup: 10,
            threads: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencySummary {
    pub samples: usize,
    pub median_us: f64,
    pub p95_us: f64,
}

impl LatencySummary {
    pub fn from_samples(samples: &[f64]) -> Self {
        let mut s = samples.to_vec();
        s.sort_by(f64::total_cmp);
        let n = s.len();
        if n == 0 {
            return Self {
                samples: 0,
                median_us: 0.0,
                p95_us: 0.0,
            };
        }
        let median = if n % 2 == 1 {
            s[n / 2]
        } else {
            (s[n / 2 - 1] + s[n / 2]) / 2.0
        };
        let rank = ((0.95 * n as f64).ceil() as usize).clamp(1, n);
        Self {
            samples: n,
            median_us: median,
            p95_us: s[rank - 1],
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplaySummary {
    pub requests: u64,
    pub responses: u64,
    pub hits: u64,
    pub misses: u64,
    pub loads: u64,
    pub evictions: u64,
}

/// Serialized keys keep this field order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub tasks: usize,
    pub precision_bits: u32,
    /// Encoder parameters used for scoring, in bytes.
    pub backbone_param_bytes: usize,
    pub module_bytes: Vec<usize>,
    /// Backbone plus the largest head: one fully fine-tuned model.
    pub full_model_bytes: usize,
    pub max_module_fraction: f64,
    /// One full model per task.
    pub baseline_total_bytes: usize,
    /// One backbone plus every task module.
    pub framework_total_bytes: usize,
    pub memory_reduction_fraction: f64,
    pub capacity: usize,
    pub framework_switch: LatencySummary,
    pub baseline_switch: LatencySummary,
    /// Framework median over baseline median.
    pub latency_ratio: f64,
    pub latency_reduction_fraction: f64,
    pub replay: ReplaySummary,
}

impl BenchReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain struct serializes")
    }
}

/// One task's artifacts for the benchmark.
#[derive(Debug, Clone)]
pub struct BenchTask {
    pub task_id: String,
    pub module_path: PathBuf,
    /// Full checkpoint standing in for this task's fine-tuned model.
    pub baseline_path: PathBuf,
}

/// Writes one full backbone checkpoint per task into `dir`. The copies are
/// marked unfrozen, as a fully fine-tuned model would be.
pub fn write_baseline_copies(backbone: &Backbone, task_ids: &[String], dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut copy = backbone.clone();
    copy.frozen_fingerprint = None;
    let bytes = copy.to_bytes();
    task_ids
        .iter()
        .map(|id| {
            let p = dir.join(format!("{id}.full.mtbb"));
            std::fs::write(&p, &bytes)?;
            Ok(p)
        })
        .collect()
}

fn bench_err(task: &str, reason: impl std::fmt::Display) -> Error {
    Error::Bench {
        task: task.to_string(),
        reason: reason.to_string(),
    }
}

/// Measures memory structure, switch latency on both load paths, and replays
/// `workload` (pairs of task id and text) through a fresh registry.
pub fn run_benchmark(
    backbone: &Backbone,
    tasks: &[BenchTask],
    workload: &[(String, String)],
    config: &BenchConfig,
) -> Result<BenchReport> {
    if tasks.is_empty() {
        return Err(Error::contract("benchmark needs at least one task"));
    }
    if config.switches < 1 || config.threads < 1 {
        return Err(Error::contract("switches and threads must be positive"));
    }
    let precision = backbone.precision();
    let mut modules = Vec::with_capacity(tasks.len());
    for t in tasks {
        for p in [&t.module_path, &t.baseline_path] {
            if !p.exists() {
                return Err(bench_err(&t.task_id, format!("missing file {}", p.display())));
            }
        }
        let m = TaskModule::load(&t.module_path).map_err(|e| bench_err(&t.task_id, e))?;
        modules.push(m);
    }

    let backbone_param_bytes = backbone.encoder_bytes();
    let module_bytes: Vec<usize> = modules.iter().map(|m| m.param_bytes(precision)).collect();
    let head_bytes: Vec<usize> = modules
        .iter()
        .map(|m| m.head.param_count() * precision.scalar_bytes())
        .collect();
    let full_model_bytes = backbone_param_bytes + head_bytes.iter().max().copied().unwrap_or(0);
    let baseline_total_bytes: usize = head_bytes.iter().map(|h| backbone_param_bytes + h).sum();
    let framework_total_bytes = backbone_param_bytes + module_bytes.iter().sum::<usize>();
    let max_module = module_bytes.iter().max().copied().unwrap_or(0);

    let framework = time_switches(tasks, config, |t| {
        let m = TaskModule::load(&t.module_path)?.to_precision(precision);
        attach(backbone, &m.adapter)?;
        Ok(())
    })?;
    let baseline = time_switches(tasks, config, |t| {
        let full = Backbone::load(&t.baseline_path)?;
        let head = TaskModule::load(&t.module_path)?.head.to_precision(full.precision());
        std::hint::black_box((&full, &head));
        Ok(())
    })?;

    let replay = replay(backbone, tasks, workload, config)?;
    let framework_switch = LatencySummary::from_samples(&framework);
    let baseline_switch = LatencySummary::from_samples(&baseline);
    let latency_ratio = framework_switch.median_us / baseline_switch.median_us;
    Ok(BenchReport {
        tasks: tasks.len(),
        precision_bits: precision.bits(),
        backbone_param_bytes,
        module_bytes,
        full_model_bytes,
        max_module_fraction: max_module as f64 / full_model_bytes as f64,
        baseline_total_bytes,
        framework_total_bytes,
        memory_reduction_fraction: 1.0 - framework_total_bytes as f64 / baseline_total_bytes as f64,
        capacity: config.capacity,
        framework_switch,
        baseline_switch,
        latency_ratio,
        latency_reduction_fraction: (1.0 - latency_ratio).max(0.0),
        replay,
    })
}

/// Cycles through the tasks so that every timed call is a real switch.
fn time_switches(
    tasks: &[BenchTask],
    config: &BenchConfig,
    mut switch: impl FnMut(&BenchTask) -> Result<()>,
) -> Result<Vec<f64>> {
    let mut samples = Vec::with_capacity(config.switches);
    for i in 0..config.warmup + config.switches {
        let t = &tasks[i % tasks.len()];
        let started = Instant::now();
        switch(t).map_err(|e| bench_err(&t.task_id, e))?;
        let us = started.elapsed().as_secs_f64() * 1e6;
        if i >= config.warmup {
            samples.push(us);
        }
    }
    Ok(samples)
}

fn replay(
    backbone: &Backbone,
    tasks: &[BenchTask],
    workload: &[(String, String)],
    config: &BenchConfig,
) -> Result<ReplaySummary> {
    let registry = Registry::new(config.capacity, backbone.precision())?;
    for t in tasks {
        registry
            .register(&t.task_id, &t.module_path)
            .map_err(|e| bench_err(&t.task_id, e))?;
    }
    let next = AtomicUsize::new(0);
    let responses = AtomicUsize::new(0);
    let first_error = std::sync::Mutex::new(None);
    std::thread::scope(|s| {
        for _ in 0..config.threads {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some((task, text)) = workload.get(i) else { break };
                match registry.score(backbone, task, text) {
                    Ok(_) => {
                        responses.fetch_add(1, Ordering::Relaxed);
                    }
                    Err(e) => {
                        first_error
                            .lock()
                            .unwrap_or_else(|p| p.into_inner())
                            .get_or_insert_with(|| bench_err(task, e));
                        break;
                    }
                }
            });
        }
    });
    if let Some(e) = first_error.into_inner().unwrap_or_else(|p| p.into_inner()) {
        return Err(e);
    }
    let stats = registry.stats();
    Ok(ReplaySummary {
        requests: workload.len() as u64,
        responses: responses.into_inner() as u64,
        hits: stats.hits,
        misses: stats.misses,
        loads: stats.loads,
        evictions: stats.evictions,
    })
}
