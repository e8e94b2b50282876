#![allow(dead_code)]

use std::path::Path;

use mtscore::adapters::{attach, merge, new_adapter, LoraAdapter, LoraConfig, TargetPatch};
use mtscore::backbone::{Backbone, BackboneConfig, TokenSeq, CLS, RESERVED_TOKENS};
use mtscore::heads::ClassificationHead;
use mtscore::numerics::{Matrix, Precision, Reduction, Rng};
use mtscore::orchestrator::TaskModule;
use mtscore::trainer::{objective, objective_gradients};

pub fn tiny_config(seed: u64) -> BackboneConfig {
    BackboneConfig {
        vocab_size: 40,
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        d_ff: 16,
        max_seq_len: 12,
        seed,
    }
}

pub fn frozen(config: BackboneConfig, precision: Precision) -> Backbone {
    Backbone::new(config, precision).unwrap().freeze()
}

/// Adapter with Gaussian `A` and `B`, so every patch has a nonzero delta.
pub fn random_adapter(
    task: &str,
    config: &BackboneConfig,
    lora: &LoraConfig,
    b_std: f64,
    rng: &mut Rng,
    precision: Precision,
) -> LoraAdapter {
    let base = new_adapter(task, config, lora, &rng.split("a"), precision).unwrap();
    let patches: Vec<TargetPatch> = base
        .patches()
        .iter()
        .map(|p| TargetPatch {
            b: Matrix::random_normal(p.b.rows(), p.b.cols(), b_std, rng, precision),
            ..p.clone()
        })
        .collect();
    LoraAdapter::from_patches(task, base.rank(), base.alpha(), patches).unwrap()
}

pub fn random_head(task: &str, c: usize, d: usize, rng: &mut Rng, precision: Precision) -> ClassificationHead {
    let weight = Matrix::random_normal(c, d, 0.5, rng, precision);
    let bias = Matrix::random_normal(1, c, 0.5, rng, precision);
    ClassificationHead::from_parts(task, weight, bias).unwrap()
}

pub fn random_tokens(config: &BackboneConfig, rng: &mut Rng) -> TokenSeq {
    let len = 1 + rng.below(config.max_seq_len - 1);
    let mut ids = vec![CLS];
    for _ in 0..len {
        ids.push(RESERVED_TOKENS + rng.below(config.vocab_size - RESERVED_TOKENS as usize) as u32);
    }
    TokenSeq { ids, truncated: false }
}

/// A module with a fresh adapter and a random head.
pub fn module_for(backbone: &Backbone, task: &str, c: usize, seed: u64) -> TaskModule {
    let rng = Rng::new(seed);
    let adapter = new_adapter(task, backbone.config(), &LoraConfig::default(), &rng, backbone.precision()).unwrap();
    let head = ClassificationHead::new(task, c, backbone.d_model(), &rng, backbone.precision()).unwrap();
    TaskModule::new(adapter, head, backbone.frozen_fingerprint().unwrap(), 0).unwrap()
}

/// Writes one module per id into `dir` and returns the manifest path.
pub fn write_modules(backbone: &Backbone, ids: &[String], dir: &Path) -> std::path::PathBuf {
    let mut manifest = serde_json::Map::new();
    for (i, id) in ids.iter().enumerate() {
        let file = format!("{id}.mttm");
        module_for(backbone, id, 2 + i % 5, i as u64).save(dir.join(&file)).unwrap();
        manifest.insert(id.clone(), file.into());
    }
    let path = dir.join("modules.json");
    std::fs::write(&path, serde_json::Value::Object(manifest).to_string()).unwrap();
    path
}

pub fn task_ids(n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("T{i:02}")).collect()
}

/// Reference LRU: front is least recently used.
pub struct ReferenceLru {
    capacity: usize,
    order: Vec<String>,
}

impl ReferenceLru {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            order: Vec::new(),
        }
    }

    /// Returns whether the access was a hit.
    pub fn access(&mut self, id: &str) -> bool {
        if let Some(i) = self.order.iter().position(|x| x == id) {
            let v = self.order.remove(i);
            self.order.push(v);
            return true;
        }
        if self.order.len() == self.capacity {
            self.order.remove(0);
        }
        self.order.push(id.to_string());
        false
    }

    pub fn loaded(&self) -> &[String] {
        &self.order
    }
}

/// Brute-force quadratic weighted kappa straight from the definition.
pub fn qwk_oracle(golds: &[usize], preds: &[usize], c: usize) -> f64 {
    let n = golds.len() as f64;
    let mut o = vec![vec![0.0; c]; c];
    for (&g, &p) in golds.iter().zip(preds) {
        o[g][p] += 1.0;
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..c {
        for j in 0..c {
            let w = ((i as f64 - j as f64) / (c as f64 - 1.0)).powi(2);
            let row: f64 = (0..c).map(|k| o[i][k]).sum();
            let col: f64 = (0..c).map(|k| o[k][j]).sum();
            num += w * o[i][j];
            den += w * row * col / n;
        }
    }
    if den == 0.0 {
        1.0
    } else {
        1.0 - num / den
    }
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Largest logit difference between the merged and unmerged paths over
/// `trials` random backbones, adapters, heads and inputs.
pub fn merged_vs_unmerged(precision: Precision, trials: usize) -> f64 {
    let mut rng = Rng::new(11);
    let mut worst: f64 = 0.0;
    for trial in 0..trials {
        let config = BackboneConfig {
            n_layers: 1 + trial % 2,
            ..tiny_config(trial as u64)
        };
        let backbone = frozen(config, precision);
        let lora = LoraConfig {
            rank: 1 + rng.below(4),
            ..Default::default()
        };
        let adapter = random_adapter("t", &config, &lora, 0.1, &mut rng, precision);
        let head = random_head("t", 2 + rng.below(5), config.d_model, &mut rng, precision);
        let merged = merge(&backbone, &adapter).unwrap();
        let tokens = random_tokens(&config, &mut rng);
        let unmerged_logits = head.forward(&attach(&backbone, &adapter).unwrap().encode(&tokens).unwrap()).unwrap();
        let merged_logits = head.forward(&merged.encode(&tokens).unwrap()).unwrap();
        worst = worst.max(max_diff(&unmerged_logits, &merged_logits));
    }
    worst
}

const FD_STEP: f64 = 1e-5;
const PROBES_PER_MATRIX: usize = 4;

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

fn nudged(m: &Matrix, i: usize, by: f64) -> Matrix {
    let mut out = m.clone();
    out.data_mut()[i] += by;
    out
}

/// Which parameter a probe perturbs.
#[derive(Clone, Copy, Debug)]
enum Target {
    A(usize),
    B(usize),
    Weight,
    Bias,
}

fn perturbed(adapter: &LoraAdapter, head: &ClassificationHead, t: Target, i: usize, by: f64) -> (LoraAdapter, ClassificationHead) {
    let mut patches = adapter.patches().to_vec();
    let mut head = head.clone();
    match t {
        Target::A(p) => patches[p].a = nudged(&patches[p].a, i, by),
        Target::B(p) => patches[p].b = nudged(&patches[p].b, i, by),
        Target::Weight => head.weight = nudged(&head.weight, i, by),
        Target::Bias => head.bias = nudged(&head.bias, i, by),
    }
    let adapter = LoraAdapter::from_patches(adapter.task_id.clone(), adapter.rank(), adapter.alpha(), patches).unwrap();
    (adapter, head)
}

/// Worst relative error between analytic and central-difference gradients
/// over one random small configuration.
pub fn gradcheck_worst(seed: u64) -> f64 {
    let mut rng = Rng::new(seed).split("gradcheck");
    let heads = 1 + rng.below(2);
    let config = BackboneConfig {
        vocab_size: 30,
        d_model: 4 * heads,
        n_layers: 1 + rng.below(2),
        n_heads: heads,
        d_ff: 8 + rng.below(9),
        max_seq_len: 8,
        seed,
    };
    let backbone = frozen(config, Precision::P64);
    let lora = LoraConfig {
        rank: 1 + rng.below(3),
        alpha: 1.0 + 15.0 * rng.uniform(),
        ..Default::default()
    };
    let adapter = random_adapter("g", &config, &lora, 0.3, &mut rng, Precision::P64);
    let c = 2 + rng.below(5);
    let head = random_head("g", c, config.d_model, &mut rng, Precision::P64);
    let batch = 1 + rng.below(3);
    let tokens: Vec<_> = (0..batch).map(|_| random_tokens(&config, &mut rng)).collect();
    let labels: Vec<usize> = (0..batch).map(|_| rng.below(c)).collect();
    let lambda = [0.0, 1e-4, 0.5][rng.below(3)];
    let reduction = if rng.below(2) == 0 { Reduction::Mean } else { Reduction::Sum };

    let grads = objective_gradients(&backbone, &adapter, &head, &tokens, &labels, lambda, reduction).unwrap();
    let loss = |a: &LoraAdapter, h: &ClassificationHead| objective(&backbone, a, h, &tokens, &labels, lambda, reduction).unwrap();
    assert!((grads.loss - loss(&adapter, &head)).abs() < 1e-12);

    let mut targets: Vec<(Target, &Matrix)> = vec![(Target::Weight, &grads.head_weight), (Target::Bias, &grads.head_bias)];
    for (p, (da, db)) in grads.adapter.iter().enumerate() {
        targets.push((Target::A(p), da));
        targets.push((Target::B(p), db));
    }
    let mut worst: f64 = 0.0;
    for (t, g) in targets {
        for _ in 0..PROBES_PER_MATRIX {
            let i = rng.below(g.len());
            let (ap, hp) = perturbed(&adapter, &head, t, i, FD_STEP);
            let (am, hm) = perturbed(&adapter, &head, t, i, -FD_STEP);
            let numeric = (loss(&ap, &hp) - loss(&am, &hm)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(g.as_slice()[i], numeric));
        }
    }
    worst
}
