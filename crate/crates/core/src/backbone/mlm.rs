//! Masked-language-model pretraining.

use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, TokenSeq, MASK, RESERVED_TOKENS};
use crate::error::{Error, Result};
use crate::numerics::{Reduction, Rng, Tape, Var};
use crate::optim::{clip_global_norm, Adam, AdamConfig, WarmupSchedule};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MlmConfig {
    pub mask_fraction: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_fraction: f64,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for MlmConfig {
    fn default() -> Self {
        Self {
            mask_fraction: 0.15,
            learning_rate: 5e-5,
            batch_size: 32,
            epochs: 10,
            warmup_fraction: 0.10,
            clip_norm: 1.0,
            seed: 0,
        }
    }
}

/// Number of positions to mask among `maskable` candidates: 15% rounded to
/// the nearest integer, at least one.
pub fn mask_count(maskable: usize, fraction: f64) -> usize {
    if maskable == 0 {
        return 0;
    }
    ((fraction * maskable as f64).round() as usize).clamp(1, maskable)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedSeq {
    pub ids: Vec<u32>,
    pub positions: Vec<usize>,
    pub targets: Vec<u32>,
}

/// Replaces a random subset of the non-reserved positions with [`MASK`].
pub fn mask_sequence(seq: &TokenSeq, fraction: f64, rng: &mut Rng) -> MaskedSeq {
    let mut candidates: Vec<usize> = seq
        .ids
        .iter()
        .enumerate()
        .filter(|(_, &id)| id >= RESERVED_TOKENS)
        .map(|(i, _)| i)
        .collect();
    let n = mask_count(candidates.len(), fraction);
    rng.shuffle(&mut candidates);
    let mut positions = candidates[..n].to_vec();
    positions.sort_unstable();
    let mut ids = seq.ids.clone();
    let targets = positions.iter().map(|&p| std::mem::replace(&mut ids[p], MASK)).collect();
    MaskedSeq {
        ids,
        positions,
        targets,
    }
}

fn record_loss(
    backbone: &Backbone,
    tape: &mut Tape,
    batch: &[TokenSeq],
    fraction: f64,
    rng: &mut Rng,
    trainable: bool,
) -> Result<(Var, Vec<Var>)> {
    let bound = backbone.bind(tape, trainable);
    let mut gathered = Vec::new();
    let mut targets = Vec::new();
    for seq in batch {
        let masked = mask_sequence(seq, fraction, rng);
        if masked.positions.is_empty() {
            continue;
        }
        let hidden = backbone.forward_hidden(tape, &bound, &masked.ids, None)?;
        gathered.push(tape.gather_rows(hidden, &masked.positions)?);
        targets.extend(masked.targets.iter().map(|&t| t as usize));
    }
    if gathered.is_empty() {
        return Err(Error::contract("batch has no maskable tokens"));
    }
    let rows = tape.concat_rows(&gathered)?;
    let logits = tape.matmul(rows, bound.mlm_head)?;
    let loss = tape.softmax_cross_entropy(logits, &targets, Reduction::Mean)?;
    Ok((loss, bound.vars()))
}

/// Mean masked-token cross-entropy for one batch without updating anything.
pub fn mlm_loss(backbone: &Backbone, batch: &[TokenSeq], rng: &mut Rng) -> Result<f64> {
    let mut tape = Tape::new();
    let (loss, _) = record_loss(backbone, &mut tape, batch, MlmConfig::default().mask_fraction, rng, false)?;
    Ok(tape.scalar(loss))
}

/// Optimizer state for MLM pretraining.
pub struct MlmTrainer {
    config: MlmConfig,
    adam: Adam,
    schedule: WarmupSchedule,
    step: usize,
}

impl MlmTrainer {
    /// `total_steps` sizes the warmup window.
    pub fn new(config: MlmConfig, total_steps: usize) -> Self {
        Self {
            config,
            adam: Adam::new(AdamConfig::default()),
            schedule: WarmupSchedule::new(config.learning_rate, total_steps, config.warmup_fraction),
            step: 0,
        }
    }

    /// One masked-LM update; returns the batch loss before the update.
    pub fn step(&mut self, backbone: &mut Backbone, batch: &[TokenSeq], rng: &mut Rng) -> Result<f64> {
        if backbone.is_frozen() {
            return Err(Error::FrozenViolation("mlm_step on a frozen backbone".into()));
        }
        let mut tape = Tape::new();
        let (loss, vars) = record_loss(backbone, &mut tape, batch, self.config.mask_fraction, rng, true)?;
        let mut grads = tape.backward(loss)?;
        clip_global_norm(&mut grads, self.config.clip_norm);
        self.step += 1;
        let lr = self.schedule.rate(self.step);
        let grad_list: Vec<_> = vars.iter().map(|v| grads.get(*v).expect("leaf gradient")).collect();
        let mut params = backbone.params_mut()?;
        self.adam.update(&mut params, &grad_list, lr);
        Ok(tape.scalar(loss))
    }
}

/// Runs `config.epochs` passes over `corpus`; returns the mean loss per epoch.
pub fn pretrain(backbone: &mut Backbone, corpus: &[TokenSeq], config: MlmConfig) -> Result<Vec<f64>> {
    if corpus.is_empty() {
        return Err(Error::contract("empty pretraining corpus"));
    }
    let batch_size = config.batch_size.max(1);
    let steps_per_epoch = corpus.len().div_ceil(batch_size);
    let mut trainer = MlmTrainer::new(config, steps_per_epoch * config.epochs);
    let root = Rng::new(config.seed).split("mlm");
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        root.split(&format!("order{epoch}")).shuffle(&mut order);
        let mut mask_rng = root.split(&format!("mask{epoch}"));
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(batch_size) {
            let batch: Vec<TokenSeq> = chunk.iter().map(|&i| corpus[i].clone()).collect();
            match trainer.step(backbone, &batch, &mut mask_rng) {
                Ok(loss) => {
                    total += loss;
                    batches += 1;
                }
                Err(Error::Contract(_)) => continue,
                Err(e) => return Err(e),
            }
        }
        history.push(if batches > 0 { total / batches as f64 } else { 0.0 });
    }
    Ok(history)
}
