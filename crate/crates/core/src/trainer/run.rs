use serde::{Deserialize, Serialize};

use crate::adapters::{new_adapter, LoraAdapter, LoraConfig};
use crate::backbone::{tokenize, Backbone, TokenSeq};
use crate::dataset::TaskDataset;
use crate::error::{Error, Result};
use crate::evalkit::qwk;
use crate::heads::{argmax, ClassificationHead};
use crate::numerics::{Matrix, Reduction, Rng, Tape, Var};
use crate::optim::{clip_global_norm, Adam, AdamConfig, WarmupSchedule};
use crate::orchestrator::TaskModule;
use crate::trainer::{EarlyStopping, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_qwk: f64,
}

/// What happened during one fine-tuning run. Serializes to TOML with the
/// per-epoch table last.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub task_id: String,
    pub backbone_fingerprint: String,
    pub train_size: usize,
    pub val_size: usize,
    pub planned_steps: usize,
    pub warmup_steps: usize,
    pub steps_taken: usize,
    pub stopped_epoch: usize,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    /// Learning rate used at each step.
    pub learning_rates: Vec<f64>,
    /// Global gradient norm at each step, before clipping.
    pub grad_norms: Vec<f64>,
    /// Global gradient norm at each step, after clipping.
    pub clipped_grad_norms: Vec<f64>,
    /// `‖ΔW‖_F` per patch for the returned parameters.
    pub delta_norms: Vec<f64>,
    pub epochs: Vec<EpochRecord>,
}

impl TrainReport {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("report is representable as TOML")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Malformed(e.to_string()))
    }

    /// `Σ ‖ΔW‖²_F` of the returned parameters.
    pub fn delta_sq_norm(&self) -> f64 {
        self.delta_norms.iter().map(|n| n * n).sum()
    }
}

/// Gradients of the fine-tuning objective, in patch order.
#[derive(Debug, Clone)]
pub struct ObjectiveGrads {
    pub loss: f64,
    /// `(dA, dB)` per patch.
    pub adapter: Vec<(Matrix, Matrix)>,
    pub head_weight: Matrix,
    pub head_bias: Matrix,
}

struct Recorded {
    total: Var,
    adapter_vars: Vec<Var>,
    head_vars: (Var, Var),
}

fn record_objective(
    tape: &mut Tape,
    backbone: &Backbone,
    adapter: &LoraAdapter,
    head: &ClassificationHead,
    tokens: &[&TokenSeq],
    labels: &[usize],
    lambda: f64,
    reduction: Reduction,
    trainable: bool,
) -> Result<Recorded> {
    let bound = backbone.bind(tape, false);
    let (lora, adapter_vars) = adapter.bind(tape, backbone.layers.len(), trainable);
    let head_vars = head.bind(tape, trainable);
    let mut rows = Vec::with_capacity(tokens.len());
    for t in tokens {
        rows.push(backbone.forward_cls(tape, &bound, &t.ids, Some(&lora))?);
    }
    let h = tape.concat_rows(&rows)?;
    let logits = head.record(tape, h, head_vars)?;
    let ce = tape.softmax_cross_entropy(logits, labels, reduction)?;
    let mut total = ce;
    if lambda > 0.0 {
        let scale = adapter.scale();
        let mut reg: Option<Var> = None;
        for pair in adapter_vars.chunks(2) {
            let ab = tape.matmul(pair[0], pair[1])?;
            let delta = tape.scale(ab, scale);
            let sq = tape.sum_squares(delta);
            reg = Some(match reg {
                Some(r) => tape.add(r, sq)?,
                None => sq,
            });
        }
        if let Some(r) = reg {
            let r = tape.scale(r, lambda);
            total = tape.add(ce, r)?;
        }
    }
    Ok(Recorded {
        total,
        adapter_vars,
        head_vars,
    })
}

fn check_batch(tokens: &[TokenSeq], labels: &[usize]) -> Result<()> {
    if tokens.is_empty() || tokens.len() != labels.len() {
        return Err(Error::contract(format!(
            "batch of {} sequences and {} labels",
            tokens.len(),
            labels.len()
        )));
    }
    Ok(())
}

/// Cross-entropy of the head over the adapted backbone plus
/// `λ · Σ ‖ΔW‖²_F`, for one batch.
pub fn objective(
    backbone: &Backbone,
    adapter: &LoraAdapter,
    head: &ClassificationHead,
    tokens: &[TokenSeq],
    labels: &[usize],
    lambda: f64,
    reduction: Reduction,
) -> Result<f64> {
    check_batch(tokens, labels)?;
    let mut tape = Tape::new();
    let refs: Vec<&TokenSeq> = tokens.iter().collect();
    let rec = record_objective(&mut tape, backbone, adapter, head, &refs, labels, lambda, reduction, false)?;
    Ok(tape.scalar(rec.total))
}

/// [`objective`] with its gradients for every adapter and head parameter.
pub fn objective_gradients(
    backbone: &Backbone,
    adapter: &LoraAdapter,
    head: &ClassificationHead,
    tokens: &[TokenSeq],
    labels: &[usize],
    lambda: f64,
    reduction: Reduction,
) -> Result<ObjectiveGrads> {
    check_batch(tokens, labels)?;
    let mut tape = Tape::new();
    let refs: Vec<&TokenSeq> = tokens.iter().collect();
    let rec = record_objective(&mut tape, backbone, adapter, head, &refs, labels, lambda, reduction, true)?;
    let grads = tape.backward(rec.total)?;
    let g = |v: Var| grads.get(v).expect("trainable leaf").clone();
    Ok(ObjectiveGrads {
        loss: tape.scalar(rec.total),
        adapter: rec.adapter_vars.chunks(2).map(|p| (g(p[0]), g(p[1]))).collect(),
        head_weight: g(rec.head_vars.0),
        head_bias: g(rec.head_vars.1),
    })
}

const EVAL_CHUNK: usize = 64;

/// Mean validation cross-entropy and predicted labels.
fn validate(
    backbone: &Backbone,
    adapter: &LoraAdapter,
    head: &ClassificationHead,
    tokens: &[TokenSeq],
    labels: &[usize],
) -> Result<(f64, Vec<usize>)> {
    let mut total = 0.0;
    let mut preds = Vec::with_capacity(tokens.len());
    for (tc, lc) in tokens.chunks(EVAL_CHUNK).zip(labels.chunks(EVAL_CHUNK)) {
        let mut tape = Tape::new();
        let refs: Vec<&TokenSeq> = tc.iter().collect();
        let bound = backbone.bind(&mut tape, false);
        let (lora, _) = adapter.bind(&mut tape, backbone.layers.len(), false);
        let hv = head.bind(&mut tape, false);
        let mut rows = Vec::with_capacity(refs.len());
        for t in &refs {
            rows.push(backbone.forward_cls(&mut tape, &bound, &t.ids, Some(&lora))?);
        }
        let h = tape.concat_rows(&rows)?;
        let logits = head.record(&mut tape, h, hv)?;
        let ce = tape.softmax_cross_entropy(logits, lc, Reduction::Sum)?;
        total += tape.scalar(ce);
        let z = tape.value(logits);
        preds.extend((0..z.rows()).map(|r| argmax(z.row(r))));
    }
    Ok((total / tokens.len() as f64, preds))
}

/// Fine-tunes a fresh adapter and head for `train`'s task, keeping the
/// parameters of the epoch with the lowest validation loss.
///
/// Only the adapter and head are optimized; the backbone must be frozen and
/// is never written to.
pub fn train_task(
    backbone: &Backbone,
    train: &TaskDataset,
    val: &TaskDataset,
    config: &TrainConfig,
    lora: &LoraConfig,
) -> Result<(TaskModule, TrainReport)> {
    let Some(fingerprint) = backbone.frozen_fingerprint().map(str::to_string) else {
        return Err(Error::FrozenViolation("fine-tuning requires a frozen backbone".into()));
    };
    config.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::contract("empty train or validation split"));
    }
    if train.task_id != val.task_id || train.num_classes != val.num_classes {
        return Err(Error::contract("train and validation splits belong to different tasks"));
    }
    let task_id = train.task_id.as_str();
    let precision = backbone.precision();
    let cfg = backbone.config();

    let root = Rng::new(config.seed).split(&format!("train/{task_id}"));
    let mut adapter = new_adapter(task_id, cfg, lora, &root, precision)?;
    let mut head = ClassificationHead::new(task_id, train.num_classes, cfg.d_model, &root, precision)?;

    let train_tokens: Vec<TokenSeq> = train.examples.iter().map(|e| tokenize(&e.text, cfg)).collect();
    let train_labels = train.labels();
    let val_tokens: Vec<TokenSeq> = val.examples.iter().map(|e| tokenize(&e.text, cfg)).collect();
    let val_labels = val.labels();

    let steps_per_epoch = train.len().div_ceil(config.batch_size);
    let planned_steps = steps_per_epoch * config.max_epochs;
    let schedule = WarmupSchedule::new(config.learning_rate, planned_steps, config.warmup_fraction);
    let mut adam = Adam::new(AdamConfig::default());
    let mut stopper = EarlyStopping::new(config.patience);

    let mut report = TrainReport {
        task_id: task_id.to_string(),
        backbone_fingerprint: fingerprint.clone(),
        train_size: train.len(),
        val_size: val.len(),
        planned_steps,
        warmup_steps: schedule.warmup_steps,
        steps_taken: 0,
        stopped_epoch: 0,
        best_epoch: 0,
        best_val_loss: f64::INFINITY,
        learning_rates: Vec::with_capacity(planned_steps),
        grad_norms: Vec::with_capacity(planned_steps),
        clipped_grad_norms: Vec::with_capacity(planned_steps),
        delta_norms: Vec::new(),
        epochs: Vec::new(),
    };
    let mut best = (adapter.clone(), head.clone());
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=config.max_epochs {
        root.split(&format!("epoch{epoch}")).shuffle(&mut order);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let tokens: Vec<&TokenSeq> = chunk.iter().map(|&i| &train_tokens[i]).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| train_labels[i]).collect();
            let mut tape = Tape::new();
            let rec = record_objective(
                &mut tape,
                backbone,
                &adapter,
                &head,
                &tokens,
                &labels,
                config.lambda,
                config.reduction,
                true,
            )?;
            loss_sum += tape.scalar(rec.total);
            let mut grads = tape.backward(rec.total)?;
            report.grad_norms.push(clip_global_norm(&mut grads, config.clip_norm));
            report.clipped_grad_norms.push(grads.global_norm());

            report.steps_taken += 1;
            let lr = schedule.rate(report.steps_taken);
            report.learning_rates.push(lr);

            let mut vars = rec.adapter_vars.clone();
            vars.extend([rec.head_vars.0, rec.head_vars.1]);
            let grad_list: Vec<&Matrix> = vars.iter().map(|v| grads.get(*v).expect("trainable leaf")).collect();
            let mut params: Vec<&mut Matrix> = Vec::with_capacity(vars.len());
            for p in adapter.patches_mut() {
                params.push(&mut p.a);
                params.push(&mut p.b);
            }
            params.push(&mut head.weight);
            params.push(&mut head.bias);
            adam.update(&mut params, &grad_list, lr);
        }

        let (val_loss, preds) = validate(backbone, &adapter, &head, &val_tokens, &val_labels)?;
        let val_qwk = qwk(&val_labels, &preds, train.num_classes)?;
        report.epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / steps_per_epoch as f64,
            val_loss,
            val_qwk,
        });
        report.stopped_epoch = epoch;
        let (improved, stop) = stopper.observe(val_loss);
        if improved {
            best = (adapter.clone(), head.clone());
        }
        if stop {
            break;
        }
    }

    let (adapter, head) = best;
    report.best_epoch = stopper.best_epoch();
    report.best_val_loss = stopper.best_loss();
    report.delta_norms = (0..adapter.patches().len())
        .map(|i| adapter.delta(i).map(|d| d.frobenius_norm()))
        .collect::<Result<_>>()?;
    debug_assert_eq!(backbone.fingerprint(), fingerprint);
    let module = TaskModule::new(adapter, head, &fingerprint, 0)?;
    Ok((module, report))
}
