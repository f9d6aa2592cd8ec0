//! Two-stage training: caption warm-up, then joint fine-tuning with the
//! hypergraph branch.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{BatchMode, ModelParams, ParamGroup};
use super::{SalmError, VideoExample};
use crate::hypergraph::DEFAULT_K;
use crate::par::Execution;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda: f64,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub stage1_lr: f64,
    pub stage2_lr: f64,
    pub weight_decay: f64,
    /// Fraction of steps spent ramping the learning rate up linearly.
    pub warmup_fraction: f64,
    pub batch_size: usize,
    pub freeze_qformer: bool,
    pub k_list: Vec<usize>,
    pub seed: u64,
    pub execution: Execution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 0.1,
            stage1_epochs: 10,
            stage2_epochs: 20,
            stage1_lr: 1e-4,
            stage2_lr: 2e-5,
            weight_decay: 0.02,
            warmup_fraction: 0.0,
            batch_size: 8,
            freeze_qformer: false,
            k_list: DEFAULT_K.to_vec(),
            seed: 0,
            execution: Execution::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), SalmError> {
        let bad = |m: &str| Err(SalmError::InvalidConfig(m.into()));
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return bad("lambda must be finite and non-negative");
        }
        if self.stage1_epochs == 0 || self.stage2_epochs == 0 {
            return bad("epoch counts must be at least 1");
        }
        if ![self.stage1_lr, self.stage2_lr, self.weight_decay].iter().all(|v| v.is_finite() && *v >= 0.0) {
            return bad("learning rates and weight decay must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return bad("warmup_fraction must be in [0, 1)");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.k_list.is_empty() || self.k_list.contains(&0) {
            return bad("k_list entries must be positive");
        }
        Ok(())
    }
}

/// Cosine decay with linear warm-up over `total` steps: the rate reaches
/// `peak` at the end of warm-up and 0 at the final step.
pub fn cosine_lr(step: usize, total: usize, peak: f64, warmup_fraction: f64) -> f64 {
    if total <= 1 {
        return peak;
    }
    let warmup = (warmup_fraction * total as f64).ceil() as usize;
    let warmup = warmup.min(total - 1);
    if step < warmup {
        return peak * step as f64 / warmup as f64;
    }
    let span = (total - 1 - warmup) as f64;
    if span == 0.0 {
        return peak;
    }
    let progress = ((step - warmup) as f64 / span).min(1.0);
    peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Gradient step with decoupled weight decay on non-bias tensors of the
/// selected groups.
pub fn sgd_step(params: &mut ModelParams, grad: &ModelParams, groups: &[ParamGroup], lr: f64, weight_decay: f64) {
    for ((group, name, p), (_, _, g)) in params.tensors_mut().into_iter().zip(grad.tensors()) {
        if !groups.contains(&group) {
            continue;
        }
        let decay = if name.ends_with("bias") { 0.0 } else { lr * weight_decay };
        p.zip_mut_with(g, |w, &d| *w -= lr * d + decay * *w);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1Report {
    /// Mean ITG loss over the epoch's batches, before each update.
    pub epoch_loss: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage2Report {
    pub epoch_loss: Vec<f64>,
    pub epoch_itg: Vec<f64>,
    pub epoch_ce: Vec<f64>,
    /// Held-out accuracy per indicator after each epoch, when a held-out set
    /// was given.
    pub heldout_accuracy: Vec<[f64; 3]>,
}

fn batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size).map(|c| c.to_vec()).collect()
}

/// Maps failures caused by non-finite values to a divergence report.
fn diverged<T>(r: Result<T, SalmError>, stage: u8, epoch: usize) -> Result<T, SalmError> {
    use crate::hypergraph::HypergraphError;
    match r {
        Err(SalmError::NonFinite) | Err(SalmError::Hypergraph(HypergraphError::NonFiniteFeatures)) => {
            Err(SalmError::DivergenceDetected { stage, epoch })
        }
        other => other,
    }
}

fn check_data(data: &[VideoExample]) -> Result<(), SalmError> {
    if data.is_empty() {
        return Err(SalmError::InvalidConfig("training set is empty".into()));
    }
    Ok(())
}

/// Mean ITG loss over `data` without updating anything.
pub fn mean_itg(params: &ModelParams, data: &[VideoExample], exec: Execution) -> Result<f64, SalmError> {
    let batch: Vec<&VideoExample> = data.iter().collect();
    let mode = BatchMode { lambda: 0.0, hl_gate: false, k_list: &DEFAULT_K, fixed_propagation: None, exec };
    Ok(params.loss_and_grad(&batch, &mode)?.0.itg)
}

/// Warm-up: ITG only, hypergraph branch off. Only the query bank, attention
/// maps, projector and language model move.
pub fn train_stage1(
    params: &ModelParams,
    data: &[VideoExample],
    cfg: &TrainConfig,
    epochs: usize,
) -> Result<(ModelParams, Stage1Report), SalmError> {
    cfg.validate()?;
    let mut params = params.clone();
    let mut report = Stage1Report { epoch_loss: Vec::with_capacity(epochs) };
    if epochs == 0 {
        return Ok((params, report));
    }
    check_data(data)?;
    let groups = [ParamGroup::QFormer, ParamGroup::Projector, ParamGroup::Lm];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5374_6167_6531);
    let per_epoch = data.len().div_ceil(cfg.batch_size);
    let total = epochs * per_epoch;
    let mode = BatchMode { lambda: 0.0, hl_gate: false, k_list: &cfg.k_list, fixed_propagation: None, exec: cfg.execution };
    let mut step = 0;
    for epoch in 0..epochs {
        let mut sum = 0.0;
        let plan = batches(data.len(), cfg.batch_size, &mut rng);
        for idx in &plan {
            let batch: Vec<&VideoExample> = idx.iter().map(|&i| &data[i]).collect();
            let (parts, grad) = diverged(params.loss_and_grad(&batch, &mode), 1, epoch)?;
            if !parts.total.is_finite() || !grad.all_finite() {
                return Err(SalmError::DivergenceDetected { stage: 1, epoch });
            }
            sum += parts.itg * batch.len() as f64;
            sgd_step(&mut params, &grad, &groups, cosine_lr(step, total, cfg.stage1_lr, cfg.warmup_fraction), cfg.weight_decay);
            step += 1;
        }
        report.epoch_loss.push(sum / data.len() as f64);
        if !params.all_finite() {
            return Err(SalmError::DivergenceDetected { stage: 1, epoch });
        }
    }
    Ok((params, report))
}

/// Fine-tuning with `L = ITG + λ·CE`; the hypergraph is rebuilt from each
/// batch's current frame features.
pub fn train_stage2(
    params: &ModelParams,
    data: &[VideoExample],
    heldout: Option<&[VideoExample]>,
    cfg: &TrainConfig,
    epochs: usize,
) -> Result<(ModelParams, Stage2Report), SalmError> {
    cfg.validate()?;
    let mut params = params.clone();
    let mut report = Stage2Report { epoch_loss: vec![], epoch_itg: vec![], epoch_ce: vec![], heldout_accuracy: vec![] };
    if epochs == 0 {
        return Ok((params, report));
    }
    check_data(data)?;
    let groups: Vec<ParamGroup> =
        ParamGroup::ALL.into_iter().filter(|g| !(cfg.freeze_qformer && *g == ParamGroup::QFormer)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5374_6167_6532);
    let per_epoch = data.len().div_ceil(cfg.batch_size);
    let total = epochs * per_epoch;
    let mode = BatchMode { lambda: cfg.lambda, hl_gate: true, k_list: &cfg.k_list, fixed_propagation: None, exec: cfg.execution };
    let mut step = 0;
    for epoch in 0..epochs {
        let (mut sum, mut itg, mut ce) = (0.0, 0.0, 0.0);
        for idx in batches(data.len(), cfg.batch_size, &mut rng) {
            let batch: Vec<&VideoExample> = idx.iter().map(|&i| &data[i]).collect();
            let (parts, grad) = diverged(params.loss_and_grad(&batch, &mode), 2, epoch)?;
            if !parts.total.is_finite() || !grad.all_finite() {
                return Err(SalmError::DivergenceDetected { stage: 2, epoch });
            }
            let w = batch.len() as f64;
            sum += parts.total * w;
            itg += parts.itg * w;
            ce += parts.ce.unwrap_or(0.0) * w;
            sgd_step(&mut params, &grad, &groups, cosine_lr(step, total, cfg.stage2_lr, cfg.warmup_fraction), cfg.weight_decay);
            step += 1;
        }
        let n = data.len() as f64;
        report.epoch_loss.push(sum / n);
        report.epoch_itg.push(itg / n);
        report.epoch_ce.push(ce / n);
        if !params.all_finite() {
            return Err(SalmError::DivergenceDetected { stage: 2, epoch });
        }
        if let Some(test) = heldout {
            let refs: Vec<&VideoExample> = test.iter().collect();
            let preds = params.predict(&refs, &cfg.k_list, cfg.execution)?;
            let mut acc = [0.0; 3];
            for (h, a) in acc.iter_mut().enumerate() {
                let hits = preds.iter().zip(test).filter(|(p, e)| p[h] == e.labels[h]).count();
                *a = hits as f64 / test.len() as f64;
            }
            report.heldout_accuracy.push(acc);
        }
    }
    Ok((params, report))
}
