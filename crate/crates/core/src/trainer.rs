//! Training loops for next-item (causal) and cloze (bidirectional) models.

use std::collections::BTreeMap;
use std::time::Instant;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::{pad_and_batch, Batch, ContrastiveTarget, HoldoutSplit, TrainExample, MSK, PAD};
use crate::error::{Error, Result};
use crate::eval::{evaluate_params, EvalConfig, Split};
use crate::model::{init_params, ForwardPass, ModelConfig, ModelParams};
use crate::objectives::{aggregate_loss, info_nce_grad, sampled_softmax_nll_grad, ContextMode, LossWeights};
use crate::seed::{self, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Unidirectional,
    Bidirectional,
}

impl TrainMode {
    pub fn causal(self) -> bool {
        self == TrainMode::Unidirectional
    }
}

impl std::fmt::Display for TrainMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TrainMode::Unidirectional => "unidirectional",
            TrainMode::Bidirectional => "bidirectional",
        })
    }
}

impl std::str::FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unidirectional" | "uni" => Ok(TrainMode::Unidirectional),
            "bidirectional" | "bi" => Ok(TrainMode::Bidirectional),
            other => Err(Error::Config(format!("unknown training mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub mask_prob: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    /// Sampled-softmax negatives per row.
    pub num_negatives: usize,
    /// Global gradient-norm cap; off when absent.
    pub clip_norm: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Unidirectional,
            mask_prob: 0.2,
            lr: 0.005,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 128,
            max_epochs: 50,
            patience: 3,
            num_negatives: 1000,
            clip_norm: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mask_prob > 0.0 && self.mask_prob < 1.0) {
            return Err(Error::Config("mask_prob must lie in (0, 1)".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("lr must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::Config("invalid Adam constants".into()));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config("batch_size and max_epochs must be positive".into()));
        }
        if matches!(self.clip_norm, Some(c) if !(c > 0.0)) {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        Ok(())
    }
}

/// One row ready for a gradient step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRow {
    /// Model input, possibly containing MSK.
    pub input: Vec<u32>,
    /// `(position, target)` pairs supervised by the sampled softmax.
    pub nll: Vec<(usize, u32)>,
    pub negatives: Vec<u32>,
    pub contrastive: Vec<ContrastiveTarget>,
}

/// Next-item supervision: position `i` predicts the token at `i + 1`.
/// Rows without any supervised position are dropped.
pub fn make_unidirectional_targets(batch: &Batch) -> Vec<StepRow> {
    (0..batch.rows())
        .filter_map(|b| {
            let n = batch.lengths[b];
            let nll: Vec<(usize, u32)> = (0..n.saturating_sub(1))
                .filter_map(|i| {
                    let t = batch.nll_targets[[b, i]];
                    (t != PAD).then_some((i, t))
                })
                .collect();
            if nll.is_empty() {
                return None;
            }
            Some(StepRow {
                input: batch.row_tokens(b),
                nll,
                negatives: batch.sampled_negatives[b].clone(),
                contrastive: batch.contrastive[b].clone(),
            })
        })
        .collect()
}

/// Cloze inputs. The row's last token becomes the appended MSK target and
/// is withheld from the input; every earlier position is masked
/// independently with probability `p`.
pub fn apply_cloze_masking<R: rand::Rng + ?Sized>(batch: &Batch, p: f64, rng: &mut R) -> Vec<StepRow> {
    (0..batch.rows())
        .filter(|&b| batch.lengths[b] > 0)
        .map(|b| {
            let tokens = batch.row_tokens(b);
            let last = tokens.len() - 1;
            let mut input = tokens.clone();
            let mut nll = Vec::new();
            for i in 0..last {
                if rng.gen::<f64>() < p {
                    input[i] = MSK;
                    nll.push((i, tokens[i]));
                }
            }
            input[last] = MSK;
            nll.push((last, tokens[last]));
            StepRow {
                input,
                nll,
                negatives: batch.sampled_negatives[b].clone(),
                contrastive: batch.contrastive[b].clone(),
            }
        })
        .collect()
}

/// Loss and gradients of one step.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub loss: f64,
    pub nll: f64,
    /// Absent when no contrastive instance was evaluated.
    pub nce: Option<f64>,
    pub grads: ModelParams,
    pub nll_positions: usize,
    pub instances: usize,
    /// Contrastive instances dropped for a zero-norm vector.
    pub degenerate: usize,
}

/// Forward and backward pass over `rows`. `L_NLL` is the mean over
/// supervised positions, `L_NCE` the mean over contrastive instances.
pub fn compute_step(
    params: &ModelParams,
    rows: &[StepRow],
    weights: &LossWeights,
    context: ContextMode,
    dropout: Option<&mut Rng>,
) -> Result<StepOutput> {
    let inputs: Vec<Vec<u32>> = rows.iter().map(|r| r.input.clone()).collect();
    let pass = ForwardPass::run(params, &inputs, dropout)?;
    let mut d_pred = Array2::<f64>::zeros(pass.predicted.dim());
    let mut grads = params.zeros_like();
    let emb = &params.item_emb;

    let positions: usize = rows.iter().map(|r| r.nll.len()).sum();
    let mut nll_sum = 0.0;
    let scale = if positions > 0 { weights.beta / positions as f64 } else { 0.0 };
    for (r, row) in rows.iter().enumerate() {
        if row.nll.is_empty() {
            continue;
        }
        let flats: Vec<usize> = row.nll.iter().map(|&(i, _)| pass.packed.flat_index(r, i)).collect();
        let idx: Vec<usize> = row.negatives.iter().map(|&t| t as usize).collect();
        let cands = emb.select(Axis(0), &idx);
        let pred = pass.predicted.select(Axis(0), &flats);
        let neg_logits = pred.dot(&cands.t());
        let mut g_neg = Array2::<f64>::zeros(neg_logits.dim());
        for (j, &(_, target)) in row.nll.iter().enumerate() {
            let e_t = emb.row(target as usize);
            let mut logits = Vec::with_capacity(1 + idx.len());
            logits.push(pred.row(j).dot(&e_t));
            logits.extend(neg_logits.row(j).iter().copied());
            let (loss, g) = sampled_softmax_nll_grad(&logits, 0)?;
            nll_sum += loss;
            let g_t = g[0] * scale;
            d_pred.row_mut(flats[j]).scaled_add(g_t, &e_t);
            grads.item_emb.row_mut(target as usize).scaled_add(g_t, &pred.row(j));
            g_neg.row_mut(j).assign(&(Array1::from(g[1..].to_vec()) * scale));
        }
        let d_rows = g_neg.dot(&cands);
        for (j, &f) in flats.iter().enumerate() {
            d_pred.row_mut(f).scaled_add(1.0, &d_rows.row(j));
        }
        let d_cands = g_neg.t().dot(&pred);
        for (k, &t) in idx.iter().enumerate() {
            grads.item_emb.row_mut(t).scaled_add(1.0, &d_cands.row(k));
        }
    }
    let nll = if positions > 0 { nll_sum / positions as f64 } else { 0.0 };

    let (mut nce, mut instances, mut degenerate) = (None, 0, 0);
    if weights.alpha != 0.0 {
        let mut results = Vec::new();
        for (r, row) in rows.iter().enumerate() {
            for t in &row.contrastive {
                let flat = pass.packed.flat_index(r, t.position);
                let ctx: ArrayView1<f64> = match context {
                    ContextMode::Predicted => pass.predicted.row(flat),
                    ContextMode::Embedding => emb.row(t.anchor as usize),
                };
                let negs: Vec<ArrayView1<f64>> = t.negatives.iter().map(|&n| emb.row(n as usize)).collect();
                match info_nce_grad(ctx, emb.row(t.positive as usize), &negs, weights.temperature) {
                    Some(g) => results.push((flat, t, g)),
                    None => degenerate += 1,
                }
            }
        }
        instances = results.len();
        if instances > 0 {
            let s = weights.alpha / instances as f64;
            let mut sum = 0.0;
            for (flat, t, g) in results {
                sum += g.loss;
                match context {
                    ContextMode::Predicted => d_pred.row_mut(flat).scaled_add(s, &g.d_context),
                    ContextMode::Embedding => grads.item_emb.row_mut(t.anchor as usize).scaled_add(s, &g.d_context),
                }
                grads.item_emb.row_mut(t.positive as usize).scaled_add(s, &g.d_positive);
                for (&n, d) in t.negatives.iter().zip(&g.d_negatives) {
                    grads.item_emb.row_mut(n as usize).scaled_add(s, d);
                }
            }
            nce = Some(sum / instances as f64);
        }
    }

    pass.backward(params, &d_pred, &mut grads);
    Ok(StepOutput {
        loss: aggregate_loss(nce, nll, weights),
        nll,
        nce,
        grads,
        nll_positions: positions,
        instances,
        degenerate,
    })
}

/// Adam moments and step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: ModelParams,
    pub v: ModelParams,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &ModelParams) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }
}

/// Euclidean norm of all gradient entries.
pub fn global_norm(grads: &ModelParams) -> f64 {
    grads
        .tensors()
        .iter()
        .flat_map(|t| t.data.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Bias-corrected Adam update. Returns `false` and leaves everything
/// untouched when a gradient entry is not finite.
pub fn adam_step(params: &mut ModelParams, grads: &ModelParams, state: &mut OptimizerState, config: &TrainConfig) -> bool {
    if !grads.all_finite() {
        return false;
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - config.beta1.powi(t);
    let bc2 = 1.0 - config.beta2.powi(t);
    let g_all = grads.tensors();
    let p_all = params.tensors_mut();
    let m_all = state.m.tensors_mut();
    let v_all = state.v.tensors_mut();
    for (((g, (_, p)), (_, m)), (_, v)) in g_all.iter().zip(p_all).zip(m_all).zip(v_all) {
        for i in 0..p.len() {
            let gi = g.data[i];
            m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * gi;
            v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * gi * gi;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= config.lr * m_hat / (v_hat.sqrt() + config.eps);
        }
    }
    params.zero_pad_row();
    true
}

/// Everything [`train`] needs besides the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSetup {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossWeights,
    pub context_mode: ContextMode,
    /// Candidate protocol for validation; its split is forced to validation.
    pub validation: EvalConfig,
}

/// K used for model selection.
pub const SELECTION_K: usize = 10;

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub nll: f64,
    pub nce: Option<f64>,
    pub steps: usize,
    pub skipped_steps: usize,
    pub degenerate_instances: usize,
    pub val_hr: BTreeMap<usize, f64>,
    pub improved: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the best validation epoch.
    pub best: ModelParams,
    pub best_epoch: usize,
    pub best_val_hr: f64,
    pub last: ModelParams,
    pub optimizer: OptimizerState,
    pub log: Vec<EpochRecord>,
    /// Seconds per epoch; kept out of the log so logs stay reproducible.
    pub epoch_seconds: Vec<f64>,
    /// Set when training stopped on a non-finite loss.
    pub aborted: Option<String>,
    /// True when no training row carried a contrastive target.
    pub no_contrastive_targets: bool,
}

fn selection_hr(hr: &BTreeMap<usize, f64>) -> f64 {
    hr.get(&SELECTION_K)
        .or_else(|| hr.values().next_back())
        .copied()
        .unwrap_or(0.0)
}

/// Trains on the train prefixes of `splits` and selects by validation HR.
pub fn train(
    splits: &[HoldoutSplit],
    num_tracks: usize,
    setup: &TrainSetup,
    mut on_epoch: impl FnMut(&EpochRecord, f64),
) -> Result<TrainOutcome> {
    let cfg = &setup.train;
    cfg.validate()?;
    setup.loss.validate()?;
    let mut model_cfg = setup.model.clone();
    model_cfg.causal = cfg.mode.causal();
    model_cfg.validate()?;
    let validation = EvalConfig {
        split: Split::Validation,
        ..setup.validation.clone()
    };
    validation.validate()?;
    if splits.is_empty() {
        return Err(Error::Config("no sessions to train on".into()));
    }

    let examples: Vec<TrainExample> = splits.iter().map(TrainExample::from_split).collect();
    let no_contrastive_targets = examples.iter().all(|e| e.plan.negatives.is_empty());
    let mut params = init_params(&model_cfg, num_tracks, cfg.seed)?;
    let mut opt = OptimizerState::new(&params);
    let mut best = params.clone();
    let (mut best_epoch, mut best_hr) = (0, f64::NEG_INFINITY);
    let mut log = Vec::new();
    let mut epoch_seconds = Vec::new();
    let mut no_improve = 0;
    let mut aborted = None;

    for epoch in 1..=cfg.max_epochs {
        let started = Instant::now();
        let e = epoch as u64;
        let mut order: Vec<usize> = (0..examples.len()).collect();
        order.shuffle(&mut seed::indexed_rng(cfg.seed, "shuffle", e));
        let epoch_examples: Vec<TrainExample> = order.iter().map(|&i| examples[i].clone()).collect();
        let batches = pad_and_batch(
            &epoch_examples,
            cfg.batch_size,
            model_cfg.max_len,
            cfg.num_negatives,
            num_tracks,
            &mut seed::indexed_rng(cfg.seed, "negatives", e),
        )?;
        let mut mask_rng = seed::indexed_rng(cfg.seed, "masking", e);
        let mut dropout_rng = seed::indexed_rng(cfg.seed, "dropout", e);

        let (mut loss_sum, mut nll_sum, mut nce_sum, mut nce_steps) = (0.0, 0.0, 0.0, 0usize);
        let (mut steps, mut skipped, mut degenerate) = (0, 0, 0);
        for batch in &batches {
            let rows = match cfg.mode {
                TrainMode::Unidirectional => make_unidirectional_targets(batch),
                TrainMode::Bidirectional => apply_cloze_masking(batch, cfg.mask_prob, &mut mask_rng),
            };
            if rows.is_empty() {
                continue;
            }
            let out = match compute_step(&params, &rows, &setup.loss, setup.context_mode, Some(&mut dropout_rng)) {
                Ok(out) if out.loss.is_finite() => out,
                Ok(_) => {
                    aborted = Some(format!("non-finite loss in epoch {epoch}"));
                    break;
                }
                Err(err @ (Error::NonFinite(_) | Error::EncoderNaN { .. })) => {
                    aborted = Some(format!("epoch {epoch}: {err}"));
                    break;
                }
                Err(err) => return Err(err),
            };
            let mut grads = out.grads;
            if let Some(clip) = cfg.clip_norm {
                let norm = global_norm(&grads);
                if norm > clip {
                    let mut clipped = grads.zeros_like();
                    clipped.add_scaled(&grads, clip / norm);
                    grads = clipped;
                }
            }
            if !adam_step(&mut params, &grads, &mut opt, cfg) {
                skipped += 1;
            }
            steps += 1;
            loss_sum += out.loss;
            nll_sum += out.nll;
            if let Some(nce) = out.nce {
                nce_sum += nce;
                nce_steps += 1;
            }
            degenerate += out.degenerate;
        }
        if aborted.is_some() {
            break;
        }

        let report = evaluate_params(&params, splits, &validation, None)?;
        let hr = selection_hr(&report.hr);
        let improved = hr > best_hr;
        if improved {
            best_hr = hr;
            best_epoch = epoch;
            best = params.clone();
            no_improve = 0;
        } else {
            no_improve += 1;
        }
        let record = EpochRecord {
            epoch,
            loss: loss_sum / steps.max(1) as f64,
            nll: nll_sum / steps.max(1) as f64,
            nce: (nce_steps > 0).then(|| nce_sum / nce_steps as f64),
            steps,
            skipped_steps: skipped,
            degenerate_instances: degenerate,
            val_hr: report.hr,
            improved,
        };
        let seconds = started.elapsed().as_secs_f64();
        on_epoch(&record, seconds);
        log.push(record);
        epoch_seconds.push(seconds);
        if no_improve > cfg.patience {
            break;
        }
    }

    Ok(TrainOutcome {
        best,
        best_epoch,
        best_val_hr: best_hr.max(0.0),
        last: params,
        optimizer: opt,
        log,
        epoch_seconds,
        aborted,
        no_contrastive_targets,
    })
}
