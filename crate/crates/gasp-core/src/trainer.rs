//! Optimization loop: decoupled-weight-decay Adam with parameter groups,
//! cosine learning-rate schedule with linear warmup, global gradient-norm
//! clipping, and deterministic interleaving of geometric and language
//! batches.
//!
//! Everything is driven by derived seeds, so two runs with the same config
//! produce bit-identical parameters.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{DiffError, ParamGroup, ParamId, ParamStore, Tape};
use crate::geometry::TrackSet;
use crate::lang::{LangError, SurrogateGrammar};
use crate::losses::{
    build_correspondence_batch_multi, correspondence_losses,
    surrogate_lm_loss, total_loss,
    GeometricLossNodes, LossConfig, LossError,
};
use crate::model::{ModelError, ToyModel, VisualInput, HEAD_LR_MULTIPLIER};
use crate::rng::{derive_seed_indexed, rng_from_seed};
use crate::scalar;
use crate::scenegen::{RenderParams, RenderedSequence};

/// A step whose batch-mean loss exceeds this (or goes non-finite) aborts
/// the run.
pub const DIVERGENCE_THRESHOLD: f64 = 1e4;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(&'static str),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("non-finite gradient in parameter {0}")]
    NonFiniteGradient(String),
    #[error("training diverged at step {step} (loss {loss}); last checkpoint: {last_checkpoint:?}")]
    Diverged { step: u64, loss: f64, last_checkpoint: Option<String> },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Lang(#[from] LangError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub peak_lr: f64,
    /// Fraction of total steps spent in linear warmup.
    pub warmup_frac: f64,
    pub epochs: usize,
    /// Sequences per optimizer step.
    pub batch_size: usize,
    pub clip_norm: f64,
    pub betas: (f64, f64),
    pub weight_decay: f64,
    pub adam_eps: f64,
    /// Learning-rate multiplier for the correspondence-head group.
    pub head_lr_mult: f64,
    pub seed: u64,
    /// geometric : language step ratio. After every `.0` geometric batches,
    /// `.1` language-only batches are inserted.
    pub interleave_ratio: (usize, usize),
    pub lora_rank: usize,
    pub head_layers: Vec<usize>,
    /// Frames forwarded per geometric step; the rest of each sequence is
    /// left out of that step's graph (slots are still the full-sequence
    /// positions, so every frame embedding trains over time).
    pub frames_per_step: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            peak_lr: 1e-4,
            warmup_frac: 0.1,
            epochs: 3,
            batch_size: 2,
            clip_norm: 1.0,
            betas: (0.9, 0.999),
            weight_decay: 0.01,
            adam_eps: 1e-8,
            head_lr_mult: HEAD_LR_MULTIPLIER,
            seed: 0,
            interleave_ratio: (1, 1),
            lora_rank: 8,
            head_layers: vec![1, 2, 3, 4],
            frames_per_step: 2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.peak_lr > 0.0) {
            return Err(TrainError::Config("peak_lr must be positive"));
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return Err(TrainError::Config("warmup_frac must lie in [0, 1)"));
        }
        if !(self.clip_norm > 0.0) {
            return Err(TrainError::Config("clip_norm must be positive"));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(TrainError::Config("epochs and batch_size must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.betas.0) || !(0.0..1.0).contains(&self.betas.1) {
            return Err(TrainError::Config("betas must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(TrainError::Config("weight_decay must be non-negative"));
        }
        if !(self.adam_eps > 0.0) {
            return Err(TrainError::Config("adam_eps must be positive"));
        }
        if !(self.head_lr_mult > 0.0) {
            return Err(TrainError::Config("head_lr_mult must be positive"));
        }
        if self.interleave_ratio.0 == 0 {
            return Err(TrainError::Config("interleave ratio needs at least one geometric batch"));
        }
        if self.frames_per_step < 2 {
            return Err(TrainError::Config("frames_per_step must be at least 2"));
        }
        if self.lora_rank == 0 {
            return Err(TrainError::Config("lora_rank must be at least 1"));
        }
        Ok(())
    }
}

/// First/second moment accumulators for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    step: u64,
    moments: BTreeMap<ParamId, Moments>,
}

impl OptimizerState {
    /// Zeroed moments for every trainable parameter.
    pub fn new(store: &ParamStore) -> Self {
        let mut moments = BTreeMap::new();
        for id in store.ids() {
            let t = store.tensor(id);
            if t.requires_grad {
                moments.insert(id, Moments { m: vec![0.0; t.len()], v: vec![0.0; t.len()] });
            }
        }
        Self { step: 0, moments }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// Scheduled learning rate for optimizer step `step` out of `total_steps`.
///
/// Linear ramp from zero over the warmup span, then a half-cosine down to
/// exactly zero at `total_steps`; `group_mult` scales the whole curve.
pub fn lr_at(step: u64, total_steps: u64, cfg: &TrainConfig, group_mult: f64) -> f64 {
    if total_steps == 0 {
        return 0.0;
    }
    let warmup = scalar::floor(cfg.warmup_frac * total_steps as f64) as u64;
    let lr = if step < warmup {
        cfg.peak_lr * step as f64 / warmup as f64
    } else {
        let phase = (step - warmup) as f64 / (total_steps - warmup) as f64;
        cfg.peak_lr * 0.5 * (1.0 + scalar::cos(scalar::PI * phase))
    };
    lr * group_mult
}

/// Scales every trainable gradient so the global L2 norm is at most
/// `clip_norm`; returns the pre-clip norm. Parameters without an
/// accumulated gradient count as zero.
pub fn clip_gradients(store: &mut ParamStore, clip_norm: f64) -> Result<f64, TrainError> {
    let ids: Vec<ParamId> = store.ids().collect();
    let mut sum_sq = 0.0;
    for &id in &ids {
        let t = store.tensor(id);
        if !t.requires_grad {
            continue;
        }
        if let Some(g) = &t.grad {
            for &x in g {
                if !x.is_finite() {
                    return Err(TrainError::NonFiniteGradient(String::from(store.name(id))));
                }
                sum_sq += x * x;
            }
        }
    }
    let norm = scalar::sqrt(sum_sq);
    if norm > clip_norm {
        let scale = clip_norm / norm;
        for &id in &ids {
            let t = store.tensor_mut(id);
            if let Some(g) = &mut t.grad {
                for x in g {
                    *x *= scale;
                }
            }
        }
    }
    Ok(norm)
}

/// One decoupled-weight-decay Adam update over every trainable parameter.
///
/// Decay touches only parameters flagged for it at registration (the
/// low-rank attention deltas and MLP weights); heads, norms, biases, and
/// embeddings update from their gradients alone.
pub fn optimizer_step(
    store: &mut ParamStore,
    state: &mut OptimizerState,
    lr_base: f64,
    lr_head: f64,
    cfg: &TrainConfig,
) {
    state.step += 1;
    let (b1, b2) = cfg.betas;
    let bc1 = 1.0 - scalar::powi(b1, state.step as i32);
    let bc2 = 1.0 - scalar::powi(b2, state.step as i32);
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let meta = store.meta(id);
        let Some(mom) = state.moments.get_mut(&id) else { continue };
        let lr = if meta.group == ParamGroup::Head { lr_head } else { lr_base };
        let t = store.tensor_mut(id);
        let decay = if meta.weight_decay && cfg.weight_decay > 0.0 {
            1.0 - lr * cfg.weight_decay
        } else {
            1.0
        };
        for i in 0..t.values.len() {
            let g = t.grad.as_ref().map_or(0.0, |g| g[i]);
            mom.m[i] = b1 * mom.m[i] + (1.0 - b1) * g;
            mom.v[i] = b2 * mom.v[i] + (1.0 - b2) * g * g;
            let m_hat = mom.m[i] / bc1;
            let v_hat = mom.v[i] / bc2;
            if decay != 1.0 {
                t.values[i] *= decay;
            }
            t.values[i] -= lr * m_hat / (scalar::sqrt(v_hat) + cfg.adam_eps);
        }
    }
}

/// One dataset entry: a rendered multi-frame sequence plus its attached
/// instruction string.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSequence {
    /// `num_frames * patches_per_frame` rows by `feature_dim`.
    pub tokens: Vec<f64>,
    pub num_frames: usize,
    pub feature_dim: usize,
    pub patch_grid: (usize, usize),
    /// (height, width) in pixels.
    pub image_size: (usize, usize),
    /// One or more query grids' worth of ground-truth tracks; anchors are
    /// pooled across all of them.
    pub track_sets: Vec<TrackSet>,
    /// Per frame: pooled mean depth per patch, `0.0` where unknown.
    pub patch_depths: Vec<Vec<f64>>,
    /// Instruction string over the language vocabulary, length at least 2.
    pub lang: Vec<u32>,
}

impl TrainSequence {
    pub fn from_rendered(seq: &RenderedSequence, params: &RenderParams, lang: Vec<u32>) -> Self {
        let mut tokens = Vec::with_capacity(seq.token_grids.len() * seq.token_grids[0].len());
        for g in &seq.token_grids {
            tokens.extend_from_slice(g);
        }
        Self {
            tokens,
            num_frames: seq.frames.len(),
            feature_dim: seq.feature_dim,
            patch_grid: seq.patch_grid,
            image_size: (params.image_height, params.image_width),
            track_sets: vec![seq.tracks.clone()],
            patch_depths: seq.patch_depths.clone(),
            lang,
        }
    }

    /// Adds another track set over the same frames (a different query
    /// grid of the same rendered sequence).
    pub fn push_track_set(&mut self, tracks: TrackSet) {
        self.track_sets.push(tracks);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepKind {
    Geometric,
    Language,
}

/// One line of the step log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub kind: StepKind,
    pub lr_base: f64,
    pub lr_head: f64,
    pub grad_norm_preclip: f64,
    #[serde(rename = "L_LM")]
    pub l_lm: f64,
    #[serde(rename = "L_corr")]
    pub l_corr: f64,
    #[serde(rename = "L_depth")]
    pub l_depth: f64,
    #[serde(rename = "L_total")]
    pub l_total: f64,
    /// Batch-mean correspondence loss per head layer, ascending layer
    /// order; empty on language steps.
    #[serde(rename = "per_layer_L_corr")]
    pub per_layer_l_corr: Vec<f64>,
}

/// Callbacks for logging and checkpointing; the loop itself does no IO.
pub trait TrainObserver {
    fn on_step(&mut self, record: &StepRecord) {
        let _ = record;
    }

    /// Called after the last step of each epoch. A returned label (for
    /// example a file path) is remembered as the latest checkpoint.
    fn on_checkpoint(
        &mut self,
        epoch: usize,
        model: &ToyModel,
        state: &OptimizerState,
    ) -> Option<String> {
        let _ = (epoch, model, state);
        None
    }
}

/// Observer that ignores everything.
pub struct NullObserver;

impl TrainObserver for NullObserver {}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub records: Vec<StepRecord>,
    pub total_steps: u64,
    pub last_checkpoint: Option<String>,
}

/// Exponential moving average of a series: `e_0 = v_0`,
/// `e_t = decay * e_(t-1) + (1 - decay) * v_t`.
pub fn ema_series(values: &[f64], decay: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len());
    let mut e = 0.0;
    for (i, &v) in values.iter().enumerate() {
        e = if i == 0 { v } else { decay * e + (1.0 - decay) * v };
        out.push(e);
    }
    out
}

/// Optimizer steps a full run will take, given the dataset size.
pub fn planned_total_steps(cfg: &TrainConfig, num_sequences: usize) -> u64 {
    let n_batches = num_sequences.div_ceil(cfg.batch_size);
    let lang_steps = (n_batches / cfg.interleave_ratio.0) * cfg.interleave_ratio.1;
    (cfg.epochs * (n_batches + lang_steps)) as u64
}

struct LossTally {
    l_lm: f64,
    l_corr: f64,
    l_depth: f64,
    l_total: f64,
    per_layer: Vec<f64>,
}

/// Trains in place. Each geometric batch forwards a deterministic random
/// subset of each sequence's frames together with its instruction string;
/// language batches are fresh grammar samples with no visual rows.
pub fn train(
    model: &mut ToyModel,
    dataset: &[TrainSequence],
    grammar: &SurrogateGrammar,
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    observer: &mut dyn TrainObserver,
) -> Result<TrainSummary, TrainError> {
    cfg.validate()?;
    loss_cfg.validate().map_err(TrainError::Loss)?;
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let n_p = model.config.patches_per_frame;
    for seq in dataset {
        if seq.lang.len() < 2 {
            return Err(TrainError::Config("every sequence needs a language string of length >= 2"));
        }
        if seq.num_frames < 2 {
            return Err(TrainError::Config("every sequence needs at least two frames"));
        }
        if seq.patch_grid.0 * seq.patch_grid.1 != n_p {
            return Err(TrainError::Config("sequence patch grid does not match the model"));
        }
        if seq.tokens.len() != seq.num_frames * n_p * seq.feature_dim {
            return Err(TrainError::Config("token buffer size mismatch"));
        }
    }

    let total_steps = planned_total_steps(cfg, dataset.len());
    let n_batches = dataset.len().div_ceil(cfg.batch_size);
    let mut state = OptimizerState::new(&model.store);
    let mut records: Vec<StepRecord> = Vec::new();
    let mut last_checkpoint: Option<String> = None;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        let mut shuffle_rng = rng_from_seed(derive_seed_indexed(cfg.seed, "epoch-order", epoch as u64));
        order.shuffle(&mut shuffle_rng);

        let mut geo_since_lang = 0usize;
        for batch_idx in 0..n_batches {
            let chunk = &order[batch_idx * cfg.batch_size
                ..(batch_idx * cfg.batch_size + cfg.batch_size).min(order.len())];
            let tally = geometric_batch(model, dataset, chunk, cfg, loss_cfg, &state)?;
            finish_step(
                model, &mut state, cfg, total_steps, epoch, StepKind::Geometric, tally,
                &mut records, &mut last_checkpoint, observer,
            )?;

            geo_since_lang += 1;
            if geo_since_lang == cfg.interleave_ratio.0 {
                geo_since_lang = 0;
                for _ in 0..cfg.interleave_ratio.1 {
                    let tally = language_batch(model, grammar, cfg, loss_cfg, &state)?;
                    finish_step(
                        model, &mut state, cfg, total_steps, epoch, StepKind::Language, tally,
                        &mut records, &mut last_checkpoint, observer,
                    )?;
                }
            }
        }

        if let Some(label) = observer.on_checkpoint(epoch, model, &state) {
            last_checkpoint = Some(label);
        }
    }

    debug_assert_eq!(state.step, total_steps);
    Ok(TrainSummary { records, total_steps, last_checkpoint })
}

/// Accumulates mean gradients for one geometric batch; no optimizer work.
fn geometric_batch(
    model: &mut ToyModel,
    dataset: &[TrainSequence],
    chunk: &[usize],
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    state: &OptimizerState,
) -> Result<LossTally, TrainError> {
    model.store.zero_grads();
    let scale = 1.0 / chunk.len() as f64;
    let n_p = model.config.patches_per_frame;
    let n_layers = model.config.head_layers.len();
    let mut tally = LossTally {
        l_lm: 0.0,
        l_corr: 0.0,
        l_depth: 0.0,
        l_total: 0.0,
        per_layer: vec![0.0; n_layers],
    };
    let mut frame_rng = rng_from_seed(derive_seed_indexed(cfg.seed, "geo-frames", state.step));

    for &si in chunk {
        let seq = &dataset[si];
        let k = cfg.frames_per_step.min(seq.num_frames);
        let mut chosen: Vec<usize> =
            rand::seq::index::sample(&mut frame_rng, seq.num_frames, k).into_vec();
        chosen.sort_unstable();

        let row_width = n_p * seq.feature_dim;
        let mut sub_tokens = Vec::with_capacity(k * row_width);
        for &f in &chosen {
            sub_tokens.extend_from_slice(&seq.tokens[f * row_width..(f + 1) * row_width]);
        }
        let visual = VisualInput { tokens: &sub_tokens, frame_slots: &chosen };
        let lang_inputs = &seq.lang[..seq.lang.len() - 1];
        let lang_targets = &seq.lang[1..];

        let mut tape = Tape::new();
        let graph = model.build_forward(&mut tape, Some(&visual), lang_inputs)?;
        let logits = graph.logits.expect("language rows present");
        let l_lm = surrogate_lm_loss(&mut tape, logits, lang_targets)?;

        let geo: Option<GeometricLossNodes> =
            if loss_cfg.lambda_c == 0.0 && loss_cfg.lambda_d == 0.0 {
                None
            } else {
                let sets: Vec<&TrackSet> = seq.track_sets.iter().collect();
                let batch = build_correspondence_batch_multi(
                    &sets,
                    &seq.patch_depths,
                    &chosen,
                    seq.patch_grid,
                    seq.image_size,
                    loss_cfg,
                )?;
                if batch.num_anchors() == 0 {
                    None
                } else {
                    Some(correspondence_losses(&mut tape, &batch, &graph.head_embeddings, loss_cfg)?)
                }
            };

        let (total, report) = total_loss(&mut tape, Some(l_lm), geo.as_ref(), loss_cfg)?;
        tape.backward(total)?;
        tape.accumulate_grads(&mut model.store, scale);

        tally.l_lm += scale * report.l_lm;
        tally.l_corr += scale * report.l_corr;
        tally.l_depth += scale * report.l_depth;
        tally.l_total += scale * report.total;
        if let Some(geo) = &geo {
            for (slot, &(_, node)) in geo.per_layer_corr.iter().enumerate() {
                tally.per_layer[slot] += scale * tape.scalar_value(node)?;
            }
        }
    }
    Ok(tally)
}

/// Accumulates mean gradients for one language-only batch.
fn language_batch(
    model: &mut ToyModel,
    grammar: &SurrogateGrammar,
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    state: &OptimizerState,
) -> Result<LossTally, TrainError> {
    model.store.zero_grads();
    let scale = 1.0 / cfg.batch_size as f64;
    let sentence_len = model.config.max_lang_len.max(2);
    let mut tally =
        LossTally { l_lm: 0.0, l_corr: 0.0, l_depth: 0.0, l_total: 0.0, per_layer: Vec::new() };
    let mut rng = rng_from_seed(derive_seed_indexed(cfg.seed, "lang-batch", state.step));

    for _ in 0..cfg.batch_size {
        let sentence = grammar.sample_sentence(sentence_len, &mut rng)?;
        let mut tape = Tape::new();
        let graph = model.build_forward(&mut tape, None, &sentence[..sentence.len() - 1])?;
        let logits = graph.logits.expect("language rows present");
        let l_lm = surrogate_lm_loss(&mut tape, logits, &sentence[1..])?;
        let (total, report) = total_loss(&mut tape, Some(l_lm), None, loss_cfg)?;
        tape.backward(total)?;
        tape.accumulate_grads(&mut model.store, scale);
        tally.l_lm += scale * report.l_lm;
        tally.l_total += scale * report.total;
    }
    Ok(tally)
}

/// Divergence check, clip, optimizer step, and logging shared by both
/// batch kinds.
#[allow(clippy::too_many_arguments)]
fn finish_step(
    model: &mut ToyModel,
    state: &mut OptimizerState,
    cfg: &TrainConfig,
    total_steps: u64,
    epoch: usize,
    kind: StepKind,
    tally: LossTally,
    records: &mut Vec<StepRecord>,
    last_checkpoint: &mut Option<String>,
    observer: &mut dyn TrainObserver,
) -> Result<(), TrainError> {
    let step = state.step + 1;
    if !tally.l_total.is_finite() || tally.l_total > DIVERGENCE_THRESHOLD {
        return Err(TrainError::Diverged {
            step,
            loss: tally.l_total,
            last_checkpoint: last_checkpoint.clone(),
        });
    }
    let grad_norm_preclip = clip_gradients(&mut model.store, cfg.clip_norm)?;
    let lr_base = lr_at(step, total_steps, cfg, 1.0);
    let lr_head = lr_at(step, total_steps, cfg, cfg.head_lr_mult);
    optimizer_step(&mut model.store, state, lr_base, lr_head, cfg);

    let record = StepRecord {
        step,
        epoch,
        kind,
        lr_base,
        lr_head,
        grad_norm_preclip,
        l_lm: tally.l_lm,
        l_corr: tally.l_corr,
        l_depth: tally.l_depth,
        l_total: tally.l_total,
        per_layer_l_corr: tally.per_layer,
    };
    observer.on_step(&record);
    records.push(record);
    Ok(())
}
