//! Matching diagnostics computed from forward traces: layer-wise
//! correspondence accuracy (PCK), confidence calibration, temporal
//! robustness, the twin-object margin, and ablation sweeps.
//!
//! Two descriptor families are scored with the same protocol: raw
//! query/key states of every attention layer, and the trained
//! correspondence-head embeddings of the head layers. Reports carry both,
//! labeled.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::geometry::{cell_center, patch_index, project};
use crate::lang::SurrogateGrammar;
use crate::linalg;
use crate::losses::LossConfig;
use crate::model::{init_model, ForwardTrace, ModelConfig, ModelError, ToyModel, VisualInput};
use crate::scalar;
use crate::scenegen::{RenderParams, RenderedSequence, TwinScene};
use crate::trainer::{
    ema_series, train, NullObserver, StepKind, TrainConfig, TrainError, TrainSequence,
};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EvalError {
    #[error("invalid eval config: {0}")]
    Config(&'static str),
    #[error("training-split sequence passed to evaluation")]
    DatasetLeakage,
    #[error("shape error: {0}")]
    Shape(&'static str),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfidenceSource {
    /// Max of softmax over the raw QK similarity row, scaled by 1/sqrt(d_k).
    AttentionProb,
    /// Max of softmax over the head-embedding similarity row.
    HeadSimilaritySoftmax,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSplit {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Correctness radius in patch units.
    pub pck_threshold: f64,
    pub query_grid: (usize, usize),
    /// Timeline offsets scored, each at least 1.
    pub delta_t_range: Vec<usize>,
    /// Upper bound on sequences consumed from the provided set.
    pub num_sequences: usize,
    /// Average per-head descriptors before the cosine, instead of using
    /// the full concatenated state.
    pub head_average: bool,
    pub confidence_source: ConfidenceSource,
    /// Softmax temperature for head-embedding confidences. Cosine rows
    /// live in [-1, 1], so a flat scale collapses every confidence onto
    /// 1/n_candidates; use the matching temperature the heads were trained
    /// against so clear and ambiguous matches separate.
    pub head_temperature: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            pck_threshold: 2.0,
            query_grid: (8, 8),
            delta_t_range: (1..=24).collect(),
            num_sequences: 200,
            head_average: true,
            confidence_source: ConfidenceSource::AttentionProb,
            head_temperature: 0.07,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        if !(self.pck_threshold > 0.0) {
            return Err(EvalError::Config("pck_threshold must be positive"));
        }
        if self.delta_t_range.is_empty() || self.delta_t_range.iter().any(|&d| d == 0) {
            return Err(EvalError::Config("delta_t_range must be nonempty with entries >= 1"));
        }
        if self.query_grid.0 == 0 || self.query_grid.1 == 0 {
            return Err(EvalError::Config("query_grid must be non-empty"));
        }
        if self.num_sequences == 0 {
            return Err(EvalError::Config("num_sequences must be at least 1"));
        }
        if !(self.head_temperature > 0.0) {
            return Err(EvalError::Config("head_temperature must be positive"));
        }
        Ok(())
    }
}

/// One held-out sequence with its ground-truth query tracks.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSequence {
    /// `num_frames * patches_per_frame` rows by `feature_dim`.
    pub tokens: Vec<f64>,
    pub num_frames: usize,
    pub feature_dim: usize,
    pub patch_grid: (usize, usize),
    /// (height, width) in pixels.
    pub image_size: (usize, usize),
    /// Timeline position of each frame; pair offsets define delta-t.
    pub frame_indices: Vec<usize>,
    pub tracks: crate::geometry::TrackSet,
    pub split: DataSplit,
}

impl EvalSequence {
    pub fn from_rendered(seq: &RenderedSequence, params: &RenderParams, split: DataSplit) -> Self {
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
            frame_indices: seq.frame_indices.clone(),
            tracks: seq.tracks.clone(),
            split,
        }
    }
}

/// Dense similarity between every source patch and every target patch.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub n_rows: usize,
    pub n_cols: usize,
    /// Row-major `n_rows x n_cols`.
    pub values: Vec<f64>,
    /// Descriptor rows (either side) whose norm vanished; their
    /// similarities are zero.
    pub zero_norm_rows: usize,
}

impl SimilarityMatrix {
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.n_cols + c]
    }
}

/// Builds one frame's descriptor block from per-head state tensors:
/// either the mean over heads or the concatenation, row-normalized. The
/// second return is the number of zero-norm rows left as zero vectors.
fn frame_descriptors(
    heads: &[crate::autodiff::Tensor],
    n_p: usize,
    frame: usize,
    head_average: bool,
) -> Result<(Vec<f64>, usize, usize), EvalError> {
    let n_heads = heads.len();
    if n_heads == 0 {
        return Err(EvalError::Shape("no per-head states recorded"));
    }
    let d_k = heads[0].cols;
    let start = frame * n_p;
    if heads.iter().any(|h| h.cols != d_k || h.rows < start + n_p) {
        return Err(EvalError::Shape("per-head state block out of bounds"));
    }
    let dim = if head_average { d_k } else { n_heads * d_k };
    let mut out = vec![0.0; n_p * dim];
    for p in 0..n_p {
        let row = start + p;
        if head_average {
            for h in heads {
                for c in 0..d_k {
                    out[p * dim + c] += h.get(row, c);
                }
            }
            for c in 0..d_k {
                out[p * dim + c] /= n_heads as f64;
            }
        } else {
            for (hi, h) in heads.iter().enumerate() {
                for c in 0..d_k {
                    out[p * dim + hi * d_k + c] = h.get(row, c);
                }
            }
        }
    }
    let zeroed = normalize_rows(&mut out, n_p, dim);
    Ok((out, dim, zeroed))
}

/// Normalizes each row to unit length; zero-norm rows stay zero and are
/// counted.
fn normalize_rows(m: &mut [f64], rows: usize, cols: usize) -> usize {
    let mut zeroed = 0;
    for r in 0..rows {
        let row = &mut m[r * cols..(r + 1) * cols];
        let norm = scalar::sqrt(row.iter().map(|x| x * x).sum());
        if norm <= 1e-12 {
            row.fill(0.0);
            zeroed += 1;
        } else {
            for x in row {
                *x /= norm;
            }
        }
    }
    zeroed
}

/// Cosine similarity between the query states of `source_frame` and the
/// key states of `target_frame` at attention layer `layer` (1-based).
pub fn qk_similarity(
    trace: &ForwardTrace,
    patches_per_frame: usize,
    layer: usize,
    source_frame: usize,
    target_frame: usize,
    head_average: bool,
) -> Result<SimilarityMatrix, EvalError> {
    if layer == 0 || layer > trace.queries.len() {
        return Err(EvalError::Shape("layer out of range"));
    }
    let (q, qdim, qz) =
        frame_descriptors(&trace.queries[layer - 1], patches_per_frame, source_frame, head_average)?;
    let (k, kdim, kz) =
        frame_descriptors(&trace.keys[layer - 1], patches_per_frame, target_frame, head_average)?;
    if qdim != kdim {
        return Err(EvalError::Shape("query/key descriptor widths differ"));
    }
    let mut values = vec![0.0; patches_per_frame * patches_per_frame];
    linalg::matmul_nt(&mut values, &q, &k, patches_per_frame, qdim, patches_per_frame, false);
    Ok(SimilarityMatrix {
        n_rows: patches_per_frame,
        n_cols: patches_per_frame,
        values,
        zero_norm_rows: qz + kz,
    })
}

/// Cosine similarity between head embeddings of two frames at one head
/// layer (1-based attention layer carrying a head).
pub fn head_similarity(
    trace: &ForwardTrace,
    patches_per_frame: usize,
    head_layer: usize,
    source_frame: usize,
    target_frame: usize,
) -> Result<SimilarityMatrix, EvalError> {
    let emb = trace
        .head_embeddings
        .iter()
        .find(|(l, _)| *l == head_layer)
        .map(|(_, t)| t)
        .ok_or(EvalError::Shape("no head at this layer"))?;
    let n_p = patches_per_frame;
    let dim = emb.cols;
    let slice_block = |frame: usize| -> Result<Vec<f64>, EvalError> {
        let start = frame * n_p;
        if emb.rows < start + n_p {
            return Err(EvalError::Shape("head embedding block out of bounds"));
        }
        Ok(emb.values[start * dim..(start + n_p) * dim].to_vec())
    };
    let mut q = slice_block(source_frame)?;
    let mut k = slice_block(target_frame)?;
    let qz = normalize_rows(&mut q, n_p, dim);
    let kz = normalize_rows(&mut k, n_p, dim);
    let mut values = vec![0.0; n_p * n_p];
    linalg::matmul_nt(&mut values, &q, &k, n_p, dim, n_p, false);
    Ok(SimilarityMatrix { n_rows: n_p, n_cols: n_p, values, zero_norm_rows: qz + kz })
}

/// Row argmax per query; ties break toward the lowest patch index.
pub fn argmax_match(s: &SimilarityMatrix, query_rows: &[usize]) -> Vec<usize> {
    query_rows
        .iter()
        .map(|&r| {
            let row = &s.values[r * s.n_cols..(r + 1) * s.n_cols];
            let mut best = 0usize;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Maps per-frame predicted patches to patch-center pixel tracks, one
/// track per query across all frames. Export/visualization only; accuracy
/// is scored in patch units.
pub fn build_tracks(
    per_frame_predictions: &[Vec<usize>],
    patch_grid: (usize, usize),
    image_size: (usize, usize),
) -> Result<Vec<Vec<(f64, f64)>>, EvalError> {
    let Some(first) = per_frame_predictions.first() else {
        return Err(EvalError::Shape("no frames"));
    };
    if per_frame_predictions.iter().any(|p| p.len() != first.len()) {
        return Err(EvalError::Shape("uneven predictions across frames"));
    }
    let cols = patch_grid.1;
    Ok((0..first.len())
        .map(|q| {
            per_frame_predictions
                .iter()
                .map(|frame| {
                    let cell = (frame[q] / cols, frame[q] % cols);
                    cell_center(cell, image_size, patch_grid)
                })
                .collect()
        })
        .collect())
}

/// Fraction of predictions within `delta` patch units of the truth, plus
/// the per-point flags. `None` when nothing was scored.
pub fn pck(
    predicted: &[usize],
    ground_truth: &[usize],
    patch_grid: (usize, usize),
    delta: f64,
) -> Option<(f64, Vec<bool>)> {
    debug_assert_eq!(predicted.len(), ground_truth.len());
    if predicted.is_empty() {
        return None;
    }
    let cols = patch_grid.1;
    let flags: Vec<bool> = predicted
        .iter()
        .zip(ground_truth)
        .map(|(&p, &g)| {
            let dr = (p / cols) as f64 - (g / cols) as f64;
            let dc = (p % cols) as f64 - (g % cols) as f64;
            scalar::sqrt(dr * dr + dc * dc) <= delta
        })
        .collect();
    let mean = flags.iter().filter(|&&f| f).count() as f64 / flags.len() as f64;
    Some((mean, flags))
}

/// Expected accuracy of uniform-random matching: the count of integer
/// offsets within `delta` of an interior truth cell, over the grid size.
pub fn chance_pck(patch_grid: (usize, usize), delta: f64) -> f64 {
    let r = scalar::floor(delta) as i64;
    let mut hits = 0usize;
    for dr in -r..=r {
        for dc in -r..=r {
            if ((dr * dr + dc * dc) as f64) <= delta * delta {
                hits += 1;
            }
        }
    }
    hits as f64 / (patch_grid.0 * patch_grid.1) as f64
}

/// Pearson correlation between confidences and correctness; `None` when
/// either side has no variance or fewer than two samples.
pub fn calibration_rho(confidences: &[f64], correct: &[bool]) -> Option<f64> {
    debug_assert_eq!(confidences.len(), correct.len());
    let n = confidences.len();
    if n < 2 {
        return None;
    }
    let ys: Vec<f64> = correct.iter().map(|&c| if c { 1.0 } else { 0.0 }).collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (mc, my) = (mean(confidences), mean(&ys));
    let (mut cov, mut vc, mut vy) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let (dc, dy) = (confidences[i] - mc, ys[i] - my);
        cov += dc * dy;
        vc += dc * dc;
        vy += dy * dy;
    }
    if vc <= 0.0 || vy <= 0.0 {
        return None;
    }
    Some(cov / scalar::sqrt(vc * vy))
}

/// Normalizes a per-offset accuracy series by its offset-1 value.
/// `None` when the offset-1 point is missing or zero.
pub fn temporal_robustness(pck_by_offset: &[(usize, f64)]) -> Option<Vec<(usize, f64)>> {
    let base = pck_by_offset.iter().find(|(dt, _)| *dt == 1).map(|&(_, p)| p)?;
    if base <= 0.0 {
        return None;
    }
    Some(pck_by_offset.iter().map(|&(dt, p)| (dt, p / base)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerStat {
    pub layer: usize,
    /// Mean of per-sequence accuracies (sequence excluded if it scored
    /// nothing).
    pub mean: f64,
    /// Population standard deviation across sequences.
    pub std: f64,
    /// All scored queries pooled, visibility-weighted.
    pub pooled: f64,
    pub sequences: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub layer: usize,
    pub delta_t: usize,
    pub mean: f64,
    pub std: f64,
    pub pooled: f64,
    pub sequences: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationStat {
    pub layer: usize,
    pub rho: Option<f64>,
    pub mean_conf_correct: f64,
    pub mean_conf_incorrect: f64,
    pub n_correct: usize,
    pub n_incorrect: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessPoint {
    pub delta_t: usize,
    pub pck: f64,
    pub y: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub qk_pck: Vec<LayerStat>,
    pub head_pck: Vec<LayerStat>,
    pub qk_pck_by_delta: Vec<CurvePoint>,
    pub head_pck_by_delta: Vec<CurvePoint>,
    pub calibration_qk: Vec<CalibrationStat>,
    pub calibration_head: Vec<CalibrationStat>,
    pub best_qk_layer: usize,
    pub best_head_layer: usize,
    /// Offset decay of the best QK layer, normalized at offset 1.
    pub robustness_qk: Vec<RobustnessPoint>,
    /// Offset decay of the best head layer, normalized at offset 1.
    pub robustness_head: Vec<RobustnessPoint>,
    pub robustness_qk_defined: bool,
    pub robustness_head_defined: bool,
    pub chance_pck: f64,
    pub pck_threshold: f64,
    pub num_sequences: usize,
    pub confidence_source: ConfidenceSource,
    pub zero_norm_rows: usize,
}

/// Per-layer scoring scratch shared by the QK and head families.
struct FamilyAccum {
    layers: Vec<usize>,
    n_dt: usize,
    /// Pooled (correct, total) per layer per offset slot.
    pooled: Vec<(usize, usize)>,
    /// Per sequence, per layer, per offset slot (correct, total).
    per_seq: Vec<Vec<(usize, usize)>>,
    confidences: Vec<Vec<f64>>,
    correct: Vec<Vec<bool>>,
}

impl FamilyAccum {
    fn new(layers: Vec<usize>, n_dt: usize) -> Self {
        let nl = layers.len();
        Self {
            layers,
            n_dt,
            pooled: vec![(0, 0); nl * n_dt],
            per_seq: Vec::new(),
            confidences: vec![Vec::new(); nl],
            correct: vec![Vec::new(); nl],
        }
    }

    fn begin_sequence(&mut self) {
        self.per_seq.push(vec![(0, 0); self.layers.len() * self.n_dt]);
    }

    fn record(&mut self, layer_slot: usize, dt_slot: usize, flags: &[bool], confs: &[f64]) {
        let idx = layer_slot * self.n_dt + dt_slot;
        let correct = flags.iter().filter(|&&f| f).count();
        self.pooled[idx].0 += correct;
        self.pooled[idx].1 += flags.len();
        let seq = self.per_seq.last_mut().expect("begin_sequence called");
        seq[idx].0 += correct;
        seq[idx].1 += flags.len();
        self.confidences[layer_slot].extend_from_slice(confs);
        self.correct[layer_slot].extend(flags.iter().copied());
    }

    fn layer_stats(&self) -> Vec<LayerStat> {
        self.layers
            .iter()
            .enumerate()
            .map(|(slot, &layer)| {
                let mut vals = Vec::new();
                for seq in &self.per_seq {
                    let (c, t) = seq[slot * self.n_dt..(slot + 1) * self.n_dt]
                        .iter()
                        .fold((0, 0), |acc, &(c, t)| (acc.0 + c, acc.1 + t));
                    if t > 0 {
                        vals.push(c as f64 / t as f64);
                    }
                }
                let (pc, pt) = self.pooled[slot * self.n_dt..(slot + 1) * self.n_dt]
                    .iter()
                    .fold((0, 0), |acc, &(c, t)| (acc.0 + c, acc.1 + t));
                let (mean, std) = mean_std(&vals);
                LayerStat {
                    layer,
                    mean,
                    std,
                    pooled: if pt > 0 { pc as f64 / pt as f64 } else { 0.0 },
                    sequences: vals.len(),
                }
            })
            .collect()
    }

    fn curve(&self, delta_ts: &[usize]) -> Vec<CurvePoint> {
        let mut out = Vec::new();
        for (slot, &layer) in self.layers.iter().enumerate() {
            for (di, &dt) in delta_ts.iter().enumerate() {
                let idx = slot * self.n_dt + di;
                let mut vals = Vec::new();
                for seq in &self.per_seq {
                    if seq[idx].1 > 0 {
                        vals.push(seq[idx].0 as f64 / seq[idx].1 as f64);
                    }
                }
                let (mean, std) = mean_std(&vals);
                let (pc, pt) = self.pooled[idx];
                out.push(CurvePoint {
                    layer,
                    delta_t: dt,
                    mean,
                    std,
                    pooled: if pt > 0 { pc as f64 / pt as f64 } else { 0.0 },
                    sequences: vals.len(),
                });
            }
        }
        out
    }

    fn calibration(&self) -> Vec<CalibrationStat> {
        self.layers
            .iter()
            .enumerate()
            .map(|(slot, &layer)| {
                let confs = &self.confidences[slot];
                let flags = &self.correct[slot];
                let mut sums = (0.0, 0usize, 0.0, 0usize);
                for (&c, &ok) in confs.iter().zip(flags) {
                    if ok {
                        sums.0 += c;
                        sums.1 += 1;
                    } else {
                        sums.2 += c;
                        sums.3 += 1;
                    }
                }
                CalibrationStat {
                    layer,
                    rho: calibration_rho(confs, flags),
                    mean_conf_correct: if sums.1 > 0 { sums.0 / sums.1 as f64 } else { 0.0 },
                    mean_conf_incorrect: if sums.3 > 0 { sums.2 / sums.3 as f64 } else { 0.0 },
                    n_correct: sums.1,
                    n_incorrect: sums.3,
                }
            })
            .collect()
    }

    /// (layer, pooled-over-offset robustness input) of the best layer by
    /// pooled accuracy.
    fn best_layer(&self, stats: &[LayerStat]) -> usize {
        let mut best = 0usize;
        for (i, s) in stats.iter().enumerate() {
            if s.pooled > stats[best].pooled {
                best = i;
            }
        }
        self.layers[best]
    }

    fn robustness(&self, layer: usize, delta_ts: &[usize]) -> (Vec<RobustnessPoint>, bool) {
        let slot = self.layers.iter().position(|&l| l == layer).expect("known layer");
        let series: Vec<(usize, f64)> = delta_ts
            .iter()
            .enumerate()
            .filter_map(|(di, &dt)| {
                let (c, t) = self.pooled[slot * self.n_dt + di];
                (t > 0).then(|| (dt, c as f64 / t as f64))
            })
            .collect();
        match temporal_robustness(&series) {
            Some(curve) => (
                series
                    .iter()
                    .zip(&curve)
                    .map(|(&(dt, p), &(_, y))| RobustnessPoint { delta_t: dt, pck: p, y: Some(y) })
                    .collect(),
                true,
            ),
            None => (
                series
                    .into_iter()
                    .map(|(dt, p)| RobustnessPoint { delta_t: dt, pck: p, y: None })
                    .collect(),
                false,
            ),
        }
    }
}

fn mean_std(vals: &[f64]) -> (f64, f64) {
    if vals.is_empty() {
        return (0.0, 0.0);
    }
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
    (mean, scalar::sqrt(var))
}

fn max_softmax(row: &[f64], inv_scale: f64) -> f64 {
    let scaled: Vec<f64> = row.iter().map(|&v| v * inv_scale).collect();
    let lse = scalar::log_sum_exp(&scaled);
    let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    scalar::exp(max - lse)
}

/// Scores a model on held-out sequences: per-layer accuracy for both
/// descriptor families, pooled calibration, and the temporal-robustness
/// curve of each family's best layer.
pub fn evaluate(
    model: &ToyModel,
    sequences: &[EvalSequence],
    cfg: &EvalConfig,
) -> Result<EvalReport, EvalError> {
    cfg.validate()?;
    if sequences.is_empty() {
        return Err(EvalError::Shape("no sequences"));
    }
    if sequences.iter().any(|s| s.split != DataSplit::Test) {
        return Err(EvalError::DatasetLeakage);
    }
    let used = &sequences[..cfg.num_sequences.min(sequences.len())];
    let n_p = model.config.patches_per_frame;
    let n_dt = cfg.delta_t_range.len();
    let qk_layers: Vec<usize> = (1..=model.config.num_layers).collect();
    let head_layers = model.config.head_layers.clone();
    let mut qk = FamilyAccum::new(qk_layers.clone(), n_dt);
    let mut head = FamilyAccum::new(head_layers.clone(), n_dt);
    let mut zero_norm_rows = 0usize;
    let d_k = model.config.d_head();
    let qk_inv_scale = 1.0 / scalar::sqrt(d_k as f64);
    let head_inv_scale = 1.0 / scalar::sqrt(model.config.d_emb as f64);

    for seq in used {
        if seq.patch_grid.0 * seq.patch_grid.1 != n_p {
            return Err(EvalError::Shape("sequence patch grid does not match the model"));
        }
        if seq.tracks.query_grid != cfg.query_grid {
            return Err(EvalError::Config("sequence query grid does not match the eval config"));
        }
        let slots: Vec<usize> = (0..seq.num_frames).collect();
        let visual = VisualInput { tokens: &seq.tokens, frame_slots: &slots };
        let trace = model.forward_trace(Some(&visual), &[])?;
        qk.begin_sequence();
        head.begin_sequence();

        for a in 0..seq.num_frames {
            for b in 0..seq.num_frames {
                if a == b || seq.frame_indices[b] <= seq.frame_indices[a] {
                    continue;
                }
                let dt = seq.frame_indices[b] - seq.frame_indices[a];
                let Some(dt_slot) = cfg.delta_t_range.iter().position(|&x| x == dt) else {
                    continue;
                };
                let mut queries = Vec::new();
                let mut truth = Vec::new();
                for track in &seq.tracks.tracks {
                    let (ra, rb) = (&track.records[a], &track.records[b]);
                    if ra.visible && rb.visible {
                        queries.push(patch_index(ra.pixel, seq.image_size, seq.patch_grid));
                        truth.push(patch_index(rb.pixel, seq.image_size, seq.patch_grid));
                    }
                }
                if queries.is_empty() {
                    continue;
                }

                for (slot, &layer) in qk_layers.iter().enumerate() {
                    let s = qk_similarity(&trace, n_p, layer, a, b, cfg.head_average)?;
                    zero_norm_rows += s.zero_norm_rows;
                    let preds = argmax_match(&s, &queries);
                    let (_, flags) =
                        pck(&preds, &truth, seq.patch_grid, cfg.pck_threshold).expect("non-empty");
                    let confs: Vec<f64> = queries
                        .iter()
                        .map(|&q| max_softmax(&s.values[q * n_p..(q + 1) * n_p], qk_inv_scale))
                        .collect();
                    qk.record(slot, dt_slot, &flags, &confs);
                }
                for (slot, &layer) in head_layers.iter().enumerate() {
                    let s = head_similarity(&trace, n_p, layer, a, b)?;
                    zero_norm_rows += s.zero_norm_rows;
                    let preds = argmax_match(&s, &queries);
                    let (_, flags) =
                        pck(&preds, &truth, seq.patch_grid, cfg.pck_threshold).expect("non-empty");
                    let confs: Vec<f64> = queries
                        .iter()
                        .map(|&q| max_softmax(&s.values[q * n_p..(q + 1) * n_p], head_inv_scale))
                        .collect();
                    head.record(slot, dt_slot, &flags, &confs);
                }
            }
        }
    }

    let qk_stats = qk.layer_stats();
    let head_stats = head.layer_stats();
    if qk_stats.iter().all(|s| s.sequences == 0) {
        return Err(EvalError::Shape("no scored queries in any sequence"));
    }
    let best_qk_layer = qk.best_layer(&qk_stats);
    let best_head_layer = head.best_layer(&head_stats);
    let (robustness_qk, qk_defined) = qk.robustness(best_qk_layer, &cfg.delta_t_range);
    let (robustness_head, head_defined) = head.robustness(best_head_layer, &cfg.delta_t_range);

    Ok(EvalReport {
        qk_pck_by_delta: qk.curve(&cfg.delta_t_range),
        head_pck_by_delta: head.curve(&cfg.delta_t_range),
        calibration_qk: qk.calibration(),
        calibration_head: head.calibration(),
        qk_pck: qk_stats,
        head_pck: head_stats,
        best_qk_layer,
        best_head_layer,
        robustness_qk,
        robustness_head,
        robustness_qk_defined: qk_defined,
        robustness_head_defined: head_defined,
        chance_pck: chance_pck(used[0].patch_grid, cfg.pck_threshold),
        pck_threshold: cfg.pck_threshold,
        num_sequences: used.len(),
        confidence_source: cfg.confidence_source,
        zero_norm_rows,
    })
}

/// Mean head-similarity gap between an anchor's true cross-frame match
/// and the patch where its depth-displaced twin lands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwinMarginReport {
    pub mean_margin: f64,
    pub mean_true_similarity: f64,
    pub mean_twin_similarity: f64,
    pub samples: usize,
    pub head_layer: usize,
}

pub fn twin_margin(
    model: &ToyModel,
    twins: &[TwinScene],
    head_layer: usize,
) -> Result<TwinMarginReport, EvalError> {
    if twins.is_empty() {
        return Err(EvalError::Shape("no twin scenes"));
    }
    let n_p = model.config.patches_per_frame;
    let mut sum_true = 0.0;
    let mut sum_twin = 0.0;
    let mut samples = 0usize;

    for twin in twins {
        let seq = &twin.sequence;
        if seq.patch_grid.0 * seq.patch_grid.1 != n_p {
            return Err(EvalError::Shape("twin sequence patch grid does not match the model"));
        }
        let mut tokens = Vec::with_capacity(seq.token_grids.len() * seq.token_grids[0].len());
        for g in &seq.token_grids {
            tokens.extend_from_slice(g);
        }
        let slots: Vec<usize> = (0..seq.frames.len()).collect();
        let visual = VisualInput { tokens: &tokens, frame_slots: &slots };
        let trace = model.forward_trace(Some(&visual), &[])?;
        let emb = trace
            .head_embeddings
            .iter()
            .find(|(l, _)| *l == head_layer)
            .map(|(_, t)| t)
            .ok_or(EvalError::Shape("no head at this layer"))?;
        let dim = emb.cols;
        let image_size = (seq.frames[0].height, seq.frames[0].width);
        let dot = |r1: usize, r2: usize| -> f64 {
            let (x, y) = (&emb.values[r1 * dim..(r1 + 1) * dim], &emb.values[r2 * dim..(r2 + 1) * dim]);
            x.iter().zip(y).map(|(&a, &b)| a * b).sum()
        };

        for track in &seq.tracks.tracks {
            if twin.surface_of(track.world) != twin.foreground_surface {
                continue;
            }
            let twin_world = track.world.add(twin.cluster_offset);
            for a in 0..seq.frames.len() {
                for b in 0..seq.frames.len() {
                    if a == b || !track.records[a].visible || !track.records[b].visible {
                        continue;
                    }
                    let Ok((pix, _)) = project(&seq.frames[b].camera, twin_world) else {
                        continue;
                    };
                    if pix.0 < 0.0
                        || pix.1 < 0.0
                        || pix.0 >= image_size.1 as f64
                        || pix.1 >= image_size.0 as f64
                    {
                        continue;
                    }
                    let true_patch =
                        patch_index(track.records[b].pixel, image_size, seq.patch_grid);
                    let twin_patch = patch_index(pix, image_size, seq.patch_grid);
                    if twin_patch == true_patch {
                        continue;
                    }
                    let anchor =
                        a * n_p + patch_index(track.records[a].pixel, image_size, seq.patch_grid);
                    sum_true += dot(anchor, b * n_p + true_patch);
                    sum_twin += dot(anchor, b * n_p + twin_patch);
                    samples += 1;
                }
            }
        }
    }
    if samples == 0 {
        return Err(EvalError::Shape("no scored twin anchors"));
    }
    let n = samples as f64;
    Ok(TwinMarginReport {
        mean_margin: (sum_true - sum_twin) / n,
        mean_true_similarity: sum_true / n,
        mean_twin_similarity: sum_twin / n,
        samples,
        head_layer,
    })
}

/// One ablation axis value: overrides either the adapter rank or the set
/// of head layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum AblationSetting {
    LoraRank(usize),
    HeadLayers(Vec<usize>),
}

impl AblationSetting {
    pub fn label(&self) -> String {
        match self {
            AblationSetting::LoraRank(r) => format!("lora_rank={r}"),
            AblationSetting::HeadLayers(ls) => {
                let parts: Vec<String> = ls.iter().map(|l| format!("{l}")).collect();
                format!("head_layers={}", parts.join("+"))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    /// Best head layer's mean held-out accuracy.
    pub avg_pck: f64,
    /// Smoothed correspondence loss at the end of training.
    pub final_l_corr: f64,
}

/// Trains one model per setting (same seed, same data) and scores each on
/// the same held-out set.
#[allow(clippy::too_many_arguments)]
pub fn ablation_sweep(
    settings: &[AblationSetting],
    base_model: &ModelConfig,
    model_seed: u64,
    base_train: &TrainConfig,
    loss_cfg: &LossConfig,
    eval_cfg: &EvalConfig,
    train_data: &[TrainSequence],
    test_data: &[EvalSequence],
    grammar: &SurrogateGrammar,
) -> Result<Vec<AblationRow>, EvalError> {
    if settings.is_empty() {
        return Err(EvalError::Config("no ablation settings"));
    }
    let mut rows = Vec::with_capacity(settings.len());
    for setting in settings {
        let mut model_cfg = base_model.clone();
        let mut train_cfg = base_train.clone();
        match setting {
            AblationSetting::LoraRank(r) => {
                model_cfg.lora_rank = *r;
                train_cfg.lora_rank = *r;
            }
            AblationSetting::HeadLayers(ls) => {
                model_cfg.head_layers = ls.clone();
                train_cfg.head_layers = ls.clone();
            }
        }
        let mut model = init_model(model_cfg, model_seed)?;
        let summary = train(&mut model, train_data, grammar, &train_cfg, loss_cfg, &mut NullObserver)?;
        let corr: Vec<f64> = summary
            .records
            .iter()
            .filter(|r| r.kind == StepKind::Geometric)
            .map(|r| r.l_corr)
            .collect();
        let final_l_corr = ema_series(&corr, 0.9).last().copied().unwrap_or(0.0);
        let report = evaluate(&model, test_data, eval_cfg)?;
        let avg_pck = report
            .head_pck
            .iter()
            .map(|s| s.mean)
            .fold(f64::NEG_INFINITY, f64::max);
        rows.push(AblationRow { label: setting.label(), avg_pck, final_l_corr });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use crate::geometry::SamplingPolicy;
    use crate::rng::rng_from_seed;
    use crate::scenegen::{synthesize_scene, twin_object_scene, SceneSpec, Trajectory};
    use rand::Rng;

    fn tiny_model_config() -> ModelConfig {
        ModelConfig {
            num_layers: 2,
            d_model: 16,
            n_heads: 2,
            d_emb: 4,
            lora_rank: 2,
            lora_alpha: 4.0,
            head_layers: vec![1, 2],
            vocab_size: 8,
            max_frames: 4,
            patches_per_frame: 16,
            feature_dim: 8,
            max_lang_len: 5,
        }
    }

    fn tiny_params() -> RenderParams {
        RenderParams {
            image_height: 16,
            image_width: 16,
            focal: 16.0,
            t_max: 16,
            ..RenderParams::default()
        }
    }

    fn tiny_scene_spec(seed: u64) -> SceneSpec {
        SceneSpec {
            num_surfaces: 3,
            points_per_surface: 300,
            feature_dim: 8,
            occluder_prob: 0.0,
            trajectory: Trajectory::Orbit,
            noise_sigma: 0.01,
            rng_seed: seed,
            ..SceneSpec::default()
        }
    }

    fn tiny_rendered(seed: u64) -> RenderedSequence {
        let params = tiny_params();
        let policy =
            SamplingPolicy { margin: 1.0, seq_len_range: (4, 4), ..SamplingPolicy::default() };
        let scene = synthesize_scene(&tiny_scene_spec(seed)).unwrap();
        render_sequence_helper(&scene, &params, &[0, 1, 2, 3], (4, 4), (4, 4), &policy)
    }

    fn render_sequence_helper(
        scene: &crate::scenegen::Scene,
        params: &RenderParams,
        frames: &[usize],
        patch_grid: (usize, usize),
        track_grid: (usize, usize),
        policy: &SamplingPolicy,
    ) -> RenderedSequence {
        crate::scenegen::render_sequence(scene, params, frames, patch_grid, track_grid, policy)
            .unwrap()
    }

    fn tiny_eval_config() -> EvalConfig {
        EvalConfig {
            query_grid: (4, 4),
            delta_t_range: vec![1, 2, 3],
            num_sequences: 8,
            ..EvalConfig::default()
        }
    }

    fn manual_trace(n_frames: usize, n_p: usize, d_k: usize, heads: usize, seed: u64) -> ForwardTrace {
        let mut rng = rng_from_seed(seed);
        let rows = n_frames * n_p;
        let mk = |rng: &mut crate::rng::DetRng| {
            let values: Vec<f64> = (0..rows * d_k).map(|_| rng.gen_range(-1.0..1.0)).collect();
            Tensor::from_values(rows, d_k, values).unwrap()
        };
        let per_head: Vec<Tensor> = (0..heads).map(|_| mk(&mut rng)).collect();
        ForwardTrace {
            n_visual: rows,
            n_lang: 0,
            visual_hidden: Vec::new(),
            head_embeddings: Vec::new(),
            logits: None,
            queries: vec![per_head.clone()],
            keys: vec![per_head],
        }
    }

    #[test]
    fn self_similarity_has_unit_diagonal_and_bounded_entries() {
        let trace = manual_trace(2, 4, 6, 2, 7);
        for head_average in [true, false] {
            let s = qk_similarity(&trace, 4, 1, 1, 1, head_average).unwrap();
            assert_eq!(s.zero_norm_rows, 0);
            for p in 0..4 {
                assert!((s.get(p, p) - 1.0).abs() < 1e-12, "diag {} = {}", p, s.get(p, p));
            }
            for v in &s.values {
                assert!(*v <= 1.0 + 1e-12 && *v >= -1.0 - 1e-12);
            }
        }
    }

    #[test]
    fn head_average_of_identical_heads_matches_single_head() {
        let one = manual_trace(2, 4, 6, 1, 11);
        let four = ForwardTrace {
            queries: vec![vec![one.queries[0][0].clone(); 4]],
            keys: vec![vec![one.keys[0][0].clone(); 4]],
            ..manual_trace(2, 4, 6, 1, 11)
        };
        let a = qk_similarity(&one, 4, 1, 0, 1, true).unwrap();
        let b = qk_similarity(&four, 4, 1, 0, 1, true).unwrap();
        for (x, y) in a.values.iter().zip(&b.values) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_norm_descriptor_rows_are_flagged_and_inert() {
        let mut trace = manual_trace(2, 4, 3, 1, 21);
        for c in 0..3 {
            let t = &mut trace.queries[0][0];
            let v = t.get(2, c);
            let cols = t.cols;
            t.values[2 * cols + c] = v * 0.0;
        }
        let s = qk_similarity(&trace, 4, 1, 0, 1, true).unwrap();
        assert_eq!(s.zero_norm_rows, 1);
        for c in 0..4 {
            assert_eq!(s.get(2, c), 0.0);
        }
    }

    #[test]
    fn argmax_matches_brute_force_and_breaks_ties_low() {
        let mut rng = rng_from_seed(33);
        for _ in 0..1000 {
            let n = 5;
            let values: Vec<f64> = (0..n * n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let s = SimilarityMatrix { n_rows: n, n_cols: n, values, zero_norm_rows: 0 };
            let rows: Vec<usize> = (0..n).collect();
            let got = argmax_match(&s, &rows);
            for r in 0..n {
                let row = &s.values[r * n..(r + 1) * n];
                let best = row.iter().enumerate().fold((0usize, f64::NEG_INFINITY), |acc, (j, &v)| {
                    if v > acc.1 { (j, v) } else { acc }
                });
                assert_eq!(got[r], best.0);
            }
        }
        let mut values = vec![0.0; 10];
        values[3] = 5.0;
        values[7] = 5.0;
        let s = SimilarityMatrix { n_rows: 1, n_cols: 10, values, zero_norm_rows: 0 };
        assert_eq!(argmax_match(&s, &[0]), vec![3]);
    }

    #[test]
    fn exported_tracks_sit_on_patch_centers() {
        let preds = vec![vec![0usize, 17, 255], vec![255, 0, 17]];
        let tracks = build_tracks(&preds, (16, 16), (256, 256)).unwrap();
        assert_eq!(tracks.len(), 3);
        assert_eq!(tracks[0].len(), 2);
        assert_eq!(tracks[0][0], (8.0, 8.0));
        assert_eq!(tracks[2][0], (248.0, 248.0));
        for p in [0usize, 5, 100, 255] {
            let cell = (p / 16, p % 16);
            let center = cell_center(cell, (256, 256), (16, 16));
            assert_eq!(patch_index(center, (256, 256), (16, 16)), p);
        }
        assert!(matches!(
            build_tracks(&[vec![0], vec![0, 1]], (4, 4), (16, 16)),
            Err(EvalError::Shape(_))
        ));
    }

    #[test]
    fn pck_scores_cell_distance_against_threshold() {
        let grid = (16, 16);
        let (p, flags) = pck(&[34, 35], &[34, 35], grid, 2.0).unwrap();
        assert_eq!(p, 1.0);
        assert!(flags.iter().all(|&f| f));
        // Prediction three columns away: outside delta 2, inside delta 3.
        let (p2, _) = pck(&[37], &[34], grid, 2.0).unwrap();
        assert_eq!(p2, 0.0);
        let (p3, _) = pck(&[37], &[34], grid, 3.0).unwrap();
        assert_eq!(p3, 1.0);
        // Diagonal offset (1,1): distance sqrt(2) < 2.
        let (p4, _) = pck(&[0], &[17], grid, 2.0).unwrap();
        assert_eq!(p4, 1.0);
        assert!(pck(&[], &[], grid, 2.0).is_none());
    }

    #[test]
    fn chance_level_matches_disc_count() {
        assert_eq!(chance_pck((16, 16), 2.0), 13.0 / 256.0);
        assert_eq!(chance_pck((4, 4), 1.0), 5.0 / 16.0);
        let mut rng = rng_from_seed(99);
        let n = 20000;
        let grid = (16, 16);
        let preds: Vec<usize> = (0..n).map(|_| rng.gen_range(0usize..256)).collect();
        // Truth cells stay 2 cells off every edge so the acceptance disc
        // fits in-grid and the closed-form rate is exact.
        let truth: Vec<usize> = (0..n)
            .map(|_| {
                let r = rng.gen_range(2usize..14);
                let c = rng.gen_range(2usize..14);
                r * 16 + c
            })
            .collect();
        let (hit, _) = pck(&preds, &truth, grid, 2.0).unwrap();
        let p = 13.0 / 256.0;
        let sigma = (p * (1.0 - p) / n as f64).sqrt();
        assert!(
            (hit - p).abs() <= 3.0 * sigma,
            "uniform matching rate {hit} outside 3 sigma of {p}"
        );
    }

    #[test]
    fn calibration_correlation_examples() {
        let conf = [0.9, 0.8, 0.2, 0.1];
        let aligned = [true, true, false, false];
        // cov = 0.7, var_c = 0.5, var_y = 1.0 => rho = 0.7 / sqrt(0.5).
        let rho = calibration_rho(&conf, &aligned).unwrap();
        assert!((rho - 0.7 / 0.5f64.sqrt()).abs() < 1e-12, "rho = {rho}");
        let anti: Vec<bool> = aligned.iter().map(|&b| !b).collect();
        let rho2 = calibration_rho(&conf, &anti).unwrap();
        assert!((rho + rho2).abs() < 1e-15);
        assert!(calibration_rho(&[0.5, 0.5], &[true, false]).is_none());
        assert!(calibration_rho(&[0.5], &[true]).is_none());
        let perfect = calibration_rho(&[1.0, 1.0, 0.0, 0.0], &aligned).unwrap();
        assert!((perfect - 1.0).abs() < 1e-12);
    }

    #[test]
    fn robustness_normalizes_by_the_unit_offset() {
        let flat = temporal_robustness(&[(1, 0.5), (2, 0.5), (3, 0.5)]).unwrap();
        assert!(flat.iter().all(|&(_, y)| y == 1.0));
        let decay = temporal_robustness(&[(1, 0.8), (2, 0.4), (4, 0.2)]).unwrap();
        assert_eq!(decay[0], (1, 1.0));
        assert!((decay[1].1 - 0.5).abs() < 1e-15);
        assert!((decay[2].1 - 0.25).abs() < 1e-15);
        assert!(temporal_robustness(&[(2, 0.5)]).is_none());
        assert!(temporal_robustness(&[(1, 0.0), (2, 0.5)]).is_none());
    }

    #[test]
    fn evaluate_reports_both_families_with_expected_shapes() {
        let model = init_model(tiny_model_config(), 5).unwrap();
        let seqs: Vec<EvalSequence> = (0..2)
            .map(|i| {
                EvalSequence::from_rendered(&tiny_rendered(300 + i), &tiny_params(), DataSplit::Test)
            })
            .collect();
        let cfg = tiny_eval_config();
        let report = evaluate(&model, &seqs, &cfg).unwrap();
        assert_eq!(report.qk_pck.len(), 2);
        assert_eq!(report.head_pck.len(), 2);
        assert_eq!(report.qk_pck_by_delta.len(), 2 * 3);
        assert_eq!(report.num_sequences, 2);
        assert_eq!(report.chance_pck, 13.0 / 16.0);
        for s in report.qk_pck.iter().chain(&report.head_pck) {
            assert!(s.mean >= 0.0 && s.mean <= 1.0);
            assert!(s.pooled >= 0.0 && s.pooled <= 1.0);
            assert!(s.sequences > 0);
        }
        if report.robustness_head_defined {
            let first = &report.robustness_head[0];
            assert_eq!(first.delta_t, 1);
            assert_eq!(first.y, Some(1.0));
        }
        if report.robustness_qk_defined {
            assert_eq!(report.robustness_qk[0].y, Some(1.0));
        }
        assert!(report.calibration_qk.len() == 2 && report.calibration_head.len() == 2);
        assert!(report.best_qk_layer >= 1 && report.best_qk_layer <= 2);
    }

    #[test]
    fn evaluate_rejects_leaked_or_mismatched_sequences() {
        let model = init_model(tiny_model_config(), 5).unwrap();
        let train_seq =
            EvalSequence::from_rendered(&tiny_rendered(7), &tiny_params(), DataSplit::Train);
        assert_eq!(
            evaluate(&model, &[train_seq], &tiny_eval_config()),
            Err(EvalError::DatasetLeakage)
        );
        let test_seq =
            EvalSequence::from_rendered(&tiny_rendered(7), &tiny_params(), DataSplit::Test);
        let bad_grid = EvalConfig { query_grid: (8, 8), ..tiny_eval_config() };
        assert!(matches!(
            evaluate(&model, &[test_seq], &bad_grid),
            Err(EvalError::Config(_))
        ));
        let cfg = tiny_eval_config();
        assert!(matches!(evaluate(&model, &[], &cfg), Err(EvalError::Shape(_))));
    }

    #[test]
    fn language_suffix_does_not_perturb_visual_descriptors() {
        let model = init_model(tiny_model_config(), 5).unwrap();
        let seq = EvalSequence::from_rendered(&tiny_rendered(42), &tiny_params(), DataSplit::Test);
        let slots: Vec<usize> = (0..seq.num_frames).collect();
        let visual = VisualInput { tokens: &seq.tokens, frame_slots: &slots };
        let bare = model.forward_trace(Some(&visual), &[]).unwrap();
        let with_lang = model.forward_trace(Some(&visual), &[1, 2, 3]).unwrap();
        for layer in 1..=2 {
            for (a, b) in [(0, 1), (2, 3)] {
                let s1 = qk_similarity(&bare, 16, layer, a, b, true).unwrap();
                let s2 = qk_similarity(&with_lang, 16, layer, a, b, true).unwrap();
                for (x, y) in s1.values.iter().zip(&s2.values) {
                    assert_eq!(x.to_bits(), y.to_bits());
                }
            }
        }
        for &(l, _) in &bare.head_embeddings {
            let h1 = head_similarity(&bare, 16, l, 0, 3).unwrap();
            let h2 = head_similarity(&with_lang, 16, l, 0, 3).unwrap();
            for (x, y) in h1.values.iter().zip(&h2.values) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn ablation_rows_are_labeled_and_deterministic() {
        let grammar = SurrogateGrammar::new(8, 17).unwrap();
        let params = tiny_params();
        let mut lang_rng = rng_from_seed(4242);
        let train_data: Vec<TrainSequence> = (0..2)
            .map(|i| {
                let lang = grammar.sample_sentence(5, &mut lang_rng).unwrap();
                TrainSequence::from_rendered(&tiny_rendered(500 + i), &params, lang)
            })
            .collect();
        let test_data: Vec<EvalSequence> = (0..2)
            .map(|i| {
                EvalSequence::from_rendered(&tiny_rendered(600 + i), &params, DataSplit::Test)
            })
            .collect();
        let train_cfg = TrainConfig {
            peak_lr: 1e-3,
            epochs: 1,
            batch_size: 2,
            lora_rank: 2,
            head_layers: vec![1, 2],
            frames_per_step: 2,
            ..TrainConfig::default()
        };
        let settings =
            [AblationSetting::LoraRank(1), AblationSetting::HeadLayers(vec![2])];
        let run = || {
            ablation_sweep(
                &settings,
                &tiny_model_config(),
                5,
                &train_cfg,
                &LossConfig::default(),
                &tiny_eval_config(),
                &train_data,
                &test_data,
                &grammar,
            )
            .unwrap()
        };
        let rows = run();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].label, "lora_rank=1");
        assert_eq!(rows[1].label, "head_layers=2");
        for r in &rows {
            assert!(r.avg_pck >= 0.0 && r.avg_pck <= 1.0);
            assert!(r.final_l_corr.is_finite());
        }
        let rows2 = run();
        for (a, b) in rows.iter().zip(&rows2) {
            assert_eq!(a.avg_pck.to_bits(), b.avg_pck.to_bits());
            assert_eq!(a.final_l_corr.to_bits(), b.final_l_corr.to_bits());
        }
        assert!(matches!(
            ablation_sweep(
                &[],
                &tiny_model_config(),
                5,
                &train_cfg,
                &LossConfig::default(),
                &tiny_eval_config(),
                &train_data,
                &test_data,
                &grammar,
            ),
            Err(EvalError::Config(_))
        ));
    }

    #[test]
    fn twin_margin_scores_foreground_anchors() {
        let model = init_model(tiny_model_config(), 5).unwrap();
        let params = tiny_params();
        let policy =
            SamplingPolicy { margin: 1.0, seq_len_range: (4, 4), ..SamplingPolicy::default() };
        let twin = twin_object_scene(
            &tiny_scene_spec(910),
            &params,
            &[0, 1, 2, 3],
            (4, 4),
            (4, 4),
            &policy,
        )
        .unwrap();
        let report = twin_margin(&model, core::slice::from_ref(&twin), 2).unwrap();
        assert!(report.samples > 0);
        assert!(report.mean_margin.is_finite());
        assert!(report.mean_true_similarity.is_finite());
        assert!(report.mean_twin_similarity.is_finite());
        assert_eq!(report.head_layer, 2);
        assert!(matches!(twin_margin(&model, &[], 2), Err(EvalError::Shape(_))));
    }
}
