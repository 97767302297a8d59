//! Training objective: contrastive patch correspondence, soft-matched
//! expected depth with a scale-invariant consistency penalty, a
//! next-token language term, and their weighted sum.
//!
//! The contrastive term treats, for each tracked point visible in two
//! frames, the embedding of its patch in the first frame as the anchor
//! and the embedding of its patch in the second frame as the positive;
//! every other patch of every forwarded frame is a negative, except the
//! anchor patch itself. The depth term reuses the same similarity rows
//! restricted to the target frame: their softmax is a soft matching
//! distribution whose expectation over pooled patch depths should
//! reproduce the tracked point's depth.
//!
//! All loss builders append to an existing tape so gradients flow back
//! into the embeddings through a single `backward`.

use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{DiffError, NodeRef, Tape};
use crate::geometry::{patch_index, TrackSet};
use crate::scalar;

/// Additive score that removes a candidate from a softmax exactly (its
/// exponential underflows to zero).
const EXCLUDE: f64 = -1e30;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LossError {
    #[error("correspondence batch is empty")]
    EmptyBatch,
    #[error("temperature must be positive")]
    InvalidTemperature,
    #[error("invalid loss config: {0}")]
    Config(&'static str),
    #[error("shape error: {0}")]
    Shape(&'static str),
    #[error("non-finite loss component {0}")]
    NonFiniteLoss(&'static str),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub temperature: f64,
    pub lambda_c: f64,
    pub lambda_d: f64,
    /// Stabilizer in the depth ratio denominator.
    pub depth_epsilon: f64,
    /// Tracks seen in fewer forwarded frames contribute no anchors.
    pub min_visible_frames: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            temperature: 0.07,
            lambda_c: 0.3,
            lambda_d: 1.0,
            depth_epsilon: 1e-6,
            min_visible_frames: 2,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        if self.temperature <= 0.0 {
            return Err(LossError::InvalidTemperature);
        }
        if self.lambda_c < 0.0 || self.lambda_d < 0.0 {
            return Err(LossError::Config("loss weights must be non-negative"));
        }
        if self.depth_epsilon <= 0.0 {
            return Err(LossError::Config("depth_epsilon must be positive"));
        }
        if self.min_visible_frames < 2 {
            return Err(LossError::Config("min_visible_frames must be at least 2"));
        }
        Ok(())
    }
}

/// Anchor/positive/candidate bookkeeping for one forwarded sequence.
///
/// Embedding rows are frame-major: row = forwarded-frame index *
/// patches_per_frame + patch. The depth side is a subset of the anchor
/// list: only anchors whose target frame has a valid tracked depth and
/// at least one valid pooled candidate depth.
#[derive(Debug, Clone, Default)]
pub struct CorrespondenceBatch {
    pub patches_per_frame: usize,
    pub n_frames: usize,
    /// Embedding row of each anchor.
    pub anchor_rows: Vec<usize>,
    /// Embedding row of each anchor's positive.
    pub positive_rows: Vec<usize>,
    /// Indices into the anchor list that also carry a depth target.
    pub depth_anchors: Vec<usize>,
    /// Forwarded-frame index of each depth anchor's target frame.
    pub depth_target_frames: Vec<usize>,
    /// Tracked depth of each depth anchor in its target frame.
    pub depth_gt: Vec<f64>,
    /// Pooled per-patch depths of every forwarded frame, frame-major;
    /// entries paired with `candidate_valid`.
    pub candidate_depths: Vec<f64>,
    pub candidate_valid: Vec<bool>,
}

impl CorrespondenceBatch {
    pub fn num_anchors(&self) -> usize {
        self.anchor_rows.len()
    }

    pub fn num_depth_anchors(&self) -> usize {
        self.depth_anchors.len()
    }

    pub fn num_visual_rows(&self) -> usize {
        self.n_frames * self.patches_per_frame
    }
}

/// Builds the batch for one sequence from its tracks and pooled patch
/// depths. `forwarded` lists the sequence-frame positions included in the
/// forward pass, in the order their rows appear in the embedding matrix.
/// Anchors are all ordered pairs of distinct forwarded frames in which a
/// track is visible.
pub fn build_correspondence_batch(
    tracks: &TrackSet,
    patch_depths: &[Vec<f64>],
    forwarded: &[usize],
    patch_grid: (usize, usize),
    image_size: (usize, usize),
    cfg: &LossConfig,
) -> Result<CorrespondenceBatch, LossError> {
    build_correspondence_batch_multi(&[tracks], patch_depths, forwarded, patch_grid, image_size, cfg)
}

/// Same as [`build_correspondence_batch`] but pools anchors from several
/// track sets over the same frames (for example a coarse and a fine query
/// grid of the same rendered sequence).
pub fn build_correspondence_batch_multi(
    track_sets: &[&TrackSet],
    patch_depths: &[Vec<f64>],
    forwarded: &[usize],
    patch_grid: (usize, usize),
    image_size: (usize, usize),
    cfg: &LossConfig,
) -> Result<CorrespondenceBatch, LossError> {
    cfg.validate()?;
    if forwarded.is_empty() {
        return Err(LossError::Shape("no forwarded frames"));
    }
    if track_sets.is_empty() {
        return Err(LossError::Shape("no track sets"));
    }
    let num_frames = track_sets.iter().map(|t| t.num_frames).min().unwrap();
    if forwarded.iter().any(|&f| f >= num_frames || f >= patch_depths.len()) {
        return Err(LossError::Shape("forwarded frame beyond sequence"));
    }
    let n_p = patch_grid.0 * patch_grid.1;
    if patch_depths.iter().any(|d| d.len() != n_p) {
        return Err(LossError::Shape("patch depth table does not match grid"));
    }

    let mut batch = CorrespondenceBatch {
        patches_per_frame: n_p,
        n_frames: forwarded.len(),
        ..CorrespondenceBatch::default()
    };
    for &f in forwarded {
        for p in 0..n_p {
            let d = patch_depths[f][p];
            batch.candidate_depths.push(d);
            batch.candidate_valid.push(d > 0.0);
        }
    }

    for track in track_sets.iter().flat_map(|t| &t.tracks) {
        // (forwarded index, patch on the model grid, depth) per visible frame.
        let mut seen: Vec<(usize, usize, f64)> = Vec::new();
        for (fi, &f) in forwarded.iter().enumerate() {
            let rec = &track.records[f];
            if rec.visible {
                let patch = patch_index(rec.pixel, image_size, patch_grid);
                seen.push((fi, patch, rec.depth));
            }
        }
        if seen.len() < cfg.min_visible_frames {
            continue;
        }
        for &(fa, pa, _) in &seen {
            for &(fb, pb, depth_b) in &seen {
                if fa == fb {
                    continue;
                }
                let anchor_row = fa * n_p + pa;
                let positive_row = fb * n_p + pb;
                let anchor_idx = batch.anchor_rows.len();
                batch.anchor_rows.push(anchor_row);
                batch.positive_rows.push(positive_row);
                let block = &batch.candidate_valid[fb * n_p..(fb + 1) * n_p];
                if depth_b > 0.0 && block.iter().any(|&v| v) {
                    batch.depth_anchors.push(anchor_idx);
                    batch.depth_target_frames.push(fb);
                    batch.depth_gt.push(depth_b);
                }
            }
        }
    }
    Ok(batch)
}

/// Soft matching distribution over candidates: softmax of cosine
/// similarity divided by temperature. Plain-value twin of the on-tape
/// computation, used by evaluation and as a test oracle.
pub fn soft_matching(
    anchor: &[f64],
    candidates: &[Vec<f64>],
    temperature: f64,
) -> Result<Vec<f64>, LossError> {
    if temperature <= 0.0 {
        return Err(LossError::InvalidTemperature);
    }
    if candidates.is_empty() {
        return Err(LossError::Shape("no candidates"));
    }
    let scaled: Vec<f64> = candidates
        .iter()
        .map(|c| {
            debug_assert_eq!(c.len(), anchor.len());
            let dot: f64 = anchor.iter().zip(c).map(|(&a, &b)| a * b).sum();
            dot / temperature
        })
        .collect();
    let lse = scalar::log_sum_exp(&scaled);
    Ok(scaled.iter().map(|&s| scalar::exp(s - lse)).collect())
}

/// Expectation of candidate depths under a matching row, renormalized
/// over the valid candidates. `None` when no candidate depth is valid.
pub fn expected_depth(matching: &[f64], depths: &[f64], valid: &[bool]) -> Option<f64> {
    debug_assert_eq!(matching.len(), depths.len());
    debug_assert_eq!(matching.len(), valid.len());
    let mut mass = 0.0;
    let mut acc = 0.0;
    for ((&a, &d), &ok) in matching.iter().zip(depths).zip(valid) {
        if ok {
            mass += a;
            acc += a * d;
        }
    }
    if mass > 0.0 {
        Some(acc / mass)
    } else {
        None
    }
}

/// Mean relative depth discrepancy `|d - d_hat| / (d + d_hat + eps)` over
/// the valid entries. Plain-value oracle for the on-tape loss.
pub fn depth_loss(d_gt: &[f64], d_hat: &[f64], valid: &[bool], epsilon: f64) -> f64 {
    debug_assert_eq!(d_gt.len(), d_hat.len());
    let mut n = 0usize;
    let mut acc = 0.0;
    for ((&d, &dh), &ok) in d_gt.iter().zip(d_hat).zip(valid) {
        if ok {
            acc += scalar::abs(d - dh) / (d + dh + epsilon);
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        acc / n as f64
    }
}

/// Tape nodes for the geometric losses of one sequence.
#[derive(Debug)]
pub struct GeometricLossNodes {
    pub l_corr: NodeRef,
    /// Absent when no anchor carried a valid depth target.
    pub l_depth: Option<NodeRef>,
    /// `(layer, per-layer contrastive loss)` breakdown.
    pub per_layer_corr: Vec<(usize, NodeRef)>,
    pub n_anchors: usize,
    pub n_depth_anchors: usize,
}

/// Appends the contrastive and depth losses for every head layer to the
/// tape. `embeddings` pairs each head layer with its L2-normalized
/// embedding node (`num_visual_rows x d_emb`); per-layer losses are
/// averaged so the weights keep their meaning regardless of how many
/// layers carry heads.
pub fn correspondence_losses(
    tape: &mut Tape,
    batch: &CorrespondenceBatch,
    embeddings: &[(usize, NodeRef)],
    cfg: &LossConfig,
) -> Result<GeometricLossNodes, LossError> {
    cfg.validate()?;
    if batch.num_anchors() == 0 {
        return Err(LossError::EmptyBatch);
    }
    if embeddings.is_empty() {
        return Err(LossError::Shape("no embedding layers"));
    }
    let n_rows = batch.num_visual_rows();
    let n_anchor = batch.num_anchors();
    let n_p = batch.patches_per_frame;

    // Self-exclusion mask shared by every layer: one entry per anchor row.
    let mut self_mask = vec![0.0; n_anchor * n_rows];
    for (i, &row) in batch.anchor_rows.iter().enumerate() {
        self_mask[i * n_rows + row] = EXCLUDE;
    }
    let self_mask = tape.input_from(n_anchor, n_rows, self_mask)?;
    let positive_coords: Vec<(usize, usize)> = batch
        .positive_rows
        .iter()
        .enumerate()
        .map(|(i, &row)| (i, row))
        .collect();

    let n_depth = batch.num_depth_anchors();
    let depth_inputs = if n_depth > 0 {
        // Restrict each depth anchor's row to the valid candidates of its
        // target frame.
        let mut block_mask = vec![EXCLUDE; n_depth * n_rows];
        for (i, (&fb, _)) in batch
            .depth_target_frames
            .iter()
            .zip(&batch.depth_gt)
            .enumerate()
        {
            for p in 0..n_p {
                let col = fb * n_p + p;
                if batch.candidate_valid[col] {
                    block_mask[i * n_rows + col] = 0.0;
                }
            }
        }
        let block_mask = tape.input_from(n_depth, n_rows, block_mask)?;
        let depth_col = tape.input_from(n_rows, 1, batch.candidate_depths.clone())?;
        let gt_col = tape.input_from(n_depth, 1, batch.depth_gt.clone())?;
        Some((block_mask, depth_col, gt_col))
    } else {
        None
    };

    let inv_layers = 1.0 / embeddings.len() as f64;
    let mut per_layer_corr = Vec::with_capacity(embeddings.len());
    let mut corr_sum: Option<NodeRef> = None;
    let mut depth_sum: Option<NodeRef> = None;

    for &(layer, emb) in embeddings {
        let anchors = tape.gather_rows(emb, &batch.anchor_rows)?;
        let sims = tape.matmul_nt(anchors, emb)?;
        let sims = tape.scale(sims, 1.0 / cfg.temperature)?;
        let masked = tape.add(sims, self_mask)?;
        let lse = tape.row_log_sum_exp(masked)?;
        let pos = tape.gather_entries(masked, &positive_coords)?;
        let nll = tape.sub(lse, pos)?;
        let l_layer = tape.mean(nll)?;
        per_layer_corr.push((layer, l_layer));
        corr_sum = Some(match corr_sum {
            Some(acc) => tape.add(acc, l_layer)?,
            None => l_layer,
        });

        if let Some((block_mask, depth_col, gt_col)) = depth_inputs {
            // Reuse the similarity rows of the depth anchors; the
            // self-exclusion entry lies in the anchor's own frame, which
            // the target-frame mask removes anyway.
            let depth_sims = tape.gather_rows(masked, &batch.depth_anchors)?;
            let restricted = tape.add(depth_sims, block_mask)?;
            let matching = tape.softmax(restricted)?;
            let d_hat = tape.matmul(matching, depth_col)?;
            let diff = tape.sub(gt_col, d_hat)?;
            let num = tape.abs(diff)?;
            let den = tape.add(gt_col, d_hat)?;
            let den = tape.add_scalar(den, cfg.depth_epsilon)?;
            let ratio = tape.div(num, den)?;
            let l_layer_depth = tape.mean(ratio)?;
            depth_sum = Some(match depth_sum {
                Some(acc) => tape.add(acc, l_layer_depth)?,
                None => l_layer_depth,
            });
        }
    }

    let l_corr = tape.scale(corr_sum.expect("at least one layer"), inv_layers)?;
    let l_depth = match depth_sum {
        Some(acc) => Some(tape.scale(acc, inv_layers)?),
        None => None,
    };
    Ok(GeometricLossNodes {
        l_corr,
        l_depth,
        per_layer_corr,
        n_anchors: n_anchor,
        n_depth_anchors: n_depth,
    })
}

/// Mean next-token cross-entropy of the language positions. `targets[i]`
/// is the token that should follow position `i`.
pub fn surrogate_lm_loss(
    tape: &mut Tape,
    logits: NodeRef,
    targets: &[u32],
) -> Result<NodeRef, LossError> {
    let (rows, cols) = {
        let t = tape.value(logits);
        (t.rows, t.cols)
    };
    if targets.len() != rows {
        return Err(LossError::Shape("target count does not match logit rows"));
    }
    if rows == 0 {
        return Err(LossError::Shape("no logit rows"));
    }
    if targets.iter().any(|&t| t as usize >= cols) {
        return Err(LossError::Shape("target id beyond vocabulary"));
    }
    let coords: Vec<(usize, usize)> = targets
        .iter()
        .enumerate()
        .map(|(i, &t)| (i, t as usize))
        .collect();
    let lse = tape.row_log_sum_exp(logits)?;
    let picked = tape.gather_entries(logits, &coords)?;
    let nll = tape.sub(lse, picked)?;
    Ok(tape.mean(nll)?)
}

/// Components and weights of one step's objective, serialized into the
/// training log.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossReport {
    pub l_lm: f64,
    pub l_corr: f64,
    pub l_depth: f64,
    pub lambda_c: f64,
    pub lambda_d: f64,
    pub total: f64,
    pub n_anchors: usize,
    pub n_depth_anchors: usize,
    /// True when the depth term was dropped for lack of valid anchors.
    pub depth_skipped: bool,
}

/// Weighted total `L_LM + lambda_c * L_corr + lambda_d * L_depth`.
/// Components may be absent (a language-only or vision-only step); a
/// zero weight skips its term entirely so the remaining components pass
/// through exactly.
pub fn total_loss(
    tape: &mut Tape,
    l_lm: Option<NodeRef>,
    geometric: Option<&GeometricLossNodes>,
    cfg: &LossConfig,
) -> Result<(NodeRef, LossReport), LossError> {
    cfg.validate()?;
    let mut report = LossReport {
        l_lm: 0.0,
        l_corr: 0.0,
        l_depth: 0.0,
        lambda_c: cfg.lambda_c,
        lambda_d: cfg.lambda_d,
        total: 0.0,
        n_anchors: 0,
        n_depth_anchors: 0,
        depth_skipped: false,
    };
    let mut total: Option<NodeRef> = None;
    let mut push = |tape: &mut Tape, node: NodeRef| -> Result<(), LossError> {
        total = Some(match total {
            Some(acc) => tape.add(acc, node)?,
            None => node,
        });
        Ok(())
    };

    if let Some(lm) = l_lm {
        let v = tape.scalar_value(lm)?;
        if !v.is_finite() {
            return Err(LossError::NonFiniteLoss("l_lm"));
        }
        report.l_lm = v;
        push(tape, lm)?;
    }
    if let Some(geom) = geometric {
        report.n_anchors = geom.n_anchors;
        report.n_depth_anchors = geom.n_depth_anchors;
        let corr_v = tape.scalar_value(geom.l_corr)?;
        if !corr_v.is_finite() {
            return Err(LossError::NonFiniteLoss("l_corr"));
        }
        report.l_corr = corr_v;
        if cfg.lambda_c > 0.0 {
            let weighted = tape.scale(geom.l_corr, cfg.lambda_c)?;
            push(tape, weighted)?;
        }
        match geom.l_depth {
            Some(depth) => {
                let depth_v = tape.scalar_value(depth)?;
                if !depth_v.is_finite() {
                    return Err(LossError::NonFiniteLoss("l_depth"));
                }
                report.l_depth = depth_v;
                if cfg.lambda_d > 0.0 {
                    let weighted = tape.scale(depth, cfg.lambda_d)?;
                    push(tape, weighted)?;
                }
            }
            None => report.depth_skipped = true,
        }
    }
    let total = total.ok_or(LossError::Shape("no loss components"))?;
    let v = tape.scalar_value(total)?;
    if !v.is_finite() {
        return Err(LossError::NonFiniteLoss("total"));
    }
    report.total = v;
    Ok((total, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{ParamGroup, ParamMeta, ParamStore, Tensor};
    use crate::rng::rng_from_seed;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn tiny_batch(anchor_rows: Vec<usize>, positive_rows: Vec<usize>, n_rows: usize) -> CorrespondenceBatch {
        CorrespondenceBatch {
            patches_per_frame: n_rows,
            n_frames: 1,
            anchor_rows,
            positive_rows,
            ..CorrespondenceBatch::default()
        }
    }

    fn corr_only(
        emb_rows: Vec<Vec<f64>>,
        batch: &CorrespondenceBatch,
        temperature: f64,
    ) -> f64 {
        let mut tape = Tape::new();
        let dim = emb_rows[0].len();
        let flat: Vec<f64> = emb_rows.iter().flatten().copied().collect();
        let e = tape.input_from(emb_rows.len(), dim, flat).unwrap();
        let cfg = LossConfig { temperature, ..LossConfig::default() };
        let nodes = correspondence_losses(&mut tape, batch, &[(1, e)], &cfg).unwrap();
        tape.scalar_value(nodes.l_corr).unwrap()
    }

    #[test]
    fn uniform_candidates_give_log_n() {
        // Anchor orthogonal to four identical candidates: all similarities
        // equal, so the loss is exactly ln 4.
        let rows = vec![
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![0.0, 1.0],
            vec![0.0, 1.0],
            vec![0.0, 1.0],
        ];
        let batch = tiny_batch(vec![0], vec![1], 5);
        let l = corr_only(rows, &batch, 0.07);
        assert!(scalar::abs(l - 1.3862943611198906) < 1e-12, "{l}");
    }

    #[test]
    fn single_negative_hand_value() {
        // Positive identical to the anchor, one orthogonal negative,
        // temperature 1: loss is ln(1 + e^-1).
        let rows = vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]];
        let batch = tiny_batch(vec![0], vec![1], 3);
        let l = corr_only(rows, &batch, 1.0);
        assert!(scalar::abs(l - 0.31326168751822286) < 1e-12, "{l}");
    }

    #[test]
    fn well_separated_embeddings_drive_loss_to_zero() {
        let rows = vec![
            vec![1.0, 0.0],
            vec![1.0, 0.0],
            vec![-1.0, 0.0],
            vec![-1.0, 0.0],
            vec![-1.0, 0.0],
        ];
        let batch = tiny_batch(vec![0], vec![1], 5);
        let l = corr_only(rows, &batch, 0.07);
        assert!(l >= 0.0);
        assert!(l < 1e-10, "{l}");
    }

    #[test]
    fn empty_batch_and_bad_temperature_error() {
        let mut tape = Tape::new();
        let e = tape.input_from(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let batch = tiny_batch(vec![], vec![], 2);
        let cfg = LossConfig::default();
        assert_eq!(
            correspondence_losses(&mut tape, &batch, &[(1, e)], &cfg).unwrap_err(),
            LossError::EmptyBatch
        );
        let batch = tiny_batch(vec![0], vec![1], 2);
        let bad = LossConfig { temperature: 0.0, ..LossConfig::default() };
        assert_eq!(
            correspondence_losses(&mut tape, &batch, &[(1, e)], &bad).unwrap_err(),
            LossError::InvalidTemperature
        );
    }

    #[test]
    fn soft_matching_uniform_and_normalized() {
        let anchor = vec![1.0, 0.0];
        let cands = vec![vec![0.0, 1.0]; 4];
        let a = soft_matching(&anchor, &cands, 0.07).unwrap();
        for &p in &a {
            assert!(scalar::abs(p - 0.25) < 1e-14);
        }

        let mut rng = rng_from_seed(40);
        for _ in 0..20 {
            let anchor: Vec<f64> = (0..6).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let cands: Vec<Vec<f64>> = (0..9)
                .map(|_| (0..6).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
                .collect();
            let a = soft_matching(&anchor, &cands, 0.3).unwrap();
            let s: f64 = a.iter().sum();
            assert!(scalar::abs(s - 1.0) < 1e-12);
        }
    }

    #[test]
    fn soft_matching_sharpens_with_small_temperature() {
        // Similarity gap 1.0 at temperature 0.01: the winner takes
        // essentially all mass.
        let anchor = vec![1.0, 0.0];
        let cands = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, -1.0]];
        let a = soft_matching(&anchor, &cands, 0.01).unwrap();
        assert!(a[0] > 0.999, "{:?}", a);
    }

    #[test]
    fn expected_depth_basics() {
        let uniform = vec![0.25; 4];
        let depths = vec![1.0, 2.0, 3.0, 4.0];
        let valid = vec![true; 4];
        let d = expected_depth(&uniform, &depths, &valid).unwrap();
        assert!(scalar::abs(d - 2.5) < 1e-14);

        let onehot = vec![0.0, 1.0, 0.0];
        let d2 = expected_depth(&onehot, &[5.0, 7.0, 9.0], &[true; 3]).unwrap();
        assert!(scalar::abs(d2 - 7.0) < 1e-14);

        assert!(expected_depth(&uniform, &depths, &[false; 4]).is_none());

        let mut rng = rng_from_seed(41);
        for _ in 0..30 {
            let raw: Vec<f64> = (0..5).map(|_| rng.gen_range(0.0..1.0)).collect();
            let s: f64 = raw.iter().sum();
            let a: Vec<f64> = raw.iter().map(|&x| x / s).collect();
            let depths: Vec<f64> = (0..5).map(|_| rng.gen_range(0.5..9.0)).collect();
            let d = expected_depth(&a, &depths, &[true; 5]).unwrap();
            let lo = depths.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = depths.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert!(d >= lo - 1e-12 && d <= hi + 1e-12);
        }
    }

    #[test]
    fn depth_loss_values_and_scale_invariance() {
        assert_eq!(depth_loss(&[2.0, 3.0], &[2.0, 3.0], &[true, true], 0.0), 0.0);
        let half = depth_loss(&[1.0], &[3.0], &[true], 0.0);
        assert!(scalar::abs(half - 0.5) < 1e-15, "{half}");

        let mut rng = rng_from_seed(42);
        let d: Vec<f64> = (0..16).map(|_| rng.gen_range(0.5..8.0)).collect();
        let dh: Vec<f64> = (0..16).map(|_| rng.gen_range(0.5..8.0)).collect();
        let valid = vec![true; 16];
        let base = depth_loss(&d, &dh, &valid, 0.0);
        let d10: Vec<f64> = d.iter().map(|&x| 10.0 * x).collect();
        let dh10: Vec<f64> = dh.iter().map(|&x| 10.0 * x).collect();
        let scaled = depth_loss(&d10, &dh10, &valid, 0.0);
        assert!(scalar::abs(base - scaled) < 1e-12);

        assert_eq!(depth_loss(&[], &[], &[], 1e-6), 0.0);
    }

    #[test]
    fn lm_loss_uniform_and_confident() {
        let mut tape = Tape::new();
        let logits = tape.input_from(3, 32, vec![0.0; 96]).unwrap();
        let l = surrogate_lm_loss(&mut tape, logits, &[5, 0, 31]).unwrap();
        let v = tape.scalar_value(l).unwrap();
        assert!(scalar::abs(v - 3.4657359027997265) < 1e-12, "{v}");

        let mut confident = vec![0.0; 2 * 8];
        confident[3] = 50.0;
        confident[8 + 6] = 50.0;
        let mut tape2 = Tape::new();
        let logits2 = tape2.input_from(2, 8, confident).unwrap();
        let l2 = surrogate_lm_loss(&mut tape2, logits2, &[3, 6]).unwrap();
        let v2 = tape2.scalar_value(l2).unwrap();
        assert!(v2 >= 0.0 && v2 < 1e-10, "{v2}");

        let mut tape3 = Tape::new();
        let logits3 = tape3.input_from(2, 8, vec![0.0; 16]).unwrap();
        assert!(matches!(
            surrogate_lm_loss(&mut tape3, logits3, &[1]),
            Err(LossError::Shape(_))
        ));
    }

    #[test]
    fn total_loss_arithmetic_and_report() {
        let cfg = LossConfig { lambda_c: 0.3, lambda_d: 1.0, ..LossConfig::default() };
        let mut tape = Tape::new();
        let lm = tape.scalar_input(1.0).unwrap();
        let corr = tape.scalar_input(2.0).unwrap();
        let depth = tape.scalar_input(0.5).unwrap();
        let geom = GeometricLossNodes {
            l_corr: corr,
            l_depth: Some(depth),
            per_layer_corr: vec![(1, corr)],
            n_anchors: 10,
            n_depth_anchors: 4,
        };
        let (node, report) = total_loss(&mut tape, Some(lm), Some(&geom), &cfg).unwrap();
        let v = tape.scalar_value(node).unwrap();
        assert!(scalar::abs(v - 2.1) < 1e-15, "{v}");
        let resum = report.l_lm + report.lambda_c * report.l_corr + report.lambda_d * report.l_depth;
        assert!(scalar::abs(resum - report.total) < 1e-15);
        assert_eq!(report.n_anchors, 10);
        assert!(!report.depth_skipped);

        // Zero weights pass the language term through bit-exactly.
        let zero = LossConfig { lambda_c: 0.0, lambda_d: 0.0, ..LossConfig::default() };
        let mut tape2 = Tape::new();
        let lm2 = tape2.scalar_input(0.123456789).unwrap();
        let corr2 = tape2.scalar_input(9.0).unwrap();
        let geom2 = GeometricLossNodes {
            l_corr: corr2,
            l_depth: None,
            per_layer_corr: vec![(1, corr2)],
            n_anchors: 1,
            n_depth_anchors: 0,
        };
        let (node2, report2) = total_loss(&mut tape2, Some(lm2), Some(&geom2), &zero).unwrap();
        assert_eq!(tape2.scalar_value(node2).unwrap(), 0.123456789);
        assert!(report2.depth_skipped);
    }

    #[test]
    fn depth_gradients_reach_embeddings() {
        // Two frames of two patches each; anchor in frame 0 tracks to
        // frame 1. Candidate depths differ, so the depth loss must push
        // on the embeddings.
        let mut store = ParamStore::new();
        let vals = vec![
            1.0, 0.0, // frame 0 patch 0 (anchor)
            0.0, 1.0, // frame 0 patch 1
            0.8, 0.2, // frame 1 patch 0 (positive)
            -0.3, 0.9, // frame 1 patch 1
        ];
        let id = store
            .register(
                "emb",
                Tensor::from_values(4, 2, vals).unwrap(),
                ParamMeta { group: ParamGroup::Head, weight_decay: false },
            )
            .unwrap();
        let batch = CorrespondenceBatch {
            patches_per_frame: 2,
            n_frames: 2,
            anchor_rows: vec![0],
            positive_rows: vec![2],
            depth_anchors: vec![0],
            depth_target_frames: vec![1],
            depth_gt: vec![2.0],
            candidate_depths: vec![1.5, 2.5, 1.0, 4.0],
            candidate_valid: vec![true, true, true, true],
            ..CorrespondenceBatch::default()
        };
        let cfg = LossConfig::default();
        let mut tape = Tape::new();
        let e_raw = tape.param(&store, id).unwrap();
        let e = tape.l2_normalize_rows(e_raw).unwrap();
        let nodes = correspondence_losses(&mut tape, &batch, &[(1, e)], &cfg).unwrap();
        let l_depth = nodes.l_depth.expect("depth anchors present");
        tape.backward(l_depth).unwrap();
        let g = tape.param_grad(id).unwrap();
        assert!(g.iter().any(|&x| scalar::abs(x) > 1e-9), "{:?}", g);
    }

    #[test]
    fn mid_confidence_predictions_get_the_largest_depth_gradients() {
        // Two candidates with depths 1 and 3, ground truth at the first:
        // sweep the score gap, measure |dL/ds| numerically, and find its
        // peak near a 50/50 matching.
        let tau = 0.07;
        let depths = vec![1.0, 3.0];
        let valid = vec![true, true];
        let loss_of = |s: f64| -> (f64, f64) {
            // Embeddings chosen so similarity gap equals s exactly is
            // awkward; drive the softmax directly instead.
            let logits = [s / tau, 0.0];
            let lse = scalar::log_sum_exp(&logits);
            let a: Vec<f64> = logits.iter().map(|&x| scalar::exp(x - lse)).collect();
            let d_hat = expected_depth(&a, &depths, &valid).unwrap();
            (depth_loss(&[1.0], &[d_hat], &[true], 0.0), a[0])
        };
        let h = 1e-6;
        let mut best_slope = 0.0f64;
        let mut best_a = 0.0f64;
        let mut extreme_slope = 0.0f64;
        for i in 0..400 {
            let s = -0.6 + 1.2 * (i as f64) / 399.0;
            let (up, _) = loss_of(s + h);
            let (down, _) = loss_of(s - h);
            let (_, a) = loss_of(s);
            let slope = scalar::abs((up - down) / (2.0 * h));
            if slope > best_slope {
                best_slope = slope;
                best_a = a;
            }
            if !(0.03..=0.97).contains(&a) {
                extreme_slope = extreme_slope.max(slope);
            }
        }
        assert!(
            (0.3..=0.7).contains(&best_a),
            "peak gradient at matching weight {best_a}"
        );
        assert!(extreme_slope < best_slope / 3.0);
    }

    #[test]
    fn batch_builder_maps_tracks_to_rows() {
        use crate::geometry::{Track, TrackRecord};
        use crate::linalg::Vec3;
        // Two frames, 2x2 patch grid on a 4x4 image. One track visible in
        // both frames, one visible only in the first.
        let rec = |u: f64, v: f64, depth: f64, visible: bool| TrackRecord {
            pixel: (u, v),
            patch: 0,
            depth,
            visible,
        };
        let tracks = TrackSet {
            query_grid: (2, 2),
            num_frames: 2,
            tracks: vec![
                Track {
                    seed_cell: 0,
                    world: Vec3::new(0.0, 0.0, 1.0),
                    records: vec![rec(0.5, 0.5, 2.0, true), rec(3.5, 3.5, 3.0, true)],
                },
                Track {
                    seed_cell: 1,
                    world: Vec3::new(0.0, 0.0, 1.0),
                    records: vec![rec(2.5, 0.5, 2.0, true), rec(0.0, 0.0, 0.0, false)],
                },
            ],
        };
        let patch_depths = vec![vec![2.0, 1.8, 0.0, 2.2], vec![0.0, 0.0, 0.0, 3.1]];
        let cfg = LossConfig::default();
        let batch = build_correspondence_batch(
            &tracks,
            &patch_depths,
            &[0, 1],
            (2, 2),
            (4, 4),
            &cfg,
        )
        .unwrap();
        // Only the first track produces pairs: (frame0 -> frame1) and
        // (frame1 -> frame0). Patch of (0.5,0.5) is 0; (3.5,3.5) is 3.
        assert_eq!(batch.anchor_rows, vec![0, 4 + 3]);
        assert_eq!(batch.positive_rows, vec![4 + 3, 0]);
        // Depth side: both directions valid; frame 1 has one valid
        // candidate depth, frame 0 has three.
        assert_eq!(batch.depth_anchors, vec![0, 1]);
        assert_eq!(batch.depth_target_frames, vec![1, 0]);
        assert_eq!(batch.depth_gt, vec![3.0, 2.0]);
        assert_eq!(batch.candidate_valid, vec![true, true, false, true, false, false, false, true]);

        // Restricting the forward to frame 0 only leaves no pairs.
        let empty = build_correspondence_batch(
            &tracks,
            &patch_depths,
            &[0],
            (2, 2),
            (4, 4),
            &cfg,
        )
        .unwrap();
        assert_eq!(empty.num_anchors(), 0);
    }

    #[test]
    fn tape_matching_agrees_with_plain_oracle() {
        // The on-tape depth pipeline must reproduce soft_matching +
        // expected_depth + depth_loss exactly (same formulas, same
        // masking), up to exclusion-by-underflow.
        let mut rng = rng_from_seed(43);
        let n_p = 3;
        let dim = 4;
        let n_rows = 2 * n_p;
        let raw: Vec<f64> = (0..n_rows * dim)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        let norm_rows: Vec<Vec<f64>> = (0..n_rows)
            .map(|r| {
                let row = &raw[r * dim..(r + 1) * dim];
                let n = scalar::sqrt(row.iter().map(|&x| x * x).sum::<f64>());
                row.iter().map(|&x| x / n).collect()
            })
            .collect();
        let batch = CorrespondenceBatch {
            patches_per_frame: n_p,
            n_frames: 2,
            anchor_rows: vec![1],
            positive_rows: vec![n_p + 2],
            depth_anchors: vec![0],
            depth_target_frames: vec![1],
            depth_gt: vec![2.5],
            candidate_depths: vec![1.0, 2.0, 3.0, 2.0, 0.0, 4.0],
            candidate_valid: vec![true, true, true, true, false, true],
            ..CorrespondenceBatch::default()
        };
        let cfg = LossConfig::default();
        let mut tape = Tape::new();
        let flat: Vec<f64> = norm_rows.iter().flatten().copied().collect();
        let e = tape.input_from(n_rows, dim, flat).unwrap();
        let nodes = correspondence_losses(&mut tape, &batch, &[(1, e)], &cfg).unwrap();
        let tape_depth = tape.scalar_value(nodes.l_depth.unwrap()).unwrap();

        let anchor = &norm_rows[1];
        let cands: Vec<Vec<f64>> = (n_p..2 * n_p).map(|r| norm_rows[r].clone()).collect();
        let a = soft_matching(anchor, &cands, cfg.temperature).unwrap();
        let depths = &batch.candidate_depths[n_p..2 * n_p];
        let valid = &batch.candidate_valid[n_p..2 * n_p];
        let d_hat = expected_depth(&a, depths, valid).unwrap();
        let want = depth_loss(&[2.5], &[d_hat], &[true], cfg.depth_epsilon);
        assert!(
            scalar::abs(tape_depth - want) < 1e-12,
            "{tape_depth} vs {want}"
        );
    }
}
