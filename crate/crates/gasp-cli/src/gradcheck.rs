//! Gradient verification command. Rebuilds the training loss on a micro
//! model and compares tape gradients against central finite differences,
//! plus the contrastive loss against its closed-form gradient.

use std::time::Instant;

use gasp_core::autodiff::{
    closed_form_infonce_grad, finite_diff_check, DiffError, GradCheckReport, ParamGroup,
    ParamMeta, ParamStore, Tape, Tensor,
};
use gasp_core::geometry::SamplingPolicy;
use gasp_core::lang::SurrogateGrammar;
use gasp_core::losses::{
    build_correspondence_batch_multi, correspondence_losses, surrogate_lm_loss, total_loss,
    GeometricLossNodes, LossConfig,
};
use gasp_core::model::{init_model, ModelConfig, ToyModel, VisualInput};
use gasp_core::rng::{derive_seed, derive_seed_indexed, rng_from_seed};
use gasp_core::scenegen::{
    render_sequence, synthesize_scene, RenderParams, SceneSpec, Trajectory,
};
use gasp_core::trainer::TrainSequence;

use crate::errors::CliError;

/// Largest tolerated relative error between tape and finite differences.
pub const REL_ERR_TOLERANCE: f64 = 1e-4;
/// Largest tolerated absolute gap to the closed-form contrastive gradient.
pub const CLOSED_FORM_TOLERANCE: f64 = 1e-8;

const FD_STEP: f64 = 1e-5;
const COORDS_PER_TENSOR: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossTarget {
    Corr,
    Depth,
    Lm,
    Total,
}

impl LossTarget {
    pub const ALL: [LossTarget; 4] =
        [LossTarget::Corr, LossTarget::Depth, LossTarget::Lm, LossTarget::Total];

    pub fn name(self) -> &'static str {
        match self {
            LossTarget::Corr => "corr",
            LossTarget::Depth => "depth",
            LossTarget::Lm => "lm",
            LossTarget::Total => "total",
        }
    }

    pub fn parse(s: &str) -> Result<LossTarget, CliError> {
        match s {
            "corr" => Ok(LossTarget::Corr),
            "depth" => Ok(LossTarget::Depth),
            "lm" => Ok(LossTarget::Lm),
            "total" => Ok(LossTarget::Total),
            other => Err(CliError::InvalidConfig(format!(
                "unknown loss target '{other}' (expected corr, depth, lm, or total)"
            ))),
        }
    }
}

pub struct TargetResult {
    pub target: LossTarget,
    pub report: GradCheckReport,
    pub loss_value: f64,
}

pub struct GradCheckOutcome {
    pub targets: Vec<TargetResult>,
    pub closed_form_max_abs: f64,
    pub elapsed_secs: f64,
    pub sabotaged: bool,
}

impl GradCheckOutcome {
    pub fn failures(&self) -> Vec<String> {
        let mut out = Vec::new();
        for t in &self.targets {
            if !(t.report.max_rel_err < REL_ERR_TOLERANCE) {
                out.push(format!(
                    "{}: max rel err {:.3e} >= {REL_ERR_TOLERANCE:.0e}",
                    t.target.name(),
                    t.report.max_rel_err
                ));
            }
        }
        if !(self.closed_form_max_abs <= CLOSED_FORM_TOLERANCE) {
            out.push(format!(
                "closed-form contrastive gradient: max abs gap {:.3e} > {CLOSED_FORM_TOLERANCE:.0e}",
                self.closed_form_max_abs
            ));
        }
        out
    }
}

/// Two layers of width 16 keep a finite-difference sweep over every
/// parameter tensor cheap while still exercising both attention depths.
pub fn micro_model_config() -> ModelConfig {
    ModelConfig {
        num_layers: 2,
        d_model: 16,
        n_heads: 2,
        d_emb: 4,
        lora_rank: 2,
        lora_alpha: 4.0,
        head_layers: vec![1, 2],
        vocab_size: 8,
        max_frames: 2,
        patches_per_frame: 16,
        feature_dim: 8,
        max_lang_len: 6,
    }
}

struct Fixture {
    seq: TrainSequence,
}

fn build_fixture(seed: u64) -> Result<Fixture, CliError> {
    let params = RenderParams {
        image_height: 16,
        image_width: 16,
        focal: 16.0,
        t_max: 8,
        ..RenderParams::default()
    };
    let spec = SceneSpec {
        num_surfaces: 3,
        points_per_surface: 300,
        feature_dim: 8,
        occluder_prob: 0.0,
        trajectory: Trajectory::Orbit,
        noise_sigma: 0.01,
        rng_seed: derive_seed(seed, "gradcheck-scene"),
        ..SceneSpec::default()
    };
    let policy = SamplingPolicy { margin: 1.0, seq_len_range: (2, 2), ..SamplingPolicy::default() };
    let scene = synthesize_scene(&spec)?;
    let rendered = render_sequence(&scene, &params, &[0, 3], (4, 4), (4, 4), &policy)?;
    let grammar = SurrogateGrammar::new(
        micro_model_config().vocab_size,
        derive_seed(seed, "gradcheck-grammar"),
    )?;
    let mut lang_rng = rng_from_seed(derive_seed(seed, "gradcheck-lang"));
    let lang = grammar.sample_sentence(5, &mut lang_rng)?;
    Ok(Fixture { seq: TrainSequence::from_rendered(&rendered, &params, lang) })
}

struct LossNodes {
    l_lm: gasp_core::autodiff::NodeRef,
    geo: GeometricLossNodes,
    total: gasp_core::autodiff::NodeRef,
}

/// Mirrors one full-frame training step: forward over every frame, the
/// language loss on the shifted sentence, and the geometric losses pooled
/// over all track sets.
fn build_losses(
    model: &ToyModel,
    fx: &Fixture,
    loss_cfg: &LossConfig,
) -> Result<(Tape, LossNodes), CliError> {
    let seq = &fx.seq;
    let chosen: Vec<usize> = (0..seq.num_frames).collect();
    let visual = VisualInput { tokens: &seq.tokens, frame_slots: &chosen };
    let lang_inputs = &seq.lang[..seq.lang.len() - 1];
    let lang_targets = &seq.lang[1..];

    let mut tape = Tape::new();
    let graph = model.build_forward(&mut tape, Some(&visual), lang_inputs)?;
    let logits = graph
        .logits
        .ok_or_else(|| CliError::InvalidConfig("probe sentence produced no logits".into()))?;
    let l_lm = surrogate_lm_loss(&mut tape, logits, lang_targets)?;

    let sets: Vec<_> = seq.track_sets.iter().collect();
    let batch = build_correspondence_batch_multi(
        &sets,
        &seq.patch_depths,
        &chosen,
        seq.patch_grid,
        seq.image_size,
        loss_cfg,
    )?;
    let geo = correspondence_losses(&mut tape, &batch, &graph.head_embeddings, loss_cfg)?;
    let (total, _) = total_loss(&mut tape, Some(l_lm), Some(&geo), loss_cfg)?;
    Ok((tape, LossNodes { l_lm, geo, total }))
}

fn select_node(
    nodes: &LossNodes,
    target: LossTarget,
) -> Result<gasp_core::autodiff::NodeRef, CliError> {
    match target {
        LossTarget::Lm => Ok(nodes.l_lm),
        LossTarget::Corr => Ok(nodes.geo.l_corr),
        LossTarget::Total => Ok(nodes.total),
        LossTarget::Depth => nodes.geo.l_depth.ok_or_else(|| {
            CliError::GradCheckFailed("probe scene produced no valid depth anchors".into())
        }),
    }
}

fn check_target(
    cfg: &ModelConfig,
    base: &ToyModel,
    fx: &Fixture,
    loss_cfg: &LossConfig,
    target: LossTarget,
    coord_seed: u64,
    sabotage: bool,
) -> Result<TargetResult, CliError> {
    let mut model = ToyModel { config: cfg.clone(), store: base.store.clone() };
    model.store.zero_grads();
    let loss_value;
    {
        let (mut tape, nodes) = build_losses(&model, fx, loss_cfg)?;
        let node = select_node(&nodes, target)?;
        loss_value = tape.scalar_value(node)?;
        tape.backward(node)?;
        tape.accumulate_grads(&mut model.store, 1.0);
    }

    if sabotage {
        // Negative control: a corrupted gradient must be caught below.
        let first = model
            .store
            .ids()
            .find(|&id| model.store.meta(id).group != ParamGroup::Frozen)
            .expect("model has trainable parameters");
        let g = model
            .store
            .tensor_mut(first)
            .grad
            .as_mut()
            .expect("trainable parameter carries a gradient buffer");
        for v in g.iter_mut() {
            *v += 1.0;
        }
    }

    let trainable: Vec<String> = model
        .store
        .ids()
        .filter(|&id| model.store.meta(id).group != ParamGroup::Frozen)
        .map(|id| model.store.name(id).to_string())
        .collect();
    let names: Vec<&str> = trainable.iter().map(String::as_str).collect();

    let cfg_probe = cfg.clone();
    let report = finite_diff_check(
        &mut model.store,
        &names,
        FD_STEP,
        COORDS_PER_TENSOR,
        coord_seed,
        |store| {
            let probe = ToyModel { config: cfg_probe.clone(), store: store.clone() };
            let (tape, nodes) = build_losses(&probe, fx, loss_cfg)
                .map_err(|_| DiffError::Shape { op: "gradcheck probe", detail: "loss rebuild failed" })?;
            let node = select_node(&nodes, target)
                .map_err(|_| DiffError::Shape { op: "gradcheck probe", detail: "loss target missing" })?;
            tape.scalar_value(node)
        },
    )?;
    Ok(TargetResult { target, report, loss_value })
}

/// Verifies the tape's contrastive gradient against the closed-form
/// softmax/cosine expression on random vectors; returns the largest
/// absolute component gap.
fn closed_form_gap(seed: u64, tau: f64) -> Result<f64, CliError> {
    use rand::Rng;
    let dim = 8;
    let n_cand = 16;
    let positive = 5;
    let mut rng = rng_from_seed(derive_seed(seed, "gradcheck-infonce"));
    let anchor: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let candidates: Vec<Vec<f64>> =
        (0..n_cand).map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    let closed = closed_form_infonce_grad(&anchor, &candidates, positive, tau)?;

    let mut store = ParamStore::new();
    let id = store.register(
        "anchor",
        Tensor::from_values(1, dim, anchor)?,
        ParamMeta { group: ParamGroup::Other, weight_decay: false },
    )?;
    let mut tape = Tape::new();
    let a = tape.param(&store, id)?;
    let a_n = tape.l2_normalize_rows(a)?;
    let flat: Vec<f64> = candidates.iter().flatten().copied().collect();
    let c = tape.input_from(n_cand, dim, flat)?;
    let c_n = tape.l2_normalize_rows(c)?;
    let sims = tape.matmul_nt(a_n, c_n)?;
    let scaled = tape.scale(sims, 1.0 / tau)?;
    let lse = tape.row_log_sum_exp(scaled)?;
    let pos = tape.gather_entries(scaled, &[(0, positive)])?;
    let loss = tape.sub(lse, pos)?;
    tape.backward(loss)?;
    let grad = tape
        .param_grad(id)
        .ok_or_else(|| CliError::GradCheckFailed("anchor received no gradient".into()))?;
    let gap = grad
        .iter()
        .zip(&closed)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    Ok(gap)
}

pub fn run(
    seed: u64,
    loss_cfg: &LossConfig,
    targets: &[LossTarget],
    sabotage: bool,
) -> Result<GradCheckOutcome, CliError> {
    let started = Instant::now();
    if targets.is_empty() {
        return Err(CliError::InvalidConfig("no loss targets selected".into()));
    }
    loss_cfg.validate()?;
    let cfg = micro_model_config();
    let base = init_model(cfg.clone(), derive_seed(seed, "gradcheck-model"))?;
    let fx = build_fixture(seed)?;

    let mut results = Vec::with_capacity(targets.len());
    for (i, &target) in targets.iter().enumerate() {
        let coord_seed = derive_seed_indexed(seed, "gradcheck-coords", i as u64);
        results.push(check_target(&cfg, &base, &fx, loss_cfg, target, coord_seed, sabotage)?);
    }
    let closed_form_max_abs = closed_form_gap(seed, loss_cfg.temperature)?;

    Ok(GradCheckOutcome {
        targets: results,
        closed_form_max_abs,
        elapsed_secs: started.elapsed().as_secs_f64(),
        sabotaged: sabotage,
    })
}

/// Turns any recorded failure into the command's error, after the caller
/// has had a chance to print the per-target lines.
pub fn ensure_passed(outcome: &GradCheckOutcome) -> Result<(), CliError> {
    let failures = outcome.failures();
    if failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::GradCheckFailed(failures.join("; ")))
    }
}

pub fn print_summary(outcome: &GradCheckOutcome) {
    for t in &outcome.targets {
        let status = if t.report.max_rel_err < REL_ERR_TOLERANCE { "ok" } else { "FAIL" };
        println!(
            "loss {:>5}: value {:+.6}, max rel err {:.3e}, mean {:.3e} over {} tensors [{status}]",
            t.target.name(),
            t.loss_value,
            t.report.max_rel_err,
            t.report.mean_rel_err,
            t.report.params.len(),
        );
    }
    let cf_status =
        if outcome.closed_form_max_abs <= CLOSED_FORM_TOLERANCE { "ok" } else { "FAIL" };
    println!(
        "closed-form contrastive gradient gap: {:.3e} [{cf_status}]",
        outcome.closed_form_max_abs
    );
    println!("elapsed: {:.2}s", outcome.elapsed_secs);
}
