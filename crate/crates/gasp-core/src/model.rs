//! Compact multimodal transformer with frozen attention projections,
//! low-rank adapters, and per-layer correspondence heads.
//!
//! The backbone is a pre-norm transformer over a concatenated token
//! sequence `[visual; language]`. Visual tokens attend bidirectionally
//! among themselves; language tokens attend causally to each other and
//! freely to the whole visual block. Base projection matrices are frozen
//! random-orthogonal (there is no pretrained backbone at this scale, and
//! orthogonal weights keep activations well-conditioned so the untrained
//! baseline is meaningful); all adaptation flows through low-rank A*B
//! deltas on W_Q/W_K/W_V/W_O plus the trainable heads, embeddings, MLPs,
//! and norms.
//!
//! Every forward exposes enough inner state for probing: per-layer hidden
//! states of the visual block, per-head query/key projections for every
//! layer, and the L2-normalized correspondence embeddings for the layers
//! that carry a head.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{
    AttnMask, DiffError, NodeRef, ParamGroup, ParamMeta, ParamStore, Tape, Tensor,
};
use crate::linalg::{matmul, random_orthogonal, svd};
use crate::rng::{derive_seed, rng_from_seed, DetRng};
use crate::scalar;

/// Learning-rate boost applied to the correspondence-head group.
pub const HEAD_LR_MULTIPLIER: f64 = 4.0;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error("invalid config: {0}")]
    Config(&'static str),
    #[error("unknown token id {0}")]
    Vocab(u32),
    #[error("shape error: {0}")]
    Shape(&'static str),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    /// Width of the correspondence embeddings.
    pub d_emb: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    /// 1-based layer indices that carry a correspondence head.
    pub head_layers: Vec<usize>,
    pub vocab_size: usize,
    pub max_frames: usize,
    pub patches_per_frame: usize,
    /// Width of the raw visual patch tokens before the input projection.
    pub feature_dim: usize,
    pub max_lang_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_layers: 4,
            d_model: 64,
            n_heads: 4,
            d_emb: 16,
            lora_rank: 8,
            lora_alpha: 16.0,
            head_layers: vec![1, 2, 3, 4],
            vocab_size: 32,
            max_frames: 8,
            patches_per_frame: 256,
            feature_dim: 32,
            max_lang_len: 16,
        }
    }
}

impl ModelConfig {
    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.num_layers == 0 {
            return Err(ModelError::Config("need at least one layer"));
        }
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(ModelError::Config("d_model must be a positive multiple of n_heads"));
        }
        if self.d_emb == 0 || self.d_model < 2 * self.d_emb {
            return Err(ModelError::Config("d_model must be at least twice d_emb"));
        }
        if self.lora_rank == 0 || self.lora_rank > self.d_model {
            return Err(ModelError::Config("lora_rank must be in 1..=d_model"));
        }
        if self.head_layers.is_empty() {
            return Err(ModelError::Config("head_layers must not be empty"));
        }
        let mut prev = 0usize;
        for &l in &self.head_layers {
            if l == 0 || l > self.num_layers {
                return Err(ModelError::Config("head layer index out of range"));
            }
            if l <= prev {
                return Err(ModelError::Config("head_layers must be strictly increasing"));
            }
            prev = l;
        }
        if self.vocab_size < 2 {
            return Err(ModelError::Config("vocab_size must be at least 2"));
        }
        if self.max_frames == 0 || self.patches_per_frame == 0 {
            return Err(ModelError::Config("frame and patch counts must be positive"));
        }
        if self.feature_dim == 0 {
            return Err(ModelError::Config("feature_dim must be positive"));
        }
        if self.max_lang_len == 0 {
            return Err(ModelError::Config("max_lang_len must be positive"));
        }
        Ok(())
    }
}

/// Attention projection selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Proj {
    Q,
    K,
    V,
    O,
}

impl Proj {
    pub const ALL: [Proj; 4] = [Proj::Q, Proj::K, Proj::V, Proj::O];

    fn tag(self) -> &'static str {
        match self {
            Proj::Q => "wq",
            Proj::K => "wk",
            Proj::V => "wv",
            Proj::O => "wo",
        }
    }
}

fn proj_name(layer: usize, proj: Proj, part: &str) -> String {
    format!("layer{layer}.{}.{part}", proj.tag())
}

#[derive(Debug, Clone)]
pub struct ToyModel {
    pub config: ModelConfig,
    pub store: ParamStore,
}

/// Visual half of a forward input: flattened patch tokens in frame-major
/// order plus the timeline slot of each frame, which selects the learned
/// frame embedding.
pub struct VisualInput<'a> {
    /// `num_frames * patches_per_frame` rows by `feature_dim`.
    pub tokens: &'a [f64],
    /// One timeline slot per frame, each `< max_frames`.
    pub frame_slots: &'a [usize],
}

/// Tape handles produced by one forward build; everything needed to
/// attach losses or inspect attention stays addressable.
pub struct ForwardGraph {
    pub n_visual: usize,
    pub n_lang: usize,
    /// Post-block hidden state of the visual rows, one entry per layer.
    pub visual_hidden: Vec<NodeRef>,
    /// `(layer, embeddings)` for each layer carrying a head; rows cover
    /// the visual block and are L2-normalized.
    pub head_embeddings: Vec<(usize, NodeRef)>,
    /// Next-token logits over the language rows; absent without language
    /// input.
    pub logits: Option<NodeRef>,
    /// Per-layer, per-head query/key projections over all rows.
    pub queries: Vec<Vec<NodeRef>>,
    pub keys: Vec<Vec<NodeRef>>,
    /// Fused attention nodes, addressable for weight inspection.
    pub attention: Vec<Vec<NodeRef>>,
}

/// Plain-value snapshot of a forward pass.
pub struct ForwardTrace {
    pub n_visual: usize,
    pub n_lang: usize,
    pub visual_hidden: Vec<Tensor>,
    pub head_embeddings: Vec<(usize, Tensor)>,
    pub logits: Option<Tensor>,
    pub queries: Vec<Vec<Tensor>>,
    pub keys: Vec<Vec<Tensor>>,
}

impl ForwardTrace {
    /// Rows of a per-head projection restricted to the visual block.
    pub fn visual_rows(&self, t: &Tensor) -> Tensor {
        let cols = t.cols;
        Tensor::from_values(self.n_visual, cols, t.values[..self.n_visual * cols].to_vec())
            .expect("visual block bounds")
    }
}

/// Correspondence-head weights built from the SVD of a query projection.
///
/// The first linear map is spanned by the leading right-singular vectors
/// of `w_q`, each scaled by the square root of its singular value, so the
/// head starts out reading the directions the attention queries already
/// use. Null-space directions (zero singular values) are kept at unit
/// scale instead of collapsing to zero. The second map starts as an
/// identity selector of the first half.
pub fn init_head_svd(
    w_q: &[f64],
    config: &ModelConfig,
) -> Result<(Tensor, Tensor), ModelError> {
    let d = config.d_model;
    let m = config.d_emb;
    if d < 2 * m {
        return Err(ModelError::Config("d_model must be at least twice d_emb"));
    }
    if w_q.len() != d * d {
        return Err(ModelError::Shape("query projection must be d_model x d_model"));
    }
    let dec = svd(w_q, d, d);
    let wide = 2 * m;
    let mut layer1 = vec![0.0; d * wide];
    for j in 0..wide {
        let sigma = dec.sigma[j];
        let s = if sigma > 1e-12 { scalar::sqrt(sigma) } else { 1.0 };
        for i in 0..d {
            layer1[i * wide + j] = dec.v[i * d + j] * s;
        }
    }
    let mut layer2 = vec![0.0; wide * m];
    for i in 0..m {
        layer2[i * m + i] = 1.0;
    }
    Ok((
        Tensor::from_values(d, wide, layer1).expect("layer1 shape"),
        Tensor::from_values(wide, m, layer2).expect("layer2 shape"),
    ))
}

fn randn_tensor(rng: &mut DetRng, rows: usize, cols: usize, std: f64) -> Tensor {
    let values = (0..rows * cols)
        .map(|_| rng.sample::<f64, _>(StandardNormal) * std)
        .collect();
    Tensor::from_values(rows, cols, values).expect("randn shape")
}

/// Builds a fresh model: frozen random-orthogonal attention projections,
/// zeroed low-rank deltas (so the initial model equals its base exactly),
/// and SVD-initialized correspondence heads.
pub fn init_model(config: ModelConfig, rng_seed: u64) -> Result<ToyModel, ModelError> {
    config.validate()?;
    let d = config.d_model;
    let r = config.lora_rank;
    let mut store = ParamStore::new();

    let other = |decay: bool| ParamMeta { group: ParamGroup::Other, weight_decay: decay };
    let mut emb_rng = rng_from_seed(derive_seed(rng_seed, "model-embeddings"));
    let mut mlp_rng = rng_from_seed(derive_seed(rng_seed, "model-mlp"));
    let mut base_rng = rng_from_seed(derive_seed(rng_seed, "model-base"));
    let mut lora_rng = rng_from_seed(derive_seed(rng_seed, "model-lora"));

    let reg = |store: &mut ParamStore, name: &str, t: Tensor, meta: ParamMeta| {
        store.register(name, t, meta).expect("unique parameter name");
    };

    reg(
        &mut store,
        "input_proj.weight",
        randn_tensor(&mut emb_rng, config.feature_dim, d, 1.0 / scalar::sqrt(config.feature_dim as f64)),
        other(false),
    );
    reg(&mut store, "input_proj.bias", Tensor::zeros(1, d), other(false));
    reg(
        &mut store,
        "frame_emb",
        randn_tensor(&mut emb_rng, config.max_frames, d, 0.02),
        other(false),
    );
    reg(
        &mut store,
        "patch_emb",
        randn_tensor(&mut emb_rng, config.patches_per_frame, d, 0.02),
        other(false),
    );
    reg(
        &mut store,
        "token_emb",
        randn_tensor(&mut emb_rng, config.vocab_size, d, 0.02),
        other(false),
    );
    reg(
        &mut store,
        "lang_pos_emb",
        randn_tensor(&mut emb_rng, config.max_lang_len, d, 0.02),
        other(false),
    );

    let mut base_wq: Vec<Vec<f64>> = Vec::with_capacity(config.num_layers);
    for layer in 1..=config.num_layers {
        reg(
            &mut store,
            &format!("layer{layer}.attn_norm.gain"),
            Tensor::from_values(1, d, vec![1.0; d]).expect("gain"),
            other(false),
        );
        reg(
            &mut store,
            &format!("layer{layer}.attn_norm.bias"),
            Tensor::zeros(1, d),
            other(false),
        );
        for proj in Proj::ALL {
            let base = random_orthogonal(d, &mut base_rng);
            if proj == Proj::Q {
                base_wq.push(base.clone());
            }
            reg(
                &mut store,
                &proj_name(layer, proj, "base"),
                Tensor::from_values(d, d, base).expect("base shape"),
                ParamMeta { group: ParamGroup::Frozen, weight_decay: false },
            );
            reg(
                &mut store,
                &proj_name(layer, proj, "lora_a"),
                randn_tensor(&mut lora_rng, d, r, 1.0 / scalar::sqrt(d as f64)),
                ParamMeta { group: ParamGroup::Lora, weight_decay: true },
            );
            reg(
                &mut store,
                &proj_name(layer, proj, "lora_b"),
                Tensor::zeros(r, d),
                ParamMeta { group: ParamGroup::Lora, weight_decay: true },
            );
        }
        reg(
            &mut store,
            &format!("layer{layer}.mlp_norm.gain"),
            Tensor::from_values(1, d, vec![1.0; d]).expect("gain"),
            other(false),
        );
        reg(
            &mut store,
            &format!("layer{layer}.mlp_norm.bias"),
            Tensor::zeros(1, d),
            other(false),
        );
        reg(
            &mut store,
            &format!("layer{layer}.mlp.w1"),
            randn_tensor(&mut mlp_rng, d, 2 * d, 1.0 / scalar::sqrt(d as f64)),
            other(true),
        );
        reg(&mut store, &format!("layer{layer}.mlp.b1"), Tensor::zeros(1, 2 * d), other(false));
        reg(
            &mut store,
            &format!("layer{layer}.mlp.w2"),
            randn_tensor(&mut mlp_rng, 2 * d, d, 1.0 / scalar::sqrt(2.0 * d as f64)),
            other(true),
        );
        reg(&mut store, &format!("layer{layer}.mlp.b2"), Tensor::zeros(1, d), other(false));
    }

    reg(
        &mut store,
        "final_norm.gain",
        Tensor::from_values(1, d, vec![1.0; d]).expect("gain"),
        other(false),
    );
    reg(&mut store, "final_norm.bias", Tensor::zeros(1, d), other(false));
    reg(
        &mut store,
        "lm_head",
        randn_tensor(&mut mlp_rng, d, config.vocab_size, 1.0 / scalar::sqrt(d as f64)),
        other(false),
    );

    for &layer in &config.head_layers {
        let (w1, w2) = init_head_svd(&base_wq[layer - 1], &config)?;
        // Heads stay decay-free: decay only regularizes the LoRA deltas and
        // MLP weights, never the geometry-carrying head or the norms/biases.
        let head = ParamMeta { group: ParamGroup::Head, weight_decay: false };
        reg(&mut store, &format!("head{layer}.w1"), w1, head);
        reg(&mut store, &format!("head{layer}.b1"), Tensor::zeros(1, 2 * config.d_emb), head);
        reg(&mut store, &format!("head{layer}.w2"), w2, head);
        reg(&mut store, &format!("head{layer}.b2"), Tensor::zeros(1, config.d_emb), head);
    }

    Ok(ToyModel { config, store })
}

impl ToyModel {
    fn pid(&self, name: &str) -> crate::autodiff::ParamId {
        self.store.id(name).expect("registered parameter")
    }

    /// Effective weight of one attention projection, base plus the scaled
    /// low-rank delta, computed outside any tape.
    pub fn effective_projection(&self, layer: usize, proj: Proj) -> Vec<f64> {
        let d = self.config.d_model;
        let r = self.config.lora_rank;
        let base = &self.store.tensor(self.pid(&proj_name(layer, proj, "base"))).values;
        let a = &self.store.tensor(self.pid(&proj_name(layer, proj, "lora_a"))).values;
        let b = &self.store.tensor(self.pid(&proj_name(layer, proj, "lora_b"))).values;
        let mut delta = vec![0.0; d * d];
        matmul(&mut delta, a, b, d, r, d, false);
        let scale = self.config.lora_alpha / r as f64;
        base.iter()
            .zip(&delta)
            .map(|(&w, &dw)| w + scale * dw)
            .collect()
    }

    fn effective_on_tape(
        &self,
        tape: &mut Tape,
        layer: usize,
        proj: Proj,
    ) -> Result<NodeRef, DiffError> {
        let base = tape.param(&self.store, self.pid(&proj_name(layer, proj, "base")))?;
        let a = tape.param(&self.store, self.pid(&proj_name(layer, proj, "lora_a")))?;
        let b = tape.param(&self.store, self.pid(&proj_name(layer, proj, "lora_b")))?;
        let delta = tape.matmul(a, b)?;
        let delta = tape.scale(delta, self.config.lora_alpha / self.config.lora_rank as f64)?;
        tape.add(base, delta)
    }

    fn affine_norm(
        &self,
        tape: &mut Tape,
        x: NodeRef,
        gain: &str,
        bias: &str,
    ) -> Result<NodeRef, DiffError> {
        let normed = tape.layer_norm(x)?;
        let g = tape.param(&self.store, self.pid(gain))?;
        let b = tape.param(&self.store, self.pid(bias))?;
        let scaled = tape.mul_row(normed, g)?;
        tape.add_row(scaled, b)
    }

    /// Records the full forward computation on `tape`. Either modality may
    /// be absent, but not both.
    pub fn build_forward(
        &self,
        tape: &mut Tape,
        visual: Option<&VisualInput<'_>>,
        lang_tokens: &[u32],
    ) -> Result<ForwardGraph, ModelError> {
        let cfg = &self.config;
        let n_p = cfg.patches_per_frame;

        let n_visual = match visual {
            Some(v) => {
                if v.frame_slots.len() > cfg.max_frames {
                    return Err(ModelError::Shape("more frames than max_frames"));
                }
                if v.frame_slots.iter().any(|&s| s >= cfg.max_frames) {
                    return Err(ModelError::Shape("frame slot out of range"));
                }
                let n_vis = v.frame_slots.len() * n_p;
                if v.tokens.len() != n_vis * cfg.feature_dim {
                    return Err(ModelError::Shape("visual token buffer size mismatch"));
                }
                n_vis
            }
            None => 0,
        };
        let n_lang = lang_tokens.len();
        if n_lang > cfg.max_lang_len {
            return Err(ModelError::Shape("language sequence too long"));
        }
        if let Some(&bad) = lang_tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
            return Err(ModelError::Vocab(bad));
        }
        if n_visual == 0 && n_lang == 0 {
            return Err(ModelError::Shape("empty input"));
        }

        let x_vis = if let Some(v) = visual {
            let tokens = tape.input_from(n_visual, cfg.feature_dim, v.tokens.to_vec())?;
            let w_in = tape.param(&self.store, self.pid("input_proj.weight"))?;
            let b_in = tape.param(&self.store, self.pid("input_proj.bias"))?;
            let projected = tape.matmul(tokens, w_in)?;
            let projected = tape.add_row(projected, b_in)?;
            let mut frame_rows = Vec::with_capacity(n_visual);
            let mut patch_rows = Vec::with_capacity(n_visual);
            for &slot in v.frame_slots {
                for p in 0..n_p {
                    frame_rows.push(slot);
                    patch_rows.push(p);
                }
            }
            let frame_table = tape.param(&self.store, self.pid("frame_emb"))?;
            let patch_table = tape.param(&self.store, self.pid("patch_emb"))?;
            let f_emb = tape.gather_rows(frame_table, &frame_rows)?;
            let p_emb = tape.gather_rows(patch_table, &patch_rows)?;
            let with_frames = tape.add(projected, f_emb)?;
            Some(tape.add(with_frames, p_emb)?)
        } else {
            None
        };

        let x_lang = if n_lang > 0 {
            let ids: Vec<usize> = lang_tokens.iter().map(|&t| t as usize).collect();
            let pos: Vec<usize> = (0..n_lang).collect();
            let token_table = tape.param(&self.store, self.pid("token_emb"))?;
            let pos_table = tape.param(&self.store, self.pid("lang_pos_emb"))?;
            let t_emb = tape.gather_rows(token_table, &ids)?;
            let p_emb = tape.gather_rows(pos_table, &pos)?;
            Some(tape.add(t_emb, p_emb)?)
        } else {
            None
        };

        let mut x = match (x_vis, x_lang) {
            (Some(v), Some(l)) => tape.concat_rows(v, l)?,
            (Some(v), None) => v,
            (None, Some(l)) => l,
            (None, None) => unreachable!("rejected above"),
        };
        // With no language rows the prefix mask would be exactly full
        // bidirectional attention, so use that directly.
        let mask = if n_lang == 0 {
            AttnMask::Full
        } else {
            AttnMask::PrefixLm { n_vis: n_visual }
        };

        let d_k = cfg.d_head();
        let att_scale = 1.0 / scalar::sqrt(d_k as f64);
        let mut graph = ForwardGraph {
            n_visual,
            n_lang,
            visual_hidden: Vec::with_capacity(cfg.num_layers),
            head_embeddings: Vec::new(),
            logits: None,
            queries: Vec::with_capacity(cfg.num_layers),
            keys: Vec::with_capacity(cfg.num_layers),
            attention: Vec::with_capacity(cfg.num_layers),
        };

        for layer in 1..=cfg.num_layers {
            let normed = self.affine_norm(
                tape,
                x,
                &format!("layer{layer}.attn_norm.gain"),
                &format!("layer{layer}.attn_norm.bias"),
            )?;
            let wq = self.effective_on_tape(tape, layer, Proj::Q)?;
            let wk = self.effective_on_tape(tape, layer, Proj::K)?;
            let wv = self.effective_on_tape(tape, layer, Proj::V)?;
            let wo = self.effective_on_tape(tape, layer, Proj::O)?;
            let q_full = tape.matmul(normed, wq)?;
            let k_full = tape.matmul(normed, wk)?;
            let v_full = tape.matmul(normed, wv)?;

            let mut layer_q = Vec::with_capacity(cfg.n_heads);
            let mut layer_k = Vec::with_capacity(cfg.n_heads);
            let mut layer_att = Vec::with_capacity(cfg.n_heads);
            let mut head_outputs = Vec::with_capacity(cfg.n_heads);
            for h in 0..cfg.n_heads {
                let q_h = tape.slice_cols(q_full, h * d_k, d_k)?;
                let k_h = tape.slice_cols(k_full, h * d_k, d_k)?;
                let v_h = tape.slice_cols(v_full, h * d_k, d_k)?;
                let att = tape.attention(q_h, k_h, v_h, att_scale, mask)?;
                layer_q.push(q_h);
                layer_k.push(k_h);
                layer_att.push(att);
                head_outputs.push(att);
            }
            let merged = tape.concat_cols(&head_outputs)?;
            let att_out = tape.matmul(merged, wo)?;
            x = tape.add(x, att_out)?;

            let normed2 = self.affine_norm(
                tape,
                x,
                &format!("layer{layer}.mlp_norm.gain"),
                &format!("layer{layer}.mlp_norm.bias"),
            )?;
            let w1 = tape.param(&self.store, self.pid(&format!("layer{layer}.mlp.w1")))?;
            let b1 = tape.param(&self.store, self.pid(&format!("layer{layer}.mlp.b1")))?;
            let w2 = tape.param(&self.store, self.pid(&format!("layer{layer}.mlp.w2")))?;
            let b2 = tape.param(&self.store, self.pid(&format!("layer{layer}.mlp.b2")))?;
            let hidden = tape.matmul(normed2, w1)?;
            let hidden = tape.add_row(hidden, b1)?;
            let hidden = tape.gelu(hidden)?;
            let mlp_out = tape.matmul(hidden, w2)?;
            let mlp_out = tape.add_row(mlp_out, b2)?;
            x = tape.add(x, mlp_out)?;

            graph.queries.push(layer_q);
            graph.keys.push(layer_k);
            graph.attention.push(layer_att);

            if n_visual > 0 {
                let v_l = tape.slice_rows(x, 0, n_visual)?;
                graph.visual_hidden.push(v_l);
                if cfg.head_layers.contains(&layer) {
                    let w1h = tape.param(&self.store, self.pid(&format!("head{layer}.w1")))?;
                    let b1h = tape.param(&self.store, self.pid(&format!("head{layer}.b1")))?;
                    let w2h = tape.param(&self.store, self.pid(&format!("head{layer}.w2")))?;
                    let b2h = tape.param(&self.store, self.pid(&format!("head{layer}.b2")))?;
                    let e = tape.matmul(v_l, w1h)?;
                    let e = tape.add_row(e, b1h)?;
                    let e = tape.gelu(e)?;
                    let e = tape.matmul(e, w2h)?;
                    let e = tape.add_row(e, b2h)?;
                    let e = tape.l2_normalize_rows(e)?;
                    graph.head_embeddings.push((layer, e));
                }
            }
        }

        if n_lang > 0 {
            let finished = self.affine_norm(tape, x, "final_norm.gain", "final_norm.bias")?;
            let lang_rows = tape.slice_rows(finished, n_visual, n_lang)?;
            let w_lm = tape.param(&self.store, self.pid("lm_head"))?;
            graph.logits = Some(tape.matmul(lang_rows, w_lm)?);
        }

        Ok(graph)
    }

    /// Runs a forward pass on a private tape and extracts plain values.
    pub fn forward_trace(
        &self,
        visual: Option<&VisualInput<'_>>,
        lang_tokens: &[u32],
    ) -> Result<ForwardTrace, ModelError> {
        let mut tape = Tape::new();
        let graph = self.build_forward(&mut tape, visual, lang_tokens)?;
        let grab = |n: NodeRef| tape.value(n).clone();
        Ok(ForwardTrace {
            n_visual: graph.n_visual,
            n_lang: graph.n_lang,
            visual_hidden: graph.visual_hidden.iter().map(|&n| grab(n)).collect(),
            head_embeddings: graph
                .head_embeddings
                .iter()
                .map(|&(l, n)| (l, grab(n)))
                .collect(),
            logits: graph.logits.map(grab),
            queries: graph
                .queries
                .iter()
                .map(|hs| hs.iter().map(|&n| grab(n)).collect())
                .collect(),
            keys: graph
                .keys
                .iter()
                .map(|hs| hs.iter().map(|&n| grab(n)).collect())
                .collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    fn small_config() -> ModelConfig {
        ModelConfig {
            num_layers: 2,
            d_model: 16,
            n_heads: 2,
            d_emb: 4,
            lora_rank: 2,
            lora_alpha: 4.0,
            head_layers: vec![1, 2],
            vocab_size: 8,
            max_frames: 3,
            patches_per_frame: 4,
            feature_dim: 6,
            max_lang_len: 5,
        }
    }

    fn sample_tokens(cfg: &ModelConfig, frames: usize, seed: u64) -> Vec<f64> {
        let mut rng = rng_from_seed(seed);
        (0..frames * cfg.patches_per_frame * cfg.feature_dim)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect()
    }

    #[test]
    fn init_is_deterministic_in_seed() {
        let a = init_model(small_config(), 11).unwrap();
        let b = init_model(small_config(), 11).unwrap();
        assert_eq!(a.store.len(), b.store.len());
        for id in a.store.ids() {
            assert_eq!(
                a.store.tensor(id).values,
                b.store.tensor(id).values,
                "parameter {}",
                a.store.name(id)
            );
        }
        let c = init_model(small_config(), 12).unwrap();
        let any_diff = a
            .store
            .ids()
            .any(|id| a.store.tensor(id).values != c.store.tensor(id).values);
        assert!(any_diff, "different seeds must give different weights");
    }

    #[test]
    fn zero_low_rank_delta_reproduces_base_exactly() {
        let model = init_model(small_config(), 3).unwrap();
        for layer in 1..=model.config.num_layers {
            for proj in Proj::ALL {
                let eff = model.effective_projection(layer, proj);
                let base = &model
                    .store
                    .tensor(model.store.id(&proj_name(layer, proj, "base")).unwrap())
                    .values;
                assert_eq!(&eff, base, "layer {layer} {:?}", proj);
            }
        }
    }

    #[test]
    fn forward_is_deterministic_and_embeddings_unit_norm() {
        let cfg = small_config();
        let model = init_model(cfg.clone(), 5).unwrap();
        let tokens = sample_tokens(&cfg, 2, 7);
        let visual = VisualInput { tokens: &tokens, frame_slots: &[0, 2] };
        let lang = [1u32, 4, 2];
        let t1 = model.forward_trace(Some(&visual), &lang).unwrap();
        let t2 = model.forward_trace(Some(&visual), &lang).unwrap();
        assert_eq!(
            t1.logits.as_ref().unwrap().values,
            t2.logits.as_ref().unwrap().values
        );
        assert_eq!(t1.head_embeddings.len(), cfg.head_layers.len());
        for ((l1, e1), (l2, e2)) in t1.head_embeddings.iter().zip(&t2.head_embeddings) {
            assert_eq!(l1, l2);
            assert_eq!(e1.values, e2.values);
            for rrow in 0..e1.rows {
                let norm: f64 = (0..e1.cols)
                    .map(|c| e1.get(rrow, c) * e1.get(rrow, c))
                    .sum::<f64>();
                assert!(
                    scalar::abs(scalar::sqrt(norm) - 1.0) < 1e-10,
                    "row {rrow} norm {norm}"
                );
            }
        }
        assert_eq!(t1.visual_hidden.len(), cfg.num_layers);
        assert_eq!(t1.queries.len(), cfg.num_layers);
        assert_eq!(t1.queries[0].len(), cfg.n_heads);
    }

    #[test]
    fn head_init_from_identity_is_orthogonal() {
        let cfg = small_config();
        let d = cfg.d_model;
        let mut eye = vec![0.0; d * d];
        for i in 0..d {
            eye[i * d + i] = 1.0;
        }
        let (w1, w2) = init_head_svd(&eye, &cfg).unwrap();
        let wide = 2 * cfg.d_emb;
        for a in 0..wide {
            for b in (a + 1)..wide {
                let dot: f64 = (0..d).map(|i| w1.get(i, a) * w1.get(i, b)).sum();
                assert!(scalar::abs(dot) < 1e-10, "columns {a},{b} dot {dot}");
            }
        }
        // Second map selects the first half.
        for i in 0..wide {
            for j in 0..cfg.d_emb {
                let want = if i == j { 1.0 } else { 0.0 };
                assert_eq!(w2.get(i, j), want);
            }
        }
        // Determinism.
        let (w1b, _) = init_head_svd(&eye, &cfg).unwrap();
        assert_eq!(w1.values, w1b.values);
    }

    #[test]
    fn head_init_handles_rank_deficiency_with_null_space() {
        let cfg = small_config();
        let d = cfg.d_model;
        // Rank-2 matrix: two scaled outer products of unit basis vectors.
        let mut w = vec![0.0; d * d];
        w[0] = 3.0;
        w[d + 1] = 2.0;
        let (w1, _) = init_head_svd(&w, &cfg).unwrap();
        let wide = 2 * cfg.d_emb;
        for a in 0..wide {
            let norm: f64 = (0..d).map(|i| w1.get(i, a) * w1.get(i, a)).sum();
            assert!(norm > 0.5, "direction {a} must not collapse, norm {norm}");
            for b in (a + 1)..wide {
                let dot: f64 = (0..d).map(|i| w1.get(i, a) * w1.get(i, b)).sum();
                assert!(scalar::abs(dot) < 1e-8, "columns {a},{b} dot {dot}");
            }
        }
        let mut tight = cfg;
        tight.d_emb = 16;
        assert!(matches!(
            init_head_svd(&w, &tight),
            Err(ModelError::Config(_))
        ));
    }

    #[test]
    fn low_rank_scalar_count_matches_closed_form() {
        let model = init_model(ModelConfig::default(), 1).unwrap();
        // 2 * rank * d * 4 projections * layers
        let cfg = &model.config;
        let want = 2 * cfg.lora_rank * cfg.d_model * 4 * cfg.num_layers;
        assert_eq!(want, 16_384);
        assert_eq!(model.store.scalars_in_group(ParamGroup::Lora), want);
        let frozen = 4 * cfg.num_layers * cfg.d_model * cfg.d_model;
        assert_eq!(model.store.scalars_in_group(ParamGroup::Frozen), frozen);
        assert!(model.store.scalars_in_group(ParamGroup::Head) > 0);
    }

    #[test]
    fn attention_rows_are_normalized_and_quadrants_consistent() {
        let cfg = small_config();
        let model = init_model(cfg.clone(), 9).unwrap();
        let tokens = sample_tokens(&cfg, 2, 13);
        let visual = VisualInput { tokens: &tokens, frame_slots: &[0, 1] };
        let lang = [0u32, 3, 6, 1];
        let mut tape = Tape::new();
        let graph = model.build_forward(&mut tape, Some(&visual), &lang).unwrap();
        let n = graph.n_visual + graph.n_lang;
        for layer in 0..cfg.num_layers {
            for head in 0..cfg.n_heads {
                let w = tape.attention_weights(graph.attention[layer][head]).unwrap();
                for row in 0..n {
                    let s: f64 = w[row * n..(row + 1) * n].iter().sum();
                    assert!(scalar::abs(s - 1.0) < 1e-12, "row {row} sums to {s}");
                }
                // Visual rows must put zero mass on language keys.
                for row in 0..graph.n_visual {
                    for col in graph.n_visual..n {
                        assert_eq!(w[row * n + col], 0.0);
                    }
                }
            }
        }
        // The visual-visual block of the full score matrix equals the
        // product of the visual slices of Q and K.
        let q = tape.value(graph.queries[0][0]).clone();
        let k = tape.value(graph.keys[0][0]).clone();
        let d_k = cfg.d_head();
        let mut s_full = vec![0.0; n * n];
        matmul_nt_ref(&mut s_full, &q.values, &k.values, n, d_k, n);
        let nv = graph.n_visual;
        let qv = &q.values[..nv * d_k];
        let kv = &k.values[..nv * d_k];
        let mut s_vis = vec![0.0; nv * nv];
        matmul_nt_ref(&mut s_vis, qv, kv, nv, d_k, nv);
        for i in 0..nv {
            for j in 0..nv {
                assert!(
                    scalar::abs(s_full[i * n + j] - s_vis[i * nv + j]) < 1e-12,
                    "score block mismatch at ({i},{j})"
                );
            }
        }
    }

    fn matmul_nt_ref(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
        crate::linalg::matmul_nt(c, a, b, m, k, n, false);
    }

    #[test]
    fn frozen_base_gets_no_gradient_but_adapters_do() {
        let cfg = small_config();
        let mut model = init_model(cfg.clone(), 2).unwrap();
        let tokens = sample_tokens(&cfg, 1, 3);
        let visual = VisualInput { tokens: &tokens, frame_slots: &[1] };
        let lang = [2u32, 5];
        let mut tape = Tape::new();
        let graph = model.build_forward(&mut tape, Some(&visual), &lang).unwrap();
        let (_, e) = graph.head_embeddings[0];
        let e2 = tape.mul(e, e).unwrap();
        let le = tape.mean(e2).unwrap();
        let ll = tape.mean(graph.logits.unwrap()).unwrap();
        let loss = tape.add(le, ll).unwrap();
        tape.backward(loss).unwrap();
        model.store.zero_grads();
        tape.accumulate_grads(&mut model.store, 1.0);
        let ids: Vec<_> = model.store.ids().collect();
        for id in ids {
            let name = model.store.name(id).to_string();
            let t = model.store.tensor(id);
            if name.ends_with(".base") {
                assert!(t.grad.is_none(), "{name} must stay gradient-free");
            } else if name.contains("lora_b") {
                let g = t.grad.as_ref().unwrap();
                assert!(
                    g.iter().any(|&x| x != 0.0),
                    "{name} should receive gradient through the delta"
                );
            } else if name.starts_with("head1.w") {
                let g = t.grad.as_ref().unwrap();
                assert!(g.iter().any(|&x| x != 0.0), "{name} should train");
            }
        }
    }

    #[test]
    fn patch_permutation_permutes_embeddings() {
        let cfg = small_config();
        let model_a = init_model(cfg.clone(), 6).unwrap();
        let mut model_b = init_model(cfg.clone(), 6).unwrap();
        let n_p = cfg.patches_per_frame;
        let perm = [2usize, 0, 3, 1];
        // Permute the token rows of each frame and the patch embedding
        // table the same way.
        let tokens = sample_tokens(&cfg, 2, 4);
        let feat = cfg.feature_dim;
        let mut permuted = tokens.clone();
        for f in 0..2 {
            for j in 0..n_p {
                let dst = (f * n_p + j) * feat;
                let src = (f * n_p + perm[j]) * feat;
                permuted[dst..dst + feat].copy_from_slice(&tokens[src..src + feat]);
            }
        }
        {
            let id = model_b.store.id("patch_emb").unwrap();
            let table = model_b.store.tensor(id).clone();
            let d = cfg.d_model;
            let mut new_vals = table.values.clone();
            for j in 0..n_p {
                new_vals[j * d..(j + 1) * d]
                    .copy_from_slice(&table.values[perm[j] * d..(perm[j] + 1) * d]);
            }
            model_b.store.tensor_mut(id).values = new_vals;
        }
        let visual_a = VisualInput { tokens: &tokens, frame_slots: &[0, 1] };
        let visual_b = VisualInput { tokens: &permuted, frame_slots: &[0, 1] };
        let ta = model_a.forward_trace(Some(&visual_a), &[]).unwrap();
        let tb = model_b.forward_trace(Some(&visual_b), &[]).unwrap();
        for ((_, ea), (_, eb)) in ta.head_embeddings.iter().zip(&tb.head_embeddings) {
            for f in 0..2 {
                for j in 0..n_p {
                    for c in 0..cfg.d_emb {
                        let a = ea.get(f * n_p + perm[j], c);
                        let b = eb.get(f * n_p + j, c);
                        assert!(
                            scalar::abs(a - b) < 1e-8,
                            "frame {f} patch {j} component {c}: {a} vs {b}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn language_only_and_visual_only_forwards_work() {
        let cfg = small_config();
        let model = init_model(cfg.clone(), 8).unwrap();
        let trace = model.forward_trace(None, &[0, 1, 2, 3]).unwrap();
        assert!(trace.head_embeddings.is_empty());
        assert_eq!(trace.n_visual, 0);
        let logits = trace.logits.unwrap();
        assert_eq!(logits.rows, 4);
        assert_eq!(logits.cols, cfg.vocab_size);
        assert!(logits.values.iter().all(|x| x.is_finite()));

        let tokens = sample_tokens(&cfg, 1, 2);
        let visual = VisualInput { tokens: &tokens, frame_slots: &[0] };
        let trace2 = model.forward_trace(Some(&visual), &[]).unwrap();
        assert!(trace2.logits.is_none());
        assert_eq!(trace2.head_embeddings.len(), cfg.head_layers.len());
    }

    #[test]
    fn invalid_inputs_are_rejected() {
        let cfg = small_config();
        let model = init_model(cfg.clone(), 8).unwrap();
        assert!(matches!(
            model.forward_trace(None, &[99]),
            Err(ModelError::Vocab(99))
        ));
        let tokens = sample_tokens(&cfg, 4, 2);
        let visual = VisualInput { tokens: &tokens, frame_slots: &[0, 1, 2, 0] };
        assert!(matches!(
            model.forward_trace(Some(&visual), &[]),
            Err(ModelError::Shape(_))
        ));
        assert!(matches!(
            model.forward_trace(None, &[0, 1, 2, 3, 0, 1]),
            Err(ModelError::Shape(_))
        ));
        assert!(matches!(
            model.forward_trace(None, &[]),
            Err(ModelError::Shape(_))
        ));
        let mut bad = cfg;
        bad.d_model = 15;
        assert!(matches!(init_model(bad, 1), Err(ModelError::Config(_))));
    }
}
