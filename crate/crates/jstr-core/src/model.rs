//! The sequence model: ViT-style patch embedding feeding a causal
//! decoder-only transformer over the packed layout
//! `[image patches][SEP][text ...]`, with logits over the 41-token
//! vocabulary at every position. The same model emits recognition text and,
//! after stage-2 training, a TRUE/FALSE judgment token.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::PackedSequence;
use crate::render::IMAGE_PIXELS;
use crate::rng::SplitMix64;
use crate::tensor::{Graph, Tensor, TensorError, TensorId};
use crate::vocab::{TokenId, VOCAB_SIZE};

/// Number of image patches in the packed sequence (4 x 12 grid of 8x8).
pub const N_PATCHES: usize = 48;
/// Flattened grayscale patch length (8 x 8).
pub const PATCH_DIM: usize = 64;
pub const LN_EPS: f32 = 1e-5;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("packed sequence of {len} positions exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("text of {len} characters exceeds the {max}-character scoring limit")]
    TextTooLong { len: usize, max: usize },
    #[error("image has {got} pixels, expected {IMAGE_PIXELS}")]
    BadImageShape { got: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_mult: usize,
    pub patch_size: usize,
    /// Maximum emitted text tokens per sample, EOS included.
    pub max_text_len: usize,
    /// 48 image + 1 SEP + 13 text + 1 SEP + 1 bool + 1 EOS.
    pub max_seq_len: usize,
    pub vocab_size: usize,
    pub dropout: f32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 128,
            n_layers: 2,
            n_heads: 4,
            ffn_mult: 4,
            patch_size: 8,
            max_text_len: 13,
            max_seq_len: 65,
            vocab_size: VOCAB_SIZE,
            dropout: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) {
        assert!(self.d_model % self.n_heads == 0, "d_model must divide into heads");
        assert_eq!(self.patch_size * self.patch_size, PATCH_DIM);
        assert_eq!(self.vocab_size, VOCAB_SIZE);
        assert!(
            self.max_seq_len >= N_PATCHES + 1 + self.max_text_len + 3,
            "max_seq_len too small for the packed layout"
        );
        assert!((0.0..1.0).contains(&self.dropout));
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn ffn_dim(&self) -> usize {
        self.d_model * self.ffn_mult
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub q_weight: Tensor,
    pub q_bias: Tensor,
    pub k_weight: Tensor,
    pub k_bias: Tensor,
    pub v_weight: Tensor,
    pub v_bias: Tensor,
    pub out_weight: Tensor,
    pub out_bias: Tensor,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
    pub fc1_weight: Tensor,
    pub fc1_bias: Tensor,
    pub fc2_weight: Tensor,
    pub fc2_bias: Tensor,
}

/// All trainable tensors. The output projection is tied to `tok_emb`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub patch_weight: Tensor,
    pub patch_bias: Tensor,
    pub pos_emb: Tensor,
    pub tok_emb: Tensor,
    pub layers: Vec<LayerParams>,
    pub lnf_gamma: Tensor,
    pub lnf_beta: Tensor,
}

/// Canonical tensor names, in checkpoint and optimizer order.
pub fn tensor_names(config: &ModelConfig) -> Vec<String> {
    let mut names = vec![
        "patch_proj.weight".to_string(),
        "patch_proj.bias".to_string(),
        "pos_emb".to_string(),
        "tok_emb".to_string(),
    ];
    for i in 0..config.n_layers {
        for field in [
            "ln1.gamma",
            "ln1.beta",
            "attn.q_weight",
            "attn.q_bias",
            "attn.k_weight",
            "attn.k_bias",
            "attn.v_weight",
            "attn.v_bias",
            "attn.out_weight",
            "attn.out_bias",
            "ln2.gamma",
            "ln2.beta",
            "ffn.fc1_weight",
            "ffn.fc1_bias",
            "ffn.fc2_weight",
            "ffn.fc2_bias",
        ] {
            names.push(format!("layers.{i}.{field}"));
        }
    }
    names.push("ln_f.gamma".to_string());
    names.push("ln_f.beta".to_string());
    names
}

/// Whether AdamW applies weight decay to this tensor: matrices and the tied
/// token embedding decay; biases, layer-norm parameters and the positional
/// embedding do not.
pub fn decays(name: &str) -> bool {
    name.ends_with("weight") || name == "tok_emb"
}

fn layer_fields(layer: &LayerParams) -> [&Tensor; 16] {
    [
        &layer.ln1_gamma,
        &layer.ln1_beta,
        &layer.q_weight,
        &layer.q_bias,
        &layer.k_weight,
        &layer.k_bias,
        &layer.v_weight,
        &layer.v_bias,
        &layer.out_weight,
        &layer.out_bias,
        &layer.ln2_gamma,
        &layer.ln2_beta,
        &layer.fc1_weight,
        &layer.fc1_bias,
        &layer.fc2_weight,
        &layer.fc2_bias,
    ]
}

fn layer_fields_mut(layer: &mut LayerParams) -> [&mut Tensor; 16] {
    [
        &mut layer.ln1_gamma,
        &mut layer.ln1_beta,
        &mut layer.q_weight,
        &mut layer.q_bias,
        &mut layer.k_weight,
        &mut layer.k_bias,
        &mut layer.v_weight,
        &mut layer.v_bias,
        &mut layer.out_weight,
        &mut layer.out_bias,
        &mut layer.ln2_gamma,
        &mut layer.ln2_beta,
        &mut layer.fc1_weight,
        &mut layer.fc1_bias,
        &mut layer.fc2_weight,
        &mut layer.fc2_bias,
    ]
}

impl ModelParams {
    /// Tensors in canonical order, paired with their names.
    pub fn visit(&self) -> Vec<(String, &Tensor)> {
        let names = tensor_names(&self.config);
        let mut tensors: Vec<&Tensor> =
            vec![&self.patch_weight, &self.patch_bias, &self.pos_emb, &self.tok_emb];
        for layer in &self.layers {
            tensors.extend(layer_fields(layer));
        }
        tensors.push(&self.lnf_gamma);
        tensors.push(&self.lnf_beta);
        names.into_iter().zip(tensors).collect()
    }

    pub fn visit_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let names = tensor_names(&self.config);
        let mut tensors: Vec<&mut Tensor> = vec![
            &mut self.patch_weight,
            &mut self.patch_bias,
            &mut self.pos_emb,
            &mut self.tok_emb,
        ];
        for layer in &mut self.layers {
            tensors.extend(layer_fields_mut(layer));
        }
        tensors.push(&mut self.lnf_gamma);
        tensors.push(&mut self.lnf_beta);
        names.into_iter().zip(tensors).collect()
    }

    pub fn num_params(&self) -> usize {
        self.visit().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for (_, t) in self.visit_mut() {
            t.zero_grad();
        }
    }

    /// Expected shape of a named tensor under this config.
    pub fn shape_of(config: &ModelConfig, name: &str) -> Vec<usize> {
        let d = config.d_model;
        let f = config.ffn_dim();
        let tail = name.rsplit('.').next().unwrap_or(name);
        match name {
            "patch_proj.weight" => vec![PATCH_DIM, d],
            "patch_proj.bias" => vec![d],
            "pos_emb" => vec![config.max_seq_len, d],
            "tok_emb" => vec![config.vocab_size, d],
            _ if name.contains(".ffn.fc1_weight") => vec![d, f],
            _ if name.contains(".ffn.fc1_bias") => vec![f],
            _ if name.contains(".ffn.fc2_weight") => vec![f, d],
            _ if name.contains(".ffn.fc2_bias") => vec![d],
            _ if name.contains(".attn.") && tail.ends_with("weight") => vec![d, d],
            _ if name.contains(".attn.") && tail.ends_with("bias") => vec![d],
            _ => vec![d], // layer-norm gammas and betas
        }
    }
}

/// Deterministic initialization: walking tensors in canonical order, every
/// weight matrix and both embeddings are filled with truncated-normal
/// (sigma = 0.02) draws from one `SplitMix64(seed)` stream; biases and
/// layer-norm betas start at zero, gammas at one.
pub fn init_params(config: &ModelConfig, seed: u64) -> ModelParams {
    config.validate();
    let mut rng = SplitMix64::new(seed);
    let mut make = |name: &str| -> Tensor {
        let shape = ModelParams::shape_of(config, name);
        let n: usize = shape.iter().product();
        let data = if decays(name) || name == "pos_emb" {
            (0..n).map(|_| rng.truncated_normal(0.02)).collect()
        } else if name.ends_with("gamma") {
            vec![1.0; n]
        } else {
            vec![0.0; n]
        };
        Tensor::param(shape, data)
    };

    let patch_weight = make("patch_proj.weight");
    let patch_bias = make("patch_proj.bias");
    let pos_emb = make("pos_emb");
    let tok_emb = make("tok_emb");
    let layers = (0..config.n_layers)
        .map(|i| LayerParams {
            ln1_gamma: make(&format!("layers.{i}.ln1.gamma")),
            ln1_beta: make(&format!("layers.{i}.ln1.beta")),
            q_weight: make(&format!("layers.{i}.attn.q_weight")),
            q_bias: make(&format!("layers.{i}.attn.q_bias")),
            k_weight: make(&format!("layers.{i}.attn.k_weight")),
            k_bias: make(&format!("layers.{i}.attn.k_bias")),
            v_weight: make(&format!("layers.{i}.attn.v_weight")),
            v_bias: make(&format!("layers.{i}.attn.v_bias")),
            out_weight: make(&format!("layers.{i}.attn.out_weight")),
            out_bias: make(&format!("layers.{i}.attn.out_bias")),
            ln2_gamma: make(&format!("layers.{i}.ln2.gamma")),
            ln2_beta: make(&format!("layers.{i}.ln2.beta")),
            fc1_weight: make(&format!("layers.{i}.ffn.fc1_weight")),
            fc1_bias: make(&format!("layers.{i}.ffn.fc1_bias")),
            fc2_weight: make(&format!("layers.{i}.ffn.fc2_weight")),
            fc2_bias: make(&format!("layers.{i}.ffn.fc2_bias")),
        })
        .collect();
    let lnf_gamma = make("ln_f.gamma");
    let lnf_beta = make("ln_f.beta");

    ModelParams {
        config: config.clone(),
        patch_weight,
        patch_bias,
        pos_emb,
        tok_emb,
        layers,
        lnf_gamma,
        lnf_beta,
    }
}

/// Assemble params from named tensors (checkpoint load). Shapes are checked
/// against the config.
pub fn params_from_named(
    config: &ModelConfig,
    mut lookup: impl FnMut(&str) -> Option<Tensor>,
) -> Option<ModelParams> {
    let mut take = |name: String| -> Option<Tensor> {
        let mut t = lookup(&name)?;
        if t.shape != ModelParams::shape_of(config, &name) {
            return None;
        }
        t.requires_grad = true;
        Some(t)
    };
    let patch_weight = take("patch_proj.weight".into())?;
    let patch_bias = take("patch_proj.bias".into())?;
    let pos_emb = take("pos_emb".into())?;
    let tok_emb = take("tok_emb".into())?;
    let mut layers = Vec::with_capacity(config.n_layers);
    for i in 0..config.n_layers {
        layers.push(LayerParams {
            ln1_gamma: take(format!("layers.{i}.ln1.gamma"))?,
            ln1_beta: take(format!("layers.{i}.ln1.beta"))?,
            q_weight: take(format!("layers.{i}.attn.q_weight"))?,
            q_bias: take(format!("layers.{i}.attn.q_bias"))?,
            k_weight: take(format!("layers.{i}.attn.k_weight"))?,
            k_bias: take(format!("layers.{i}.attn.k_bias"))?,
            v_weight: take(format!("layers.{i}.attn.v_weight"))?,
            v_bias: take(format!("layers.{i}.attn.v_bias"))?,
            out_weight: take(format!("layers.{i}.attn.out_weight"))?,
            out_bias: take(format!("layers.{i}.attn.out_bias"))?,
            ln2_gamma: take(format!("layers.{i}.ln2.gamma"))?,
            ln2_beta: take(format!("layers.{i}.ln2.beta"))?,
            fc1_weight: take(format!("layers.{i}.ffn.fc1_weight"))?,
            fc1_bias: take(format!("layers.{i}.ffn.fc1_bias"))?,
            fc2_weight: take(format!("layers.{i}.ffn.fc2_weight"))?,
            fc2_bias: take(format!("layers.{i}.ffn.fc2_bias"))?,
        });
    }
    let lnf_gamma = take("ln_f.gamma".into())?;
    let lnf_beta = take("ln_f.beta".into())?;
    Some(ModelParams {
        config: config.clone(),
        patch_weight,
        patch_bias,
        pos_emb,
        tok_emb,
        layers,
        lnf_gamma,
        lnf_beta,
    })
}

/// Patch embedding of a full image: 48 flattened 8x8 patches linearly
/// projected to d_model. Returns the `[48, d_model]` row-major buffer.
pub fn patch_embed(params: &ModelParams, image: &[f32]) -> Result<Vec<f32>, ModelError> {
    if image.len() != IMAGE_PIXELS {
        return Err(ModelError::BadImageShape { got: image.len() });
    }
    let patches = crate::render::image_to_patches(image);
    Ok(project_patches(params, &patches))
}

/// Linear projection of pre-extracted patches, shared by the graph forward
/// and the incremental decoder.
pub(crate) fn project_patches(params: &ModelParams, patches: &[f32]) -> Vec<f32> {
    use crate::tensor::kernels;
    let d = params.config.d_model;
    let mut out = vec![0.0f32; N_PATCHES * d];
    kernels::matmul(patches, &params.patch_weight.data, N_PATCHES, PATCH_DIM, d, &mut out);
    for row in out.chunks_exact_mut(d) {
        kernels::axpy_all(row, &params.patch_bias.data);
    }
    out
}

/// Teacher-forced forward pass over `[patches][input tokens]`. Causal
/// attention covers the whole packed sequence; logits come back for every
/// position. `dropout_rng` enables train-mode dropout; `None` is the
/// deterministic inference path.
pub fn forward<'p>(
    params: &'p ModelParams,
    patches: &'p [f32],
    input_ids: &[TokenId],
    mut dropout_rng: Option<&mut SplitMix64>,
) -> Result<(Graph<'p>, TensorId), ModelError> {
    let cfg = &params.config;
    let t = N_PATCHES + input_ids.len();
    if t > cfg.max_seq_len {
        return Err(ModelError::SequenceTooLong { len: t, max: cfg.max_seq_len });
    }
    if patches.len() != N_PATCHES * PATCH_DIM {
        return Err(ModelError::BadImageShape { got: patches.len() });
    }

    let mut g = Graph::new();
    let patches_in = g.input(vec![N_PATCHES, PATCH_DIM], patches);
    let pw = g.leaf(&params.patch_weight);
    let pb = g.leaf(&params.patch_bias);
    let pos = g.leaf(&params.pos_emb);
    let tok = g.leaf(&params.tok_emb);

    let projected = g.matmul(patches_in, pw)?;
    let patch_part = g.add_bias(projected, pb)?;
    let ids: Vec<usize> = input_ids.iter().map(|id| id.index()).collect();
    let tok_part = g.gather_rows(tok, &ids)?;
    let embedded = g.concat_rows(&[patch_part, tok_part])?;
    let pos_slice = g.slice_rows(pos, 0, t)?;
    let mut h = g.add(embedded, pos_slice)?;
    if let Some(rng) = dropout_rng.as_deref_mut() {
        h = g.dropout(h, cfg.dropout, rng);
    }

    let head_dim = cfg.head_dim();
    let scale = 1.0 / (head_dim as f32).sqrt();
    for layer in &params.layers {
        let ln1g = g.leaf(&layer.ln1_gamma);
        let ln1b = g.leaf(&layer.ln1_beta);
        let normed = g.layer_norm(h, ln1g, ln1b, LN_EPS)?;

        let qw = g.leaf(&layer.q_weight);
        let qb = g.leaf(&layer.q_bias);
        let kw = g.leaf(&layer.k_weight);
        let kb = g.leaf(&layer.k_bias);
        let vw = g.leaf(&layer.v_weight);
        let vb = g.leaf(&layer.v_bias);
        let q0 = g.matmul(normed, qw)?;
        let q = g.add_bias(q0, qb)?;
        let k0 = g.matmul(normed, kw)?;
        let k = g.add_bias(k0, kb)?;
        let v0 = g.matmul(normed, vw)?;
        let v = g.add_bias(v0, vb)?;

        let mut ctx_parts = Vec::with_capacity(cfg.n_heads);
        for head in 0..cfg.n_heads {
            ctx_parts.push(g.causal_attn_head(q, k, v, head * head_dim, head_dim, scale)?);
        }
        let ctx = g.concat_cols(&ctx_parts)?;
        let ow = g.leaf(&layer.out_weight);
        let ob = g.leaf(&layer.out_bias);
        let proj = g.matmul(ctx, ow)?;
        let mut att = g.add_bias(proj, ob)?;
        if let Some(rng) = dropout_rng.as_deref_mut() {
            att = g.dropout(att, cfg.dropout, rng);
        }
        h = g.add(h, att)?;

        let ln2g = g.leaf(&layer.ln2_gamma);
        let ln2b = g.leaf(&layer.ln2_beta);
        let normed2 = g.layer_norm(h, ln2g, ln2b, LN_EPS)?;
        let w1 = g.leaf(&layer.fc1_weight);
        let b1 = g.leaf(&layer.fc1_bias);
        let w2 = g.leaf(&layer.fc2_weight);
        let b2 = g.leaf(&layer.fc2_bias);
        let f0 = g.matmul(normed2, w1)?;
        let f1 = g.add_bias(f0, b1)?;
        let f2 = g.gelu(f1);
        let f3 = g.matmul(f2, w2)?;
        let mut ffn = g.add_bias(f3, b2)?;
        if let Some(rng) = dropout_rng.as_deref_mut() {
            ffn = g.dropout(ffn, cfg.dropout, rng);
        }
        h = g.add(h, ffn)?;
    }

    let lnfg = g.leaf(&params.lnf_gamma);
    let lnfb = g.leaf(&params.lnf_beta);
    let hn = g.layer_norm(h, lnfg, lnfb, LN_EPS)?;
    let logits = g.matmul_nt(hn, tok)?;
    Ok((g, logits))
}

/// Forward plus masked cross-entropy over the text positions of a packed
/// training sequence. Returns `(graph, logits, loss)`.
pub fn forward_loss<'p>(
    params: &'p ModelParams,
    seq: &'p PackedSequence,
    dropout_rng: Option<&mut SplitMix64>,
) -> Result<(Graph<'p>, TensorId, TensorId), ModelError> {
    let (mut g, logits) = forward(params, &seq.patches, &seq.input_ids, dropout_rng)?;
    let k = seq.input_ids.len();
    let text_logits = g.slice_rows(logits, N_PATCHES, k)?;
    let targets: Vec<usize> = seq.target_ids.iter().map(|id| id.index()).collect();
    let loss = g.cross_entropy_masked(text_logits, &targets, &seq.loss_mask)?;
    Ok((g, logits, loss))
}

/// Hard limit used by [`crate::decode::score_pair`]: scored text must leave
/// room for EOS inside `max_text_len`.
pub fn score_text_limit(config: &ModelConfig) -> usize {
    config.max_text_len - 1
}
