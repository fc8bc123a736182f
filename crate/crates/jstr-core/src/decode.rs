//! Greedy autoregressive decoding and pair scoring.
//!
//! This is the inference path: a per-position forward with per-layer K/V
//! caches. It reuses the exact row kernels of the graph forward (same dot
//! order, same f64 reductions), so step-by-step logits match teacher-forced
//! logits bit-for-bit; the decode-consistency suite asserts it to 1e-5.

use crate::model::{ModelError, ModelParams, LN_EPS};
use crate::render::image_to_patches;
use crate::tensor::kernels;
use crate::vocab::{self, TokenId, EOS, FALSE, SEP, TRUE};

/// Result of greedy decoding one image.
#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    /// Accumulated character tokens.
    pub text: String,
    /// Judgment emitted after a second SEP, if the model produced one.
    pub verdict: Option<bool>,
    /// True when decoding hit the text-length or sequence-capacity cap.
    pub truncated: bool,
    /// Tokens fed after the image block, starting with SEP.
    pub inputs: Vec<TokenId>,
    /// Greedy picks, aligned with `inputs`: `emitted[i]` is the argmax of
    /// the logits at the position holding `inputs[i]`.
    pub emitted: Vec<TokenId>,
}

/// Incremental per-position forward with K/V caches.
pub struct DecodeState<'p> {
    params: &'p ModelParams,
    k_cache: Vec<Vec<f32>>,
    v_cache: Vec<Vec<f32>>,
    len: usize,
}

impl<'p> DecodeState<'p> {
    pub fn new(params: &'p ModelParams) -> Self {
        let n = params.config.n_layers;
        DecodeState {
            params,
            k_cache: vec![Vec::new(); n],
            v_cache: vec![Vec::new(); n],
            len: 0,
        }
    }

    pub fn positions_used(&self) -> usize {
        self.len
    }

    pub fn positions_left(&self) -> usize {
        self.params.config.max_seq_len - self.len
    }

    fn linear_row(x: &[f32], w: &[f32], b: &[f32], d_in: usize, d_out: usize) -> Vec<f32> {
        let mut out = vec![0.0f32; d_out];
        kernels::matmul(x, w, 1, d_in, d_out, &mut out);
        kernels::axpy_all(&mut out, b);
        out
    }

    /// Run one embedded position through every block, appending to the
    /// caches. Returns the post-block hidden row (before the final norm).
    pub fn advance(&mut self, mut h: Vec<f32>) -> Vec<f32> {
        let cfg = &self.params.config;
        let d = cfg.d_model;
        let hd = cfg.head_dim();
        let scale = 1.0 / (hd as f32).sqrt();
        debug_assert!(self.len < cfg.max_seq_len, "decode capacity exceeded");

        for (li, layer) in self.params.layers.iter().enumerate() {
            let mut normed = vec![0.0f32; d];
            kernels::layer_norm_row(&h, &layer.ln1_gamma.data, &layer.ln1_beta.data, LN_EPS, &mut normed);
            let q = Self::linear_row(&normed, &layer.q_weight.data, &layer.q_bias.data, d, d);
            let k = Self::linear_row(&normed, &layer.k_weight.data, &layer.k_bias.data, d, d);
            let v = Self::linear_row(&normed, &layer.v_weight.data, &layer.v_bias.data, d, d);
            self.k_cache[li].extend_from_slice(&k);
            self.v_cache[li].extend_from_slice(&v);

            let t = self.len + 1;
            let mut ctx = vec![0.0f32; d];
            let mut scores = vec![0.0f32; t];
            let mut weights = vec![0.0f32; t];
            for head in 0..cfg.n_heads {
                let off = head * hd;
                for (ti, s) in scores.iter_mut().enumerate() {
                    let krow = &self.k_cache[li][ti * d + off..ti * d + off + hd];
                    *s = kernels::dot(&q[off..off + hd], krow) * scale;
                }
                kernels::softmax_row(&scores, &mut weights);
                let ctx_h = &mut ctx[off..off + hd];
                for (ti, &w) in weights.iter().enumerate() {
                    let vrow = &self.v_cache[li][ti * d + off..ti * d + off + hd];
                    for (c, &vv) in ctx_h.iter_mut().zip(vrow) {
                        *c += w * vv;
                    }
                }
            }
            let att = Self::linear_row(&ctx, &layer.out_weight.data, &layer.out_bias.data, d, d);
            kernels::axpy_all(&mut h, &att);

            let mut normed2 = vec![0.0f32; d];
            kernels::layer_norm_row(&h, &layer.ln2_gamma.data, &layer.ln2_beta.data, LN_EPS, &mut normed2);
            let f = cfg.ffn_dim();
            let mut f1 = Self::linear_row(&normed2, &layer.fc1_weight.data, &layer.fc1_bias.data, d, f);
            for x in f1.iter_mut() {
                *x = kernels::gelu(*x);
            }
            let f2 = Self::linear_row(&f1, &layer.fc2_weight.data, &layer.fc2_bias.data, f, d);
            kernels::axpy_all(&mut h, &f2);
        }
        self.len += 1;
        h
    }

    /// Vocabulary logits for a post-block hidden row.
    pub fn logits_for(&self, h: &[f32]) -> Vec<f32> {
        let cfg = &self.params.config;
        let d = cfg.d_model;
        let mut hn = vec![0.0f32; d];
        kernels::layer_norm_row(h, &self.params.lnf_gamma.data, &self.params.lnf_beta.data, LN_EPS, &mut hn);
        let mut logits = vec![0.0f32; cfg.vocab_size];
        kernels::matmul_nt(&hn, &self.params.tok_emb.data, 1, d, cfg.vocab_size, &mut logits);
        logits
    }

    /// Feed all 48 patch positions. Their logits are never needed.
    pub fn push_patches(&mut self, patches: &[f32]) {
        let d = self.params.config.d_model;
        let projected = crate::model::project_patches(self.params, patches);
        for (i, row) in projected.chunks_exact(d).enumerate() {
            let mut emb = row.to_vec();
            kernels::axpy_all(&mut emb, &self.params.pos_emb.data[i * d..(i + 1) * d]);
            self.advance(emb);
        }
    }

    /// Feed one token at the next position and return its logits row.
    pub fn push_token(&mut self, tok: TokenId) -> Vec<f32> {
        let d = self.params.config.d_model;
        let pos = self.len;
        let mut emb = self.params.tok_emb.data[tok.index() * d..(tok.index() + 1) * d].to_vec();
        kernels::axpy_all(&mut emb, &self.params.pos_emb.data[pos * d..(pos + 1) * d]);
        let h = self.advance(emb);
        self.logits_for(&h)
    }
}

/// Unrestricted argmax; first index wins ties.
pub fn argmax_token(logits: &[f32]) -> TokenId {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    TokenId(best as u8)
}

/// Argmax restricted to {TRUE, FALSE}; ties resolve to TRUE.
pub fn judge_token(logits: &[f32]) -> bool {
    logits[TRUE.index()] >= logits[FALSE.index()]
}

/// Probability of TRUE under the softmax restricted to {TRUE, FALSE}.
pub fn judge_probability(logits: &[f32]) -> f64 {
    let lt = logits[TRUE.index()] as f64;
    let lf = logits[FALSE.index()] as f64;
    let m = lt.max(lf);
    let et = (lt - m).exp();
    let ef = (lf - m).exp();
    et / (et + ef)
}

/// Greedy decoding from `[patches, SEP]`: character tokens accumulate into
/// text; a second SEP switches to the judgment position, where the argmax is
/// restricted to {TRUE, FALSE}; EOS stops. Decoding also stops (with
/// `truncated` set) once `max_text_len` characters have been produced or the
/// packed sequence is out of positions. Other control tokens consume a
/// position without contributing characters, so degenerate decodes are
/// well-defined.
pub fn generate_from_patches(params: &ModelParams, patches: &[f32]) -> Generation {
    let max_text = params.config.max_text_len;
    let mut state = DecodeState::new(params);
    state.push_patches(patches);

    let mut gen = Generation {
        text: String::new(),
        verdict: None,
        truncated: false,
        inputs: Vec::new(),
        emitted: Vec::new(),
    };
    let mut logits = state.push_token(SEP);
    gen.inputs.push(SEP);

    loop {
        let tok = argmax_token(&logits);
        gen.emitted.push(tok);
        match tok {
            EOS => break,
            SEP => {
                if state.positions_left() == 0 {
                    gen.truncated = true;
                    break;
                }
                logits = state.push_token(SEP);
                gen.inputs.push(SEP);
                let verdict = judge_token(&logits);
                gen.verdict = Some(verdict);
                gen.emitted.push(if verdict { TRUE } else { FALSE });
                break;
            }
            t if t.is_char() => {
                gen.text.push(vocab::char_of(t).expect("char token"));
                if gen.text.len() >= max_text || state.positions_left() == 0 {
                    gen.truncated = true;
                    break;
                }
                logits = state.push_token(t);
                gen.inputs.push(t);
            }
            other => {
                // PAD / TRUE / FALSE outside the judgment slot.
                if state.positions_left() == 0 {
                    gen.truncated = true;
                    break;
                }
                logits = state.push_token(other);
                gen.inputs.push(other);
            }
        }
    }
    gen
}

pub fn generate_recognition(params: &ModelParams, image: &[f32]) -> Generation {
    generate_from_patches(params, &image_to_patches(image))
}

/// Assemble `[patches, SEP, text, SEP]` and read the judgment distribution
/// at the final position. Returns `(verdict, p_true)`.
pub fn score_pair_patches(
    params: &ModelParams,
    patches: &[f32],
    text: &str,
) -> Result<(bool, f64), ModelError> {
    let limit = crate::model::score_text_limit(&params.config);
    let ids = vocab::encode(text).map_err(|_| ModelError::TextTooLong { len: text.len(), max: limit })?;
    if ids.len() > limit {
        return Err(ModelError::TextTooLong { len: ids.len(), max: limit });
    }
    let mut state = DecodeState::new(params);
    state.push_patches(patches);
    state.push_token(SEP);
    for &t in &ids {
        state.push_token(t);
    }
    let logits = state.push_token(SEP);
    Ok((judge_token(&logits), judge_probability(&logits)))
}

pub fn score_pair(params: &ModelParams, image: &[f32], text: &str) -> Result<(bool, f64), ModelError> {
    score_pair_patches(params, &image_to_patches(image), text)
}
