//! Training-data construction: the four packed input/output patterns,
//! misrecognition harvesting, judgment-pair building and stage-2 mixing.
//!
//! Pattern layouts (inputs are fed after the 48 image positions; targets are
//! the next-token labels aligned to those inputs):
//!
//! * A: in `[SEP c1..cL]`            targets `[c1..cL EOS]`          mask all
//! * B: in `[SEP c1..cL SEP TRUE]`   targets `[c1..cL SEP TRUE EOS]` mask all
//! * C: in `[SEP w1..wL SEP FALSE]`  targets `[w1..wL SEP FALSE EOS]` mask bool+EOS
//! * D: in `[SEP c1..cL SEP TRUE]`   targets `[c1..cL SEP TRUE EOS]`  mask bool+EOS
//!
//! where `c*` is ground truth and `w*` a harvested misrecognition.

use std::collections::HashMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decode;
use crate::exec;
use crate::model::ModelParams;
use crate::render::{image_to_patches, RenderedSample};
use crate::rng::SplitMix64;
use crate::vocab::{self, TokenId, EOS, FALSE, SEP, TRUE};

#[derive(Debug, Error, PartialEq)]
pub enum DataError {
    #[error("sample id {0:?} not present in the corpus")]
    UnknownSampleId(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pattern {
    A,
    B,
    C,
    D,
}

/// One packed training sequence. `input_ids`, `target_ids` and `loss_mask`
/// are equal length and aligned; the mask can never select an image
/// position because it only spans the text block.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedSequence {
    pub patches: Arc<Vec<f32>>,
    pub input_ids: Vec<TokenId>,
    pub target_ids: Vec<TokenId>,
    pub loss_mask: Vec<bool>,
    pub pattern: Pattern,
}

/// One harvested (image, wrong text) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Misrecognition {
    pub sample_id: String,
    pub predicted_text: String,
    pub gt_text: String,
}

/// One judgment example; `label == false` iff `pattern == C` iff the text is
/// a harvested misrecognition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgmentExample {
    pub sample_id: String,
    pub text: String,
    pub label: bool,
    pub pattern: Pattern,
}

fn encode_label(label: &str) -> Vec<TokenId> {
    vocab::encode(label).expect("labels and predictions are normalized")
}

/// Pattern A: recognize the characters, supervise chars + EOS.
pub fn pack_pattern_a(patches: Arc<Vec<f32>>, label: &str) -> PackedSequence {
    let chars = encode_label(label);
    let mut input_ids = vec![SEP];
    input_ids.extend(&chars);
    let mut target_ids = chars;
    target_ids.push(EOS);
    let len = target_ids.len();
    PackedSequence { patches, input_ids, target_ids, loss_mask: vec![true; len], pattern: Pattern::A }
}

/// Pattern B: recognize and then assert TRUE; everything is supervised.
/// Ground truth is always (GT text, TRUE) regardless of what the model
/// previously predicted for this image.
pub fn pack_pattern_b(patches: Arc<Vec<f32>>, label: &str) -> PackedSequence {
    let chars = encode_label(label);
    let mut input_ids = vec![SEP];
    input_ids.extend(&chars);
    input_ids.push(SEP);
    input_ids.push(TRUE);
    let mut target_ids = chars;
    target_ids.extend([SEP, TRUE, EOS]);
    let len = target_ids.len();
    PackedSequence { patches, input_ids, target_ids, loss_mask: vec![true; len], pattern: Pattern::B }
}

/// Patterns C/D: the text is given, only the bool verdict and the closing
/// EOS are supervised (exactly two mask bits).
pub fn pack_judgment(patches: Arc<Vec<f32>>, text: &str, label: bool) -> PackedSequence {
    let chars = encode_label(text);
    let bool_tok = if label { TRUE } else { FALSE };
    let mut input_ids = vec![SEP];
    input_ids.extend(&chars);
    input_ids.push(SEP);
    input_ids.push(bool_tok);
    let n_chars = chars.len();
    let mut target_ids = chars;
    target_ids.extend([SEP, bool_tok, EOS]);
    let mut loss_mask = vec![false; n_chars + 3];
    loss_mask[n_chars + 1] = true; // bool
    loss_mask[n_chars + 2] = true; // EOS
    PackedSequence {
        patches,
        input_ids,
        target_ids,
        loss_mask,
        pattern: if label { Pattern::D } else { Pattern::C },
    }
}

/// Patch grids shared between the patterns built from one sample.
pub fn patch_cache(samples: &[RenderedSample]) -> HashMap<String, Arc<Vec<f32>>> {
    let patched = exec::par_map(samples, |s| image_to_patches(&s.image));
    samples.iter().zip(patched).map(|(s, p)| (s.id.clone(), p)).collect()
}

/// One pattern-A example per sample. Labels longer than the renderer limit
/// cannot be packed and are skipped; the count of skips is returned.
pub fn build_stage1(samples: &[RenderedSample]) -> (Vec<PackedSequence>, usize) {
    let mut skipped = 0;
    let packed = exec::par_map(samples, |s| {
        if s.label.len() > crate::render::MAX_LABEL_LEN {
            None
        } else {
            Some(pack_pattern_a(image_to_patches(&s.image), &s.label))
        }
    });
    let mut out = Vec::with_capacity(packed.len());
    for p in packed {
        match p {
            Some(seq) => out.push(seq),
            None => skipped += 1,
        }
    }
    (out, skipped)
}

/// Greedy-decode every sample with `decode_fn` and keep the ones whose
/// normalized prediction differs from the label, ordered by sample id.
pub fn harvest_with<F>(samples: &[RenderedSample], decode_fn: F) -> Vec<Misrecognition>
where
    F: Fn(&RenderedSample) -> String + Sync,
{
    let predictions = exec::par_map(samples, |s| decode_fn(s));
    let mut found: Vec<Misrecognition> = samples
        .iter()
        .zip(predictions)
        .filter(|(s, pred)| vocab::normalize(pred) != s.label)
        .map(|(s, pred)| Misrecognition {
            sample_id: s.id.clone(),
            predicted_text: vocab::normalize(&pred),
            gt_text: s.label.clone(),
        })
        .collect();
    found.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
    found
}

/// Run the trained recognizer over its own training samples and collect the
/// mismatches.
pub fn harvest_misrecognitions(params: &ModelParams, samples: &[RenderedSample]) -> Vec<Misrecognition> {
    harvest_with(samples, |s| decode::generate_recognition(params, &s.image).text)
}

/// Per misrecognition, one FALSE pair from the predicted text (pattern C)
/// and one TRUE pair from the ground truth (pattern D). Correctly recognized
/// images contribute nothing.
pub fn build_judgment(
    misrecs: &[Misrecognition],
    known_ids: &HashMap<String, Arc<Vec<f32>>>,
) -> Result<Vec<JudgmentExample>, DataError> {
    let mut out = Vec::with_capacity(misrecs.len() * 2);
    for m in misrecs {
        if !known_ids.contains_key(&m.sample_id) {
            return Err(DataError::UnknownSampleId(m.sample_id.clone()));
        }
        out.push(JudgmentExample {
            sample_id: m.sample_id.clone(),
            text: m.predicted_text.clone(),
            label: false,
            pattern: Pattern::C,
        });
        out.push(JudgmentExample {
            sample_id: m.sample_id.clone(),
            text: m.gt_text.clone(),
            label: true,
            pattern: Pattern::D,
        });
    }
    Ok(out)
}

fn pack_mix(
    samples: &[RenderedSample],
    judgment: &[JudgmentExample],
    cache: &HashMap<String, Arc<Vec<f32>>>,
    seed: u64,
    keep_false: bool,
) -> Result<Vec<PackedSequence>, DataError> {
    let mut stream: Vec<PackedSequence> = samples
        .iter()
        .map(|s| pack_pattern_b(cache[&s.id].clone(), &s.label))
        .collect();
    for j in judgment {
        if !keep_false && !j.label {
            continue;
        }
        let patches =
            cache.get(&j.sample_id).ok_or_else(|| DataError::UnknownSampleId(j.sample_id.clone()))?;
        stream.push(pack_judgment(patches.clone(), &j.text, j.label));
    }
    SplitMix64::new(seed).shuffle(&mut stream);
    Ok(stream)
}

/// The stage-2 stream: every sample as pattern B plus all judgment examples
/// as patterns C/D, uniformly shuffled by `seed`.
pub fn build_stage2_mix(
    samples: &[RenderedSample],
    judgment: &[JudgmentExample],
    cache: &HashMap<String, Arc<Vec<f32>>>,
    seed: u64,
) -> Result<Vec<PackedSequence>, DataError> {
    pack_mix(samples, judgment, cache, seed, true)
}

/// Ablation arm: as [`build_stage2_mix`] but FALSE pairs are dropped.
pub fn build_true_only_mix(
    samples: &[RenderedSample],
    judgment: &[JudgmentExample],
    cache: &HashMap<String, Arc<Vec<f32>>>,
    seed: u64,
) -> Result<Vec<PackedSequence>, DataError> {
    pack_mix(samples, judgment, cache, seed, false)
}

// ── JSON Lines persistence between CLI stages ──────────────────────────

pub fn write_jsonl<T: Serialize>(path: &std::path::Path, items: &[T]) -> std::io::Result<()> {
    let mut buf = Vec::new();
    for item in items {
        serde_json::to_writer(&mut buf, item)?;
        buf.push(b'\n');
    }
    std::fs::write(path, buf)
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &std::path::Path) -> std::io::Result<Vec<T>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Into::into))
        .collect()
}
