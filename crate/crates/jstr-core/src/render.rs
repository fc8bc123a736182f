//! Deterministic synthetic word-image generation.
//!
//! Every image is a pure function of `(label, difficulty, style_seed)`; a
//! corpus is a pure function of its arguments. The exact draw order of the
//! seeded generator is part of the contract and documented in the README so
//! replay oracles can re-derive any distortion independently.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec;
use crate::font::{self, GLYPH_H, GLYPH_W};
use crate::lexicon::LEXICON;
use crate::rng::{derive_seed, SplitMix64};

pub const IMAGE_H: usize = 32;
pub const IMAGE_W: usize = 96;
pub const IMAGE_PIXELS: usize = IMAGE_H * IMAGE_W;
pub const MAX_LABEL_LEN: usize = 12;

/// Fraction of corpus labels drawn as random alphanumeric strings rather
/// than lexicon words.
pub const RANDOM_LABEL_FRAC: f32 = 0.2;

const MAX_SCALE: usize = 4;
const CHARSET: &[u8] = b"abcdefghijklmnopqrstuvwxyz0123456789";

#[derive(Debug, Error, PartialEq)]
pub enum RenderError {
    #[error("label is empty")]
    EmptyLabel,
    #[error("label {0:?} exceeds {MAX_LABEL_LEN} characters")]
    LabelTooLong(String),
    #[error("label {0:?} contains characters outside the 36-charset")]
    InvalidLabel(String),
    #[error("difficulty mix {0:?} does not sum to 1")]
    BadMix(Vec<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    Clean,
    Noisy,
    Occluded,
    Slanted,
}

impl Difficulty {
    pub const ALL: [Difficulty; 4] =
        [Difficulty::Clean, Difficulty::Noisy, Difficulty::Occluded, Difficulty::Slanted];

    pub fn name(self) -> &'static str {
        match self {
            Difficulty::Clean => "clean",
            Difficulty::Noisy => "noisy",
            Difficulty::Occluded => "occluded",
            Difficulty::Slanted => "slanted",
        }
    }
}

/// Probabilities for the four difficulties, in [clean, noisy, occluded,
/// slanted] order. Must sum to 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DifficultyMix {
    pub clean: f64,
    pub noisy: f64,
    pub occluded: f64,
    pub slanted: f64,
}

impl DifficultyMix {
    pub fn new(clean: f64, noisy: f64, occluded: f64, slanted: f64) -> Result<Self, RenderError> {
        let mix = DifficultyMix { clean, noisy, occluded, slanted };
        mix.validate()?;
        Ok(mix)
    }

    pub fn all_clean() -> Self {
        DifficultyMix { clean: 1.0, noisy: 0.0, occluded: 0.0, slanted: 0.0 }
    }

    pub fn validate(&self) -> Result<(), RenderError> {
        let parts = [self.clean, self.noisy, self.occluded, self.slanted];
        let sum: f64 = parts.iter().sum();
        if parts.iter().any(|&p| p < 0.0) || (sum - 1.0).abs() > 1e-9 {
            return Err(RenderError::BadMix(parts.to_vec()));
        }
        Ok(())
    }

    /// Cumulative-threshold draw; the replay oracle re-derives this from the
    /// same uniform value.
    pub fn pick(&self, u: f32) -> Difficulty {
        let u = u as f64;
        let mut acc = self.clean;
        if u < acc {
            return Difficulty::Clean;
        }
        acc += self.noisy;
        if u < acc {
            return Difficulty::Noisy;
        }
        acc += self.occluded;
        if u < acc {
            return Difficulty::Occluded;
        }
        Difficulty::Slanted
    }
}

/// One synthetic word image: H x W grayscale, values quantized to the
/// 8-bit grid k/255 so PGM round trips are lossless.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedSample {
    pub id: String,
    pub image: Vec<f32>,
    pub label: String,
    pub difficulty: Difficulty,
    pub style_seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Heldout,
}

/// One manifest line; the on-disk form is JSON Lines with exactly these keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub label: String,
    pub difficulty: Difficulty,
    pub path: String,
    pub style_seed: u64,
}

#[derive(Debug, Clone)]
pub struct CorpusManifest {
    pub entries: Vec<ManifestEntry>,
    pub seed: u64,
    pub split: Split,
}

/// Parameters of a generated corpus. The defaults are the frozen desk
/// configuration used by the acceptance suite and `configs/desk.cfg`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub n: usize,
    pub mix: DifficultyMix,
    pub seed: u64,
    pub split_frac: f64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            n: 5000,
            mix: DifficultyMix { clean: 0.4, noisy: 0.3, occluded: 0.2, slanted: 0.1 },
            seed: 1,
            split_frac: 0.15,
        }
    }
}

impl CorpusSpec {
    pub fn generate(&self) -> Result<Corpus, RenderError> {
        generate_corpus(self.n, &self.mix, self.seed, self.split_frac)
    }
}

/// A generated corpus held in memory, already partitioned.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub train: Vec<RenderedSample>,
    pub heldout: Vec<RenderedSample>,
    pub seed: u64,
}

fn validate_label(label: &str) -> Result<(), RenderError> {
    if label.is_empty() {
        return Err(RenderError::EmptyLabel);
    }
    if label.len() > MAX_LABEL_LEN {
        return Err(RenderError::LabelTooLong(label.to_string()));
    }
    if label.bytes().any(|b| !CHARSET.contains(&b)) {
        return Err(RenderError::InvalidLabel(label.to_string()));
    }
    Ok(())
}

/// Integer glyph scale for a label of `len` characters: as large as fits
/// the image with a small margin, capped at 4.
pub fn glyph_scale(len: usize) -> usize {
    let units_w = (GLYPH_W + 1) * len - 1;
    MAX_SCALE.min((IMAGE_W - 8) / units_w).max(1)
}

/// Render one word: glyphs at the integer scale of [`glyph_scale`], centered.
/// All randomness comes from `SplitMix64(style_seed)` and is consumed only
/// by the difficulty distortion, in the draw order documented on each arm
/// below. The finished image is quantized to the 8-bit grid.
pub fn render_word(
    label: &str,
    difficulty: Difficulty,
    style_seed: u64,
) -> Result<RenderedSample, RenderError> {
    validate_label(label)?;
    let mut rng = SplitMix64::new(style_seed);
    let mut image = vec![0.0f32; IMAGE_PIXELS];

    let s = glyph_scale(label.len());
    let gw = ((GLYPH_W + 1) * label.len() - 1) * s;
    let gh = GLYPH_H * s;
    let x_off = (IMAGE_W - gw) / 2;
    let y_off = (IMAGE_H - gh) / 2;

    for (ci, c) in label.chars().enumerate() {
        let rows = font::glyph(c).expect("validated charset");
        let gx = x_off + ci * (GLYPH_W + 1) * s;
        for r in 0..GLYPH_H {
            for col in 0..GLYPH_W {
                if font::pixel_set(&rows, r, col) {
                    for dy in 0..s {
                        let y = y_off + r * s + dy;
                        let base = y * IMAGE_W + gx + col * s;
                        image[base..base + s].fill(1.0);
                    }
                }
            }
        }
    }

    match difficulty {
        Difficulty::Clean => {}
        Difficulty::Noisy => {
            // sigma = 0.05 + 0.15 * f32, then one normal per pixel row-major.
            let sigma = 0.05 + 0.15 * rng.next_f32();
            for p in image.iter_mut() {
                *p = (*p + sigma * rng.normal()).clamp(0.0, 1.0);
            }
        }
        Difficulty::Occluded => {
            // frac = 0.10 + 0.20 * f32; width = round(W * frac);
            // x0 = below(W - width + 1); shade = f32.
            let frac = 0.10 + 0.20 * rng.next_f32();
            let width = (IMAGE_W as f32 * frac).round() as usize;
            let x0 = rng.below((IMAGE_W - width) as u64 + 1) as usize;
            let shade = rng.next_f32();
            for row in image.chunks_exact_mut(IMAGE_W) {
                row[x0..x0 + width].fill(shade);
            }
        }
        Difficulty::Slanted => {
            // shear = -0.3 + 0.6 * f32; nearest-neighbour horizontal shear
            // about the vertical centre.
            let shear = -0.3 + 0.6 * rng.next_f32();
            let src = image.clone();
            for y in 0..IMAGE_H {
                let shift = shear * (y as f32 - (IMAGE_H as f32 - 1.0) / 2.0);
                for x in 0..IMAGE_W {
                    let sx = (x as f32 - shift).round() as isize;
                    image[y * IMAGE_W + x] = if (0..IMAGE_W as isize).contains(&sx) {
                        src[y * IMAGE_W + sx as usize]
                    } else {
                        0.0
                    };
                }
            }
        }
    }

    for p in image.iter_mut() {
        *p = quantize(*p);
    }

    Ok(RenderedSample {
        id: String::new(),
        image,
        label: label.to_string(),
        difficulty,
        style_seed,
    })
}

/// Snap to the 8-bit grid used by the PGM writer.
#[inline]
pub fn quantize(p: f32) -> f32 {
    (p.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// The label/difficulty/style decisions for corpus sample `index`, re-derivable
/// from `(seed, index)` alone. Draw order from `SplitMix64(derive_seed(seed, index))`:
/// 1. label kind (`f32 < 0.2` picks a random string), 2. label draws,
/// 3. difficulty uniform, 4. `style_seed = next_u64()`.
pub fn sample_plan(seed: u64, index: u64, mix: &DifficultyMix) -> (String, Difficulty, u64) {
    let mut rng = SplitMix64::new(derive_seed(seed, index));
    let label = if rng.next_f32() < RANDOM_LABEL_FRAC {
        let len = 1 + rng.below(MAX_LABEL_LEN as u64) as usize;
        (0..len).map(|_| CHARSET[rng.below(36) as usize] as char).collect()
    } else {
        LEXICON[rng.below(LEXICON.len() as u64) as usize].to_string()
    };
    let difficulty = mix.pick(rng.next_f32());
    let style_seed = rng.next_u64();
    (label, difficulty, style_seed)
}

/// Generate `n` samples and split them deterministically: indices below
/// `n - round(n * split_frac)` are train, the rest heldout.
pub fn generate_corpus(
    n: usize,
    mix: &DifficultyMix,
    seed: u64,
    split_frac: f64,
) -> Result<Corpus, RenderError> {
    assert!(n >= 1, "corpus size must be at least 1");
    assert!((0.0..1.0).contains(&split_frac), "split_frac in [0,1)");
    mix.validate()?;

    let samples: Vec<RenderedSample> = exec::par_map_indexed(n, |i| {
        let (label, difficulty, style_seed) = sample_plan(seed, i as u64, mix);
        let mut s = render_word(&label, difficulty, style_seed).expect("generated labels are valid");
        s.id = format!("s{i:06}");
        s
    });

    let n_heldout = (n as f64 * split_frac).round() as usize;
    let n_train = n - n_heldout;
    let mut train = samples;
    let heldout = train.split_off(n_train);
    Ok(Corpus { train, heldout, seed })
}

impl Corpus {
    pub fn manifest(&self, split: Split, image_dir: &str) -> CorpusManifest {
        let samples = match split {
            Split::Train => &self.train,
            Split::Heldout => &self.heldout,
        };
        CorpusManifest {
            entries: samples
                .iter()
                .map(|s| ManifestEntry {
                    id: s.id.clone(),
                    label: s.label.clone(),
                    difficulty: s.difficulty,
                    path: format!("{image_dir}/{}.pgm", s.id),
                    style_seed: s.style_seed,
                })
                .collect(),
            seed: self.seed,
            split,
        }
    }
}

// ── file I/O ───────────────────────────────────────────────────────────

/// Binary 8-bit PGM (P5), pixel = round(p * 255).
pub fn write_pgm(path: &Path, image: &[f32]) -> std::io::Result<()> {
    assert_eq!(image.len(), IMAGE_PIXELS);
    let mut buf = Vec::with_capacity(IMAGE_PIXELS + 32);
    write!(buf, "P5\n{IMAGE_W} {IMAGE_H}\n255\n")?;
    buf.extend(image.iter().map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8));
    std::fs::write(path, buf)
}

pub fn read_pgm(path: &Path) -> std::io::Result<Vec<f32>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let err = |msg: &str| std::io::Error::new(std::io::ErrorKind::InvalidData, msg.to_string());
    // Header: "P5\n<w> <h>\n255\n", then raw pixels.
    let header_end = bytes
        .windows(4)
        .position(|w| w == b"255\n")
        .ok_or_else(|| err("missing maxval"))?
        + 4;
    let header = std::str::from_utf8(&bytes[..header_end]).map_err(|_| err("bad header"))?;
    let mut fields = header.split_ascii_whitespace();
    if fields.next() != Some("P5") {
        return Err(err("not a P5 PGM"));
    }
    let w: usize = fields.next().and_then(|s| s.parse().ok()).ok_or_else(|| err("bad width"))?;
    let h: usize = fields.next().and_then(|s| s.parse().ok()).ok_or_else(|| err("bad height"))?;
    if (w, h) != (IMAGE_W, IMAGE_H) {
        return Err(err(&format!("unexpected dimensions {w}x{h}")));
    }
    let pixels = &bytes[header_end..];
    if pixels.len() != IMAGE_PIXELS {
        return Err(err("truncated pixel data"));
    }
    Ok(pixels.iter().map(|&b| b as f32 / 255.0).collect())
}

pub fn write_manifest(path: &Path, manifest: &CorpusManifest) -> std::io::Result<()> {
    let mut buf = Vec::new();
    for entry in &manifest.entries {
        serde_json::to_writer(&mut buf, entry)?;
        buf.push(b'\n');
    }
    std::fs::write(path, buf)
}

pub fn read_manifest(path: &Path, seed: u64, split: Split) -> std::io::Result<CorpusManifest> {
    let text = std::fs::read_to_string(path)?;
    let mut entries = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        entries.push(serde_json::from_str(line)?);
    }
    Ok(CorpusManifest { entries, seed, split })
}

/// Load manifest entries back into memory, reading images relative to `root`.
pub fn load_samples(manifest: &CorpusManifest, root: &Path) -> std::io::Result<Vec<RenderedSample>> {
    manifest
        .entries
        .iter()
        .map(|e| {
            Ok(RenderedSample {
                id: e.id.clone(),
                image: read_pgm(&root.join(&e.path))?,
                label: e.label.clone(),
                difficulty: e.difficulty,
                style_seed: e.style_seed,
            })
        })
        .collect()
}

/// Patch grid for the model: 8x8 non-overlapping patches in row-major grid
/// order, each flattened row-major to 64 values.
pub fn image_to_patches(image: &[f32]) -> Arc<Vec<f32>> {
    assert_eq!(image.len(), IMAGE_PIXELS);
    const P: usize = 8;
    let grid_h = IMAGE_H / P;
    let grid_w = IMAGE_W / P;
    let mut out = Vec::with_capacity(IMAGE_PIXELS);
    for gr in 0..grid_h {
        for gc in 0..grid_w {
            for r in 0..P {
                let base = (gr * P + r) * IMAGE_W + gc * P;
                out.extend_from_slice(&image[base..base + P]);
            }
        }
    }
    Arc::new(out)
}
