//! Flat `key = value` config files with `[section]` headers.
//!
//! The schema is documented in the README. Parsing is hand-rolled on
//! purpose: the format carries no nesting, quoting or type tags, so a full
//! serialization library would pin semantics we do not want.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use jstr_core::eval::AblationConfig;
use jstr_core::model::ModelConfig;
use jstr_core::render::{CorpusSpec, DifficultyMix};
use jstr_core::train::TrainConfig;

/// Fully resolved run configuration; one of these is serialized next to
/// every output directory for provenance.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub corpus: CorpusSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub ablate: AblationConfig,
}

pub fn parse_mix(text: &str) -> Result<DifficultyMix, String> {
    let mut parts: BTreeMap<&str, f64> = BTreeMap::new();
    for piece in text.split(',') {
        let (k, v) = piece
            .split_once('=')
            .or_else(|| piece.split_once(':'))
            .ok_or_else(|| format!("bad mix component {piece:?} (want name=weight)"))?;
        let w: f64 = v.trim().parse().map_err(|_| format!("bad mix weight {v:?}"))?;
        parts.insert(k.trim(), w);
    }
    let get = |k: &str| parts.get(k).copied().unwrap_or(0.0);
    for k in parts.keys() {
        if !["clean", "noisy", "occluded", "slanted"].contains(k) {
            return Err(format!("unknown difficulty {k:?}"));
        }
    }
    DifficultyMix::new(get("clean"), get("noisy"), get("occluded"), get("slanted"))
        .map_err(|e| e.to_string())
}

pub fn mix_to_string(mix: &DifficultyMix) -> String {
    format!(
        "clean={},noisy={},occluded={},slanted={}",
        mix.clean, mix.noisy, mix.occluded, mix.slanted
    )
}

impl RunConfig {
    /// Parse config text, overlaying values onto the defaults. Unknown
    /// sections or keys are errors.
    pub fn parse(text: &str) -> Result<RunConfig, String> {
        let mut cfg = RunConfig::default();
        let mut section = String::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                if !["corpus", "model", "train", "ablate"].contains(&section.as_str()) {
                    return Err(format!("line {}: unknown section [{section}]", lineno + 1));
                }
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| format!("line {}: expected key = value", lineno + 1))?;
            let key = key.trim();
            let value = value.trim();
            cfg.set(&section, key, value)
                .map_err(|e| format!("line {}: {e}", lineno + 1))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<RunConfig, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        RunConfig::parse(&text)
    }

    pub fn set(&mut self, section: &str, key: &str, value: &str) -> Result<(), String> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, String> {
            value.parse().map_err(|_| format!("bad value {value:?} for {key}"))
        }
        match (section, key) {
            ("corpus", "n") => self.corpus.n = num(key, value)?,
            ("corpus", "mix") => self.corpus.mix = parse_mix(value)?,
            ("corpus", "seed") => self.corpus.seed = num(key, value)?,
            ("corpus", "split_frac") => self.corpus.split_frac = num(key, value)?,
            ("model", "d_model") => self.model.d_model = num(key, value)?,
            ("model", "n_layers") => self.model.n_layers = num(key, value)?,
            ("model", "n_heads") => self.model.n_heads = num(key, value)?,
            ("model", "ffn_mult") => self.model.ffn_mult = num(key, value)?,
            ("model", "dropout") => self.model.dropout = num(key, value)?,
            ("train", "batch_size") => self.train.batch_size = num(key, value)?,
            ("train", "stage1_epochs") => self.train.stage1_epochs = num(key, value)?,
            ("train", "stage2_epochs") => self.train.stage2_epochs = num(key, value)?,
            ("train", "stage2_warmup_epochs") => self.train.stage2_warmup_epochs = num(key, value)?,
            ("train", "peak_lr") => self.train.peak_lr = num(key, value)?,
            ("train", "weight_decay") => self.train.weight_decay = num(key, value)?,
            ("train", "grad_clip") => self.train.grad_clip = num(key, value)?,
            ("train", "seed") => self.train.seed = num(key, value)?,
            ("ablate", "seeds") => {
                let seeds: Result<Vec<u64>, _> =
                    value.split(',').map(|s| s.trim().parse::<u64>()).collect();
                self.ablate.seeds = seeds.map_err(|_| format!("bad seed list {value:?}"))?;
            }
            ("ablate", "judge_holdback") => self.ablate.judge_holdback = num(key, value)?,
            _ => return Err(format!("unknown key {key:?} in section [{section}]")),
        }
        Ok(())
    }

    /// Serialize in the same format [`RunConfig::parse`] reads.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "[corpus]");
        let _ = writeln!(s, "n = {}", self.corpus.n);
        let _ = writeln!(s, "mix = {}", mix_to_string(&self.corpus.mix));
        let _ = writeln!(s, "seed = {}", self.corpus.seed);
        let _ = writeln!(s, "split_frac = {}", self.corpus.split_frac);
        let _ = writeln!(s, "\n[model]");
        let _ = writeln!(s, "d_model = {}", self.model.d_model);
        let _ = writeln!(s, "n_layers = {}", self.model.n_layers);
        let _ = writeln!(s, "n_heads = {}", self.model.n_heads);
        let _ = writeln!(s, "ffn_mult = {}", self.model.ffn_mult);
        let _ = writeln!(s, "dropout = {}", self.model.dropout);
        let _ = writeln!(s, "\n[train]");
        let _ = writeln!(s, "batch_size = {}", self.train.batch_size);
        let _ = writeln!(s, "stage1_epochs = {}", self.train.stage1_epochs);
        let _ = writeln!(s, "stage2_epochs = {}", self.train.stage2_epochs);
        let _ = writeln!(s, "stage2_warmup_epochs = {}", self.train.stage2_warmup_epochs);
        let _ = writeln!(s, "peak_lr = {}", self.train.peak_lr);
        let _ = writeln!(s, "weight_decay = {}", self.train.weight_decay);
        let _ = writeln!(s, "grad_clip = {}", self.train.grad_clip);
        let _ = writeln!(s, "seed = {}", self.train.seed);
        let _ = writeln!(s, "\n[ablate]");
        let _ = writeln!(
            s,
            "seeds = {}",
            self.ablate.seeds.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
        );
        let _ = writeln!(s, "judge_holdback = {}", self.ablate.judge_holdback);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        let text = cfg.to_text();
        let back = RunConfig::parse(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn overlay_and_comments() {
        let cfg = RunConfig::parse(
            "# comment\n[train]\nseed = 42\npeak_lr = 1e-3\n\n[corpus]\nn = 100 # inline\n",
        )
        .unwrap();
        assert_eq!(cfg.train.seed, 42);
        assert_eq!(cfg.train.peak_lr, 1e-3);
        assert_eq!(cfg.corpus.n, 100);
        assert_eq!(cfg.train.batch_size, TrainConfig::default().batch_size);
    }

    #[test]
    fn bad_inputs_are_rejected() {
        assert!(RunConfig::parse("[nope]\n").is_err());
        assert!(RunConfig::parse("[train]\nwhat = 1\n").is_err());
        assert!(RunConfig::parse("[train]\nseed\n").is_err());
        assert!(parse_mix("clean=2.0").is_err());
        assert!(parse_mix("klean=1.0").is_err());
        assert!(parse_mix("clean=0.5,noisy=0.5").is_ok());
    }
}
