//! `jstr` — command-line pipeline for the judgment-augmented scene-text
//! recognizer. Every stage communicates through files, every command is
//! deterministic given its seeds, and every output directory carries the
//! resolved config that produced it.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{parse_mix, RunConfig};
use jstr_core::checkpoint::Checkpoint;
use jstr_core::data::{
    build_judgment, build_stage2_mix, harvest_misrecognitions, patch_cache, read_jsonl,
    write_jsonl, JudgmentExample, Misrecognition,
};
use jstr_core::eval::{
    evaluate_model, gallery_markdown, parse_report_csv, report_csv, report_markdown,
    run_ablation, AblationResult, Arm, EvalReport,
};
use jstr_core::render::{
    generate_corpus, load_samples, read_manifest, write_manifest, write_pgm, Corpus, Split,
};
use jstr_core::train::{log_to_csv, train_stage1, train_stage2, EvalHooks};

/// Exit codes: 0 success, 2 usage, 3 I/O, 4 missing prerequisite artifact.
enum AppError {
    Usage(String),
    Io(String),
    Missing(String),
}

impl AppError {
    fn code(&self) -> u8 {
        match self {
            AppError::Usage(_) => 2,
            AppError::Io(_) => 3,
            AppError::Missing(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            AppError::Usage(m) | AppError::Io(m) | AppError::Missing(m) => m,
        }
    }
}

fn io_err<E: std::fmt::Display>(context: &str) -> impl Fn(E) -> AppError + '_ {
    move |e| AppError::Io(format!("{context}: {e}"))
}

type Result<T> = std::result::Result<T, AppError>;

#[derive(Parser)]
#[command(name = "jstr", version, about = "Scene-text recognition with self-judgment training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic word-image corpus (PGM images + JSONL manifests).
    GenCorpus {
        /// Total number of samples across both splits.
        #[arg(long)]
        n: Option<usize>,
        /// Difficulty mix, e.g. clean=0.4,noisy=0.3,occluded=0.2,slanted=0.1
        #[arg(long)]
        mix: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        /// Heldout fraction in [0,1).
        #[arg(long)]
        split_frac: Option<f64>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train stage 1 (recognition) or stage 2 (recognition + judgment).
    Train {
        #[arg(long)]
        stage: u8,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        corpus: PathBuf,
        /// Stage-1 checkpoint to continue from (required for --stage 2).
        #[arg(long)]
        ckpt_in: Option<PathBuf>,
        /// Judgment examples (JSONL) mixed into stage-2 training.
        #[arg(long)]
        judgment: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decode the training split and write misrecognitions as JSONL.
    Harvest {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Turn harvested misrecognitions into TRUE/FALSE judgment pairs.
    BuildJudgment {
        #[arg(long)]
        harvest: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Keep only the TRUE pairs (ablation arm).
        #[arg(long)]
        true_only: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on the heldout split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the four-arm ablation end to end and write all artifacts.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-render ablation artifacts as CSV or markdown (plus the gallery).
    Report {
        #[arg(long, value_name = "DIR")]
        r#in: PathBuf,
        #[arg(long, value_parser = ["csv", "markdown"])]
        format: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    if let Ok(threads) = std::env::var("JSTR_THREADS") {
        match threads.parse::<usize>() {
            Ok(n) if n >= 1 => jstr_core::exec::limit_threads(n),
            _ => {
                eprintln!("error: JSTR_THREADS must be a positive integer");
                return ExitCode::from(2);
            }
        }
    }
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => {
            if !p.exists() {
                return Err(AppError::Missing(format!("config file {} not found", p.display())));
            }
            RunConfig::load(p).map_err(AppError::Usage)
        }
        None => Ok(RunConfig::default()),
    }
}

fn ensure_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(io_err(&format!("creating {}", path.display())))
}

fn write_runconfig(dir: &Path, cfg: &RunConfig) -> Result<()> {
    std::fs::write(dir.join("runconfig.cfg"), cfg.to_text())
        .map_err(io_err("writing runconfig.cfg"))
}

/// Load a corpus directory written by `gen-corpus`.
fn load_corpus(dir: &Path) -> Result<Corpus> {
    let train_path = dir.join("train.jsonl");
    let heldout_path = dir.join("heldout.jsonl");
    if !train_path.exists() || !heldout_path.exists() {
        return Err(AppError::Missing(format!(
            "corpus manifests not found under {}",
            dir.display()
        )));
    }
    let seed = std::fs::read_to_string(dir.join("runconfig.cfg"))
        .ok()
        .and_then(|t| RunConfig::parse(&t).ok())
        .map(|c| c.corpus.seed)
        .unwrap_or(0);
    let train_manifest =
        read_manifest(&train_path, seed, Split::Train).map_err(io_err("reading train.jsonl"))?;
    let heldout_manifest = read_manifest(&heldout_path, seed, Split::Heldout)
        .map_err(io_err("reading heldout.jsonl"))?;
    let train = load_samples(&train_manifest, dir).map_err(io_err("loading train images"))?;
    let heldout = load_samples(&heldout_manifest, dir).map_err(io_err("loading heldout images"))?;
    Ok(Corpus { train, heldout, seed })
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(AppError::Missing(format!("checkpoint {} not found", path.display())));
    }
    Checkpoint::load(path).map_err(|e| AppError::Io(format!("loading {}: {e}", path.display())))
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenCorpus { n, mix, seed, split_frac, config, out } => {
            let mut cfg = load_config(&config)?;
            if let Some(n) = n {
                cfg.corpus.n = n;
            }
            if let Some(mix) = mix {
                cfg.corpus.mix = parse_mix(&mix).map_err(AppError::Usage)?;
            }
            if let Some(seed) = seed {
                cfg.corpus.seed = seed;
            }
            if let Some(frac) = split_frac {
                cfg.corpus.split_frac = frac;
            }
            if cfg.corpus.n == 0 {
                return Err(AppError::Usage("--n must be at least 1".into()));
            }
            if !(0.0..1.0).contains(&cfg.corpus.split_frac) {
                return Err(AppError::Usage("--split-frac must be in [0,1)".into()));
            }
            let corpus = generate_corpus(cfg.corpus.n, &cfg.corpus.mix, cfg.corpus.seed, cfg.corpus.split_frac)
                .map_err(|e| AppError::Usage(e.to_string()))?;
            ensure_dir(&out)?;
            ensure_dir(&out.join("images"))?;
            for sample in corpus.train.iter().chain(&corpus.heldout) {
                write_pgm(&out.join("images").join(format!("{}.pgm", sample.id)), &sample.image)
                    .map_err(io_err("writing images"))?;
            }
            write_manifest(&out.join("train.jsonl"), &corpus.manifest(Split::Train, "images"))
                .map_err(io_err("writing train.jsonl"))?;
            write_manifest(&out.join("heldout.jsonl"), &corpus.manifest(Split::Heldout, "images"))
                .map_err(io_err("writing heldout.jsonl"))?;
            write_runconfig(&out, &cfg)?;
            println!(
                "wrote {} train + {} heldout samples to {}",
                corpus.train.len(),
                corpus.heldout.len(),
                out.display()
            );
            Ok(())
        }

        Command::Train { stage, config, corpus, ckpt_in, judgment, seed, epochs, out } => {
            let mut cfg = load_config(&config)?;
            if let Some(seed) = seed {
                cfg.train.seed = seed;
            }
            let corpus = load_corpus(&corpus)?;
            ensure_dir(&out)?;
            match stage {
                1 => {
                    if let Some(e) = epochs {
                        cfg.train.stage1_epochs = e;
                    }
                    let outcome = train_stage1(&cfg.model, &cfg.train, &corpus);
                    let ckpt = Checkpoint::from_params(
                        &outcome.params,
                        Some(&outcome.opt),
                        outcome.steps as u64,
                        cfg.train.seed,
                    );
                    ckpt.save(&out.join("stage1.ckpt")).map_err(io_err("saving checkpoint"))?;
                    std::fs::write(out.join("log.csv"), log_to_csv(&outcome.log))
                        .map_err(io_err("writing log.csv"))?;
                    write_runconfig(&out, &cfg)?;
                    println!(
                        "stage 1 done: {} steps, heldout word accuracy {:.4}",
                        outcome.steps,
                        outcome.final_heldout_acc.unwrap_or(f64::NAN)
                    );
                    Ok(())
                }
                2 => {
                    if let Some(e) = epochs {
                        cfg.train.stage2_epochs = e;
                    }
                    let ckpt_path = ckpt_in.ok_or_else(|| {
                        AppError::Missing("--stage 2 requires --ckpt-in <stage-1 checkpoint>".into())
                    })?;
                    let ckpt = load_checkpoint(&ckpt_path)?;
                    let (params, _) = ckpt
                        .into_state()
                        .map_err(|e| AppError::Io(format!("reading checkpoint: {e}")))?;
                    let judgment_examples: Vec<JudgmentExample> = match &judgment {
                        Some(path) => {
                            if !path.exists() {
                                return Err(AppError::Missing(format!(
                                    "judgment file {} not found",
                                    path.display()
                                )));
                            }
                            read_jsonl(path).map_err(io_err("reading judgment file"))?
                        }
                        None => {
                            eprintln!(
                                "warning: no --judgment file; stage 2 runs on pattern B only"
                            );
                            Vec::new()
                        }
                    };
                    let cache = patch_cache(&corpus.train);
                    let mix = build_stage2_mix(
                        &corpus.train,
                        &judgment_examples,
                        &cache,
                        jstr_core::rng::derive_seed(cfg.train.seed, jstr_core::train::seed_domain::MIX_FULL),
                    )
                    .map_err(|e| AppError::Usage(e.to_string()))?;
                    let hooks = EvalHooks { heldout: Some(&corpus.heldout), judge_pairs: None };
                    let outcome = train_stage2(params, &mix, &cfg.train, &hooks);
                    let ckpt = Checkpoint::from_params(
                        &outcome.params,
                        Some(&outcome.opt),
                        outcome.steps as u64,
                        cfg.train.seed,
                    );
                    ckpt.save(&out.join("stage2.ckpt")).map_err(io_err("saving checkpoint"))?;
                    std::fs::write(out.join("log.csv"), log_to_csv(&outcome.log))
                        .map_err(io_err("writing log.csv"))?;
                    write_runconfig(&out, &cfg)?;
                    println!(
                        "stage 2 done: {} steps, heldout word accuracy {:.4}",
                        outcome.steps,
                        outcome.final_heldout_acc.unwrap_or(f64::NAN)
                    );
                    Ok(())
                }
                other => Err(AppError::Usage(format!("--stage must be 1 or 2, got {other}"))),
            }
        }

        Command::Harvest { ckpt, corpus, out } => {
            let ckpt = load_checkpoint(&ckpt)?;
            let (params, _) =
                ckpt.into_state().map_err(|e| AppError::Io(format!("reading checkpoint: {e}")))?;
            let corpus = load_corpus(&corpus)?;
            let misrecs = harvest_misrecognitions(&params, &corpus.train);
            write_jsonl(&out, &misrecs).map_err(io_err("writing harvest file"))?;
            println!("harvested {} misrecognitions from {} samples", misrecs.len(), corpus.train.len());
            Ok(())
        }

        Command::BuildJudgment { harvest, corpus, true_only, out } => {
            if !harvest.exists() {
                return Err(AppError::Missing(format!("harvest file {} not found", harvest.display())));
            }
            let misrecs: Vec<Misrecognition> =
                read_jsonl(&harvest).map_err(io_err("reading harvest file"))?;
            let corpus = load_corpus(&corpus)?;
            let cache = patch_cache(&corpus.train);
            let mut examples =
                build_judgment(&misrecs, &cache).map_err(|e| AppError::Usage(e.to_string()))?;
            if true_only {
                examples.retain(|e| e.label);
            }
            write_jsonl(&out, &examples).map_err(io_err("writing judgment file"))?;
            println!("wrote {} judgment examples", examples.len());
            Ok(())
        }

        Command::Eval { ckpt, corpus, out } => {
            let ckpt = load_checkpoint(&ckpt)?;
            let (params, _) =
                ckpt.into_state().map_err(|e| AppError::Io(format!("reading checkpoint: {e}")))?;
            let corpus = load_corpus(&corpus)?;
            let (word_acc, per_difficulty, records) = evaluate_model(&params, &corpus.heldout);
            ensure_dir(&out)?;
            let report = EvalReport {
                arm: "eval".into(),
                seed: ckpt.meta.rng_state,
                n_samples: corpus.heldout.len(),
                word_acc,
                per_difficulty,
                judge: None,
            };
            std::fs::write(out.join("eval.json"), serde_json::to_string_pretty(&report).unwrap())
                .map_err(io_err("writing eval.json"))?;
            write_jsonl(&out.join("predictions.jsonl"), &records)
                .map_err(io_err("writing predictions.jsonl"))?;
            println!("heldout word accuracy: {word_acc:.4} over {} samples", corpus.heldout.len());
            for (name, acc) in &report.per_difficulty {
                println!("  {name}: {:.4} (n={})", acc.accuracy, acc.n);
            }
            Ok(())
        }

        Command::Ablate { config, out } => {
            let cfg = load_config(&config)?;
            ensure_dir(&out)?;
            let corpus = generate_corpus(
                cfg.corpus.n,
                &cfg.corpus.mix,
                cfg.corpus.seed,
                cfg.corpus.split_frac,
            )
            .map_err(|e| AppError::Usage(e.to_string()))?;
            let output = run_ablation(&corpus, &cfg.model, &cfg.train, &cfg.ablate);
            if !output.stage1_shared {
                return Err(AppError::Io("stage-1 checkpoint control failed".into()));
            }
            ensure_dir(&out.join("preds"))?;
            ensure_dir(&out.join("logs"))?;
            for (seed, bytes) in cfg.ablate.seeds.iter().zip(&output.stage1_ckpts) {
                std::fs::write(out.join(format!("stage1_seed{seed}.ckpt")), bytes)
                    .map_err(io_err("writing stage-1 checkpoints"))?;
            }
            for run in &output.runs {
                let tag = format!("{}_seed{}", run.arm.name(), run.seed);
                write_jsonl(&out.join("preds").join(format!("{tag}.jsonl")), &run.records)
                    .map_err(io_err("writing prediction dumps"))?;
                std::fs::write(out.join("logs").join(format!("{tag}.csv")), log_to_csv(&run.log))
                    .map_err(io_err("writing training logs"))?;
            }
            std::fs::write(
                out.join("ablation.json"),
                serde_json::to_string_pretty(&output.results).unwrap(),
            )
            .map_err(io_err("writing ablation.json"))?;
            std::fs::write(out.join("report.csv"), report_csv(&output.results))
                .map_err(io_err("writing report.csv"))?;
            std::fs::write(out.join("report.md"), report_markdown(&output.results))
                .map_err(io_err("writing report.md"))?;
            let gallery = build_gallery(&out, &cfg.ablate.seeds)?;
            std::fs::write(out.join("gallery.md"), gallery).map_err(io_err("writing gallery.md"))?;
            write_runconfig(&out, &cfg)?;
            println!("ablation complete:");
            for r in &output.results {
                println!("  {}: mean {:.4} (std {:.4})", r.arm, r.mean, r.stddev);
            }
            if let Some(j) = output.judge_mean {
                println!("  judgment accuracy on held-back pairs: {j:.4}");
            }
            Ok(())
        }

        Command::Report { r#in, format, out } => {
            let json_path = r#in.join("ablation.json");
            if !json_path.exists() {
                return Err(AppError::Missing(format!("{} not found", json_path.display())));
            }
            let results: Vec<AblationResult> = serde_json::from_str(
                &std::fs::read_to_string(&json_path).map_err(io_err("reading ablation.json"))?,
            )
            .map_err(|e| AppError::Io(format!("parsing ablation.json: {e}")))?;
            let (text, ext) = match format.as_str() {
                "csv" => (report_csv(&results), "csv"),
                _ => (report_markdown(&results), "md"),
            };
            let out_path = out.unwrap_or_else(|| r#in.join(format!("report.{ext}")));
            std::fs::write(&out_path, &text).map_err(io_err("writing report"))?;
            // Sanity: the emitted CSV parses back to the same values.
            if ext == "csv" {
                let reparsed = parse_report_csv(&text)
                    .map_err(|e| AppError::Io(format!("re-parsing emitted CSV: {e}")))?;
                if reparsed != results {
                    return Err(AppError::Io("emitted CSV does not round-trip".into()));
                }
            }
            println!("wrote {}", out_path.display());
            Ok(())
        }
    }
}

/// Gallery built from the seed-0 baseline and full prediction dumps.
fn build_gallery(out: &Path, seeds: &[u64]) -> Result<String> {
    let seed = seeds.first().copied().unwrap_or(0);
    let read = |arm: Arm| -> Result<Vec<jstr_core::eval::PredRecord>> {
        read_jsonl(&out.join("preds").join(format!("{}_seed{seed}.jsonl", arm.name())))
            .map_err(io_err("reading prediction dumps"))
    };
    Ok(gallery_markdown(&read(Arm::Baseline)?, &read(Arm::Full)?))
}
