//! Calibration pilot: stage-1 quality, harvest rate, judgment accuracy and
//! the stage-2 arms on one seed, plus the overfit sanity run.

use std::time::Instant;

use jstr_core::data::{
    build_judgment, build_stage1, build_stage2_mix, build_true_only_mix, harvest_misrecognitions,
    patch_cache,
};
use jstr_core::eval::{evaluate_model, judge_eval, split_misrecognitions};
use jstr_core::model::ModelConfig;
use jstr_core::render::{generate_corpus, DifficultyMix};
use jstr_core::rng::derive_seed;
use jstr_core::train::{
    run_stage, seed_domain, steps_per_epoch, train_stage1, EvalHooks, StagePlan, TrainConfig,
};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let mode = args.get(1).map(String::as_str).unwrap_or("full");

    if mode == "overfit" {
        overfit();
        return;
    }
    if mode == "sweep" {
        sweep();
        return;
    }
    if mode == "overfit2" {
        overfit2();
        return;
    }

    let lr: f64 = std::env::var("PILOT_LR").ok().and_then(|v| v.parse().ok()).unwrap_or(2e-4);
    let epochs: usize = std::env::var("PILOT_EPOCHS").ok().and_then(|v| v.parse().ok()).unwrap_or(20);
    let mixv: Vec<f64> = std::env::var("PILOT_MIX").unwrap_or_default().split(',').filter_map(|v| v.parse().ok()).collect();
    let mix = if mixv.len() == 4 {
        DifficultyMix::new(mixv[0], mixv[1], mixv[2], mixv[3]).unwrap()
    } else {
        DifficultyMix::new(0.4, 0.3, 0.2, 0.1).unwrap()
    };
    let t0 = Instant::now();
    let corpus = generate_corpus(5000, &mix, 1, 0.15).unwrap();
    let model_cfg = ModelConfig::default();
    let cfg = TrainConfig { seed: 11, peak_lr: lr, stage1_epochs: epochs, ..TrainConfig::default() };

    let stage1 = train_stage1(&model_cfg, &cfg, &corpus);
    println!(
        "stage1: {:.1}s heldout acc {:.4}",
        t0.elapsed().as_secs_f64(),
        stage1.final_heldout_acc.unwrap()
    );
    let (acc, per, recs) = evaluate_model(&stage1.params, &corpus.heldout);
    println!("per difficulty: {per:?} (overall {acc:.4})");
    let lex: std::collections::HashSet<&str> = jstr_core::lexicon::LEXICON.iter().copied().collect();
    let mut by_kind = [[0usize; 2]; 2]; // [lexicon?][correct?]
    for (r, s) in recs.iter().zip(&corpus.heldout) {
        let k = lex.contains(s.label.as_str()) as usize;
        by_kind[k][(r.pred == r.gt) as usize] += 1;
    }
    println!(
        "random strings: {}/{} correct; lexicon words: {}/{} correct",
        by_kind[0][1], by_kind[0][0] + by_kind[0][1],
        by_kind[1][1], by_kind[1][0] + by_kind[1][1]
    );

    let misrecs = harvest_misrecognitions(&stage1.params, &corpus.train);
    println!(
        "harvest: {} / {} = {:.2}%",
        misrecs.len(),
        corpus.train.len(),
        100.0 * misrecs.len() as f64 / corpus.train.len() as f64
    );

    if mode == "stage1" {
        return;
    }

    let cache = patch_cache(&corpus.train);
    let (judge_train, judge_held) =
        split_misrecognitions(&misrecs, 0.1, derive_seed(cfg.seed, seed_domain::JUDGE_SPLIT));
    let judgment = build_judgment(&judge_train, &cache).unwrap();
    let held_pairs = build_judgment(&judge_held, &cache).unwrap();
    println!("judgment: {} train pairs, {} held pairs", judgment.len(), held_pairs.len());

    let full_mix =
        build_stage2_mix(&corpus.train, &judgment, &cache, derive_seed(cfg.seed, seed_domain::MIX_FULL))
            .unwrap();
    let spe = steps_per_epoch(full_mix.len(), cfg.batch_size);
    let plan = StagePlan {
        stream: &full_mix,
        total_steps: cfg.stage2_epochs * spe,
        warmup_steps: cfg.stage2_warmup_epochs * spe,
        shuffle_domain: seed_domain::STAGE2_SHUFFLE,
        label: "stage2-full",
    };
    let hooks = EvalHooks { heldout: Some(&corpus.heldout), judge_pairs: Some((&held_pairs, &cache)) };
    let t1 = Instant::now();
    let full = run_stage(stage1.params.clone(), &plan, &cfg, &hooks);
    println!(
        "full arm: {:.1}s heldout acc {:.4} judge acc {:?}",
        t1.elapsed().as_secs_f64(),
        full.final_heldout_acc.unwrap(),
        full.final_judge_acc
    );

    if mode == "short" {
        return;
    }

    // true-only arm
    let true_mix = build_true_only_mix(
        &corpus.train,
        &judgment,
        &cache,
        derive_seed(cfg.seed, seed_domain::MIX_TRUE_ONLY),
    )
    .unwrap();
    let spe_t = steps_per_epoch(true_mix.len(), cfg.batch_size);
    let plan_t = StagePlan {
        stream: &true_mix,
        total_steps: cfg.stage2_epochs * spe_t,
        warmup_steps: cfg.stage2_warmup_epochs * spe_t,
        shuffle_domain: seed_domain::STAGE2_SHUFFLE,
        label: "stage2-true-only",
    };
    let hooks_t = EvalHooks { heldout: Some(&corpus.heldout), judge_pairs: None };
    let true_only = run_stage(stage1.params.clone(), &plan_t, &cfg, &hooks_t);
    println!("true-only arm: heldout acc {:.4}", true_only.final_heldout_acc.unwrap());

    // same-iter arm
    let (pattern_a, _) = build_stage1(&corpus.train);
    let plan_s = StagePlan {
        stream: &pattern_a,
        total_steps: cfg.stage2_epochs * spe,
        warmup_steps: cfg.stage2_warmup_epochs * spe,
        shuffle_domain: seed_domain::SAME_ITER_SHUFFLE,
        label: "same-iter",
    };
    let same_iter = run_stage(stage1.params.clone(), &plan_s, &cfg, &hooks_t);
    println!("same-iter arm: heldout acc {:.4}", same_iter.final_heldout_acc.unwrap());
    println!("baseline: {:.4}", acc);
}

fn overfit() {
    let corpus = generate_corpus(200, &DifficultyMix::all_clean(), 3, 0.0).unwrap();
    let model_cfg = ModelConfig::default();
    let cfg = TrainConfig {
        batch_size: 16,
        stage1_epochs: 20,
        peak_lr: 1e-3,
        seed: 5,
        ..TrainConfig::default()
    };
    let t = Instant::now();
    let out = train_stage1(&model_cfg, &cfg, &corpus);
    let last_loss = out.log.iter().rev().find_map(|r| r.loss).unwrap();
    println!("overfit: {:.1}s final train loss {:.4}", t.elapsed().as_secs_f64(), last_loss);
}

// quick lr sweep on a small corpus, invoked as `pilot sweep`
fn sweep() {
    let mix = DifficultyMix::new(0.4, 0.3, 0.2, 0.1).unwrap();
    let corpus = generate_corpus(1000, &mix, 1, 0.15).unwrap();
    let model_cfg = ModelConfig::default();
    for lr in [5e-4, 1e-3, 2e-3, 3e-3] {
        let cfg = TrainConfig { seed: 11, peak_lr: lr, stage1_epochs: 12, ..TrainConfig::default() };
        let t = Instant::now();
        let out = train_stage1(&model_cfg, &cfg, &corpus);
        println!(
            "lr {lr:.0e}: heldout acc {:.4} loss {:.4} ({:.0}s)",
            out.final_heldout_acc.unwrap(),
            out.log.iter().rev().find_map(|r| r.loss).unwrap(),
            t.elapsed().as_secs_f64()
        );
    }
}

// overfit with more steps: batch 8, lr 1e-3
fn overfit2() {
    let corpus = generate_corpus(200, &DifficultyMix::all_clean(), 3, 0.0).unwrap();
    let model_cfg = ModelConfig::default();
    for (bs, lr) in [(8usize, 1e-3f64), (8, 2e-3), (4, 2e-3)] {
        let cfg = TrainConfig { batch_size: bs, stage1_epochs: 20, peak_lr: lr, seed: 5, ..TrainConfig::default() };
        let t = Instant::now();
        let out = train_stage1(&model_cfg, &cfg, &corpus);
        let last_loss = out.log.iter().rev().find_map(|r| r.loss).unwrap();
        println!("overfit b{bs} lr{lr:.0e}: {:.1}s final loss {:.4}", t.elapsed().as_secs_f64(), last_loss);
    }
}
