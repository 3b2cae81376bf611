//! Acceptance suite: one pass/fail line per criterion.
//!
//! Criteria that need full desk-scale training (RL sanity, directional
//! generalization, full-run determinism) take days on one CPU core. By default
//! they run as reduced-scale smoke checks and report `SMOKE-PASS`; pass
//! `--ignored` (or set `M3L_ACCEPTANCE_FULL=1`) to run them at full scale.
//! Full runs live under `M3L_ACCEPTANCE_DIR` (default `target/acceptance-runs`)
//! and resume where they stopped.

mod common;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use m3l::config::{Modalities, RunConfig, Split, TrainMode};
use m3l::eval::{ablate_frame_stack, evaluate, read_metrics, EvalOptions};
use m3l::gradcheck::{self, GradcheckOptions, DOUBLE_TOLERANCE, SINGLE_TOLERANCE};
use m3l::mae::{mae_loss, patch_targets, Reconstruction};
use m3l::model::{M3lModel, ModelSpec, RepOptions};
use m3l::policy::{clipped_surrogate, gae, RolloutBuffer};
use m3l::tokenizer::{sample_mask, MaskSpec, Modality, ObsBatch};
use m3l::trainer::{list_checkpoints, Trainer, METRICS_FILE};
use m3l_autograd::optim::Adam;
use m3l_autograd::{Graph, ParamStore};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<(Status, String), String>;
type Criterion = (u8, &'static str, fn() -> Check);

#[derive(Clone, Copy, PartialEq, Eq)]
enum Status {
    Pass,
    Fail,
    /// Reduced-scale version passed; the full-scale criterion was not run.
    SmokePass,
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Status::Pass => "PASS",
            Status::Fail => "FAIL",
            Status::SmokePass => "SMOKE-PASS",
        })
    }
}

fn verdict(ok: bool) -> Status {
    if ok {
        Status::Pass
    } else {
        Status::Fail
    }
}

fn e<E: fmt::Display>(err: E) -> String {
    err.to_string()
}

// ---------------------------------------------------------------- 1

fn gradient_suite() -> Check {
    let mut parts = Vec::new();
    let mut ok = true;
    for (double, tol) in [(false, SINGLE_TOLERANCE), (true, DOUBLE_TOLERANCE)] {
        let t = Instant::now();
        let r = gradcheck::run(&GradcheckOptions { double, ..GradcheckOptions::default() }).map_err(e)?;
        let secs = t.elapsed().as_secs_f64();
        let worst = r.components.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
        ok &= r.passed() && secs < 60.0;
        parts.push(format!("{}: max rel err {worst:.1e} (tol {tol:.0e}) in {secs:.1} s", if double { "f64" } else { "f32" }));
    }
    Ok((verdict(ok), parts.join("; ")))
}

// ---------------------------------------------------------------- 2

fn brute_force_gae(r: &[f64], v: &[f64], done: &[bool], bootstrap: f64, gamma: f64, lam: f64) -> Vec<f64> {
    let n = r.len();
    let value_after = |t: usize| {
        if done[t] {
            0.0
        } else if t + 1 < n {
            v[t + 1]
        } else {
            bootstrap
        }
    };
    (0..n)
        .map(|t| {
            let mut total = 0.0;
            for l in 0..n - t {
                let s = t + l;
                total += (gamma * lam).powi(l as i32) * (r[s] + gamma * value_after(s) - v[s]);
                if done[s] {
                    break;
                }
            }
            total
        })
        .collect()
}

fn oracle_equivalence() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let n = rng.random_range(1..=6);
        let r: Vec<f64> = (0..n).map(|_| rng.random_range(-10.0..10.0)).collect();
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-10.0..10.0)).collect();
        let d: Vec<bool> = (0..n).map(|_| rng.random_bool(0.3)).collect();
        let (boot, gamma, lam) = (rng.random_range(-10.0..10.0), rng.random_range(0.0..=1.0), rng.random_range(0.0..=1.0));
        let (adv, _) = gae(&r, &v, &d, boot, gamma, lam).map_err(e)?;
        for (a, b) in adv.iter().zip(brute_force_gae(&r, &v, &d, boot, gamma, lam)) {
            worst = worst.max((a - b).abs());
        }
    }
    let mut mismatches = 0;
    for _ in 0..10_000 {
        let (ratio, adv, eps): (f64, f64, f64) = (rng.random_range(0.0..3.0), rng.random_range(-5.0..5.0), rng.random_range(0.01..0.99));
        let direct = (ratio * adv).min(ratio.clamp(1.0 - eps, 1.0 + eps) * adv);
        if clipped_surrogate(ratio, adv, eps) != direct {
            mismatches += 1;
        }
    }
    Ok((
        verdict(worst <= 1e-6 && mismatches == 0),
        format!("GAE max |diff| {worst:.1e} over 1000 cases (tol 1e-6); clip mismatches {mismatches}/10000"),
    ))
}

// ---------------------------------------------------------------- 3

/// Mean reconstruction loss over the whole buffer with fixed masks.
fn buffer_loss(model: &M3lModel, store: &ParamStore<f32>, buf: &RolloutBuffer, opts: &RepOptions) -> Result<f64, String> {
    let idx: Vec<usize> = (0..buf.len()).collect();
    let mut total = 0.0;
    for (i, chunk) in idx.chunks(32).enumerate() {
        let obs = common::batch_of(buf, chunk);
        let mut g = Graph::new(store);
        let out = model.reconstruction(&mut g, &obs, Modalities::BOTH, opts, &mut ChaCha8Rng::seed_from_u64(1000 + i as u64)).map_err(e)?;
        total += out.breakdown.l_rep * chunk.len() as f64;
    }
    Ok(total / buf.len() as f64)
}

/// Perturbs predictions at kept positions and reports whether `l_rep` moved.
fn kept_perturbation_changes_loss(model: &M3lModel, store: &ParamStore<f32>, obs: &ObsBatch<f32>, opts: &RepOptions) -> Result<bool, String> {
    let mut g = Graph::new(store);
    let out = model.reconstruction(&mut g, obs, Modalities::BOTH, opts, &mut ChaCha8Rng::seed_from_u64(5)).map_err(e)?;
    let tokens = out.tokens.expect("masked forward keeps tokens");
    let rec = out.recon.expect("reconstruction");
    let targets = patch_targets(obs, model.spec.vision_stride, model.spec.touch_stride).map_err(e)?;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut perturbed = Reconstruction { vision: None, touch: None };
    for (m, src, slot) in [(Modality::Vision, rec.vision, &mut perturbed.vision), (Modality::Touch, rec.touch, &mut perturbed.touch)] {
        let range = tokens.range(m).expect("both modalities");
        let mut v = g.value(src.expect("prediction")).clone();
        let p = v.shape()[2];
        for b in 0..tokens.batch() {
            for &i in tokens.keep_idx[b].iter().filter(|i| range.contains(i)) {
                let row = b * range.len() + i - range.start;
                v.data_mut()[row * p..(row + 1) * p].iter_mut().for_each(|x| *x += rng.random_range(-3.0..3.0));
            }
        }
        *slot = Some(g.constant(v));
    }
    let (_, after) = mae_loss(&mut g, &perturbed, &targets, &tokens, opts.beta_t, false).map_err(e)?;
    Ok(after.l_rep != out.breakdown.l_rep)
}

fn mae_overfit() -> Check {
    let start = Instant::now();
    let cfg = RunConfig::desk();
    let (buf, _) = common::rollout_observations(512, cfg.env.frame_stack, 3);
    let mut store = ParamStore::<f32>::new();
    let model = M3lModel::new(&mut store, ModelSpec::from_config(&cfg), &mut ChaCha8Rng::seed_from_u64(cfg.seed)).map_err(e)?;
    let opts = RepOptions { mask_ratio: cfg.tokenizer.mask_ratio, beta_t: cfg.mae.beta_t, all_tokens: false };
    let before = buffer_loss(&model, &store, &buf, &opts)?;
    let mut adam = Adam::new(&store);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut order: Vec<usize> = (0..buf.len()).collect();
    let batch = 8;
    let (steps, lr) = (2000, 1e-3);
    for step in 0..steps {
        if step % (buf.len() / batch) == 0 {
            order.shuffle(&mut rng);
        }
        let at = (step % (buf.len() / batch)) * batch;
        let obs = common::batch_of(&buf, &order[at..at + batch]);
        let grads = {
            let mut g = Graph::new(&store);
            let out = model.reconstruction(&mut g, &obs, Modalities::BOTH, &opts, &mut rng).map_err(e)?;
            g.backward(out.loss).map_err(e)?
        };
        adam.step(&mut store, &grads, lr);
    }
    let after = buffer_loss(&model, &store, &buf, &opts)?;
    let leak = kept_perturbation_changes_loss(&model, &store, &common::batch_of(&buf, &[0, 1, 2, 3]), &opts)?;
    let secs = start.elapsed().as_secs_f64();
    let ok = after <= 0.5 * before && !leak && secs <= 600.0;
    Ok((
        verdict(ok),
        format!(
            "l_rep {before:.4} -> {after:.4} ({:.0}% reduction, need >= 50%) after {steps} steps of batch {batch} on 512 obs; \
             kept-position perturbation {}; {secs:.0} s (limit 600 s)",
            100.0 * (1.0 - after / before),
            if leak { "CHANGED l_rep" } else { "left l_rep unchanged" }
        ),
    ))
}

// ---------------------------------------------------------------- 4, 5, 7 at full scale

fn runs_root() -> PathBuf {
    std::env::var_os("M3L_ACCEPTANCE_DIR").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("target/acceptance-runs"))
}

fn finished(dir: &Path, total: u64) -> bool {
    list_checkpoints(dir)
        .ok()
        .and_then(|c| c.last().cloned())
        .and_then(|p| m3l::checkpoint::Checkpoint::load(&p).ok())
        .is_some_and(|c| c.env_steps >= total)
}

/// Trains `cfg` into `dir`, resuming an interrupted run unless `fresh` demands an uninterrupted one.
fn full_run(dir: &Path, cfg: RunConfig, fresh: bool) -> Result<PathBuf, String> {
    if finished(dir, cfg.trainer.total_env_steps) {
        return Ok(dir.to_path_buf());
    }
    let mut trainer = if !fresh && !list_checkpoints(dir).map_err(e)?.is_empty() {
        Trainer::resume(dir).map_err(e)?
    } else {
        if dir.exists() {
            fs::remove_dir_all(dir).map_err(e)?;
        }
        Trainer::new(cfg).map_err(e)?
    };
    let name = dir.display().to_string();
    trainer.train(dir, |r| eprintln!("  {name}: {} env steps, success {:?}", r.env_steps, r.success_rate())).map_err(e)?;
    Ok(dir.to_path_buf())
}

fn desk(mode: TrainMode, seed: u64) -> RunConfig {
    let mut cfg = RunConfig::desk();
    cfg.mode = mode;
    cfg.seed = seed;
    cfg
}

fn eval_run(dir: &Path, split: Split) -> Result<f64, String> {
    let ckpts = list_checkpoints(dir).map_err(e)?;
    let cfg = RunConfig::load(&dir.join("config.toml")).map_err(e)?;
    let n = cfg.eval.checkpoints.min(ckpts.len());
    let mut opts = EvalOptions::from_config(&cfg);
    opts.split = split;
    Ok(evaluate(&ckpts[ckpts.len() - n..], &opts).map_err(e)?.success_rate)
}

fn rl_sanity_full() -> Check {
    let mut rates = Vec::new();
    for seed in 0..5 {
        let dir = full_run(&runs_root().join(format!("m3l_s{seed}")), desk(TrainMode::M3l, seed), false)?;
        rates.push(eval_run(&dir, Split::Train)?);
    }
    let hits = rates.iter().filter(|&&r| r >= 0.8).count();
    Ok((verdict(hits >= 3), format!("train-split success per seed {rates:?}; {hits}/5 seeds >= 0.80 (need 3)")))
}

fn generalization_full() -> Check {
    let mut means = Vec::new();
    for (mode, tag) in [(TrainMode::M3l, "m3l"), (TrainMode::VisionOnlyMae, "vision_only_mae"), (TrainMode::M3lVisionPolicy, "m3l_vision_policy")] {
        let mut total = 0.0;
        for seed in 0..3 {
            let dir = full_run(&runs_root().join(format!("{tag}_s{seed}")), desk(mode, seed), false)?;
            total += eval_run(&dir, Split::Test)?;
        }
        means.push((tag, total / 3.0));
    }
    let ok = means[0].1 >= means[1].1 && means[2].1 >= means[1].1;
    Ok((verdict(ok), format!("mean test success over 3 seeds: {means:?}")))
}

fn determinism_full() -> Check {
    let a = full_run(&runs_root().join("determinism_a"), desk(TrainMode::M3l, 0), true)?;
    let b = full_run(&runs_root().join("determinism_b"), desk(TrainMode::M3l, 0), true)?;
    let same = fs::read(a.join(METRICS_FILE)).map_err(e)? == fs::read(b.join(METRICS_FILE)).map_err(e)?;
    Ok((verdict(same), format!("two uninterrupted desk runs, metrics files {}", if same { "byte-identical" } else { "DIFFER" })))
}

// ---------------------------------------------------------------- 4, 5, 7 smoke

fn smoke_config(mode: TrainMode, seed: u64) -> RunConfig {
    let mut cfg = common::tiny_config();
    cfg.mode = mode;
    cfg.seed = seed;
    cfg.trainer.total_env_steps = 4 * 32;
    cfg.eval.episodes_per_checkpoint = 25;
    cfg
}

fn smoke(status_if_ok: Status, ok: bool, detail: String) -> Check {
    Ok((if ok { status_if_ok } else { Status::Fail }, detail))
}

fn rl_sanity_smoke() -> Check {
    let root = tempfile::tempdir().map_err(e)?;
    let cfg = smoke_config(TrainMode::M3l, 0);
    Trainer::new(cfg.clone()).map_err(e)?.train(root.path(), |_| {}).map_err(e)?;
    let ckpts = list_checkpoints(root.path()).map_err(e)?;
    let mut opts = EvalOptions::from_config(&cfg);
    opts.split = Split::Train;
    let r = evaluate(&ckpts, &opts).map_err(e)?;
    smoke(
        Status::SmokePass,
        r.episodes == 100,
        format!(
            "full criterion not run (5 seeds x 1e6 steps, roughly 65 CPU-hours per seed here); \
             pipeline check: tiny model, 128 steps, {} deterministic episodes, success {:.2}",
            r.episodes, r.success_rate
        ),
    )
}

fn generalization_smoke() -> Check {
    let mut parts = Vec::new();
    for mode in [TrainMode::M3l, TrainMode::VisionOnlyMae, TrainMode::M3lVisionPolicy] {
        let root = tempfile::tempdir().map_err(e)?;
        let cfg = smoke_config(mode, 1);
        Trainer::new(cfg.clone()).map_err(e)?.train(root.path(), |_| {}).map_err(e)?;
        let mut opts = EvalOptions::from_config(&cfg);
        opts.split = Split::Test;
        opts.episodes_per_checkpoint = 5;
        let r = evaluate(&list_checkpoints(root.path()).map_err(e)?, &opts).map_err(e)?;
        parts.push(format!("{mode} {:.2}", r.success_rate));
    }
    smoke(
        Status::SmokePass,
        true,
        format!("full criterion not run (3 modes x 3 seeds x 1e6 steps); pipeline check on test split: {}", parts.join(", ")),
    )
}

fn determinism_smoke() -> Check {
    let run = || -> Result<Vec<u8>, String> {
        let root = tempfile::tempdir().map_err(e)?;
        Trainer::new(smoke_config(TrainMode::M3l, 2)).map_err(e)?.train(root.path(), |_| {}).map_err(e)?;
        fs::read(root.path().join(METRICS_FILE)).map_err(e)
    };
    let (a, b) = (run()?, run()?);
    smoke(
        Status::SmokePass,
        a == b,
        format!("full desk runs not run; two tiny-model runs of 4 cycles give {} metrics files", if a == b { "byte-identical" } else { "DIFFERENT" }),
    )
}

// ---------------------------------------------------------------- 6, 8, 9

fn masking_statistics() -> Check {
    let draws = 10_000u64;
    let mut counts = [0u64; 96];
    let mut wrong_size = 0;
    for s in 0..draws {
        let (keep, _) = sample_mask(96, &MaskSpec { ratio: 0.95, rng_seed: s });
        wrong_size += usize::from(keep.len() != 5);
        keep.iter().for_each(|&i| counts[i] += 1);
    }
    let p = 5.0 / 96.0;
    let mean = draws as f64 * p;
    let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
    let worst = counts.iter().map(|&c| (c as f64 - mean).abs() / sigma).fold(0.0, f64::max);
    Ok((verdict(wrong_size == 0 && worst <= 4.0), format!("kept count != 5 on {wrong_size} draws; worst token deviation {worst:.2} sigma (limit 4)")))
}

fn defaults_audit() -> Check {
    let p = RunConfig::paper();
    let checks = [
        ("parallel envs", p.trainer.n_envs as f64, 8.0),
        ("mask ratio", p.tokenizer.mask_ratio, 0.95),
        ("batch size", p.trainer.batch_size as f64, 512.0),
        ("rep steps per RL step", p.trainer.rep_steps_per_rl_step as f64, 16.0),
        ("rollout length", p.trainer.rollout_length as f64, 32768.0),
        ("epochs", p.trainer.epochs as f64, 10.0),
        ("learning rate", p.policy.learning_rate, 1e-4),
        ("tactile weight", p.mae.beta_t, 10.0),
    ];
    let bad: Vec<String> = checks.iter().filter(|(_, got, want)| got != want).map(|(n, got, want)| format!("{n} {got} != {want}")).collect();
    // the snapshot must also survive serialization
    let round_trip = RunConfig::from_toml(&p.to_toml()).map_err(e)? == p;
    Ok((
        verdict(bad.is_empty() && round_trip),
        if bad.is_empty() {
            format!("all 8 values match; TOML round trip {}", if round_trip { "lossless" } else { "LOSSY" })
        } else {
            bad.join(", ")
        },
    ))
}

fn frame_stack_harness() -> Check {
    let root = tempfile::tempdir().map_err(e)?;
    let mut cfg = common::tiny_config();
    cfg.trainer.total_env_steps = 3 * 32;
    let out = ablate_frame_stack(&cfg, &[1, 2, 4], root.path(), |_, _| {}).map_err(e)?;
    let grids = out
        .runs
        .iter()
        .map(|(_, d)| read_metrics(&d.join(METRICS_FILE)).map(|rows| rows.iter().map(|r| r.step).collect::<Vec<_>>()))
        .collect::<Result<Vec<_>, _>>()
        .map_err(e)?;
    let comparable = grids.len() == 3 && grids.iter().all(|g| g == &grids[0] && g.len() == 3);
    let files = out.curves.exists() && out.success_plot.exists() && out.return_plot.exists();
    Ok((verdict(comparable && files), format!("k = 1, 2, 4 on a tiny model; step grids {:?}; curves and plots written: {files}", grids[0])))
}

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        return;
    }
    let full = args.iter().any(|a| a == "--ignored" || a == "--include-ignored") || std::env::var_os("M3L_ACCEPTANCE_FULL").is_some();

    let criteria: Vec<Criterion> = vec![
        (1, "gradient suite", gradient_suite),
        (2, "oracle equivalence", oracle_equivalence),
        (3, "MAE overfit sanity", mae_overfit),
        (4, "RL sanity", if full { rl_sanity_full } else { rl_sanity_smoke }),
        (5, "directional generalization", if full { generalization_full } else { generalization_smoke }),
        (6, "masking statistics", masking_statistics),
        (7, "determinism", if full { determinism_full } else { determinism_smoke }),
        (8, "defaults audit", defaults_audit),
        (9, "frame-stack harness", frame_stack_harness),
    ];
    println!("acceptance criteria ({} scale)", if full { "full" } else { "default" });
    let mut failed = 0;
    for (id, name, check) in criteria {
        let t = Instant::now();
        let (status, detail) = check().unwrap_or_else(|err| (Status::Fail, format!("error: {err}")));
        failed += usize::from(status == Status::Fail);
        println!("[{id}] {name:<27} {status:<10} {detail} [{:.0} s]", t.elapsed().as_secs_f64());
    }
    println!("acceptance: {}", if failed == 0 { "ok".to_string() } else { format!("{failed} FAILED") });
    if failed > 0 {
        std::process::exit(1);
    }
}
