//! Deterministic evaluation, frame-stack ablation and reconstruction dumps.

use std::fs;
use std::path::{Path, PathBuf};

use image::RgbImage;
use m3l_autograd::{unpatchify, Graph, ParamStore};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::{EnvConfig, Modalities, RunConfig, Split, TrainMode};
use crate::env::{DoneReason, EpisodeStats, InsertionEnv, StackedObs, TaskSampler, TaskSpec, IMAGE_SIZE, TAXEL_GRID};
use crate::error::{Error, Result};
use crate::model::{M3lModel, ModelSpec, RepOptions};
use crate::plot::{self, Series};
use crate::tokenizer::{Modality, ObsBatch, TokenBatch};
use crate::trainer::{act, derive_seed, shape_library, CycleReport, Trainer, METRICS_FILE};

/// Results of one checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointResult {
    pub path: String,
    /// Training seed of the run that wrote the checkpoint.
    pub seed: u64,
    pub env_steps: u64,
    pub episodes: usize,
    pub successes: usize,
    pub success_rate: f64,
    pub mean_return: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: TrainMode,
    pub split: Split,
    pub modalities: String,
    pub episodes: usize,
    pub successes: usize,
    pub success_rate: f64,
    pub mean_return: f64,
    /// Standard error of the per-checkpoint success rates.
    pub success_std_error: f64,
    pub eval_seed: u64,
    /// Distinct training seeds covered, in first-seen order.
    pub seeds: Vec<u64>,
    pub checkpoints: Vec<CheckpointResult>,
}

impl EvalReport {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("report serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }
}

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub split: Split,
    pub episodes_per_checkpoint: usize,
    /// Policy input; defaults to the training mode's policy modalities.
    pub modalities: Option<Modalities>,
    pub seed: u64,
    /// Episodes stepped together with batched inference.
    pub parallel: usize,
    /// Build the network from this config instead of the checkpoint's own echo.
    pub model_config: Option<RunConfig>,
}

impl EvalOptions {
    pub fn from_config(cfg: &RunConfig) -> Self {
        Self {
            split: cfg.eval.split,
            episodes_per_checkpoint: cfg.eval.episodes_per_checkpoint,
            modalities: None,
            seed: cfg.eval.seed,
            parallel: cfg.trainer.n_envs,
            model_config: None,
        }
    }
}

/// Model and parameters restored from a checkpoint.
pub fn load_model(ckpt: &Checkpoint, model_config: Option<&RunConfig>) -> Result<(M3lModel, ParamStore<f32>)> {
    let cfg = model_config.unwrap_or(&ckpt.config);
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let model = M3lModel::new(&mut store, ModelSpec::from_config(cfg), &mut rng)?;
    ckpt.load_into(&mut store)?;
    Ok((model, store))
}

/// Runs each `(task, reset seed)` to completion with the mean action.
pub fn run_episodes(
    model: &M3lModel,
    store: &ParamStore<f32>,
    env_cfg: &EnvConfig,
    tasks: &[(TaskSpec, u64)],
    modalities: Modalities,
    parallel: usize,
) -> Result<Vec<EpisodeStats>> {
    let mut out = Vec::with_capacity(tasks.len());
    for wave in tasks.chunks(parallel.max(1)) {
        let mut envs: Vec<InsertionEnv> = Vec::with_capacity(wave.len());
        let mut obs: Vec<Option<StackedObs>> = Vec::with_capacity(wave.len());
        for (task, seed) in wave {
            let mut env = InsertionEnv::new(env_cfg.clone());
            obs.push(Some(env.reset(*seed, task.clone())?));
            envs.push(env);
        }
        let mut stats: Vec<EpisodeStats> =
            wave.iter().map(|(t, _)| EpisodeStats { shape_id: t.peg.id.clone(), episode_return: 0.0, length: 0, success: false }).collect();
        loop {
            let active: Vec<usize> = (0..envs.len()).filter(|&i| obs[i].is_some()).collect();
            if active.is_empty() {
                break;
            }
            let refs: Vec<&StackedObs> = active.iter().map(|&i| obs[i].as_ref().expect("active")).collect();
            let means = act(model, store, &refs, modalities)?.means;
            for (&i, mean) in active.iter().zip(means) {
                let step = envs[i].step(mean.map(|v| v.clamp(-1.0, 1.0)))?;
                stats[i].episode_return += step.reward;
                stats[i].length += 1;
                if step.done {
                    stats[i].success = step.info.done_reason == DoneReason::Success;
                    obs[i] = None;
                } else {
                    obs[i] = Some(step.obs);
                }
            }
        }
        out.extend(stats);
    }
    Ok(out)
}

/// Evaluation tasks and reset seeds; identical for every checkpoint given the seed.
pub fn eval_tasks(cfg: &RunConfig, split: Split, n: usize, seed: u64) -> Result<Vec<(TaskSpec, u64)>> {
    let library = shape_library(cfg)?;
    let sampler = TaskSampler::new(&library, split, &cfg.env.train_shapes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| {
            let task = sampler.sample(&mut rng);
            (task, rng.random::<u64>())
        })
        .collect())
}

/// Deterministic (mean-action) evaluation of every checkpoint on `opts.split`.
pub fn evaluate(checkpoints: &[PathBuf], opts: &EvalOptions) -> Result<EvalReport> {
    if checkpoints.is_empty() {
        return Err(Error::Checkpoint("no checkpoints to evaluate".into()));
    }
    if opts.episodes_per_checkpoint == 0 {
        return Err(Error::Config("`eval.episodes_per_checkpoint` must be positive".into()));
    }
    let mut results = Vec::new();
    let mut seeds = Vec::new();
    let mut mode = None;
    let mut modalities = opts.modalities;
    let (mut successes, mut episodes, mut return_sum) = (0, 0, 0.0);
    for path in checkpoints {
        let ckpt = Checkpoint::load(path)?;
        let cfg = opts.model_config.as_ref().unwrap_or(&ckpt.config);
        match mode {
            None => mode = Some(ckpt.config.mode),
            Some(m) if m != ckpt.config.mode => {
                return Err(Error::Checkpoint(format!("{} was trained as {} but earlier checkpoints as {m}", path.display(), ckpt.config.mode)))
            }
            Some(_) => {}
        }
        let m = *modalities.get_or_insert(ckpt.config.mode.policy_modalities());
        let (model, store) = load_model(&ckpt, opts.model_config.as_ref())?;
        let tasks = eval_tasks(cfg, opts.split, opts.episodes_per_checkpoint, opts.seed)?;
        let stats = run_episodes(&model, &store, &cfg.env, &tasks, m, opts.parallel)?;
        let s = stats.iter().filter(|e| e.success).count();
        let r: f64 = stats.iter().map(|e| e.episode_return).sum();
        successes += s;
        episodes += stats.len();
        return_sum += r;
        if !seeds.contains(&ckpt.config.seed) {
            seeds.push(ckpt.config.seed);
        }
        results.push(CheckpointResult {
            path: path.display().to_string(),
            seed: ckpt.config.seed,
            env_steps: ckpt.env_steps,
            episodes: stats.len(),
            successes: s,
            success_rate: s as f64 / stats.len() as f64,
            mean_return: r / stats.len() as f64,
        });
    }
    let rates: Vec<f64> = results.iter().map(|r| r.success_rate).collect();
    Ok(EvalReport {
        mode: mode.expect("at least one checkpoint"),
        split: opts.split,
        modalities: modalities.expect("set with the first checkpoint").to_string(),
        episodes,
        successes,
        success_rate: successes as f64 / episodes as f64,
        mean_return: return_sum / episodes as f64,
        success_std_error: std_error(&rates),
        eval_seed: opts.seed,
        seeds,
        checkpoints: results,
    })
}

/// Sample standard deviation over `sqrt(n)`; 0 for fewer than two values.
pub fn std_error(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (var / n as f64).sqrt()
}

/// One row of a metrics file.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub episode_return_mean: f64,
    pub success_rate: f64,
    pub total_loss: f64,
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let bad = || Error::Config(format!("{}: malformed line {}", path.display(), i + 1));
        if f.len() != 9 {
            return Err(bad());
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
        rows.push(MetricsRow {
            step: f[0].parse().map_err(|_| bad())?,
            episode_return_mean: num(f[1])?,
            success_rate: num(f[2])?,
            total_loss: num(f[8])?,
        });
    }
    Ok(rows)
}

/// Output of a frame-stack sweep.
#[derive(Clone, Debug)]
pub struct Ablation {
    /// `(k, run directory)` per run.
    pub runs: Vec<(usize, PathBuf)>,
    /// Long-format curves: `k,step,episode_return_mean,success_rate`.
    pub curves: PathBuf,
    pub success_plot: PathBuf,
    pub return_plot: PathBuf,
}

/// Trains one run per `k` with the rest of `base` unchanged, then writes comparable curves.
pub fn ablate_frame_stack(base: &RunConfig, k_values: &[usize], root: &Path, mut on_cycle: impl FnMut(usize, &CycleReport)) -> Result<Ablation> {
    if k_values.is_empty() || k_values.iter().any(|k| ![1, 2, 4].contains(k)) {
        return Err(Error::Config(format!("`env.frame_stack` sweep values must come from {{1, 2, 4}}, got {k_values:?}")));
    }
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut runs = Vec::new();
    let mut curves = String::from("k,step,episode_return_mean,success_rate\n");
    let (mut success, mut returns) = (Vec::new(), Vec::new());
    for &k in k_values {
        let mut cfg = base.clone();
        cfg.env.frame_stack = k;
        let dir = root.join(format!("stack_k{k}"));
        cfg.output_dir = dir.display().to_string();
        let mut trainer = Trainer::new(cfg)?;
        trainer.train(&dir, |r| on_cycle(k, r))?;
        let rows = read_metrics(&dir.join(METRICS_FILE))?;
        for r in &rows {
            curves.push_str(&format!("{k},{},{},{}\n", r.step, r.episode_return_mean, r.success_rate));
        }
        success.push(Series { label: format!("k={k}"), points: rows.iter().map(|r| (r.step as f64, r.success_rate)).collect() });
        returns.push(Series { label: format!("k={k}"), points: rows.iter().map(|r| (r.step as f64, r.episode_return_mean)).collect() });
        runs.push((k, dir));
    }
    let curves_path = root.join("stack_curves.csv");
    fs::write(&curves_path, curves).map_err(|e| Error::io(&curves_path, e))?;
    let success_plot = root.join("stack_success.png");
    let return_plot = root.join("stack_return.png");
    plot::save_png(&plot::line_chart(&success, 480, 320), &success_plot)?;
    plot::save_png(&plot::line_chart(&returns, 480, 320), &return_plot)?;
    Ok(Ablation { runs, curves: curves_path, success_plot, return_plot })
}

/// Image files written by [`dump_reconstructions`].
#[derive(Clone, Debug)]
pub struct ReconstructionDump {
    pub vision: Option<PathBuf>,
    pub touch: Option<PathBuf>,
    pub samples: usize,
    pub mse_pixels: f64,
    pub mse_taxels: f64,
}

/// Observations from short rollouts of the checkpoint's policy on training tasks.
fn sample_observations(model: &M3lModel, store: &ParamStore<f32>, cfg: &RunConfig, n: usize, seed: u64) -> Result<Vec<StackedObs>> {
    let tasks = eval_tasks(cfg, Split::Train, n, derive_seed(seed, 7))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let policy_m = cfg.mode.policy_modalities();
    let mut out = Vec::with_capacity(n);
    for (task, reset_seed) in tasks {
        let mut env = InsertionEnv::new(cfg.env.clone());
        let mut obs = env.reset(reset_seed, task)?;
        let steps = rng.random_range(0..40);
        for _ in 0..steps {
            let mean = act(model, store, &[&obs], policy_m)?.means[0];
            let noise: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.5..0.5));
            let a = std::array::from_fn(|i| (mean[i] + noise[i]).clamp(-1.0, 1.0));
            let step = env.step(a)?;
            if step.done {
                break;
            }
            obs = step.obs;
        }
        out.push(obs);
    }
    Ok(out)
}

/// Newest frame (last 3 channels) of an `[h, w, 3k]` block starting at `offset`.
fn last_frame(data: &[f32], offset: usize, pixels: usize, channels: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(pixels * 3);
    for p in 0..pixels {
        let base = offset + p * channels + channels - 3;
        out.extend_from_slice(&data[base..base + 3]);
    }
    out
}

/// Token index -> masked flag for sample `b`.
fn masked_tokens<T>(tokens: &TokenBatch<T>, b: usize) -> Vec<bool> {
    let mut m = vec![false; tokens.n_tokens()];
    for &i in &tokens.mask_idx[b] {
        m[i] = true;
    }
    m
}

/// Writes original | masked-token footprint | reconstruction rows, one row per sample,
/// for vision (newest RGB frame) and touch (newest frame, one heatmap per pad and channel).
pub fn dump_reconstructions(checkpoint: &Path, n_samples: usize, mask_ratio: Option<f64>, seed: u64, out_dir: &Path) -> Result<ReconstructionDump> {
    if n_samples == 0 {
        return Err(Error::Config("`n_samples` must be positive".into()));
    }
    let ckpt = Checkpoint::load(checkpoint)?;
    let cfg = &ckpt.config;
    let (model, store) = load_model(&ckpt, None)?;
    let modalities = cfg.mode.reconstruction_modalities().unwrap_or(Modalities::BOTH);
    let ratio = mask_ratio.unwrap_or(cfg.tokenizer.mask_ratio);
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Config(format!("`tokenizer.mask_ratio` must lie in [0, 1], got {ratio}")));
    }
    let samples = sample_observations(&model, &store, cfg, n_samples, seed)?;
    let refs: Vec<&StackedObs> = samples.iter().collect();
    let obs = ObsBatch::<f32>::from_stacked(&refs, modalities)?;
    let mut g = Graph::new(&store);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 8));
    let opts = RepOptions { mask_ratio: ratio, beta_t: cfg.mae.beta_t, all_tokens: cfg.mae.loss_on_all_tokens };
    let fwd = model.reconstruction(&mut g, &obs, modalities, &opts, &mut rng)?;
    let tokens = fwd.tokens.as_ref().expect("reconstruction keeps its tokens");
    let recon = fwd.recon.expect("reconstruction output");
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let k = ckpt.config.env.frame_stack;
    let c = 3 * k;
    let mut dump = ReconstructionDump {
        vision: None,
        touch: None,
        samples: n_samples,
        mse_pixels: fwd.breakdown.mse_pixels,
        mse_taxels: fwd.breakdown.mse_taxels,
    };

    if let (Some(pred), Some(image)) = (recon.vision, &obs.image) {
        let s = IMAGE_SIZE as u32;
        let stride = model.spec.vision_stride;
        let full = unpatchify(g.value(pred), stride, IMAGE_SIZE, IMAGE_SIZE)?;
        let range = tokens.range(Modality::Vision).expect("vision tokens");
        let grid = IMAGE_SIZE / stride;
        let mut img = RgbImage::new(3 * s, n_samples as u32 * s);
        let pixels = IMAGE_SIZE * IMAGE_SIZE;
        for b in 0..n_samples {
            let orig = last_frame(image.data(), b * pixels * c, pixels, c);
            let rec = last_frame(full.data(), b * pixels * c, pixels, c);
            let masked = masked_tokens(tokens, b);
            for p in 0..pixels {
                let (y, x) = (p / IMAGE_SIZE, p % IMAGE_SIZE);
                let token = range.start + (y / stride) * grid + x / stride;
                let o = plot::rgb(orig[3 * p], orig[3 * p + 1], orig[3 * p + 2]);
                let row = b as u32 * s + y as u32;
                img.put_pixel(x as u32, row, o);
                img.put_pixel(s + x as u32, row, if masked[token] { plot::dim(o) } else { o });
                img.put_pixel(2 * s + x as u32, row, plot::rgb(rec[3 * p], rec[3 * p + 1], rec[3 * p + 2]));
            }
        }
        let path = out_dir.join("reconstruction_vision.png");
        plot::save_png(&img, &path)?;
        dump.vision = Some(path);
    }

    if let (Some(pred), Some((left, right))) = (recon.touch, &obs.touch) {
        let stride = model.spec.touch_stride;
        let grid = TAXEL_GRID / stride;
        let per_pad = grid * grid;
        let pred = g.value(pred);
        let payload = pred.shape()[2];
        let b_count = n_samples;
        // split the [B, 2 * n, P] prediction back into per-pad blocks
        let mut pads = Vec::new();
        for pad in 0..2 {
            let mut data = Vec::with_capacity(b_count * per_pad * payload);
            for b in 0..b_count {
                let start = (b * 2 * per_pad + pad * per_pad) * payload;
                data.extend_from_slice(&pred.data()[start..start + per_pad * payload]);
            }
            let t = m3l_autograd::Tensor::new(&[b_count, per_pad, payload], data)?;
            pads.push(unpatchify(&t, stride, TAXEL_GRID, TAXEL_GRID)?);
        }
        let range = tokens.range(Modality::Touch).expect("touch tokens");
        let s = TAXEL_GRID as u32;
        let panel = 6 * s;
        let mut img = RgbImage::new(3 * panel, b_count as u32 * s);
        let pixels = TAXEL_GRID * TAXEL_GRID;
        for b in 0..b_count {
            let masked = masked_tokens(tokens, b);
            for (pad, (orig_src, rec_src)) in [(left, &pads[0]), (right, &pads[1])].into_iter().enumerate() {
                let orig = last_frame(orig_src.data(), b * pixels * c, pixels, c);
                let rec = last_frame(rec_src.data(), b * pixels * c, pixels, c);
                for p in 0..pixels {
                    let (y, x) = (p / TAXEL_GRID, p % TAXEL_GRID);
                    let token = range.start + pad * per_pad + (y / stride) * grid + x / stride;
                    let row = b as u32 * s + y as u32;
                    for ch in 0..3 {
                        let col = (pad as u32 * 3 + ch as u32) * s + x as u32;
                        let o = plot::diverging(orig[3 * p + ch]);
                        img.put_pixel(col, row, o);
                        img.put_pixel(panel + col, row, if masked[token] { plot::dim(o) } else { o });
                        img.put_pixel(2 * panel + col, row, plot::diverging(rec[3 * p + ch]));
                    }
                }
            }
        }
        let path = out_dir.join("reconstruction_touch.png");
        plot::save_png(&img, &path)?;
        dump.touch = Some(path);
    }
    Ok(dump)
}
