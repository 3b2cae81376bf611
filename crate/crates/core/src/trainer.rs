//! Rollout collection and the update schedules of every training mode.

use std::collections::VecDeque;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use m3l_autograd::optim::{clip_grad_norm, Adam};
use m3l_autograd::{Graph, ParamStore};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::config::{Modalities, RunConfig, Schedule, Split, TrainMode};
use crate::env::{EpisodeStats, ShapeLibrary, StackedObs, TaskSampler, VecEnv};
use crate::error::{Error, Result};
use crate::mae::LossBreakdown;
use crate::model::{Forward, M3lModel, ModelSpec, PpoBatch, RepOptions};
use crate::policy::{log_prob_f64, normalize_advantages, sample_action, PpoCoefficients, RolloutBuffer, ACTION_DIM};
use crate::tokenizer::ObsBatch;

pub const METRICS_HEADER: &str = "step,episode_return_mean,success_rate,mse_pixels,mse_taxels,l_clip,l_critic,entropy,total_loss";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CONFIG_FILE: &str = "config.toml";
pub const TASK_LOG_FILE: &str = "tasks.log";
pub const CHECKPOINT_DIR: &str = "checkpoints";

/// Independent, reproducible seed for one consumer of the run seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    use rand::RngCore;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.next_u64()
}

/// Shape library named by the config, or the built-in one.
pub fn shape_library(cfg: &RunConfig) -> Result<ShapeLibrary> {
    match &cfg.env.shape_library {
        Some(path) => ShapeLibrary::load(Path::new(path)),
        None => Ok(ShapeLibrary::builtin()),
    }
}

/// Policy outputs for a batch of observations.
#[derive(Clone, Debug)]
pub struct Act {
    pub means: Vec<[f64; ACTION_DIM]>,
    pub log_std: [f64; ACTION_DIM],
    pub values: Vec<f64>,
}

/// Runs the actor-critic on `obs` reading only `modalities`.
pub fn act(model: &M3lModel, store: &ParamStore<f32>, obs: &[&StackedObs], modalities: Modalities) -> Result<Act> {
    let batch = ObsBatch::<f32>::from_stacked(obs, modalities)?;
    let mut g = Graph::new(store);
    let out = model.policy_forward(&mut g, &batch, modalities)?;
    let mean = g.value(out.mean).data();
    let ls = g.value(out.log_std).data();
    let values: Vec<f64> = g.value(out.value).data().iter().map(|&v| v as f64).collect();
    if !mean.iter().chain(ls).all(|v| v.is_finite()) || !values.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("policy output during rollout".into()));
    }
    let means = mean.chunks(ACTION_DIM).map(|c| [c[0] as f64, c[1] as f64, c[2] as f64]).collect();
    Ok(Act { means, log_std: [ls[0] as f64, ls[1] as f64, ls[2] as f64], values })
}

/// Loss components averaged over the optimizer steps that produced them.
#[derive(Clone, Debug, Default)]
struct BreakdownMean {
    pixels: (f64, usize),
    taxels: (f64, usize),
    clip: (f64, usize),
    critic: f64,
    entropy: f64,
    ppo: f64,
    beta_t: f64,
    beta_v: f64,
    beta_h: f64,
}

impl BreakdownMean {
    fn add_rep(&mut self, b: &LossBreakdown, m: Modalities) {
        if m.vision {
            self.pixels.0 += b.mse_pixels;
            self.pixels.1 += 1;
        }
        if m.touch {
            self.taxels.0 += b.mse_taxels;
            self.taxels.1 += 1;
        }
        self.beta_t = b.beta_t;
    }

    fn add_ppo(&mut self, b: &LossBreakdown) {
        self.clip.0 += b.l_clip;
        self.clip.1 += 1;
        self.critic += b.l_critic;
        self.entropy += b.entropy;
        self.ppo += b.l_ppo;
        self.beta_v = b.beta_v;
        self.beta_h = b.beta_h;
    }

    fn finish(&self) -> LossBreakdown {
        let avg = |(sum, n): (f64, usize)| if n == 0 { 0.0 } else { sum / n as f64 };
        let np = self.clip.1.max(1) as f64;
        let mse_pixels = avg(self.pixels);
        let mse_taxels = avg(self.taxels);
        let l_rep = mse_pixels + self.beta_t * mse_taxels;
        let l_ppo = if self.clip.1 == 0 { 0.0 } else { self.ppo / np };
        LossBreakdown {
            mse_pixels,
            mse_taxels,
            beta_t: self.beta_t,
            l_rep,
            l_clip: avg(self.clip),
            l_critic: self.critic / np,
            entropy: self.entropy / np,
            beta_v: self.beta_v,
            beta_h: self.beta_h,
            l_ppo,
            total: l_rep + l_ppo,
        }
    }
}

/// What one update phase did.
#[derive(Clone, Debug)]
pub struct UpdateStats {
    pub breakdown: LossBreakdown,
    pub optimizer_steps: u64,
    pub minibatches: usize,
}

/// Summary of one collect/update cycle.
#[derive(Clone, Debug)]
pub struct CycleReport {
    pub cycle: u64,
    pub env_steps: u64,
    pub episodes: Vec<EpisodeStats>,
    pub update: UpdateStats,
}

impl CycleReport {
    pub fn episode_return_mean(&self) -> Option<f64> {
        (!self.episodes.is_empty()).then(|| self.episodes.iter().map(|e| e.episode_return).sum::<f64>() / self.episodes.len() as f64)
    }

    pub fn success_rate(&self) -> Option<f64> {
        (!self.episodes.is_empty()).then(|| self.episodes.iter().filter(|e| e.success).count() as f64 / self.episodes.len() as f64)
    }

    /// One metrics line, matching [`METRICS_HEADER`].
    pub fn metrics_row(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "nan".to_string(), |v| v.to_string());
        let b = &self.update.breakdown;
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.env_steps,
            opt(self.episode_return_mean()),
            opt(self.success_rate()),
            b.mse_pixels,
            b.mse_taxels,
            b.l_clip,
            b.l_critic,
            b.entropy,
            b.total
        )
    }
}

/// Owns the model, optimizer and environments of one run.
pub struct Trainer {
    cfg: RunConfig,
    pub model: M3lModel,
    pub store: ParamStore<f32>,
    pub optimizer: Adam<f32>,
    envs: VecEnv,
    rng: ChaCha8Rng,
    env_steps: u64,
    cycles: u64,
    tasks_written: usize,
}

impl Trainer {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let mut init = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let model = M3lModel::new(&mut store, ModelSpec::from_config(&cfg), &mut init)?;
        let optimizer = Adam::new(&store);
        let envs = Self::make_envs(&cfg, 0)?;
        let rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 2));
        Ok(Self { cfg, model, store, optimizer, envs, rng, env_steps: 0, cycles: 0, tasks_written: 0 })
    }

    fn make_envs(cfg: &RunConfig, cycles: u64) -> Result<VecEnv> {
        let library = shape_library(cfg)?;
        let sampler = TaskSampler::new(&library, Split::Train, &cfg.env.train_shapes)?;
        VecEnv::new(&cfg.env, cfg.trainer.n_envs, sampler, derive_seed(cfg.seed, 1_000_000 + cycles))
    }

    /// Restores parameters, optimizer moments and counters. Environments restart
    /// with fresh episodes seeded from the saved cycle count.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut t = Self::new(ckpt.config.clone())?;
        ckpt.load_into(&mut t.store)?;
        if let Some(opt) = &ckpt.optimizer {
            if !t.optimizer.restore(opt.steps, opt.first.clone(), opt.second.clone()) {
                return Err(Error::Checkpoint("optimizer state does not match the model".into()));
            }
        }
        t.env_steps = ckpt.env_steps;
        t.cycles = ckpt.cycles;
        if ckpt.cycles > 0 {
            t.envs = Self::make_envs(&t.cfg, ckpt.cycles)?;
        }
        Ok(t)
    }

    /// Resumes from the newest checkpoint in `run_dir`, dropping metric rows written after it.
    pub fn resume(run_dir: &Path) -> Result<Self> {
        let latest = list_checkpoints(run_dir)?.pop().ok_or_else(|| Error::Checkpoint(format!("no checkpoints under {}", run_dir.display())))?;
        let t = Self::from_checkpoint(&Checkpoint::load(&latest)?)?;
        let metrics = run_dir.join(METRICS_FILE);
        if metrics.exists() {
            let text = fs::read_to_string(&metrics).map_err(|e| Error::io(&metrics, e))?;
            let mut kept = String::new();
            for line in text.lines() {
                let step = line.split(',').next().and_then(|s| s.parse::<u64>().ok());
                if step.is_none_or(|s| s <= t.env_steps) {
                    kept.push_str(line);
                    kept.push('\n');
                }
            }
            fs::write(&metrics, kept).map_err(|e| Error::io(&metrics, e))?;
        }
        Ok(t)
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn env_steps(&self) -> u64 {
        self.env_steps
    }

    pub fn cycles(&self) -> u64 {
        self.cycles
    }

    pub fn envs(&self) -> &VecEnv {
        &self.envs
    }

    pub fn set_total_env_steps(&mut self, steps: u64) {
        self.cfg.trainer.total_env_steps = steps;
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.cfg.policy.learning_rate = lr;
    }

    /// Reseeds the sampling/masking stream for a cycle so resumed runs draw the same numbers.
    fn seed_cycle(&mut self) {
        self.rng = ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, 2));
        self.rng.set_stream(self.cycles);
    }

    fn coefficients(&self) -> PpoCoefficients {
        let p = &self.cfg.policy;
        PpoCoefficients { clip_epsilon: p.clip_epsilon, beta_v: p.beta_v, beta_h: p.beta_h }
    }

    /// Collects `rollout_length` transitions with the current (frozen) parameters.
    /// Episodes cut off by the step limit get `gamma * V(s_last)` added to their final reward.
    pub fn collect_rollouts(&mut self) -> Result<(RolloutBuffer, Vec<EpisodeStats>)> {
        let n = self.envs.len();
        let k = self.cfg.env.frame_stack;
        let steps = self.cfg.trainer.rollout_length / n;
        let touch = self.cfg.mode.uses_touch();
        let policy_m = self.cfg.mode.policy_modalities();
        let (gamma, scale) = (self.cfg.policy.gamma, self.cfg.policy.reward_scale);
        let mut buf = RolloutBuffer::new(n);
        let mut windows: Vec<VecDeque<u32>> = Vec::with_capacity(n);
        for o in self.envs.observations() {
            windows.push((0..k).map(|i| buf.add_frame(o.frame_with(i, touch))).collect());
        }
        let mut finished = Vec::new();
        for _ in 0..steps {
            let out = {
                let refs: Vec<&StackedObs> = self.envs.observations().iter().collect();
                act(&self.model, &self.store, &refs, policy_m)?
            };
            let mut actions = Vec::with_capacity(n);
            let mut log_probs = Vec::with_capacity(n);
            let mut env_actions = Vec::with_capacity(n);
            for mean in &out.means {
                let a = sample_action(mean, &out.log_std, &mut self.rng);
                log_probs.push(log_prob_f64(mean, &out.log_std, &a));
                env_actions.push(a.map(|v| v.clamp(-1.0, 1.0)));
                actions.push(a);
            }
            let step = self.envs.step(&env_actions)?;
            let truncated: Vec<(usize, &StackedObs)> =
                step.truncated_obs.iter().enumerate().filter_map(|(i, o)| o.as_ref().map(|o| (i, o))).collect();
            let mut tail_values = vec![0.0; n];
            if !truncated.is_empty() {
                let refs: Vec<&StackedObs> = truncated.iter().map(|(_, o)| *o).collect();
                let v = act(&self.model, &self.store, &refs, policy_m)?.values;
                for ((i, _), v) in truncated.iter().zip(v) {
                    tail_values[*i] = v;
                }
            }
            for i in 0..n {
                let reward = step.rewards[i] * scale + gamma * tail_values[i];
                buf.push(windows[i].iter().copied().collect(), actions[i], log_probs[i], reward, step.dones[i], out.values[i]);
                let id = buf.add_frame(step.obs[i].frame_with(k - 1, touch));
                if step.dones[i] {
                    // a fresh stack repeats its first frame
                    windows[i] = std::iter::repeat_n(id, k).collect();
                } else {
                    windows[i].pop_front();
                    windows[i].push_back(id);
                }
            }
            finished.extend(step.finished);
        }
        let refs: Vec<&StackedObs> = self.envs.observations().iter().collect();
        buf.bootstrap = act(&self.model, &self.store, &refs, policy_m)?.values;
        buf.compute_advantages(gamma, self.cfg.policy.gae_lambda)?;
        self.env_steps += (steps * n) as u64;
        Ok((buf, finished))
    }

    fn minibatches(&mut self, len: usize) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(&mut self.rng);
        order.chunks(self.cfg.trainer.batch_size).map(<[usize]>::to_vec).collect()
    }

    fn inputs(&self, buf: &RolloutBuffer, idx: &[usize], modalities: Modalities) -> Result<(ObsBatch<f32>, PpoBatch)> {
        let stacks: Vec<_> = idx.iter().map(|&i| buf.stack(i)).collect();
        let obs = ObsBatch::from_frames(&stacks, modalities)?;
        let mut advantages: Vec<f64> = idx.iter().map(|&i| buf.advantages[i]).collect();
        if self.cfg.policy.normalize_advantages {
            normalize_advantages(&mut advantages);
        }
        let batch = PpoBatch {
            actions: idx.iter().map(|&i| buf.actions[i]).collect(),
            old_log_probs: idx.iter().map(|&i| buf.log_probs[i]).collect(),
            advantages,
            returns: idx.iter().map(|&i| buf.returns[i]).collect(),
        };
        Ok((obs, batch))
    }

    fn rep_options(&self) -> RepOptions {
        RepOptions { mask_ratio: self.cfg.tokenizer.mask_ratio, beta_t: self.cfg.mae.beta_t, all_tokens: self.cfg.mae.loss_on_all_tokens }
    }

    /// One optimizer step on the loss built by `build`; aborts on non-finite values.
    fn step_on<F>(&mut self, what: &str, build: F) -> Result<LossBreakdown>
    where
        F: FnOnce(&M3lModel, &mut Graph<'_, f32>, &mut ChaCha8Rng) -> Result<Forward<f32>>,
    {
        let mut g = Graph::new(&self.store);
        let fwd = build(&self.model, &mut g, &mut self.rng)?;
        let loss = g.value(fwd.loss).item();
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "{what} loss is {loss} at cycle {}, optimizer step {} ({:?})",
                self.cycles,
                self.optimizer.steps(),
                fwd.breakdown
            )));
        }
        let mut grads = g.backward(fwd.loss)?;
        drop(g);
        if !grads.all_finite() {
            return Err(Error::NonFinite(format!("{what} gradients at cycle {}, optimizer step {}", self.cycles, self.optimizer.steps())));
        }
        if self.cfg.policy.max_grad_norm > 0.0 {
            clip_grad_norm(&mut grads, self.cfg.policy.max_grad_norm);
        }
        self.optimizer.step(&mut self.store, &grads, self.cfg.policy.learning_rate);
        Ok(fwd.breakdown)
    }

    /// Sum of the reconstruction and PPO losses on each minibatch, one step each.
    pub fn update_joint(&mut self, buf: &RolloutBuffer) -> Result<UpdateStats> {
        let start = self.optimizer.steps();
        let mode = self.cfg.mode;
        let policy_m = mode.policy_modalities();
        let rep = mode.reconstruction_modalities().map(|m| (m, self.rep_options()));
        let need = rep.map_or(policy_m, |(m, _)| union(m, policy_m));
        let coef = self.coefficients();
        let mut acc = BreakdownMean::default();
        let mut count = 0;
        for _ in 0..self.cfg.trainer.epochs {
            for idx in self.minibatches(buf.len()) {
                let (obs, batch) = self.inputs(buf, &idx, need)?;
                let b = self.step_on("joint", |model, g, rng| model.joint(g, &obs, rep, policy_m, &batch, &coef, rng))?;
                if let Some((m, _)) = rep {
                    acc.add_rep(&b, m);
                }
                acc.add_ppo(&b);
                count += 1;
            }
        }
        Ok(UpdateStats { breakdown: acc.finish(), optimizer_steps: self.optimizer.steps() - start, minibatches: count })
    }

    /// Per minibatch: `n` reconstruction steps on equal chunks, then one PPO step on the whole minibatch.
    pub fn update_interleaved(&mut self, buf: &RolloutBuffer) -> Result<UpdateStats> {
        let n = self.cfg.trainer.rep_steps_per_rl_step;
        let bsz = self.cfg.trainer.batch_size;
        if n == 0 || !bsz.is_multiple_of(n) {
            return Err(Error::Config(format!("`trainer.rep_steps_per_rl_step` ({n}) must divide `trainer.batch_size` ({bsz})")));
        }
        let start = self.optimizer.steps();
        let mode = self.cfg.mode;
        let policy_m = mode.policy_modalities();
        let rep_m = mode.reconstruction_modalities();
        let opts = self.rep_options();
        let coef = self.coefficients();
        let mut acc = BreakdownMean::default();
        let mut count = 0;
        for _ in 0..self.cfg.trainer.epochs {
            for idx in self.minibatches(buf.len()) {
                if let Some(m) = rep_m {
                    for chunk in idx.chunks(idx.len().div_ceil(n)) {
                        let (obs, _) = self.inputs(buf, chunk, m)?;
                        let b = self.step_on("reconstruction", |model, g, rng| model.reconstruction(g, &obs, m, &opts, rng))?;
                        acc.add_rep(&b, m);
                    }
                }
                let (obs, batch) = self.inputs(buf, &idx, policy_m)?;
                let b = self.step_on("ppo", |model, g, _| model.ppo(g, &obs, policy_m, &batch, &coef))?;
                acc.add_ppo(&b);
                count += 1;
            }
        }
        Ok(UpdateStats { breakdown: acc.finish(), optimizer_steps: self.optimizer.steps() - start, minibatches: count })
    }

    /// Per minibatch: a vision-only reconstruction step, a touch-only one, then a PPO step.
    pub fn update_sequential(&mut self, buf: &RolloutBuffer) -> Result<UpdateStats> {
        let start = self.optimizer.steps();
        let policy_m = self.cfg.mode.policy_modalities();
        let opts = self.rep_options();
        let coef = self.coefficients();
        let mut acc = BreakdownMean::default();
        let mut count = 0;
        for _ in 0..self.cfg.trainer.epochs {
            for idx in self.minibatches(buf.len()) {
                let (obs, batch) = self.inputs(buf, &idx, union(Modalities::BOTH, policy_m))?;
                for m in [Modalities::VISION, Modalities::TOUCH] {
                    let b = self.step_on("reconstruction", |model, g, rng| model.reconstruction(g, &obs, m, &opts, rng))?;
                    acc.add_rep(&b, m);
                }
                let b = self.step_on("ppo", |model, g, _| model.ppo(g, &obs, policy_m, &batch, &coef))?;
                acc.add_ppo(&b);
                count += 1;
            }
        }
        Ok(UpdateStats { breakdown: acc.finish(), optimizer_steps: self.optimizer.steps() - start, minibatches: count })
    }

    /// Dispatches on mode and schedule.
    pub fn update(&mut self, buf: &RolloutBuffer) -> Result<UpdateStats> {
        match (self.cfg.mode, self.cfg.trainer.schedule) {
            (TrainMode::Sequential, _) => self.update_sequential(buf),
            (_, Schedule::Joint) => self.update_joint(buf),
            (_, Schedule::Interleaved) => self.update_interleaved(buf),
        }
    }

    /// One collect/update cycle.
    pub fn cycle(&mut self) -> Result<CycleReport> {
        self.seed_cycle();
        let (buf, episodes) = self.collect_rollouts()?;
        let update = self.update(&buf)?;
        self.cycles += 1;
        Ok(CycleReport { cycle: self.cycles, env_steps: self.env_steps, episodes, update })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(&self.cfg, self.env_steps, self.cycles, &self.store, Some(&self.optimizer))
    }

    /// Alternates collection and updates until `total_env_steps`, writing the
    /// config echo, metrics, task log and checkpoints under `run_dir`.
    pub fn train(&mut self, run_dir: &Path, mut on_cycle: impl FnMut(&CycleReport)) -> Result<()> {
        let ckpt_dir = run_dir.join(CHECKPOINT_DIR);
        fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
        self.cfg.save(&run_dir.join(CONFIG_FILE))?;
        let metrics = run_dir.join(METRICS_FILE);
        if !metrics.exists() {
            fs::write(&metrics, format!("{METRICS_HEADER}\n")).map_err(|e| Error::io(&metrics, e))?;
        }
        while self.env_steps < self.cfg.trainer.total_env_steps {
            let report = self.cycle()?;
            self.append_task_log(run_dir)?;
            let last = self.env_steps >= self.cfg.trainer.total_env_steps;
            if self.cycles.is_multiple_of(self.cfg.trainer.checkpoint_every as u64) || last {
                let path = ckpt_dir.join(format!("cycle_{:06}.m3l", self.cycles));
                self.checkpoint().save(&path)?;
                prune_checkpoints(run_dir, self.cfg.trainer.keep_checkpoints)?;
            }
            append_line(&metrics, &report.metrics_row())?;
            on_cycle(&report);
        }
        Ok(())
    }

    fn append_task_log(&mut self, run_dir: &Path) -> Result<()> {
        let log = self.envs.task_log();
        if self.tasks_written > log.len() {
            self.tasks_written = 0;
        }
        let mut text = String::new();
        for id in &log[self.tasks_written..] {
            text.push_str(id);
            text.push('\n');
        }
        self.tasks_written = log.len();
        let path = run_dir.join(TASK_LOG_FILE);
        let mut f = OpenOptions::new().create(true).append(true).open(&path).map_err(|e| Error::io(&path, e))?;
        f.write_all(text.as_bytes()).map_err(|e| Error::io(&path, e))
    }
}

fn union(a: Modalities, b: Modalities) -> Modalities {
    Modalities { vision: a.vision || b.vision, touch: a.touch || b.touch }
}

fn append_line(path: &Path, line: &str) -> Result<()> {
    let mut f = OpenOptions::new().append(true).open(path).map_err(|e| Error::io(path, e))?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

/// Checkpoint files of a run, oldest first.
pub fn list_checkpoints(run_dir: &Path) -> Result<Vec<PathBuf>> {
    let dir = run_dir.join(CHECKPOINT_DIR);
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut out: Vec<PathBuf> = fs::read_dir(&dir)
        .map_err(|e| Error::io(&dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "m3l"))
        .collect();
    out.sort();
    Ok(out)
}

fn prune_checkpoints(run_dir: &Path, keep: usize) -> Result<()> {
    let all = list_checkpoints(run_dir)?;
    for path in &all[..all.len().saturating_sub(keep)] {
        fs::remove_file(path).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}
