use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{DoneReason, InsertionEnv, StackedObs, TaskSampler, TaskSpec};
use crate::config::EnvConfig;
use crate::error::{Error, Result};

/// Summary of one finished episode.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeStats {
    pub shape_id: String,
    pub episode_return: f64,
    pub length: usize,
    pub success: bool,
}

/// Result of stepping every instance once.
#[derive(Clone, Debug)]
pub struct VecStep {
    /// Observation to act on next; already the reset observation for finished envs.
    pub obs: Vec<StackedObs>,
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
    /// For episodes cut off by the step limit, the final observation before reset.
    pub truncated_obs: Vec<Option<StackedObs>>,
    pub finished: Vec<EpisodeStats>,
}

/// N independent environments with automatic reset, stepped in index order.
pub struct VecEnv {
    envs: Vec<InsertionEnv>,
    sampler: TaskSampler,
    rng: ChaCha8Rng,
    obs: Vec<StackedObs>,
    returns: Vec<f64>,
    lengths: Vec<usize>,
    task_log: Vec<String>,
}

impl VecEnv {
    pub fn new(cfg: &EnvConfig, n: usize, sampler: TaskSampler, seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(Error::Config("`trainer.n_envs` must be at least 1".into()));
        }
        let mut v = Self {
            envs: (0..n).map(|_| InsertionEnv::new(cfg.clone())).collect(),
            sampler,
            rng: ChaCha8Rng::seed_from_u64(seed),
            obs: Vec::with_capacity(n),
            returns: vec![0.0; n],
            lengths: vec![0; n],
            task_log: Vec::new(),
        };
        for i in 0..n {
            let obs = v.reset_env(i)?;
            v.obs.push(obs);
        }
        Ok(v)
    }

    fn reset_env(&mut self, i: usize) -> Result<StackedObs> {
        let task: TaskSpec = self.sampler.sample(&mut self.rng);
        let seed = self.rng.random::<u64>();
        self.task_log.push(task.peg.id.clone());
        self.returns[i] = 0.0;
        self.lengths[i] = 0;
        self.envs[i].reset(seed, task)
    }

    pub fn len(&self) -> usize {
        self.envs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.envs.is_empty()
    }

    pub fn observations(&self) -> &[StackedObs] {
        &self.obs
    }

    pub fn envs(&self) -> &[InsertionEnv] {
        &self.envs
    }

    /// Peg ids of every task started so far, in order.
    pub fn task_log(&self) -> &[String] {
        &self.task_log
    }

    pub fn step(&mut self, actions: &[[f64; 3]]) -> Result<VecStep> {
        if actions.len() != self.envs.len() {
            return Err(Error::LengthMismatch(format!("{} actions for {} envs", actions.len(), self.envs.len())));
        }
        let n = self.envs.len();
        let mut out = VecStep {
            obs: Vec::with_capacity(n),
            rewards: Vec::with_capacity(n),
            dones: Vec::with_capacity(n),
            truncated_obs: Vec::with_capacity(n),
            finished: Vec::new(),
        };
        for (i, &action) in actions.iter().enumerate() {
            let step = self.envs[i].step(action)?;
            self.returns[i] += step.reward;
            self.lengths[i] += 1;
            out.rewards.push(step.reward);
            out.dones.push(step.done);
            if step.done {
                let shape_id = self.envs[i].task().map(|t| t.peg.id.clone()).unwrap_or_default();
                out.finished.push(EpisodeStats {
                    shape_id,
                    episode_return: self.returns[i],
                    length: self.lengths[i],
                    success: step.info.done_reason == DoneReason::Success,
                });
                let timed_out = step.info.done_reason == DoneReason::Timeout;
                out.truncated_obs.push(timed_out.then_some(step.obs));
                let fresh = self.reset_env(i)?;
                self.obs[i] = fresh.clone();
                out.obs.push(fresh);
            } else {
                out.truncated_obs.push(None);
                self.obs[i] = step.obs.clone();
                out.obs.push(step.obs);
            }
        }
        Ok(out)
    }
}
