//! Actor and critic heads, the diagonal Gaussian policy, GAE and the clipped PPO objective.

use m3l_autograd::nn::{LayerNorm, Linear, TransformerBlock};
use m3l_autograd::{Graph, ParamId, ParamStore, Scalar, Tensor, Var};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::env::VisuoTactileObs;
use crate::error::{Error, Result};

pub const ACTION_DIM: usize = 3;
const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Transformer layer, mean pooling, then a two-layer MLP whose last layer starts at zero.
#[derive(Clone, Debug)]
pub struct Head {
    pub block: TransformerBlock,
    pub norm: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Head {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        hidden: usize,
        out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            block: TransformerBlock::new(store, &format!("{name}.block"), dim, heads, 4 * dim, rng)?,
            norm: LayerNorm::new(store, &format!("{name}.norm"), dim)?,
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, hidden, rng)?,
            fc2: Linear::zeroed(store, &format!("{name}.fc2"), hidden, out)?,
        })
    }

    /// `[B, N, D] -> [B, out]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let x = self.block.forward(g, x)?;
        let x = g.mean_tokens(x)?;
        let x = self.norm.forward(g, x)?;
        let x = self.fc1.forward(g, x)?;
        let x = g.gelu(x);
        Ok(self.fc2.forward(g, x)?)
    }
}

#[derive(Clone, Debug)]
pub struct ActorCritic {
    pub actor: Head,
    pub critic: Head,
    /// State-independent `[3]`.
    pub log_std: ParamId,
}

/// Policy outputs for a batch: `mean [B, 3]`, `value [B]`.
#[derive(Clone, Copy, Debug)]
pub struct PolicyOutput {
    pub mean: Var,
    pub value: Var,
    pub log_std: Var,
}

impl ActorCritic {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        dim: usize,
        heads: usize,
        hidden: usize,
        init_log_std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            actor: Head::new(store, "policy.actor", dim, heads, hidden, ACTION_DIM, rng)?,
            critic: Head::new(store, "policy.critic", dim, heads, hidden, 1, rng)?,
            log_std: store.register("policy.log_std", Tensor::full(&[ACTION_DIM], T::of(init_log_std)))?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, embeddings: Var) -> Result<PolicyOutput> {
        let s = g.shape(embeddings).to_vec();
        if s.len() != 3 || s[1] == 0 {
            return Err(Error::Config(format!("policy heads need [B, N>0, D] embeddings, got {s:?}")));
        }
        let mean = self.actor.forward(g, embeddings)?;
        let value = self.critic.forward(g, embeddings)?;
        let value = g.reshape(value, &[s[0]])?;
        let log_std = g.param(self.log_std);
        Ok(PolicyOutput { mean, value, log_std })
    }
}

/// Log density of `actions [B, 3]` under `N(mean, exp(log_std)^2)`, shape `[B]`.
pub fn gaussian_log_prob<T: Scalar>(g: &mut Graph<'_, T>, mean: Var, log_std: Var, actions: &Tensor<T>) -> Result<Var> {
    let a = g.constant(actions.clone());
    let diff = g.sub(a, mean)?;
    let neg = g.scale(log_std, -T::one());
    let inv_std = g.exp(neg);
    let z = g.mul_broadcast(diff, inv_std)?;
    let z2 = g.square(z);
    let z2 = g.scale(z2, T::of(-0.5));
    let per_dim = g.add_scalar(z2, T::of(-0.5 * LN_2PI));
    let per_dim = g.add_broadcast(per_dim, neg)?;
    Ok(g.sum_last(per_dim))
}

/// Entropy of the diagonal Gaussian (scalar; it does not depend on the state).
pub fn gaussian_entropy<T: Scalar>(g: &mut Graph<'_, T>, log_std: Var) -> Var {
    let per_dim = g.add_scalar(log_std, T::of(0.5 * (1.0 + LN_2PI)));
    g.sum(per_dim)
}

/// Plain evaluation of the log density, for rollouts.
pub fn log_prob_f64(mean: &[f64], log_std: &[f64], action: &[f64]) -> f64 {
    mean.iter()
        .zip(log_std)
        .zip(action)
        .map(|((m, s), a)| {
            let z = (a - m) / s.exp();
            -0.5 * z * z - s - 0.5 * LN_2PI
        })
        .sum()
}

pub fn sample_action<R: Rng + ?Sized>(mean: &[f64], log_std: &[f64], rng: &mut R) -> [f64; ACTION_DIM] {
    let mut a = [0.0; ACTION_DIM];
    for i in 0..ACTION_DIM {
        let eps: f64 = rng.sample(StandardNormal);
        a[i] = mean[i] + log_std[i].exp() * eps;
    }
    a
}

/// Backward GAE recursion. `dones[t]` ends the episode after step `t`;
/// `bootstrap_value` is `V(s_T)` for the state after the last step.
pub fn gae(rewards: &[f64], values: &[f64], dones: &[bool], bootstrap_value: f64, gamma: f64, lam: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = rewards.len();
    if values.len() != n || dones.len() != n {
        return Err(Error::LengthMismatch(format!("rewards {n}, values {}, dones {}", values.len(), dones.len())));
    }
    let mut adv = vec![0.0; n];
    let mut last = 0.0;
    for t in (0..n).rev() {
        let not_done = if dones[t] { 0.0 } else { 1.0 };
        let next_value = if t + 1 == n { bootstrap_value } else { values[t + 1] };
        let delta = rewards[t] + gamma * next_value * not_done - values[t];
        last = delta + gamma * lam * not_done * last;
        adv[t] = last;
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, returns))
}

/// `min(r * A, clip(r, 1 - eps, 1 + eps) * A)`.
pub fn clipped_surrogate(ratio: f64, advantage: f64, eps: f64) -> f64 {
    (ratio * advantage).min(ratio.clamp(1.0 - eps, 1.0 + eps) * advantage)
}

/// Scalar PPO terms of a minibatch.
#[derive(Clone, Copy, Debug)]
pub struct PpoTerms {
    /// Minimized loss `-l_clip + beta_v * l_critic - beta_h * entropy`.
    pub loss: Var,
    /// Graph nodes of the individual terms.
    pub nodes: PpoNodes,
    pub l_clip: f64,
    pub l_critic: f64,
    pub entropy: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct PpoNodes {
    pub l_clip: Var,
    pub l_critic: Var,
    pub entropy: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct PpoCoefficients {
    pub clip_epsilon: f64,
    pub beta_v: f64,
    pub beta_h: f64,
}

/// Builds the PPO loss. `advantages` should already be normalized if desired.
#[allow(clippy::too_many_arguments)]
pub fn ppo_loss<T: Scalar>(
    g: &mut Graph<'_, T>,
    new_log_probs: Var,
    old_log_probs: &[f64],
    advantages: &[f64],
    new_values: Var,
    returns: &[f64],
    entropy: Var,
    coef: &PpoCoefficients,
) -> Result<PpoTerms> {
    let b = old_log_probs.len();
    if advantages.len() != b || returns.len() != b || g.shape(new_log_probs) != [b] || g.shape(new_values) != [b] {
        return Err(Error::LengthMismatch(format!("PPO minibatch of {b} with mismatched inputs")));
    }
    let konst = |g: &mut Graph<'_, T>, v: &[f64]| g.constant(Tensor::new(&[b], v.iter().map(|&x| T::of(x)).collect()).expect("1-D"));
    let old = konst(g, old_log_probs);
    let adv = konst(g, advantages);
    let ret = konst(g, returns);
    let log_ratio = g.sub(new_log_probs, old)?;
    let ratio = g.exp(log_ratio);
    if !g.value(ratio).all_finite() {
        return Err(Error::NonFinite("probability ratio".into()));
    }
    let eps = T::of(coef.clip_epsilon);
    let unclipped = g.mul(ratio, adv)?;
    let clipped = g.clamp(ratio, T::one() - eps, T::one() + eps);
    let clipped = g.mul(clipped, adv)?;
    let surrogate = g.minimum(unclipped, clipped)?;
    let l_clip = g.mean(surrogate);
    let err = g.sub(new_values, ret)?;
    let err = g.square(err);
    let err = g.scale(err, T::of(0.5));
    let l_critic = g.mean(err);
    let neg_clip = g.scale(l_clip, -T::one());
    let critic = g.scale(l_critic, T::of(coef.beta_v));
    let bonus = g.scale(entropy, T::of(-coef.beta_h));
    let loss = g.add(neg_clip, critic)?;
    let loss = g.add(loss, bonus)?;
    Ok(PpoTerms {
        loss,
        nodes: PpoNodes { l_clip, l_critic, entropy },
        l_clip: g.value(l_clip).item().as_f64(),
        l_critic: g.value(l_critic).item().as_f64(),
        entropy: g.value(entropy).item().as_f64(),
    })
}

/// Zero mean, unit variance; unchanged when the spread is degenerate.
pub fn normalize_advantages(adv: &mut [f64]) {
    let n = adv.len() as f64;
    if adv.len() < 2 {
        return;
    }
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    for a in adv.iter_mut() {
        *a = (*a - mean) / (std + 1e-8);
    }
}

/// On-policy storage, step-major: transition `t * n_envs + e`.
///
/// Frames are stored once and referenced by index, so a transition's stack is
/// rebuilt from its `k` frame ids.
#[derive(Clone, Debug, Default)]
pub struct RolloutBuffer {
    pub n_envs: usize,
    pub frames: Vec<VisuoTactileObs>,
    pub stack_ids: Vec<Vec<u32>>,
    pub actions: Vec<[f64; ACTION_DIM]>,
    pub log_probs: Vec<f64>,
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
    pub values: Vec<f64>,
    /// `V(s)` of the state following the last stored step, per env.
    pub bootstrap: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl RolloutBuffer {
    pub fn new(n_envs: usize) -> Self {
        Self { n_envs, ..Self::default() }
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn add_frame(&mut self, frame: VisuoTactileObs) -> u32 {
        self.frames.push(frame);
        (self.frames.len() - 1) as u32
    }

    #[allow(clippy::too_many_arguments)]
    pub fn push(&mut self, stack: Vec<u32>, action: [f64; ACTION_DIM], log_prob: f64, reward: f64, done: bool, value: f64) {
        self.stack_ids.push(stack);
        self.actions.push(action);
        self.log_probs.push(log_prob);
        self.rewards.push(reward);
        self.dones.push(done);
        self.values.push(value);
    }

    /// Frames of transition `i`, oldest first.
    pub fn stack(&self, i: usize) -> Vec<&VisuoTactileObs> {
        self.stack_ids[i].iter().map(|&f| &self.frames[f as usize]).collect()
    }

    /// Runs GAE independently along each environment's column.
    pub fn compute_advantages(&mut self, gamma: f64, lam: f64) -> Result<()> {
        let n = self.len();
        if self.n_envs == 0 || !n.is_multiple_of(self.n_envs) || self.bootstrap.len() != self.n_envs {
            return Err(Error::LengthMismatch(format!("{n} transitions, {} envs, {} bootstrap values", self.n_envs, self.bootstrap.len())));
        }
        self.advantages = vec![0.0; n];
        self.returns = vec![0.0; n];
        for e in 0..self.n_envs {
            let idx: Vec<usize> = (e..n).step_by(self.n_envs).collect();
            let pick = |v: &[f64]| idx.iter().map(|&i| v[i]).collect::<Vec<_>>();
            let dones: Vec<bool> = idx.iter().map(|&i| self.dones[i]).collect();
            let (adv, ret) = gae(&pick(&self.rewards), &pick(&self.values), &dones, self.bootstrap[e], gamma, lam)?;
            for (j, &i) in idx.iter().enumerate() {
                self.advantages[i] = adv[j];
                self.returns[i] = ret[j];
            }
        }
        if self.advantages.iter().any(|a| !a.is_finite()) {
            return Err(Error::NonFinite("advantages".into()));
        }
        Ok(())
    }
}
