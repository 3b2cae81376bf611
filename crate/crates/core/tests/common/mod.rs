#![allow(dead_code)]

use m3l::config::{Modalities, RunConfig};
use m3l::policy::RolloutBuffer;
use m3l::tokenizer::ObsBatch;
use m3l::trainer::Trainer;

/// Smallest model and schedule that still exercise every code path.
pub fn tiny_config() -> RunConfig {
    let mut cfg = RunConfig::desk();
    cfg.tokenizer.dim = 8;
    cfg.tokenizer.vision_stride = 32;
    cfg.tokenizer.touch_stride = 32;
    cfg.tokenizer.conv_channels = 4;
    cfg.mae.encoder_layers = 1;
    cfg.mae.encoder_heads = 2;
    cfg.mae.decoder_layers = 1;
    cfg.mae.decoder_dim = 8;
    cfg.mae.decoder_heads = 2;
    cfg.mae.mlp_ratio = 2;
    cfg.policy.head_heads = 2;
    cfg.policy.head_mlp_hidden = 8;
    cfg.env.frame_stack = 1;
    cfg.trainer.n_envs = 2;
    cfg.trainer.rollout_length = 32;
    cfg.trainer.batch_size = 16;
    cfg.trainer.epochs = 1;
    cfg.trainer.rep_steps_per_rl_step = 4;
    cfg.trainer.total_env_steps = 64;
    cfg.eval.episodes_per_checkpoint = 2;
    cfg
}

/// Environment observations gathered by a fresh policy, `n` transitions of `frames` frames each.
pub fn rollout_observations(n: usize, frames: usize, seed: u64) -> (RolloutBuffer, Vec<usize>) {
    let mut cfg = tiny_config();
    cfg.seed = seed;
    cfg.env.frame_stack = frames;
    cfg.trainer.n_envs = 8;
    cfg.trainer.rollout_length = n.div_ceil(8) * 8;
    cfg.trainer.batch_size = cfg.trainer.rollout_length;
    let mut t = Trainer::new(cfg).unwrap();
    let (buf, _) = t.collect_rollouts().unwrap();
    (buf, (0..n).collect())
}

pub fn batch_of(buf: &RolloutBuffer, idx: &[usize]) -> ObsBatch<f32> {
    let stacks: Vec<_> = idx.iter().map(|&i| buf.stack(i)).collect();
    ObsBatch::from_frames(&stacks, Modalities::BOTH).unwrap()
}
