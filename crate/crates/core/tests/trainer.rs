mod common;

use std::fs;

use common::tiny_config;
use m3l::checkpoint::{Checkpoint, MAGIC};
use m3l::config::{Modalities, Split, TrainMode};
use m3l::env::{reset_tactile_reads, tactile_reads, StackedObs, TaskSampler, VecEnv};
use m3l::model::{M3lModel, ModelSpec, PpoBatch, RepOptions};
use m3l::policy::{PpoCoefficients, RolloutBuffer};
use m3l::tokenizer::ObsBatch;
use m3l::trainer::{derive_seed, list_checkpoints, shape_library, Trainer, METRICS_FILE, METRICS_HEADER};
use m3l::Error;
use m3l_autograd::{Graph, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn same_buffers(a: &RolloutBuffer, b: &RolloutBuffer) -> bool {
    a.frames == b.frames
        && a.stack_ids == b.stack_ids
        && a.actions == b.actions
        && a.log_probs == b.log_probs
        && a.rewards == b.rewards
        && a.dones == b.dones
        && a.values == b.values
        && a.advantages == b.advantages
}

fn params(t: &Trainer) -> Vec<Tensor<f32>> {
    t.store.iter().map(|(_, _, v)| v.clone()).collect()
}

#[test]
fn rollout_splits_steps_across_envs() {
    let mut cfg = tiny_config();
    cfg.trainer.n_envs = 8;
    cfg.trainer.rollout_length = 128;
    let mut t = Trainer::new(cfg).unwrap();
    let (buf, _) = t.collect_rollouts().unwrap();
    assert_eq!(buf.len(), 128);
    assert_eq!(buf.n_envs, 8);
    assert_eq!(buf.bootstrap.len(), 8);
    assert_eq!(t.env_steps(), 128);
    // 16 steps per env, step-major
    assert_eq!(buf.len() / buf.n_envs, 16);
    assert!(buf.advantages.iter().all(|a| a.is_finite()));
}

#[test]
fn fixed_seeds_give_identical_buffers() {
    let run = |seed| {
        let mut cfg = tiny_config();
        cfg.seed = seed;
        Trainer::new(cfg).unwrap().collect_rollouts().unwrap().0
    };
    assert!(same_buffers(&run(3), &run(3)));
    assert!(!same_buffers(&run(3), &run(4)));
}

#[test]
fn stored_stacks_replay_the_environment() {
    let mut cfg = tiny_config();
    cfg.env.frame_stack = 4;
    cfg.env.max_steps = 5;
    cfg.trainer.rollout_length = 24;
    cfg.trainer.batch_size = 8;
    let mut t = Trainer::new(cfg.clone()).unwrap();
    let (buf, _) = t.collect_rollouts().unwrap();

    // an independent copy of the environments driven by the stored actions
    let lib = shape_library(&cfg).unwrap();
    let sampler = TaskSampler::new(&lib, Split::Train, &cfg.env.train_shapes).unwrap();
    let mut envs = VecEnv::new(&cfg.env, 2, sampler, derive_seed(cfg.seed, 1_000_000)).unwrap();
    let frames_of = |o: &StackedObs| (0..4).map(|i| o.frame(i)).collect::<Vec<_>>();
    let mut saw_done = false;
    for step in 0..12 {
        let mut actions = Vec::new();
        for e in 0..2 {
            let i = step * 2 + e;
            let stored: Vec<_> = buf.stack(i).into_iter().cloned().collect();
            assert_eq!(stored, frames_of(&envs.observations()[e]), "transition {i}");
            actions.push(buf.actions[i].map(|a| a.clamp(-1.0, 1.0)));
        }
        let out = envs.step(&actions).unwrap();
        for e in 0..2 {
            assert_eq!(out.dones[e], buf.dones[step * 2 + e]);
            saw_done |= out.dones[e];
        }
    }
    assert!(saw_done, "episodes of 5 steps must end inside a 12-step rollout");
}

#[test]
fn success_adds_one_bonus_per_episode() {
    let mut cfg = tiny_config();
    // any position counts as inserted, so every episode is a single successful step
    cfg.env.success_threshold = 10.0;
    cfg.policy.reward_scale = 1.0;
    cfg.policy.gamma = 0.0;
    let mut t = Trainer::new(cfg).unwrap();
    let (buf, episodes) = t.collect_rollouts().unwrap();
    assert_eq!(episodes.len(), buf.len());
    assert!(episodes.iter().all(|e| e.success && e.length == 1));
    assert!(buf.dones.iter().all(|&d| d));
    let bonuses = buf.rewards.iter().filter(|&&r| r > 500.0).count();
    assert_eq!(bonuses, episodes.len());
    assert!(buf.rewards.iter().all(|&r| (990.0..=1000.0).contains(&r)));
}

#[test]
fn zero_learning_rate_leaves_parameters_untouched() {
    let mut t = Trainer::new(tiny_config()).unwrap();
    t.set_learning_rate(0.0);
    let before = params(&t);
    let (buf, _) = t.collect_rollouts().unwrap();
    let stats = t.update(&buf).unwrap();
    assert!(stats.optimizer_steps > 0);
    assert_eq!(before, params(&t));
}

#[test]
fn joint_update_takes_one_step_per_minibatch() {
    let mut cfg = tiny_config();
    cfg.trainer.epochs = 3;
    let mut t = Trainer::new(cfg).unwrap();
    let (buf, _) = t.collect_rollouts().unwrap();
    let s = t.update_joint(&buf).unwrap();
    assert_eq!(s.minibatches, 6);
    assert_eq!(s.optimizer_steps, 6);
    assert!(s.breakdown.l_rep > 0.0);
}

#[test]
fn interleaved_update_counts_steps() {
    for (n, per_minibatch) in [(4, 5), (1, 2), (16, 17)] {
        let mut cfg = tiny_config();
        cfg.trainer.rep_steps_per_rl_step = n;
        let mut t = Trainer::new(cfg).unwrap();
        let (buf, _) = t.collect_rollouts().unwrap();
        let s = t.update_interleaved(&buf).unwrap();
        assert_eq!(s.minibatches, 2);
        assert_eq!(s.optimizer_steps, 2 * per_minibatch, "n = {n}");
    }
}

#[test]
fn interleaved_update_requires_divisible_batches() {
    let mut cfg = tiny_config();
    cfg.trainer.rep_steps_per_rl_step = 3;
    let mut t = Trainer::new(cfg.clone()).unwrap();
    let (buf, _) = t.collect_rollouts().unwrap();
    assert!(matches!(t.update_interleaved(&buf), Err(Error::Config(_))));
    cfg.trainer.schedule = m3l::config::Schedule::Interleaved;
    assert!(Trainer::new(cfg).is_err());
}

#[test]
fn sequential_update_takes_three_steps_per_minibatch() {
    let mut cfg = tiny_config();
    cfg.mode = TrainMode::Sequential;
    let mut t = Trainer::new(cfg).unwrap();
    let (buf, _) = t.collect_rollouts().unwrap();
    let s = t.update(&buf).unwrap();
    assert_eq!(s.minibatches, 2);
    assert_eq!(s.optimizer_steps, 6);
    assert!(s.breakdown.mse_pixels > 0.0 && s.breakdown.mse_taxels > 0.0);
}

fn tiny_f64(seed: u64) -> (M3lModel, ParamStore<f64>, ObsBatch<f64>, PpoBatch) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let model = M3lModel::new(&mut store, ModelSpec::tiny(), &mut rng).unwrap();
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        store.get_mut(id).data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.2..0.2));
    }
    let (buf, idx) = common::rollout_observations(4, 1, seed);
    let obs32 = common::batch_of(&buf, &idx);
    let obs = ObsBatch {
        batch: 4,
        frames: 1,
        image: obs32.image.as_ref().map(Tensor::cast),
        touch: obs32.touch.as_ref().map(|(l, r)| (l.cast(), r.cast())),
    };
    let batch = PpoBatch {
        actions: idx.iter().map(|&i| buf.actions[i]).collect(),
        old_log_probs: vec![-3.0, -2.5, -4.0, -3.3],
        advantages: vec![1.0, -0.5, 0.3, -1.2],
        returns: vec![0.2, -0.1, 0.4, 0.0],
    };
    (model, store, obs, batch)
}

#[test]
fn touch_reconstruction_leaves_vision_stem_untouched() {
    let (model, store, obs, _) = tiny_f64(1);
    let opts = RepOptions { mask_ratio: 0.5, beta_t: 10.0, all_tokens: false };
    let mut g = Graph::new(&store);
    let out = model.reconstruction(&mut g, &obs, Modalities::TOUCH, &opts, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    // the per-modality forward never builds a vision token
    assert!(out.tokens.as_ref().unwrap().range(m3l::tokenizer::Modality::Vision).is_none());
    let grads = g.backward(out.loss).unwrap();
    let stem = &model.tokenizer.vision;
    for id in [stem.first.weight, stem.first.bias, stem.second.weight, stem.second.bias, model.tokenizer.vision_embed] {
        if let Some(gr) = grads.get(id) {
            assert!(gr.data().iter().all(|&v| v == 0.0), "{}", store.name(id));
        }
    }
    let touch = grads.get(model.tokenizer.touch.first.weight).unwrap();
    assert!(touch.data().iter().any(|&v| v != 0.0));
}

#[test]
fn joint_gradient_is_the_sum_of_both_losses() {
    let (model, store, obs, batch) = tiny_f64(2);
    let rep = RepOptions { mask_ratio: 0.5, beta_t: 10.0, all_tokens: false };
    let coef = PpoCoefficients { clip_epsilon: 0.2, beta_v: 0.5, beta_h: 0.01 };
    let joint = {
        let mut g = Graph::new(&store);
        let f = model.joint(&mut g, &obs, Some((Modalities::BOTH, rep)), Modalities::BOTH, &batch, &coef, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        g.backward(f.loss).unwrap()
    };
    let mut sum = {
        let mut g = Graph::new(&store);
        let f = model.reconstruction(&mut g, &obs, Modalities::BOTH, &rep, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        g.backward(f.loss).unwrap()
    };
    let ppo = {
        let mut g = Graph::new(&store);
        let f = model.ppo(&mut g, &obs, Modalities::BOTH, &batch, &coef).unwrap();
        g.backward(f.loss).unwrap()
    };
    sum.merge(&ppo);
    let mut checked = 0;
    for id in store.ids() {
        let zero = Tensor::zeros(store.get(id).shape());
        let a = joint.get(id).unwrap_or(&zero);
        let b = sum.get(id).unwrap_or(&zero);
        assert!(a.max_abs_diff(b) <= 1e-6, "{}", store.name(id));
        checked += a.data().iter().filter(|&&v| v != 0.0).count();
    }
    assert!(checked > 100);
}

#[test]
fn vision_only_runs_never_read_taxels() {
    let mut cfg = tiny_config();
    cfg.mode = TrainMode::VisionOnlyMae;
    let mut t = Trainer::new(cfg).unwrap();
    reset_tactile_reads();
    let report = t.cycle().unwrap();
    assert_eq!(tactile_reads(), 0);
    assert_eq!(report.update.breakdown.mse_taxels, 0.0);

    let mut t = Trainer::new(tiny_config()).unwrap();
    reset_tactile_reads();
    t.cycle().unwrap();
    assert!(tactile_reads() > 0, "the counter must see multimodal runs");
}

#[test]
fn mode_token_sets() {
    use TrainMode::*;
    assert_eq!(M3l.policy_modalities(), Modalities::BOTH);
    assert_eq!(M3l.reconstruction_modalities(), Some(Modalities::BOTH));
    assert_eq!(M3lVisionPolicy.policy_modalities(), Modalities::VISION);
    assert_eq!(M3lVisionPolicy.reconstruction_modalities(), Some(Modalities::BOTH));
    assert_eq!(VisionOnlyMae.policy_modalities(), Modalities::VISION);
    assert_eq!(VisionOnlyMae.reconstruction_modalities(), Some(Modalities::VISION));
    assert_eq!(EndToEnd.reconstruction_modalities(), None);

    let mut cfg = tiny_config();
    cfg.mode = M3lVisionPolicy;
    let r = Trainer::new(cfg).unwrap().cycle().unwrap();
    assert!(r.update.breakdown.mse_taxels > 0.0, "representations still see touch");

    let mut cfg = tiny_config();
    cfg.mode = EndToEnd;
    let r = Trainer::new(cfg).unwrap().cycle().unwrap();
    assert_eq!(r.update.breakdown.l_rep, 0.0);
    assert_eq!(r.update.optimizer_steps, 2);
}

#[test]
fn training_stops_after_the_step_budget() {
    let dir = tempfile::tempdir().unwrap();
    let mut t = Trainer::new(tiny_config()).unwrap();
    let mut cycles = Vec::new();
    t.train(dir.path(), |r| cycles.push((r.cycle, r.env_steps))).unwrap();
    assert_eq!(cycles, vec![(1, 32), (2, 64)]);
    // n_envs * steps per env * cycles
    assert_eq!(t.env_steps(), 2 * 16 * 2);
    let metrics = fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines[0], METRICS_HEADER);
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("32,") && lines[2].starts_with("64,"));
    assert_eq!(list_checkpoints(dir.path()).unwrap().len(), 2);
}

#[test]
fn only_the_newest_checkpoints_are_kept() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config();
    cfg.trainer.total_env_steps = 6 * 32;
    Trainer::new(cfg).unwrap().train(dir.path(), |_| {}).unwrap();
    let kept = list_checkpoints(dir.path()).unwrap();
    assert_eq!(kept.len(), 4);
    assert_eq!(Checkpoint::load(kept.last().unwrap()).unwrap().env_steps, 192);
    assert_eq!(Checkpoint::load(&kept[0]).unwrap().cycles, 3);
}

#[test]
fn resume_continues_the_step_count() {
    let dir = tempfile::tempdir().unwrap();
    Trainer::new(tiny_config()).unwrap().train(dir.path(), |_| {}).unwrap();
    let mut t = Trainer::resume(dir.path()).unwrap();
    assert_eq!((t.env_steps(), t.cycles()), (64, 2));
    t.set_total_env_steps(128);
    let mut seen = Vec::new();
    t.train(dir.path(), |r| seen.push(r.env_steps)).unwrap();
    assert_eq!(seen, vec![96, 128]);
    let steps: Vec<String> =
        fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap().lines().skip(1).map(|l| l.split(',').next().unwrap().to_string()).collect();
    assert_eq!(steps, ["32", "64", "96", "128"]);
}

#[test]
fn identical_seeds_write_identical_metrics() {
    let run = || {
        let dir = tempfile::tempdir().unwrap();
        Trainer::new(tiny_config()).unwrap().train(dir.path(), |_| {}).unwrap();
        fs::read(dir.path().join(METRICS_FILE)).unwrap()
    };
    assert_eq!(run(), run());
}

#[test]
fn checkpoints_round_trip_and_check_versions() {
    let mut t = Trainer::new(tiny_config()).unwrap();
    t.cycle().unwrap();
    let ckpt = t.checkpoint();
    let mut bytes = Vec::new();
    ckpt.write_to(&mut bytes).unwrap();
    assert_eq!(&bytes[..8], MAGIC);
    let back = Checkpoint::read_from(&mut bytes.as_slice()).unwrap();
    assert_eq!(back.config, ckpt.config);
    assert_eq!((back.env_steps, back.cycles), (32, 1));
    assert_eq!(back.params.len(), t.store.len());
    for (a, (_, name, v)) in back.params.iter().zip(t.store.iter()) {
        assert_eq!(a.name, name);
        assert_eq!(&a.value, v);
    }
    let restored = Trainer::from_checkpoint(&back).unwrap();
    assert_eq!(params(&restored), params(&t));
    assert_eq!(restored.optimizer.steps(), t.optimizer.steps());

    let mut wrong = bytes.clone();
    wrong[8] = wrong[8].wrapping_add(1);
    assert!(matches!(Checkpoint::read_from(&mut wrong.as_slice()), Err(Error::Checkpoint(_))));
    let mut garbage = bytes;
    garbage[0] = b'X';
    assert!(Checkpoint::read_from(&mut garbage.as_slice()).is_err());
}

#[test]
fn checkpoint_rejects_a_different_architecture() {
    let t = Trainer::new(tiny_config()).unwrap();
    let ckpt = t.checkpoint();
    let mut cfg = tiny_config();
    cfg.tokenizer.dim = 16;
    let mut other = Trainer::new(cfg).unwrap();
    assert!(matches!(ckpt.load_into(&mut other.store), Err(Error::Checkpoint(_))));
}

#[test]
fn non_finite_losses_abort_the_update() {
    let mut t = Trainer::new(tiny_config()).unwrap();
    // the decoder head is not used while acting, so only the update sees the NaN
    let id = t.model.mae.vision_head.weight;
    t.store.get_mut(id).data_mut()[0] = f32::NAN;
    let err = t.cycle().unwrap_err();
    assert!(matches!(err, Error::NonFinite(_)), "{err}");
}
