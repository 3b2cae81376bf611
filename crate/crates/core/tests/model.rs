mod common;

use m3l::config::{Modalities, RunConfig};
use m3l::env::{IMAGE_SIZE, TAXEL_GRID};
use m3l::mae::{mae_loss, patch_targets, PatchTargets, Reconstruction};
use m3l::model::{M3lModel, ModelSpec, PpoBatch, RepOptions};
use m3l::policy::{clipped_surrogate, gae, gaussian_log_prob, PpoCoefficients, ACTION_DIM};
use m3l::tokenizer::{kept_count, sample_mask, sincos_pos_embed, MaskSpec, Modality, ObsBatch};
use m3l::Error;
use m3l_autograd::optim::Adam;
use m3l_autograd::{unpatchify, Graph, ParamStore, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const VISION_ONLY: Modalities = Modalities { vision: true, touch: false };

fn desk_model(seed: u64) -> (M3lModel, ParamStore<f64>) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = M3lModel::new(&mut store, ModelSpec::from_config(&RunConfig::desk()), &mut rng).unwrap();
    (model, store)
}

/// Narrow model with the default token layout (8x8 vision grid, 4x4 per pad).
fn small_spec(frames: usize) -> ModelSpec {
    ModelSpec {
        frames,
        dim: 32,
        conv_channels: 8,
        vision_stride: 8,
        touch_stride: 8,
        encoder_layers: 1,
        encoder_heads: 2,
        decoder_layers: 1,
        decoder_dim: 32,
        decoder_heads: 2,
        mlp_ratio: 2,
        head_heads: 2,
        head_hidden: 16,
        init_log_std: 0.0,
    }
}

fn random_obs(b: usize, frames: usize, seed: u64) -> ObsBatch<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = 3 * frames;
    let mut draw = |n: usize, lo: f64| (0..n).map(|_| rng.random_range(lo..1.0)).collect::<Vec<f64>>();
    let image = Tensor::new(&[b, IMAGE_SIZE, IMAGE_SIZE, c], draw(b * IMAGE_SIZE * IMAGE_SIZE * c, 0.0)).unwrap();
    let n = b * TAXEL_GRID * TAXEL_GRID * c;
    let left = Tensor::new(&[b, TAXEL_GRID, TAXEL_GRID, c], draw(n, -1.0)).unwrap();
    let right = Tensor::new(&[b, TAXEL_GRID, TAXEL_GRID, c], draw(n, -1.0)).unwrap();
    ObsBatch { batch: b, frames, image: Some(image), touch: Some((left, right)) }
}

fn zero_obs(b: usize, frames: usize) -> ObsBatch<f64> {
    let c = 3 * frames;
    ObsBatch {
        batch: b,
        frames,
        image: Some(Tensor::zeros(&[b, IMAGE_SIZE, IMAGE_SIZE, c])),
        touch: Some((Tensor::zeros(&[b, TAXEL_GRID, TAXEL_GRID, c]), Tensor::zeros(&[b, TAXEL_GRID, TAXEL_GRID, c]))),
    }
}

// ---------------------------------------------------------------- tokenizer

#[test]
fn stems_produce_default_grids() {
    let (model, store) = desk_model(0);
    let mut g = Graph::new(&store);
    let f = model.tokenizer.features(&mut g, &random_obs(2, 4, 1)).unwrap();
    assert_eq!(g.shape(f.vision.unwrap()), [2, 64, 128]);
    assert_eq!(g.shape(f.touch.unwrap()), [2, 32, 128]);
    assert_eq!(model.tokenizer.vision_grid, (8, 8));
    assert_eq!(model.tokenizer.touch_grid, (4, 4));
}

#[test]
fn stems_reject_wrong_channel_count() {
    let (model, store) = desk_model(0);
    let mut g = Graph::new(&store);
    assert!(model.tokenizer.features(&mut g, &random_obs(1, 2, 1)).is_err());
}

#[test]
fn zero_input_gives_zero_features() {
    let (model, store) = desk_model(0);
    let mut g = Graph::new(&store);
    let f = model.tokenizer.features(&mut g, &zero_obs(1, 4)).unwrap();
    assert!(g.value(f.vision.unwrap()).data().iter().all(|&v| v == 0.0));
    assert!(g.value(f.touch.unwrap()).data().iter().all(|&v| v == 0.0));
}

#[test]
fn one_pixel_change_stays_in_its_receptive_field() {
    let (model, store) = desk_model(0);
    let base = random_obs(1, 4, 3);
    let (r, c, ch) = (21, 42, 5);
    let mut bumped = base.clone();
    let img = bumped.image.as_mut().unwrap();
    img.data_mut()[(r * IMAGE_SIZE + c) * 12 + ch] += 0.5;
    let mut g = Graph::new(&store);
    let a = model.tokenizer.features(&mut g, &base).unwrap().vision.unwrap();
    let b = model.tokenizer.features(&mut g, &bumped).unwrap().vision.unwrap();
    let owner = (r / 8) * 8 + c / 8;
    for t in 0..64 {
        let row = |v| g.value(v).data()[t * 128..(t + 1) * 128].to_vec();
        if t == owner {
            assert_ne!(row(a), row(b));
        } else {
            assert_eq!(row(a), row(b), "token {t} changed");
        }
    }
}

#[test]
fn touch_stem_is_shared_between_pads() {
    let (model, store) = desk_model(0);
    let mut obs = random_obs(2, 4, 4);
    let left = obs.touch.as_ref().unwrap().0.clone();
    obs.touch = Some((left.clone(), left));
    let mut g = Graph::new(&store);
    let t = model.tokenizer.features(&mut g, &obs).unwrap().touch.unwrap();
    let v = g.value(t).data();
    for b in 0..2 {
        let s = b * 32 * 128;
        assert_eq!(v[s..s + 16 * 128], v[s + 16 * 128..s + 32 * 128]);
    }
}

#[test]
fn assembled_tokens_carry_modality_tags() {
    let (model, store) = desk_model(0);
    let mut g = Graph::new(&store);
    let obs = random_obs(1, 4, 5);
    let f = model.tokenizer.features(&mut g, &obs).unwrap();
    let tb = model.tokenizer.assemble_tokens(&mut g, &f).unwrap();
    assert_eq!(tb.n_tokens(), 96);
    assert_eq!(tb.modality.iter().filter(|&&m| m == Modality::Vision).count(), 64);
    assert_eq!(tb.modality.iter().filter(|&&m| m == Modality::Touch).count(), 32);
    assert_eq!(tb.keep_idx[0].len() + tb.mask_idx[0].len(), 96);

    let f = model.tokenizer.features(&mut g, &obs.restrict(VISION_ONLY).unwrap()).unwrap();
    let tb = model.tokenizer.assemble_tokens(&mut g, &f).unwrap();
    assert_eq!(tb.n_tokens(), 64);
    assert!(tb.modality.iter().all(|&m| m == Modality::Vision));
}

#[test]
fn same_position_tokens_differ_by_modality_delta() {
    let (model, mut store) = desk_model(0);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for id in [model.tokenizer.vision_embed, model.tokenizer.touch_embed] {
        store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
    }
    let delta: Vec<f64> =
        store.get(model.tokenizer.vision_embed).data().iter().zip(store.get(model.tokenizer.touch_embed).data()).map(|(v, t)| v - t).collect();
    let mut g = Graph::new(&store);
    // zero input leaves only positional plus modality embeddings
    let f = model.tokenizer.features(&mut g, &zero_obs(1, 4)).unwrap();
    let tb = model.tokenizer.assemble_tokens(&mut g, &f).unwrap();
    let tokens = g.value(tb.tokens).data();
    // grid position (1, 2): vision token 1*8+2, left-pad token 64 + 1*4+2
    let (v, t) = (10, 64 + 6);
    for d in 0..128 {
        let diff = tokens[v * 128 + d] - tokens[t * 128 + d];
        assert!((diff - delta[d]).abs() < 1e-12);
    }
}

#[test]
fn sincos_table_properties() {
    let table = sincos_pos_embed(8, 8, 128).unwrap();
    assert_eq!(table.len(), 64 * 128);
    // each half: 32 sines then 32 cosines
    for half in 0..2 {
        let base = half * 64;
        assert!(table[base..base + 32].iter().all(|&v| v == 0.0));
        assert!(table[base + 32..base + 64].iter().all(|&v| v == 1.0));
    }
    assert!(table.iter().all(|v| (-1.0..=1.0).contains(v)));
    let rows: Vec<&[f64]> = table.chunks(128).collect();
    for i in 0..64 {
        for j in i + 1..64 {
            assert_ne!(rows[i], rows[j], "rows {i} and {j}");
        }
    }
    assert_eq!(table, sincos_pos_embed(8, 8, 128).unwrap());
    assert!(matches!(sincos_pos_embed(8, 8, 126), Err(Error::Config(_))));
}

#[test]
fn mask_examples() {
    let (k, m) = sample_mask(96, &MaskSpec { ratio: 0.95, rng_seed: 0 });
    assert_eq!((k.len(), m.len()), (5, 91));
    let (k, m) = sample_mask(10, &MaskSpec { ratio: 0.0, rng_seed: 0 });
    assert_eq!((k.len(), m.len()), (10, 0));
    let (k, m) = sample_mask(4, &MaskSpec { ratio: 1.0, rng_seed: 0 });
    assert_eq!((k.len(), m.len()), (1, 3));
    assert_eq!(sample_mask(96, &MaskSpec { ratio: 0.5, rng_seed: 3 }), sample_mask(96, &MaskSpec { ratio: 0.5, rng_seed: 3 }));
}

#[test]
fn mask_keep_frequency_is_uniform() {
    let draws = 10_000;
    let mut counts = [0usize; 96];
    for s in 0..draws {
        let (keep, _) = sample_mask(96, &MaskSpec { ratio: 0.95, rng_seed: s });
        assert_eq!(keep.len(), 5);
        keep.iter().for_each(|&i| counts[i] += 1);
    }
    let p = 5.0 / 96.0;
    let mean = draws as f64 * p;
    let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
    for (i, &c) in counts.iter().enumerate() {
        assert!((c as f64 - mean).abs() <= 4.0 * sigma, "token {i}: {c} vs {mean:.1} +- {sigma:.1}");
    }
}

proptest! {
    #[test]
    fn mask_is_a_partition(n in 1usize..200, ratio in 0.0f64..=1.0, seed in any::<u64>()) {
        let (keep, mask) = sample_mask(n, &MaskSpec { ratio, rng_seed: seed });
        prop_assert_eq!(keep.len(), kept_count(n, ratio));
        prop_assert_eq!(keep.len() + mask.len(), n);
        let mut all: Vec<usize> = keep.iter().chain(&mask).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
    }
}

// ---------------------------------------------------------------- mae

#[test]
fn encoder_lengths_follow_mask_and_modalities() {
    let (model, store) = desk_model(0);
    let obs = random_obs(2, 4, 6);
    let mut g = Graph::new(&store);
    let f = model.tokenizer.features(&mut g, &obs).unwrap();
    let mut tb = model.tokenizer.assemble_tokens(&mut g, &f).unwrap();
    let full = model.mae.encode(&mut g, &tb, false).unwrap();
    assert_eq!(g.shape(full), [2, 96, 128]);
    tb.apply_mask(0.95, &mut ChaCha8Rng::seed_from_u64(1));
    let kept = model.mae.encode(&mut g, &tb, true).unwrap();
    assert_eq!(g.shape(kept), [2, 5, 128]);
    let v = model.embed_obs(&mut g, &obs, VISION_ONLY).unwrap();
    assert_eq!(g.shape(v), [2, 64, 128]);
}

#[test]
fn decoder_reassembles_input_shapes() {
    let (model, store) = desk_model(0);
    let obs = random_obs(2, 4, 7);
    let mut g = Graph::new(&store);
    let f = model.tokenizer.features(&mut g, &obs).unwrap();
    let mut tb = model.tokenizer.assemble_tokens(&mut g, &f).unwrap();
    tb.apply_mask(0.95, &mut ChaCha8Rng::seed_from_u64(2));
    let latent = model.mae.encode(&mut g, &tb, true).unwrap();
    let rec = model.mae.decode(&mut g, latent, &tb).unwrap();
    let pv = g.value(rec.vision.unwrap()).clone();
    let pt = g.value(rec.touch.unwrap()).clone();
    assert_eq!(pv.shape(), [2, 64, 8 * 8 * 12]);
    assert_eq!(pt.shape(), [2, 32, 8 * 8 * 12]);
    assert_eq!(unpatchify(&pv, 8, 64, 64).unwrap().shape(), [2, 64, 64, 12]);
    // each pad is its own 4x4 grid of patches
    let left: Vec<f64> = (0..2).flat_map(|b| pt.data()[b * 32 * 768..(b * 32 + 16) * 768].to_vec()).collect();
    let left = Tensor::new(&[2, 16, 768], left).unwrap();
    assert_eq!(unpatchify(&left, 8, 32, 32).unwrap().shape(), [2, 32, 32, 12]);
}

#[test]
fn encoder_rejects_empty_input() {
    let (model, store) = desk_model(0);
    let mut g = Graph::new(&store);
    let f = model.tokenizer.features(&mut g, &random_obs(1, 4, 8)).unwrap();
    let mut tb = model.tokenizer.assemble_tokens(&mut g, &f).unwrap();
    tb.keep_idx[0].clear();
    assert!(model.mae.encode(&mut g, &tb, true).is_err());
}

#[test]
fn reconstruction_ignores_keep_order() {
    let (model, store) = desk_model(1);
    let obs = random_obs(2, 4, 9);
    let mut g = Graph::new(&store);
    let f = model.tokenizer.features(&mut g, &obs).unwrap();
    let mut tb = model.tokenizer.assemble_tokens(&mut g, &f).unwrap();
    tb.apply_mask(0.75, &mut ChaCha8Rng::seed_from_u64(3));
    let latent = model.mae.encode(&mut g, &tb, true).unwrap();
    let a = model.mae.decode(&mut g, latent, &tb).unwrap();
    let mut shuffled = tb.clone();
    for k in &mut shuffled.keep_idx {
        k.reverse();
        k.rotate_left(3);
    }
    let latent = model.mae.encode(&mut g, &shuffled, true).unwrap();
    let b = model.mae.decode(&mut g, latent, &shuffled).unwrap();
    for (x, y) in [(a.vision, b.vision), (a.touch, b.touch)] {
        let d = g.value(x.unwrap()).max_abs_diff(g.value(y.unwrap()));
        assert!(d < 1e-12, "max diff {d}");
    }
}

#[test]
fn subset_encoding_matches_full_when_attention_is_silent() {
    let (model, mut store) = desk_model(2);
    let mut single = model.clone();
    single.mae.encoder.truncate(1);
    for id in [single.mae.encoder[0].attn.out.weight, single.mae.encoder[0].attn.out.bias] {
        store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let obs = random_obs(1, 4, 10);
    let mut g = Graph::new(&store);
    let f = single.tokenizer.features(&mut g, &obs).unwrap();
    let mut tb = single.tokenizer.assemble_tokens(&mut g, &f).unwrap();
    let full = single.mae.encode(&mut g, &tb, false).unwrap();
    tb.apply_mask(0.8, &mut ChaCha8Rng::seed_from_u64(4));
    let sub = single.mae.encode(&mut g, &tb, true).unwrap();
    let (full, sub) = (g.value(full).data(), g.value(sub).data());
    for (j, &i) in tb.keep_idx[0].iter().enumerate() {
        for d in 0..128 {
            assert!((full[i * 128 + d] - sub[j * 128 + d]).abs() < 1e-12);
        }
    }
}

#[test]
fn fully_kept_sequence_has_vacuous_masked_loss() {
    let (model, store) = desk_model(0);
    let mut g = Graph::new(&store);
    let opts = RepOptions { mask_ratio: 0.0, beta_t: 10.0, all_tokens: false };
    let out = model.reconstruction(&mut g, &random_obs(1, 4, 11), Modalities::BOTH, &opts, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert!(out.recon.unwrap().vision.is_some());
    assert_eq!(out.breakdown.l_rep, 0.0);
    assert_eq!(g.value(out.loss).item(), 0.0);
}

/// Masks every token of `obs` and returns predictions that are the targets plus constant offsets.
fn offset_predictions(
    model: &M3lModel,
    g: &mut Graph<'_, f64>,
    obs: &ObsBatch<f64>,
    dv: f64,
    dt: f64,
) -> (Reconstruction, PatchTargets<f64>, m3l::tokenizer::TokenBatch<f64>) {
    let f = model.tokenizer.features(g, obs).unwrap();
    let mut tb = model.tokenizer.assemble_tokens(g, &f).unwrap();
    tb.keep_idx = vec![vec![]; obs.batch];
    tb.mask_idx = vec![(0..96).collect(); obs.batch];
    let targets = patch_targets(obs, 8, 8).unwrap();
    let v = g.constant(targets.0.as_ref().unwrap().map(|x| x + dv));
    let t = g.constant(targets.1.as_ref().unwrap().map(|x| x + dt));
    (Reconstruction { vision: Some(v), touch: Some(t) }, targets, tb)
}

#[test]
fn loss_arithmetic_examples() {
    let (model, store) = desk_model(0);
    let obs = random_obs(2, 4, 12);
    let mut g = Graph::new(&store);
    let cases = [(0.0, 0.0, 10.0, 0.0), (1.0, 0.0, 10.0, 1.0), (0.5, 0.2, 10.0, 2.5)];
    for (mp, mt, beta, expected) in cases {
        let (rec, targets, tb) = offset_predictions(&model, &mut g, &obs, f64::sqrt(mp), f64::sqrt(mt));
        let (loss, br) = mae_loss(&mut g, &rec, &targets, &tb, beta, false).unwrap();
        assert!((br.mse_pixels - mp).abs() < 1e-12);
        assert!((br.mse_taxels - mt).abs() < 1e-12);
        assert_eq!(br.l_rep, br.mse_pixels + beta * br.mse_taxels);
        assert!((g.value(loss).item() - expected).abs() < 1e-9, "{mp} {mt}");
    }
}

#[test]
fn loss_rejects_nan_predictions() {
    let (model, store) = desk_model(0);
    let obs = random_obs(1, 4, 13);
    let mut g = Graph::new(&store);
    let (mut rec, targets, tb) = offset_predictions(&model, &mut g, &obs, 0.0, 0.0);
    rec.vision = Some(g.constant(targets.0.as_ref().unwrap().map(|_| f64::NAN)));
    assert!(matches!(mae_loss(&mut g, &rec, &targets, &tb, 10.0, false), Err(Error::NonFinite(_))));
}

#[test]
fn kept_positions_do_not_enter_the_loss() {
    let (model, store) = desk_model(3);
    let obs = random_obs(2, 4, 14);
    let mut g = Graph::new(&store);
    let f = model.tokenizer.features(&mut g, &obs).unwrap();
    let mut tb = model.tokenizer.assemble_tokens(&mut g, &f).unwrap();
    tb.apply_mask(0.5, &mut ChaCha8Rng::seed_from_u64(5));
    let latent = model.mae.encode(&mut g, &tb, true).unwrap();
    let rec = model.mae.decode(&mut g, latent, &tb).unwrap();
    let targets = patch_targets(&obs, 8, 8).unwrap();
    let (_, before) = mae_loss(&mut g, &rec, &targets, &tb, 10.0, false).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut perturbed = Reconstruction { vision: None, touch: None };
    for (m, src, slot) in [(Modality::Vision, rec.vision, &mut perturbed.vision), (Modality::Touch, rec.touch, &mut perturbed.touch)] {
        let range = tb.range(m).unwrap();
        let mut v = g.value(src.unwrap()).clone();
        let p = v.shape()[2];
        for b in 0..2 {
            for &i in tb.keep_idx[b].iter().filter(|i| range.contains(i)) {
                let row = b * range.len() + (i - range.start);
                v.data_mut()[row * p..(row + 1) * p].iter_mut().for_each(|x| *x += rng.random_range(-5.0..5.0));
            }
        }
        *slot = Some(g.constant(v));
    }
    let (_, after) = mae_loss(&mut g, &perturbed, &targets, &tb, 10.0, false).unwrap();
    assert_eq!(before.l_rep, after.l_rep);
    let (_, all) = mae_loss(&mut g, &perturbed, &targets, &tb, 10.0, true).unwrap();
    assert_ne!(before.l_rep, all.l_rep, "the all-token variant does see kept positions");
}

#[test]
fn reconstruction_overfits_a_frozen_batch() {
    let mut store = ParamStore::<f32>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let model = M3lModel::new(&mut store, small_spec(1), &mut rng).unwrap();
    let (buf, idx) = common::rollout_observations(64, 1, 15);
    let obs = common::batch_of(&buf, &idx);
    let opts = RepOptions { mask_ratio: 0.95, beta_t: 10.0, all_tokens: false };
    let mut adam = Adam::new(&store);
    let mut first = None;
    let mut last = 0.0;
    for step in 0..500 {
        // the same masks every step keep the objective fixed
        let mut mask_rng = ChaCha8Rng::seed_from_u64(step % 4);
        let grads = {
            let mut g = Graph::new(&store);
            let out = model.reconstruction(&mut g, &obs, Modalities::BOTH, &opts, &mut mask_rng).unwrap();
            last = out.breakdown.l_rep;
            first.get_or_insert(last);
            g.backward(out.loss).unwrap()
        };
        adam.step(&mut store, &grads, 1e-3);
    }
    let first = first.unwrap();
    assert!(last <= 0.5 * first, "l_rep {first} -> {last}");
}

// ---------------------------------------------------------------- policy

#[test]
fn embed_obs_shapes_and_determinism() {
    let (model, store) = desk_model(0);
    let obs = random_obs(1, 4, 16);
    let mut g = Graph::new(&store);
    let both = model.embed_obs(&mut g, &obs, Modalities::BOTH).unwrap();
    assert_eq!(g.shape(both), [1, 96, 128]);
    let again = model.embed_obs(&mut g, &obs, Modalities::BOTH).unwrap();
    assert_eq!(g.value(both).data(), g.value(again).data());
    let none = Modalities { vision: false, touch: false };
    assert!(matches!(model.embed_obs(&mut g, &obs, none), Err(Error::EmptyModalities)));
    assert!(Modalities::new(false, false).is_err());
}

#[test]
fn heads_start_at_zero_and_accept_any_token_count() {
    let (model, store) = desk_model(0);
    let mut g = Graph::new(&store);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for n in [64, 96] {
        let x = g.constant(Tensor::new(&[2, n, 128], (0..2 * n * 128).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap());
        let out = model.policy.forward(&mut g, x).unwrap();
        assert_eq!(g.shape(out.mean), [2, ACTION_DIM]);
        assert!(g.value(out.mean).data().iter().all(|&v| v == 0.0));
        assert!(g.value(out.value).data().iter().all(|&v| v == 0.0));
    }
    let empty = g.constant(Tensor::zeros(&[1, 0, 128]));
    assert!(model.policy.forward(&mut g, empty).is_err());
}

#[test]
fn heads_are_token_permutation_invariant() {
    let (model, mut store) = desk_model(4);
    // move the zero-initialized output layers so the outputs are informative
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    for h in [&model.policy.actor, &model.policy.critic] {
        store.get_mut(h.fc2.weight).data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
    }
    let n = 96;
    let data: Vec<f64> = (0..n * 128).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut perm: Vec<usize> = (0..n).collect();
    perm.reverse();
    perm.rotate_left(17);
    let permuted: Vec<f64> = perm.iter().flat_map(|&i| data[i * 128..(i + 1) * 128].to_vec()).collect();
    let mut g = Graph::new(&store);
    let a = g.constant(Tensor::new(&[1, n, 128], data).unwrap());
    let b = g.constant(Tensor::new(&[1, n, 128], permuted).unwrap());
    let (a, b) = (model.policy.forward(&mut g, a).unwrap(), model.policy.forward(&mut g, b).unwrap());
    assert!(g.value(a.mean).data().iter().any(|&v| v != 0.0));
    assert!(g.value(a.mean).max_abs_diff(g.value(b.mean)) < 1e-12);
    assert!(g.value(a.value).max_abs_diff(g.value(b.value)) < 1e-12);
}

/// Advantage as an explicit sum of discounted TD errors, truncated at episode ends.
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
                let delta = r[s] + gamma * value_after(s) - v[s];
                total += (gamma * lam).powi(l as i32) * delta;
                if done[s] {
                    break;
                }
            }
            total
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn gae_matches_brute_force(
        steps in proptest::collection::vec((-10.0f64..10.0, -10.0f64..10.0, any::<bool>()), 1..=6),
        bootstrap in -10.0f64..10.0,
        gamma in 0.0f64..=1.0,
        lam in 0.0f64..=1.0,
    ) {
        let r: Vec<f64> = steps.iter().map(|s| s.0).collect();
        let v: Vec<f64> = steps.iter().map(|s| s.1).collect();
        let d: Vec<bool> = steps.iter().map(|s| s.2).collect();
        let (adv, ret) = gae(&r, &v, &d, bootstrap, gamma, lam).unwrap();
        let oracle = brute_force_gae(&r, &v, &d, bootstrap, gamma, lam);
        for t in 0..r.len() {
            prop_assert!((adv[t] - oracle[t]).abs() <= 1e-6, "t={} {} vs {}", t, adv[t], oracle[t]);
            prop_assert!((ret[t] - (adv[t] + v[t])).abs() <= 1e-12);
        }
    }

    #[test]
    fn clipping_never_exceeds_unclipped(r in 0.0f64..5.0, a in -10.0f64..10.0, eps in 0.01f64..0.99) {
        prop_assert!(clipped_surrogate(r, a, eps) <= r * a);
    }
}

/// Pessimistic bound written per advantage sign.
fn surrogate_oracle(r: f64, a: f64, eps: f64) -> f64 {
    if a >= 0.0 {
        r.min(1.0 + eps) * a
    } else {
        r.max(1.0 - eps) * a
    }
}

#[test]
fn clip_objective_matches_direct_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    for _ in 0..10_000 {
        let r = rng.random_range(0.0..3.0);
        let a = rng.random_range(-5.0..5.0);
        let eps = rng.random_range(0.01..0.99);
        assert_eq!(clipped_surrogate(r, a, eps), surrogate_oracle(r, a, eps), "r={r} a={a} eps={eps}");
    }
    assert_eq!(clipped_surrogate(1.0, 1.0, 0.2), 1.0);
    assert_eq!(clipped_surrogate(2.0, 1.0, 0.2), 1.2);
    assert_eq!(clipped_surrogate(0.5, -1.0, 0.2), -0.8);
}

#[test]
fn graph_clip_term_matches_scalar_formula() {
    let (model, store) = desk_model(5);
    let obs = random_obs(4, 4, 20);
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let actions: Vec<[f64; ACTION_DIM]> = (0..4).map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0))).collect();
    let mut g = Graph::new(&store);
    let out = model.policy_forward(&mut g, &obs, Modalities::BOTH).unwrap();
    let at = Tensor::new(&[4, ACTION_DIM], actions.iter().flatten().copied().collect()).unwrap();
    let lp = gaussian_log_prob(&mut g, out.mean, out.log_std, &at).unwrap();
    let current = g.value(lp).data().to_vec();
    let shifts = [0.0, 0.7, -0.7, 0.1];
    let advantages = vec![1.0, -0.5, 2.0, -1.5];
    let batch = PpoBatch {
        actions,
        old_log_probs: current.iter().zip(shifts).map(|(l, s)| l + s).collect(),
        advantages: advantages.clone(),
        returns: vec![0.0; 4],
    };
    let coef = PpoCoefficients { clip_epsilon: 0.2, beta_v: 0.5, beta_h: 0.01 };
    let f = model.ppo(&mut g, &obs, Modalities::BOTH, &batch, &coef).unwrap();
    let expected = shifts.iter().zip(&advantages).map(|(s, a)| surrogate_oracle((-s).exp(), *a, 0.2)).sum::<f64>() / 4.0;
    assert!((f.breakdown.l_clip - expected).abs() < 1e-12);
}

#[test]
fn fresh_rollouts_give_unit_ratio() {
    let (model, store) = desk_model(6);
    let obs = random_obs(3, 4, 22);
    let actions = vec![[0.3, -0.2, 0.9], [-1.0, 0.0, 0.5], [0.1, 0.1, -0.4]];
    let mut g = Graph::new(&store);
    let out = model.policy_forward(&mut g, &obs, Modalities::BOTH).unwrap();
    let at = Tensor::new(&[3, ACTION_DIM], actions.iter().flatten().copied().collect()).unwrap();
    let lp = gaussian_log_prob(&mut g, out.mean, out.log_std, &at).unwrap();
    let advantages = vec![0.4, -1.3, 2.2];
    let batch = PpoBatch { actions, old_log_probs: g.value(lp).data().to_vec(), advantages: advantages.clone(), returns: vec![0.0; 3] };
    let coef = PpoCoefficients { clip_epsilon: 0.2, beta_v: 0.5, beta_h: 0.01 };
    let f = model.ppo(&mut g, &obs, Modalities::BOTH, &batch, &coef).unwrap();
    let mean = advantages.iter().sum::<f64>() / 3.0;
    assert!((f.breakdown.l_clip - mean).abs() < 1e-12);
}

#[test]
fn gae_rejects_length_mismatch() {
    assert!(matches!(gae(&[1.0, 2.0], &[0.0], &[false, true], 0.0, 0.99, 0.95), Err(Error::LengthMismatch(_))));
}
