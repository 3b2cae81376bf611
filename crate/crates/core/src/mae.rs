//! Multimodal masked autoencoder: ViT encoder over kept tokens, light ViT
//! decoder with a shared mask token, and per-modality pixel/taxel heads.

use m3l_autograd::nn::{LayerNorm, Linear, TransformerBlock};
use m3l_autograd::{patchify, Graph, ParamId, ParamStore, Scalar, Tensor, Var};
use rand::Rng;

use crate::error::{Error, Result};
use crate::tokenizer::{Modality, ObsBatch, TokenBatch, Tokenizer};

/// Loss components of one update. Unused slots stay 0.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub mse_pixels: f64,
    pub mse_taxels: f64,
    pub beta_t: f64,
    pub l_rep: f64,
    pub l_clip: f64,
    pub l_critic: f64,
    pub entropy: f64,
    pub beta_v: f64,
    pub beta_h: f64,
    /// Minimized PPO loss, `-l_clip + beta_v * l_critic - beta_h * entropy`.
    pub l_ppo: f64,
    pub total: f64,
}

#[derive(Clone, Debug)]
pub struct MaeDims {
    pub dim: usize,
    pub encoder_layers: usize,
    pub encoder_heads: usize,
    pub decoder_layers: usize,
    pub decoder_dim: usize,
    pub decoder_heads: usize,
    pub mlp_ratio: usize,
    /// Values per vision / touch token in the reconstruction target.
    pub vision_payload: usize,
    pub touch_payload: usize,
}

#[derive(Clone, Debug)]
pub struct Mae {
    pub encoder: Vec<TransformerBlock>,
    pub encoder_norm: LayerNorm,
    pub decoder_embed: Linear,
    pub mask_token: ParamId,
    pub decoder_vision_embed: ParamId,
    pub decoder_touch_embed: ParamId,
    pub decoder: Vec<TransformerBlock>,
    pub decoder_norm: LayerNorm,
    pub vision_head: Linear,
    pub touch_head: Linear,
    pub dims: MaeDims,
}

/// Per-modality patch predictions, `[B, N_m, payload]`.
#[derive(Clone, Copy, Debug)]
pub struct Reconstruction {
    pub vision: Option<Var>,
    pub touch: Option<Var>,
}

impl Mae {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, dims: MaeDims, rng: &mut R) -> Result<Self> {
        let encoder = (0..dims.encoder_layers)
            .map(|i| TransformerBlock::new(store, &format!("mae.encoder.{i}"), dims.dim, dims.encoder_heads, dims.mlp_ratio * dims.dim, rng))
            .collect::<m3l_autograd::Result<Vec<_>>>()?;
        let decoder = (0..dims.decoder_layers)
            .map(|i| {
                TransformerBlock::new(
                    store,
                    &format!("mae.decoder.{i}"),
                    dims.decoder_dim,
                    dims.decoder_heads,
                    dims.mlp_ratio * dims.decoder_dim,
                    rng,
                )
            })
            .collect::<m3l_autograd::Result<Vec<_>>>()?;
        Ok(Self {
            encoder,
            encoder_norm: LayerNorm::new(store, "mae.encoder_norm", dims.dim)?,
            decoder_embed: Linear::new(store, "mae.decoder_embed", dims.dim, dims.decoder_dim, rng)?,
            mask_token: store.zeros("mae.mask_token", &[dims.decoder_dim])?,
            decoder_vision_embed: store.zeros("mae.decoder_vision_modality", &[dims.decoder_dim])?,
            decoder_touch_embed: store.zeros("mae.decoder_touch_modality", &[dims.decoder_dim])?,
            decoder,
            decoder_norm: LayerNorm::new(store, "mae.decoder_norm", dims.decoder_dim)?,
            vision_head: Linear::new(store, "mae.vision_head", dims.decoder_dim, dims.vision_payload, rng)?,
            touch_head: Linear::new(store, "mae.touch_head", dims.decoder_dim, dims.touch_payload, rng)?,
            dims,
        })
    }

    /// Encodes the kept tokens (`apply_mask`) or the full sequence.
    pub fn encode<T: Scalar>(&self, g: &mut Graph<'_, T>, batch: &TokenBatch<T>, apply_mask: bool) -> Result<Var> {
        if batch.n_tokens() == 0 || (apply_mask && batch.keep_idx.iter().any(Vec::is_empty)) {
            return Err(Error::Config("encoder input is empty".into()));
        }
        let mut x = if apply_mask { g.gather_tokens(batch.tokens, &batch.keep_idx)? } else { batch.tokens };
        for block in &self.encoder {
            x = block.forward(g, x)?;
        }
        Ok(self.encoder_norm.forward(g, x)?)
    }

    /// Decodes a masked encoding back to patch payloads for every modality in `batch`.
    pub fn decode<T: Scalar>(&self, g: &mut Graph<'_, T>, latent: Var, batch: &TokenBatch<T>) -> Result<Reconstruction> {
        let n = batch.n_tokens();
        let s = g.shape(latent).to_vec();
        let kept = batch.keep_idx.first().map_or(0, Vec::len);
        if s.len() != 3 || s[0] != batch.batch() || s[1] != kept || s[2] != self.dims.dim {
            return Err(Error::Config(format!("decoder got latent {s:?} for {} samples with {kept} kept tokens", batch.batch())));
        }
        let x = self.decoder_embed.forward(g, latent)?;
        let mask = g.param(self.mask_token);
        let x = g.scatter_tokens(x, mask, &batch.keep_idx, n)?;
        let pos = Tokenizer::pos_table::<T>(&batch.grid_shapes, self.dims.decoder_dim)?;
        let pos = g.constant(pos);
        let mut x = g.add_broadcast(x, pos)?;
        let mut rows = Vec::new();
        for &(m, (h, w)) in &batch.grid_shapes {
            let e = g.param(if m == Modality::Vision { self.decoder_vision_embed } else { self.decoder_touch_embed });
            let e = g.expand(e, h * w);
            rows.push(g.reshape(e, &[1, h * w, self.dims.decoder_dim])?);
        }
        let table = if rows.len() == 1 { rows[0] } else { g.concat_tokens(&rows)? };
        let table = g.reshape(table, &[n, self.dims.decoder_dim])?;
        x = g.add_broadcast(x, table)?;
        for block in &self.decoder {
            x = block.forward(g, x)?;
        }
        let x = self.decoder_norm.forward(g, x)?;
        let mut out = Reconstruction { vision: None, touch: None };
        for m in [Modality::Vision, Modality::Touch] {
            let Some(range) = batch.range(m) else { continue };
            let idx = vec![range.collect::<Vec<_>>(); batch.batch()];
            let part = g.gather_tokens(x, &idx)?;
            match m {
                Modality::Vision => out.vision = Some(self.vision_head.forward(g, part)?),
                Modality::Touch => out.touch = Some(self.touch_head.forward(g, part)?),
            }
        }
        Ok(out)
    }
}

/// Vision and touch patch targets, either absent when the modality is.
pub type PatchTargets<T> = (Option<Tensor<T>>, Option<Tensor<T>>);

/// Patch targets matching the decoder's token order: vision `[B, Nv, P]`,
/// touch `[B, 2*Nt, P]` with the left pad first.
pub fn patch_targets<T: Scalar>(obs: &ObsBatch<T>, vision_stride: usize, touch_stride: usize) -> Result<PatchTargets<T>> {
    let vision = obs.image.as_ref().map(|img| patchify(img, vision_stride)).transpose()?;
    let touch = match &obs.touch {
        Some((l, r)) => {
            let (l, r) = (patchify(l, touch_stride)?, patchify(r, touch_stride)?);
            let (b, n, p) = (l.shape()[0], l.shape()[1], l.shape()[2]);
            let mut data = Vec::with_capacity(2 * l.len());
            for bi in 0..b {
                data.extend_from_slice(&l.data()[bi * n * p..(bi + 1) * n * p]);
                data.extend_from_slice(&r.data()[bi * n * p..(bi + 1) * n * p]);
            }
            Some(Tensor::new(&[b, 2 * n, p], data)?)
        }
        None => None,
    };
    Ok((vision, touch))
}

/// Mean squared error over the weighted tokens; `None` when no token carries weight.
fn weighted_mse<T: Scalar>(g: &mut Graph<'_, T>, pred: Var, target: &Tensor<T>, weights: &[bool]) -> Result<Option<Var>> {
    let s = g.shape(pred).to_vec();
    if s != target.shape() {
        return Err(Error::Config(format!("prediction {s:?} vs target {:?}", target.shape())));
    }
    let p = s[2];
    let count = weights.iter().filter(|&&w| w).count();
    if count == 0 {
        return Ok(None);
    }
    let mut w = Vec::with_capacity(weights.len() * p);
    for &on in weights {
        w.extend(std::iter::repeat_n(if on { T::one() } else { T::zero() }, p));
    }
    let w = g.constant(Tensor::new(&s, w)?);
    let t = g.constant(target.clone());
    let d = g.sub(pred, t)?;
    let d = g.square(d);
    let d = g.mul(d, w)?;
    let total = g.sum(d);
    Ok(Some(g.scale(total, T::of(1.0 / (count * p) as f64))))
}

/// Reconstruction loss `mse_pixels + beta_t * mse_taxels`, averaged over masked
/// tokens (or all tokens when `all_tokens`). A modality with nothing to score contributes 0.
pub fn mae_loss<T: Scalar>(
    g: &mut Graph<'_, T>,
    recon: &Reconstruction,
    targets: &(Option<Tensor<T>>, Option<Tensor<T>>),
    batch: &TokenBatch<T>,
    beta_t: f64,
    all_tokens: bool,
) -> Result<(Var, LossBreakdown)> {
    let mut parts = Vec::new();
    let mut out = LossBreakdown { beta_t, ..LossBreakdown::default() };
    for (m, pred, target) in [(Modality::Vision, recon.vision, &targets.0), (Modality::Touch, recon.touch, &targets.1)] {
        let (Some(pred), Some(target)) = (pred, target) else { continue };
        if !g.value(pred).all_finite() || !target.all_finite() {
            return Err(Error::NonFinite(format!("{m:?} reconstruction or target")));
        }
        let range = batch.range(m).ok_or_else(|| Error::Config(format!("{m:?} tokens missing from batch")))?;
        let mut weights = Vec::with_capacity(batch.batch() * range.len());
        for b in 0..batch.batch() {
            let mut on = vec![all_tokens; range.len()];
            if !all_tokens {
                for &i in batch.mask_idx[b].iter().filter(|i| range.contains(i)) {
                    on[i - range.start] = true;
                }
            }
            weights.extend(on);
        }
        let Some(mse) = weighted_mse(g, pred, target, &weights)? else { continue };
        let value = g.value(mse).item().as_f64();
        match m {
            Modality::Vision => {
                out.mse_pixels = value;
                parts.push(mse);
            }
            Modality::Touch => {
                out.mse_taxels = value;
                parts.push(g.scale(mse, T::of(beta_t)));
            }
        }
    }
    let loss = match parts.as_slice() {
        [] => g.constant(Tensor::scalar(T::zero())),
        [one] => *one,
        [a, b] => g.add(*a, *b)?,
        _ => unreachable!("two modalities at most"),
    };
    out.l_rep = out.mse_pixels + beta_t * out.mse_taxels;
    out.total = out.l_rep;
    Ok((loss, out))
}
