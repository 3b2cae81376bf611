//! The full network: tokenizer, autoencoder and actor-critic sharing one parameter store.

use m3l_autograd::{Graph, ParamStore, Scalar, Var};
use rand::Rng;

use crate::config::{Modalities, RunConfig};
use crate::error::{Error, Result};
use crate::mae::{mae_loss, patch_targets, LossBreakdown, Mae, MaeDims, Reconstruction};
use crate::policy::{gaussian_entropy, gaussian_log_prob, ppo_loss, ActorCritic, PolicyOutput, PpoCoefficients, PpoNodes, ACTION_DIM};
use crate::tokenizer::{ObsBatch, StemFeatures, TokenBatch, Tokenizer};

/// Architecture sizes.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub frames: usize,
    pub dim: usize,
    pub conv_channels: usize,
    pub vision_stride: usize,
    pub touch_stride: usize,
    pub encoder_layers: usize,
    pub encoder_heads: usize,
    pub decoder_layers: usize,
    pub decoder_dim: usize,
    pub decoder_heads: usize,
    pub mlp_ratio: usize,
    pub head_heads: usize,
    pub head_hidden: usize,
    pub init_log_std: f64,
}

impl ModelSpec {
    pub fn from_config(cfg: &RunConfig) -> Self {
        Self {
            frames: cfg.env.frame_stack,
            dim: cfg.tokenizer.dim,
            conv_channels: cfg.tokenizer.conv_channels,
            vision_stride: cfg.tokenizer.vision_stride,
            touch_stride: cfg.tokenizer.touch_stride,
            encoder_layers: cfg.mae.encoder_layers,
            encoder_heads: cfg.mae.encoder_heads,
            decoder_layers: cfg.mae.decoder_layers,
            decoder_dim: cfg.mae.decoder_dim,
            decoder_heads: cfg.mae.decoder_heads,
            mlp_ratio: cfg.mae.mlp_ratio,
            head_heads: cfg.policy.head_heads,
            head_hidden: cfg.policy.head_mlp_hidden,
            init_log_std: cfg.policy.init_log_std,
        }
    }

    /// Width 8, one layer each, six tokens (4 vision + 1 per pad), one frame.
    pub fn tiny() -> Self {
        Self {
            frames: 1,
            dim: 8,
            conv_channels: 4,
            vision_stride: 32,
            touch_stride: 32,
            encoder_layers: 1,
            encoder_heads: 2,
            decoder_layers: 1,
            decoder_dim: 8,
            decoder_heads: 2,
            mlp_ratio: 2,
            head_heads: 2,
            head_hidden: 8,
            init_log_std: 0.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct M3lModel {
    pub spec: ModelSpec,
    pub tokenizer: Tokenizer,
    pub mae: Mae,
    pub policy: ActorCritic,
}

/// Options for the reconstruction branch.
#[derive(Clone, Copy, Debug)]
pub struct RepOptions {
    pub mask_ratio: f64,
    pub beta_t: f64,
    pub all_tokens: bool,
}

/// Everything needed for the PPO branch on one minibatch.
#[derive(Clone, Debug)]
pub struct PpoBatch {
    pub actions: Vec<[f64; ACTION_DIM]>,
    pub old_log_probs: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

/// Graph nodes of a forward pass.
pub struct Forward<T> {
    pub loss: Var,
    pub breakdown: LossBreakdown,
    pub tokens: Option<TokenBatch<T>>,
    pub recon: Option<Reconstruction>,
    /// Reconstruction loss node, when that branch ran.
    pub rep_loss: Option<Var>,
    /// PPO term nodes, when that branch ran.
    pub ppo: Option<PpoNodes>,
}

fn restrict(f: &StemFeatures, m: Modalities) -> StemFeatures {
    StemFeatures { vision: f.vision.filter(|_| m.vision), touch: f.touch.filter(|_| m.touch) }
}

impl M3lModel {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, spec: ModelSpec, rng: &mut R) -> Result<Self> {
        let tokenizer = Tokenizer::new(store, spec.frames, spec.conv_channels, spec.dim, spec.vision_stride, spec.touch_stride, rng)?;
        let c = 3 * spec.frames;
        let dims = MaeDims {
            dim: spec.dim,
            encoder_layers: spec.encoder_layers,
            encoder_heads: spec.encoder_heads,
            decoder_layers: spec.decoder_layers,
            decoder_dim: spec.decoder_dim,
            decoder_heads: spec.decoder_heads,
            mlp_ratio: spec.mlp_ratio,
            vision_payload: spec.vision_stride * spec.vision_stride * c,
            touch_payload: spec.touch_stride * spec.touch_stride * c,
        };
        let mae = Mae::new(store, dims, rng)?;
        let policy = ActorCritic::new(store, spec.dim, spec.head_heads, spec.head_hidden, spec.init_log_std, rng)?;
        Ok(Self { spec, tokenizer, mae, policy })
    }

    /// Unmasked encoder embeddings `[B, N, D]` of the requested modalities.
    pub fn embed_obs<T: Scalar>(&self, g: &mut Graph<'_, T>, obs: &ObsBatch<T>, modalities: Modalities) -> Result<Var> {
        if !modalities.vision && !modalities.touch {
            return Err(Error::EmptyModalities);
        }
        let obs = obs.restrict(modalities)?;
        let feats = self.tokenizer.features(g, &obs)?;
        self.embed_features(g, &feats)
    }

    fn embed_features<T: Scalar>(&self, g: &mut Graph<'_, T>, feats: &StemFeatures) -> Result<Var> {
        let tokens = self.tokenizer.assemble_tokens(g, feats)?;
        self.mae.encode(g, &tokens, false)
    }

    /// Masked reconstruction branch on features already computed by the stems.
    fn reconstruct_features<T: Scalar, R: Rng + ?Sized>(
        &self,
        g: &mut Graph<'_, T>,
        feats: &StemFeatures,
        obs: &ObsBatch<T>,
        opts: &RepOptions,
        rng: &mut R,
    ) -> Result<Forward<T>> {
        let mut tokens = self.tokenizer.assemble_tokens(g, feats)?;
        tokens.apply_mask(opts.mask_ratio, rng);
        let latent = self.mae.encode(g, &tokens, true)?;
        let recon = self.mae.decode(g, latent, &tokens)?;
        let present = Modalities { vision: feats.vision.is_some(), touch: feats.touch.is_some() };
        let targets = patch_targets(&obs.restrict(present)?, self.spec.vision_stride, self.spec.touch_stride)?;
        let (loss, breakdown) = mae_loss(g, &recon, &targets, &tokens, opts.beta_t, opts.all_tokens)?;
        Ok(Forward { loss, breakdown, tokens: Some(tokens), recon: Some(recon), rep_loss: Some(loss), ppo: None })
    }

    /// Masked reconstruction loss over `modalities`.
    pub fn reconstruction<T: Scalar, R: Rng + ?Sized>(
        &self,
        g: &mut Graph<'_, T>,
        obs: &ObsBatch<T>,
        modalities: Modalities,
        opts: &RepOptions,
        rng: &mut R,
    ) -> Result<Forward<T>> {
        let obs = obs.restrict(modalities)?;
        let feats = self.tokenizer.features(g, &obs)?;
        self.reconstruct_features(g, &feats, &obs, opts, rng)
    }

    pub fn policy_forward<T: Scalar>(&self, g: &mut Graph<'_, T>, obs: &ObsBatch<T>, modalities: Modalities) -> Result<PolicyOutput> {
        let emb = self.embed_obs(g, obs, modalities)?;
        self.policy.forward(g, emb)
    }

    fn ppo_from_features<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        feats: &StemFeatures,
        batch: &PpoBatch,
        coef: &PpoCoefficients,
    ) -> Result<Forward<T>> {
        let emb = self.embed_features(g, feats)?;
        let out = self.policy.forward(g, emb)?;
        let b = batch.actions.len();
        let actions = m3l_autograd::Tensor::new(&[b, ACTION_DIM], batch.actions.iter().flatten().map(|&a| T::of(a)).collect())?;
        let logp = gaussian_log_prob(g, out.mean, out.log_std, &actions)?;
        let entropy = gaussian_entropy(g, out.log_std);
        let terms = ppo_loss(g, logp, &batch.old_log_probs, &batch.advantages, out.value, &batch.returns, entropy, coef)?;
        let l_ppo = g.value(terms.loss).item().as_f64();
        let breakdown = LossBreakdown {
            l_clip: terms.l_clip,
            l_critic: terms.l_critic,
            entropy: terms.entropy,
            beta_v: coef.beta_v,
            beta_h: coef.beta_h,
            l_ppo,
            total: l_ppo,
            ..LossBreakdown::default()
        };
        Ok(Forward { loss: terms.loss, breakdown, tokens: None, recon: None, rep_loss: None, ppo: Some(terms.nodes) })
    }

    /// PPO loss with the policy reading `modalities`.
    pub fn ppo<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        obs: &ObsBatch<T>,
        modalities: Modalities,
        batch: &PpoBatch,
        coef: &PpoCoefficients,
    ) -> Result<Forward<T>> {
        let obs = obs.restrict(modalities)?;
        let feats = self.tokenizer.features(g, &obs)?;
        self.ppo_from_features(g, &feats, batch, coef)
    }

    /// `l_rep + l_ppo` on one minibatch, sharing stem features between both branches.
    #[allow(clippy::too_many_arguments)]
    pub fn joint<T: Scalar, R: Rng + ?Sized>(
        &self,
        g: &mut Graph<'_, T>,
        obs: &ObsBatch<T>,
        rep: Option<(Modalities, RepOptions)>,
        policy_modalities: Modalities,
        batch: &PpoBatch,
        coef: &PpoCoefficients,
        rng: &mut R,
    ) -> Result<Forward<T>> {
        let mut need = policy_modalities;
        if let Some((m, _)) = rep {
            need = Modalities { vision: need.vision || m.vision, touch: need.touch || m.touch };
        }
        let obs = obs.restrict(need)?;
        let feats = self.tokenizer.features(g, &obs)?;
        let ppo = self.ppo_from_features(g, &restrict(&feats, policy_modalities), batch, coef)?;
        let Some((m, opts)) = rep else { return Ok(ppo) };
        let rep = self.reconstruct_features(g, &restrict(&feats, m), &obs, &opts, rng)?;
        let loss = g.add(rep.loss, ppo.loss)?;
        let breakdown = LossBreakdown { total: rep.breakdown.l_rep + ppo.breakdown.l_ppo, ..merge(rep.breakdown, ppo.breakdown) };
        Ok(Forward { loss, breakdown, tokens: rep.tokens, recon: rep.recon, rep_loss: rep.rep_loss, ppo: ppo.ppo })
    }
}

/// Reconstruction fields from `rep`, PPO fields from `ppo`.
pub fn merge(rep: LossBreakdown, ppo: LossBreakdown) -> LossBreakdown {
    LossBreakdown {
        mse_pixels: rep.mse_pixels,
        mse_taxels: rep.mse_taxels,
        beta_t: rep.beta_t,
        l_rep: rep.l_rep,
        l_clip: ppo.l_clip,
        l_critic: ppo.l_critic,
        entropy: ppo.entropy,
        beta_v: ppo.beta_v,
        beta_h: ppo.beta_h,
        l_ppo: ppo.l_ppo,
        total: rep.total + ppo.total,
    }
}
