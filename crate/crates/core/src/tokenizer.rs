//! Convolutional stems, positional/modality embeddings and uniform token masking.

use m3l_autograd::nn::Linear;
use m3l_autograd::{Graph, ParamId, ParamStore, Scalar, Tensor, Var};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::Modalities;
use crate::env::{StackedObs, VisuoTactileObs, IMAGE_SIZE, TAXEL_GRID};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Modality {
    Vision,
    Touch,
}

/// 2D sine-cosine table, `h * w` rows of `dim` values in row-major grid order.
///
/// The first half of each row encodes the grid row, the second half the
/// column; each half is `[sin(p * w_i), cos(p * w_i)]` with
/// `w_i = 10000^(-i / (dim / 4))`.
pub fn sincos_pos_embed(h: usize, w: usize, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || !dim.is_multiple_of(4) {
        return Err(Error::Config(format!("positional embedding width {dim} is not divisible by 4")));
    }
    let quarter = dim / 4;
    let omega: Vec<f64> = (0..quarter).map(|i| 10000f64.powf(-(i as f64) / quarter as f64)).collect();
    let mut out = Vec::with_capacity(h * w * dim);
    for r in 0..h {
        for c in 0..w {
            for pos in [r as f64, c as f64] {
                out.extend(omega.iter().map(|o| (pos * o).sin()));
                out.extend(omega.iter().map(|o| (pos * o).cos()));
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskSpec {
    pub ratio: f64,
    pub rng_seed: u64,
}

/// `max(1, round(n * (1 - ratio)))`, capped at `n`.
pub fn kept_count(n_tokens: usize, ratio: f64) -> usize {
    let k = (n_tokens as f64 * (1.0 - ratio)).round() as usize;
    k.clamp(1, n_tokens.max(1))
}

/// Uniform sample without replacement over all token positions. Both index
/// lists come back sorted.
pub fn sample_mask(n_tokens: usize, spec: &MaskSpec) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    let k = kept_count(n_tokens, spec.ratio);
    let mut keep = sample(&mut rng, n_tokens, k).into_vec();
    keep.sort_unstable();
    let mut is_kept = vec![false; n_tokens];
    keep.iter().for_each(|&i| is_kept[i] = true);
    let mask = (0..n_tokens).filter(|&i| !is_kept[i]).collect();
    (keep, mask)
}

/// Two-stage strided convolution: `p1 x p1` patches, GELU, then `p2 x p2`
/// patches, with `p1 * p2 = stride`.
#[derive(Clone, Debug)]
pub struct ConvStem {
    pub first: Linear,
    pub second: Linear,
    pub p1: usize,
    pub p2: usize,
    pub in_channels: usize,
    pub hidden: usize,
}

impl ConvStem {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        hidden: usize,
        dim: usize,
        stride: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let p1 = if stride.is_multiple_of(4) { 4 } else { 2 };
        if !stride.is_multiple_of(p1) {
            return Err(Error::Config(format!("stride {stride} must be even")));
        }
        let p2 = stride / p1;
        Ok(Self {
            first: Linear::new(store, &format!("{name}.conv1"), p1 * p1 * in_channels, hidden, rng)?,
            second: Linear::new(store, &format!("{name}.conv2"), p2 * p2 * hidden, dim, rng)?,
            p1,
            p2,
            in_channels,
            hidden,
        })
    }

    pub fn stride(&self) -> usize {
        self.p1 * self.p2
    }

    /// `[B, H, W, C] -> [B, (H/s)*(W/s), D]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 4 || s[3] != self.in_channels || !s[1].is_multiple_of(self.stride()) || !s[2].is_multiple_of(self.stride()) {
            return Err(Error::Config(format!(
                "conv stem expects [B, H, W, {}] with H, W divisible by {}, got {s:?}",
                self.in_channels,
                self.stride()
            )));
        }
        let (b, h1, w1) = (s[0], s[1] / self.p1, s[2] / self.p1);
        let x = g.patchify(x, self.p1)?;
        let x = self.first.forward(g, x)?;
        let x = g.gelu(x);
        let x = g.reshape(x, &[b, h1, w1, self.hidden])?;
        let x = g.patchify(x, self.p2)?;
        Ok(self.second.forward(g, x)?)
    }
}

/// Raw model inputs for a batch, each `[B, H, W, 3k]`.
#[derive(Clone, Debug)]
pub struct ObsBatch<T> {
    pub batch: usize,
    pub frames: usize,
    pub image: Option<Tensor<T>>,
    /// Left and right pads.
    pub touch: Option<(Tensor<T>, Tensor<T>)>,
}

fn stack_tensor<T: Scalar>(rows: &[&[f32]], side: usize, channels: usize) -> Result<Tensor<T>> {
    let mut data = Vec::with_capacity(rows.len() * side * side * channels);
    for r in rows {
        data.extend(r.iter().map(|&v| T::of(v as f64)));
    }
    Ok(Tensor::new(&[rows.len(), side, side, channels], data)?)
}

fn interleave_frames(frames: &[&VisuoTactileObs], pick: impl Fn(&VisuoTactileObs) -> &[f32], pixels: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(pixels * 3 * frames.len());
    for p in 0..pixels {
        for f in frames {
            out.extend_from_slice(&pick(f)[p * 3..p * 3 + 3]);
        }
    }
    out
}

impl<T: Scalar> ObsBatch<T> {
    /// Reads only the requested modalities; tactile reads go through the counted accessor.
    pub fn from_stacked(obs: &[&StackedObs], modalities: Modalities) -> Result<Self> {
        let first = obs.first().ok_or_else(|| Error::LengthMismatch("empty observation batch".into()))?;
        let k = first.frames();
        let c = 3 * k;
        let image = if modalities.vision {
            let rows: Vec<&[f32]> = obs.iter().map(|o| o.image()).collect();
            Some(stack_tensor(&rows, IMAGE_SIZE, c)?)
        } else {
            None
        };
        let touch = if modalities.touch {
            let pairs: Vec<(&[f32], &[f32])> = obs.iter().map(|o| o.tactile()).collect();
            let left: Vec<&[f32]> = pairs.iter().map(|p| p.0).collect();
            let right: Vec<&[f32]> = pairs.iter().map(|p| p.1).collect();
            Some((stack_tensor(&left, TAXEL_GRID, c)?, stack_tensor(&right, TAXEL_GRID, c)?))
        } else {
            None
        };
        Ok(Self { batch: obs.len(), frames: k, image, touch })
    }

    /// Builds stacks from per-sample frame lists (oldest first).
    pub fn from_frames(samples: &[Vec<&VisuoTactileObs>], modalities: Modalities) -> Result<Self> {
        let k = samples.first().map_or(0, Vec::len);
        if k == 0 || samples.iter().any(|s| s.len() != k) {
            return Err(Error::LengthMismatch("frame lists must be nonempty and of equal length".into()));
        }
        let c = 3 * k;
        let build = |pick: &dyn Fn(&VisuoTactileObs) -> &[f32], side: usize| -> Result<Tensor<T>> {
            let rows: Vec<Vec<f32>> = samples.iter().map(|s| interleave_frames(s, pick, side * side)).collect();
            let refs: Vec<&[f32]> = rows.iter().map(Vec::as_slice).collect();
            stack_tensor(&refs, side, c)
        };
        let image = if modalities.vision { Some(build(&|f| f.image.as_slice(), IMAGE_SIZE)?) } else { None };
        let touch = if modalities.touch {
            crate::env::note_tactile_read(samples.len() as u64);
            Some((build(&|f| f.tactile_left.as_slice(), TAXEL_GRID)?, build(&|f| f.tactile_right.as_slice(), TAXEL_GRID)?))
        } else {
            None
        };
        Ok(Self { batch: samples.len(), frames: k, image, touch })
    }

    pub fn modalities(&self) -> Modalities {
        Modalities { vision: self.image.is_some(), touch: self.touch.is_some() }
    }

    /// Drops a modality without touching the data.
    pub fn restrict(&self, modalities: Modalities) -> Result<Self> {
        if !modalities.is_subset_of(self.modalities()) {
            return Err(Error::Config(format!("batch holds {} but {} was requested", self.modalities(), modalities)));
        }
        Ok(Self {
            batch: self.batch,
            frames: self.frames,
            image: if modalities.vision { self.image.clone() } else { None },
            touch: if modalities.touch { self.touch.clone() } else { None },
        })
    }
}

/// Stem outputs before embeddings: vision `[B, gv*gv, D]`, touch `[B, 2*gt*gt, D]` (left pad first).
#[derive(Clone, Copy, Debug)]
pub struct StemFeatures {
    pub vision: Option<Var>,
    pub touch: Option<Var>,
}

/// Token sequence with its bookkeeping.
#[derive(Clone, Debug)]
pub struct TokenBatch<T> {
    /// `[B, N, D]`, embeddings already added.
    pub tokens: Var,
    /// `[N, D]`.
    pub pos_embed: Tensor<T>,
    pub modality: Vec<Modality>,
    /// Per sample, sorted.
    pub keep_idx: Vec<Vec<usize>>,
    pub mask_idx: Vec<Vec<usize>>,
    /// Token grid of each modality in sequence order. Touch is both pads side by side.
    pub grid_shapes: Vec<(Modality, (usize, usize))>,
}

impl<T> TokenBatch<T> {
    pub fn batch(&self) -> usize {
        self.keep_idx.len()
    }

    pub fn n_tokens(&self) -> usize {
        self.modality.len()
    }

    /// Token index range of `m` in the sequence.
    pub fn range(&self, m: Modality) -> Option<std::ops::Range<usize>> {
        let mut start = 0;
        for &(mm, (h, w)) in &self.grid_shapes {
            if mm == m {
                return Some(start..start + h * w);
            }
            start += h * w;
        }
        None
    }

    /// Draws an independent mask for every sample from `rng`.
    pub fn apply_mask<R: Rng + ?Sized>(&mut self, ratio: f64, rng: &mut R) {
        let n = self.n_tokens();
        for b in 0..self.batch() {
            let (keep, mask) = sample_mask(n, &MaskSpec { ratio, rng_seed: rng.random() });
            self.keep_idx[b] = keep;
            self.mask_idx[b] = mask;
        }
    }
}

/// Both conv stems plus the embeddings that turn features into tokens.
#[derive(Clone, Debug)]
pub struct Tokenizer {
    pub vision: ConvStem,
    pub touch: ConvStem,
    pub vision_embed: ParamId,
    pub touch_embed: ParamId,
    pub dim: usize,
    pub vision_grid: (usize, usize),
    /// Per pad.
    pub touch_grid: (usize, usize),
}

impl Tokenizer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        frames: usize,
        hidden: usize,
        dim: usize,
        vision_stride: usize,
        touch_stride: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if !IMAGE_SIZE.is_multiple_of(vision_stride) || !TAXEL_GRID.is_multiple_of(touch_stride) {
            return Err(Error::Config("strides must divide the input sizes".into()));
        }
        let c = 3 * frames;
        let vision = ConvStem::new(store, "tokenizer.vision", c, hidden, dim, vision_stride, rng)?;
        let touch = ConvStem::new(store, "tokenizer.touch", c, hidden, dim, touch_stride, rng)?;
        let gv = IMAGE_SIZE / vision_stride;
        let gt = TAXEL_GRID / touch_stride;
        Ok(Self {
            vision,
            touch,
            vision_embed: store.zeros("tokenizer.vision_modality", &[dim])?,
            touch_embed: store.zeros("tokenizer.touch_modality", &[dim])?,
            dim,
            vision_grid: (gv, gv),
            touch_grid: (gt, gt),
        })
    }

    /// Runs the stems for the modalities present in `obs`; the touch stem is shared by both pads.
    pub fn features<T: Scalar>(&self, g: &mut Graph<'_, T>, obs: &ObsBatch<T>) -> Result<StemFeatures> {
        let vision = match &obs.image {
            Some(img) => {
                let x = g.constant(img.clone());
                Some(self.vision.forward(g, x)?)
            }
            None => None,
        };
        let touch = match &obs.touch {
            Some((left, right)) => {
                let b = obs.batch;
                let mut both = left.data().to_vec();
                both.extend_from_slice(right.data());
                let mut shape = left.shape().to_vec();
                shape[0] = 2 * b;
                let x = g.constant(Tensor::new(&shape, both)?);
                let f = self.touch.forward(g, x)?;
                let n = self.touch_grid.0 * self.touch_grid.1;
                let f = g.reshape(f, &[2, b, n, self.dim])?;
                let f = g.permute(f, &[1, 0, 2, 3])?;
                Some(g.reshape(f, &[b, 2 * n, self.dim])?)
            }
            None => None,
        };
        Ok(StemFeatures { vision, touch })
    }

    /// Grids in sequence order for the given modalities.
    pub fn grids(&self, modalities: Modalities) -> Vec<(Modality, (usize, usize))> {
        let mut out = Vec::new();
        if modalities.vision {
            out.push((Modality::Vision, self.vision_grid));
        }
        if modalities.touch {
            out.push((Modality::Touch, (self.touch_grid.0, 2 * self.touch_grid.1)));
        }
        out
    }

    /// Positional table `[N, dim]` for the given grids; the touch grid holds the
    /// left pad in its left half and the right pad in its right half.
    pub fn pos_table<T: Scalar>(grids: &[(Modality, (usize, usize))], dim: usize) -> Result<Tensor<T>> {
        let mut data = Vec::new();
        let mut n = 0;
        for &(m, (h, w)) in grids {
            let table = sincos_pos_embed(h, w, dim)?;
            match m {
                Modality::Vision => data.extend(table.iter().map(|&v| T::of(v))),
                Modality::Touch => {
                    // reorder from grid rows to [left pad tokens, right pad tokens]
                    let half = w / 2;
                    for pad in 0..2 {
                        for r in 0..h {
                            for c in 0..half {
                                let row = r * w + pad * half + c;
                                data.extend(table[row * dim..(row + 1) * dim].iter().map(|&v| T::of(v)));
                            }
                        }
                    }
                }
            }
            n += h * w;
        }
        Ok(Tensor::new(&[n, dim], data)?)
    }

    /// Adds positional and modality embeddings and concatenates vision then touch tokens.
    pub fn assemble_tokens<T: Scalar>(&self, g: &mut Graph<'_, T>, feats: &StemFeatures) -> Result<TokenBatch<T>> {
        let modalities = Modalities { vision: feats.vision.is_some(), touch: feats.touch.is_some() };
        if !modalities.vision && !modalities.touch {
            return Err(Error::EmptyModalities);
        }
        let grids = self.grids(modalities);
        let pos = Self::pos_table::<T>(&grids, self.dim)?;
        let mut parts = Vec::new();
        let mut tags = Vec::new();
        let mut offset = 0;
        for (&(m, (h, w)), feat) in grids.iter().zip([feats.vision, feats.touch].into_iter().flatten()) {
            let n = h * w;
            let slice = pos.data()[offset * self.dim..(offset + n) * self.dim].to_vec();
            let p = g.constant(Tensor::new(&[n, self.dim], slice)?);
            let x = g.add_broadcast(feat, p)?;
            let e = g.param(if m == Modality::Vision { self.vision_embed } else { self.touch_embed });
            parts.push(g.add_broadcast(x, e)?);
            tags.extend(std::iter::repeat_n(m, n));
            offset += n;
        }
        let tokens = if parts.len() == 1 { parts[0] } else { g.concat_tokens(&parts)? };
        let b = g.shape(tokens)[0];
        let all: Vec<usize> = (0..tags.len()).collect();
        Ok(TokenBatch { tokens, pos_embed: pos, modality: tags, keep_idx: vec![all; b], mask_idx: vec![Vec::new(); b], grid_shapes: grids })
    }
}
