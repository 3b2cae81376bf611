//! Layers built on top of [`Graph`]. Each layer only stores parameter ids; the
//! values live in a [`ParamStore`].

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;

/// Standard deviation used for truncated-normal weight init.
pub const INIT_STD: f64 = 0.02;
const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, in_dim: usize, out_dim: usize, rng: &mut R) -> Result<Self> {
        let weight = store.trunc_normal(format!("{name}.weight"), &[in_dim, out_dim], INIT_STD, rng)?;
        let bias = store.zeros(format!("{name}.bias"), &[out_dim])?;
        Ok(Self { weight, bias, in_dim, out_dim })
    }

    /// Both weight and bias start at zero.
    pub fn zeroed<T: Scalar>(store: &mut ParamStore<T>, name: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        let weight = store.zeros(format!("{name}.weight"), &[in_dim, out_dim])?;
        let bias = store.zeros(format!("{name}.bias"), &[out_dim])?;
        Ok(Self { weight, bias, in_dim, out_dim })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let y = g.matmul(x, w)?;
        g.add_broadcast(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Result<Self> {
        Ok(Self { gain: store.ones(format!("{name}.gain"), &[dim])?, bias: store.zeros(format!("{name}.bias"), &[dim])? })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        g.layer_norm(x, gain, bias, LN_EPS)
    }
}

/// Multi-head self-attention over `[B, N, D]` token sequences.
#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl SelfAttention {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, dim: usize, heads: usize, rng: &mut R) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Shape(format!("{dim} channels cannot be split into {heads} heads")));
        }
        Ok(Self {
            query: Linear::new(store, &format!("{name}.query"), dim, dim, rng)?,
            key: Linear::new(store, &format!("{name}.key"), dim, dim, rng)?,
            value: Linear::new(store, &format!("{name}.value"), dim, dim, rng)?,
            out: Linear::new(store, &format!("{name}.out"), dim, dim, rng)?,
            heads,
            dim,
        })
    }

    fn split_heads<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var, b: usize, n: usize) -> Result<Var> {
        let dh = self.dim / self.heads;
        let x = g.reshape(x, &[b, n, self.heads, dh])?;
        let x = g.permute(x, &[0, 2, 1, 3])?;
        g.reshape(x, &[b * self.heads, n, dh])
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 3 || shape[2] != self.dim {
            return Err(Error::Shape(format!("attention expects [B, N, {}], got {shape:?}", self.dim)));
        }
        let (b, n) = (shape[0], shape[1]);
        let dh = self.dim / self.heads;
        let q = self.query.forward(g, x)?;
        let k = self.key.forward(g, x)?;
        let v = self.value.forward(g, x)?;
        let q = self.split_heads(g, q, b, n)?;
        let k = self.split_heads(g, k, b, n)?;
        let v = self.split_heads(g, v, b, n)?;
        let scores = g.bmm(q, k, true)?;
        let scores = g.scale(scores, T::of(1.0 / (dh as f64).sqrt()));
        let attn = g.softmax(scores);
        let ctx = g.bmm(attn, v, false)?;
        let ctx = g.reshape(ctx, &[b, self.heads, n, dh])?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[b, n, self.dim])?;
        self.out.forward(g, ctx)
    }
}

#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, dim: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, hidden, rng)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, dim, rng)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, x)?;
        let h = g.gelu(h);
        self.fc2.forward(g, h)
    }
}

/// Pre-norm transformer block: `x + attn(ln(x))`, then `x + mlp(ln(x))`.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub norm1: LayerNorm,
    pub attn: SelfAttention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

impl TransformerBlock {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim)?,
            attn: SelfAttention::new(store, &format!("{name}.attn"), dim, heads, rng)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim)?,
            mlp: Mlp::new(store, &format!("{name}.mlp"), dim, mlp_hidden, rng)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let h = self.norm1.forward(g, x)?;
        let h = self.attn.forward(g, h)?;
        let x = g.add(x, h)?;
        let h = self.norm2.forward(g, x)?;
        let h = self.mlp.forward(g, h)?;
        g.add(x, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn block_is_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f64>::new();
        let block = TransformerBlock::new(&mut store, "blk", 8, 2, 16, &mut rng).unwrap();
        let data: Vec<f64> = (0..5 * 8).map(|i| ((i * 37 % 11) as f64 - 5.0) * 0.1).collect();
        let mut permuted = Vec::new();
        let order = [3, 0, 4, 1, 2];
        for &t in &order {
            permuted.extend_from_slice(&data[t * 8..(t + 1) * 8]);
        }
        let mut g = Graph::new(&store);
        let x = g.constant(Tensor::new(&[1, 5, 8], data).unwrap());
        let xp = g.constant(Tensor::new(&[1, 5, 8], permuted).unwrap());
        let y = block.forward(&mut g, x).unwrap();
        let yp = block.forward(&mut g, xp).unwrap();
        let (y, yp) = (g.value(y).data().to_vec(), g.value(yp).data().to_vec());
        for (j, &t) in order.iter().enumerate() {
            for c in 0..8 {
                assert!((yp[j * 8 + c] - y[t * 8 + c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn heads_must_divide_dim() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f32>::new();
        assert!(SelfAttention::new(&mut store, "a", 10, 3, &mut rng).is_err());
    }
}
