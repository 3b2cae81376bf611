use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::{Gradients, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{gemm, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBroadcast(Var, Var),
    MulBroadcast(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Square(Var),
    Exp(Var),
    Gelu(Var),
    Clamp(Var, T, T),
    Minimum(Var, Var),
    MatMul(Var, Var),
    Bmm { a: Var, b: Var, trans_b: bool },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, rstd: Vec<T> },
    Softmax(Var),
    Reshape(Var),
    Permute { x: Var, perm: Vec<usize> },
    Gather { x: Var, idx: Vec<Vec<usize>> },
    Scatter { kept: Var, fill: Var, keep_idx: Vec<Vec<usize>> },
    Concat(Vec<Var>),
    MeanTokens(Var),
    SumAll(Var),
    MeanAll(Var),
    SumLast(Var),
    Patchify { x: Var, patch: usize },
    Expand(Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records a forward computation so it can be differentiated once.
///
/// Parameters are read from the borrowed store; each parameter is copied into
/// the tape at most once per graph.
pub struct Graph<'p, T> {
    nodes: Vec<Node<T>>,
    store: &'p ParamStore<T>,
    param_vars: HashMap<ParamId, Var>,
}

fn shape_err<V>(msg: String) -> Result<V> {
    Err(Error::Shape(msg))
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new(store: &'p ParamStore<T>) -> Self {
        Self { nodes: Vec::new(), store, param_vars: HashMap::new() }
    }

    pub fn store(&self) -> &'p ParamStore<T> {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let needs_grad = match op {
            Op::Param(_) => true,
            Op::Leaf => false,
            _ => parents.iter().any(|p| self.nodes[p.0].needs_grad),
        };
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, &[])
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let value = self.store.get(id).clone();
        let v = self.push(value, Op::Param(id), &[]);
        self.param_vars.insert(id, v);
        v
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(format!("{what}: {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    fn check_suffix(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return shape_err(format!("{what}: {sb:?} is not a suffix of {sa:?}"));
        }
        Ok(())
    }

    /// `a + b` where `b`'s shape is a suffix of `a`'s shape.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_suffix(a, b, "add_broadcast")?;
        let bv = self.value(b).data();
        let n = bv.len();
        let mut out = self.value(a).clone();
        for chunk in out.data_mut().chunks_mut(n) {
            for (o, &y) in chunk.iter_mut().zip(bv) {
                *o += y;
            }
        }
        Ok(self.push(out, Op::AddBroadcast(a, b), &[a, b]))
    }

    /// `a * b` where `b`'s shape is a suffix of `a`'s shape.
    pub fn mul_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_suffix(a, b, "mul_broadcast")?;
        let bv = self.value(b).data();
        let n = bv.len();
        let mut out = self.value(a).clone();
        for chunk in out.data_mut().chunks_mut(n) {
            for (o, &y) in chunk.iter_mut().zip(bv) {
                *o *= y;
            }
        }
        Ok(self.push(out, Op::MulBroadcast(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let out = self.value(x).map(|v| v * factor);
        self.push(out, Op::Scale(x, factor), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).map(|v| v + c);
        self.push(out, Op::AddScalar(x), &[x])
    }

    pub fn square(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * v);
        self.push(out, Op::Square(x), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).map(T::exp);
        self.push(out, Op::Exp(x), &[x])
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let (c, k) = (T::of(SQRT_2_OVER_PI), T::of(GELU_C));
        let out = self.value(x).map(|v| gelu(v, c, k));
        self.push(out, Op::Gelu(x), &[x])
    }

    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        let out = self.value(x).map(|v| v.max(lo).min(hi));
        self.push(out, Op::Clamp(x, lo, hi), &[x])
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "minimum")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| if x <= y { x } else { y });
        Ok(self.push(out, Op::Minimum(a, b), &[a, b]))
    }

    /// `[..., k] @ [k, n] -> [..., n]`.
    pub fn matmul(&mut self, a: Var, w: Var) -> Result<Var> {
        let (sa, sw) = (self.shape(a).to_vec(), self.shape(w).to_vec());
        if sw.len() != 2 || sa.is_empty() || *sa.last().unwrap() != sw[0] {
            return shape_err(format!("matmul: {sa:?} @ {sw:?}"));
        }
        let (k, n) = (sw[0], sw[1]);
        let m = self.value(a).len() / k;
        let mut out = vec![T::zero(); m * n];
        gemm(self.value(a).data(), false, self.value(w).data(), false, m, k, n, &mut out, false);
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        let out = Tensor::new(&shape, out)?;
        Ok(self.push(out, Op::MatMul(a, w), &[a, w]))
    }

    /// Batched `[B, m, k] @ [B, k, n]` (or `[B, n, k]` transposed when `trans_b`).
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return shape_err(format!("bmm: {sa:?} @ {sb:?}"));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return shape_err(format!("bmm inner dims: {sa:?} @ {sb:?} (trans_b={trans_b})"));
        }
        let mut out = vec![T::zero(); batch * m * n];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        for i in 0..batch {
            gemm(
                &av[i * m * k..(i + 1) * m * k],
                false,
                &bv[i * k * n..(i + 1) * k * n],
                trans_b,
                m,
                k,
                n,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        let out = Tensor::new(&[batch, m, n], out)?;
        Ok(self.push(out, Op::Bmm { a, b, trans_b }, &[a, b]))
    }

    /// Normalizes over the last dimension with learnable gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return shape_err(format!("layer_norm: input {:?}, gain {:?}", self.shape(x), self.shape(gain)));
        }
        let eps = T::of(eps);
        let dn = T::of(d as f64);
        let xv = self.value(x);
        let (gv, bv) = (self.value(gain).data(), self.value(bias).data());
        let rows = xv.len() / d;
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xv.len()];
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv[j] + bv[j];
            }
        }
        let out = Tensor::new(xv.shape(), out)?;
        Ok(self.push(out, Op::LayerNorm { x, gain, bias, xhat, rstd }, &[x, gain, bias]))
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let d = xv.last_dim();
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(d) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        self.push(out, Op::Softmax(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return shape_err(format!("permute {perm:?} of {shape:?}"));
        }
        let out = permute_tensor(self.value(x), perm);
        Ok(self.push(out, Op::Permute { x, perm: perm.to_vec() }, &[x]))
    }

    /// Selects tokens per batch row: `[B, N, D]` with `idx[b]` of equal length `K` -> `[B, K, D]`.
    pub fn gather_tokens(&mut self, x: Var, idx: &[Vec<usize>]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 || idx.len() != shape[0] {
            return shape_err(format!("gather_tokens: input {shape:?} with {} index rows", idx.len()));
        }
        let (n, d) = (shape[1], shape[2]);
        let k = idx.first().map_or(0, Vec::len);
        if idx.iter().any(|row| row.len() != k || row.iter().any(|&i| i >= n)) {
            return shape_err("gather_tokens: ragged or out-of-range indices".into());
        }
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(shape[0] * k * d);
        for (b, row) in idx.iter().enumerate() {
            for &i in row {
                out.extend_from_slice(&xv[(b * n + i) * d..(b * n + i + 1) * d]);
            }
        }
        let out = Tensor::new(&[shape[0], k, d], out)?;
        Ok(self.push(out, Op::Gather { x, idx: idx.to_vec() }, &[x]))
    }

    /// Inverse of [`Graph::gather_tokens`]: places `kept` rows at `keep_idx` in a
    /// length-`n` sequence and fills every other slot with the `fill` vector.
    pub fn scatter_tokens(&mut self, kept: Var, fill: Var, keep_idx: &[Vec<usize>], n: usize) -> Result<Var> {
        let shape = self.shape(kept).to_vec();
        if shape.len() != 3 || keep_idx.len() != shape[0] || self.shape(fill) != [shape[2]] {
            return shape_err(format!("scatter_tokens: kept {shape:?}, fill {:?}", self.shape(fill)));
        }
        let (k, d) = (shape[1], shape[2]);
        if keep_idx.iter().any(|row| row.len() != k || row.iter().any(|&i| i >= n)) {
            return shape_err("scatter_tokens: ragged or out-of-range indices".into());
        }
        let fv = self.value(fill).data().to_vec();
        let kv = self.value(kept).data();
        let mut out: Vec<T> = Vec::with_capacity(shape[0] * n * d);
        for _ in 0..shape[0] * n {
            out.extend_from_slice(&fv);
        }
        for (b, row) in keep_idx.iter().enumerate() {
            for (j, &i) in row.iter().enumerate() {
                out[(b * n + i) * d..(b * n + i + 1) * d].copy_from_slice(&kv[(b * k + j) * d..(b * k + j + 1) * d]);
            }
        }
        let out = Tensor::new(&[shape[0], n, d], out)?;
        Ok(self.push(out, Op::Scatter { kept, fill, keep_idx: keep_idx.to_vec() }, &[kept, fill]))
    }

    /// Concatenates `[B, N_i, D]` tensors along the token axis.
    pub fn concat_tokens(&mut self, parts: &[Var]) -> Result<Var> {
        let first = match parts.first() {
            Some(&p) => self.shape(p).to_vec(),
            None => return shape_err("concat_tokens: no inputs".into()),
        };
        if first.len() != 3 {
            return shape_err(format!("concat_tokens: expected rank 3, got {first:?}"));
        }
        let (b, d) = (first[0], first[2]);
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 3 || s[0] != b || s[2] != d {
                return shape_err(format!("concat_tokens: {s:?} vs {first:?}"));
            }
            total += s[1];
        }
        let mut out = Vec::with_capacity(b * total * d);
        for bi in 0..b {
            for &p in parts {
                let v = self.value(p);
                let n = v.shape()[1];
                out.extend_from_slice(&v.data()[bi * n * d..(bi + 1) * n * d]);
            }
        }
        let out = Tensor::new(&[b, total, d], out)?;
        Ok(self.push(out, Op::Concat(parts.to_vec()), parts))
    }

    /// Mean over the token axis: `[B, N, D] -> [B, D]`.
    pub fn mean_tokens(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 || shape[1] == 0 {
            return shape_err(format!("mean_tokens: {shape:?}"));
        }
        let (b, n, d) = (shape[0], shape[1], shape[2]);
        let xv = self.value(x).data();
        let inv = T::one() / T::of(n as f64);
        let mut out = vec![T::zero(); b * d];
        for bi in 0..b {
            for t in 0..n {
                let row = &xv[(bi * n + t) * d..(bi * n + t + 1) * d];
                for (o, &v) in out[bi * d..(bi + 1) * d].iter_mut().zip(row) {
                    *o += v;
                }
            }
        }
        for v in &mut out {
            *v *= inv;
        }
        let out = Tensor::new(&[b, d], out)?;
        Ok(self.push(out, Op::MeanTokens(x), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::SumAll(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = Tensor::scalar(v.sum() / T::of(v.len().max(1) as f64));
        self.push(out, Op::MeanAll(x), &[x])
    }

    /// Sums the last axis away.
    pub fn sum_last(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let d = v.last_dim();
        let mut shape = v.shape().to_vec();
        shape.pop();
        let data: Vec<T> = v.data().chunks(d).map(|c| c.iter().copied().sum()).collect();
        let out = Tensor::new(&shape, data).expect("sum_last shape");
        self.push(out, Op::SumLast(x), &[x])
    }

    /// Non-overlapping `patch x patch` blocks of a `[B, H, W, C]` map, flattened to
    /// `[B, (H/p)*(W/p), p*p*C]` in row-major grid order.
    pub fn patchify(&mut self, x: Var, patch: usize) -> Result<Var> {
        let out = patchify(self.value(x), patch)?;
        Ok(self.push(out, Op::Patchify { x, patch }, &[x]))
    }

    /// Tiles `x` along a new leading axis of size `lead`.
    pub fn expand(&mut self, x: Var, lead: usize) -> Var {
        let v = self.value(x);
        let mut shape = vec![lead];
        shape.extend_from_slice(v.shape());
        let mut data = Vec::with_capacity(lead * v.len());
        for _ in 0..lead {
            data.extend_from_slice(v.data());
        }
        let out = Tensor::new(&shape, data).expect("expand shape");
        self.push(out, Op::Expand(x), &[x])
    }

    /// Reverse pass from a scalar output; returns gradients for every parameter
    /// reached from `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return shape_err(format!("backward needs a scalar, got {:?}", self.shape(loss)));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        let mut out = Gradients::new(self.store.len());
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.backward_node(node, g, &mut grads, &mut out)?;
        }
        Ok(out)
    }

    fn backward_node(&self, node: &Node<T>, g: Tensor<T>, grads: &mut [Option<Tensor<T>>], params: &mut Gradients<T>) -> Result<()> {
        let mut acc = |v: Var, t: Tensor<T>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => params.accumulate(*id, g),
            Op::Add(a, b) => {
                acc(*b, g.clone());
                acc(*a, g);
            }
            Op::Sub(a, b) => {
                acc(*b, g.map(|v| -v));
                acc(*a, g);
            }
            Op::Mul(a, b) => {
                acc(*a, g.zip_map(self.value(*b), |x, y| x * y));
                acc(*b, g.zip_map(self.value(*a), |x, y| x * y));
            }
            Op::AddBroadcast(a, b) => {
                let bs = self.value(*b);
                let mut db = vec![T::zero(); bs.len()];
                for chunk in g.data().chunks(bs.len()) {
                    for (d, &v) in db.iter_mut().zip(chunk) {
                        *d += v;
                    }
                }
                acc(*b, Tensor::new(bs.shape(), db)?);
                acc(*a, g);
            }
            Op::MulBroadcast(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let n = bv.len();
                let mut db = vec![T::zero(); n];
                let mut da = g.clone();
                for (c, (gc, ac)) in da.data_mut().chunks_mut(n).zip(g.data().chunks(n).zip(av.data().chunks(n))) {
                    for j in 0..n {
                        db[j] += gc[j] * ac[j];
                        c[j] *= bv.data()[j];
                    }
                }
                acc(*b, Tensor::new(bv.shape(), db)?);
                acc(*a, da);
            }
            Op::Scale(x, f) => acc(*x, g.map(|v| v * *f)),
            Op::AddScalar(x) | Op::Reshape(x) => {
                let shape = self.shape(*x).to_vec();
                acc(*x, g.reshape(&shape)?);
            }
            Op::Square(x) => acc(*x, g.zip_map(self.value(*x), |gv, xv| gv * (xv + xv))),
            Op::Exp(x) => acc(*x, g.zip_map(&node.value, |gv, y| gv * y)),
            Op::Gelu(x) => {
                let (c, k) = (T::of(SQRT_2_OVER_PI), T::of(GELU_C));
                acc(*x, g.zip_map(self.value(*x), |gv, xv| gv * gelu_grad(xv, c, k)));
            }
            Op::Clamp(x, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                acc(*x, g.zip_map(self.value(*x), |gv, xv| if xv >= lo && xv <= hi { gv } else { T::zero() }));
            }
            Op::Minimum(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let pick_a: Vec<bool> = av.data().iter().zip(bv.data()).map(|(x, y)| x <= y).collect();
                let mut ga = g.clone();
                let mut gb = g;
                for (i, &pa) in pick_a.iter().enumerate() {
                    if pa {
                        gb.data_mut()[i] = T::zero();
                    } else {
                        ga.data_mut()[i] = T::zero();
                    }
                }
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::MatMul(a, w) => {
                let (av, wv) = (self.value(*a), self.value(*w));
                let (k, n) = (wv.shape()[0], wv.shape()[1]);
                let m = av.len() / k;
                let mut da = vec![T::zero(); m * k];
                gemm(g.data(), false, wv.data(), true, m, n, k, &mut da, false);
                let mut dw = vec![T::zero(); k * n];
                gemm(av.data(), true, g.data(), false, k, m, n, &mut dw, false);
                acc(*a, Tensor::new(av.shape(), da)?);
                acc(*w, Tensor::new(wv.shape(), dw)?);
            }
            Op::Bmm { a, b, trans_b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (batch, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                let n = if *trans_b { bv.shape()[1] } else { bv.shape()[2] };
                let mut da = vec![T::zero(); av.len()];
                let mut db = vec![T::zero(); bv.len()];
                let gd = g.data();
                for i in 0..batch {
                    let gi = &gd[i * m * n..(i + 1) * m * n];
                    let ai = &av.data()[i * m * k..(i + 1) * m * k];
                    let bi = &bv.data()[i * k * n..(i + 1) * k * n];
                    let dai = &mut da[i * m * k..(i + 1) * m * k];
                    let dbi = &mut db[i * k * n..(i + 1) * k * n];
                    if *trans_b {
                        gemm(gi, false, bi, false, m, n, k, dai, false);
                        gemm(gi, true, ai, false, n, m, k, dbi, false);
                    } else {
                        gemm(gi, false, bi, true, m, n, k, dai, false);
                        gemm(ai, true, gi, false, k, m, n, dbi, false);
                    }
                }
                acc(*a, Tensor::new(av.shape(), da)?);
                acc(*b, Tensor::new(bv.shape(), db)?);
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let gv = self.value(*gain).data();
                let d = gv.len();
                let dn = T::of(d as f64);
                let mut dx = vec![T::zero(); xhat.len()];
                let mut dgain = vec![T::zero(); d];
                let mut dbias = vec![T::zero(); d];
                for (r, &rs) in rstd.iter().enumerate() {
                    let gr = &g.data()[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    let mut mean_dh = T::zero();
                    let mut mean_dh_h = T::zero();
                    for j in 0..d {
                        let dh = gr[j] * gv[j];
                        mean_dh += dh;
                        mean_dh_h += dh * hr[j];
                        dgain[j] += gr[j] * hr[j];
                        dbias[j] += gr[j];
                    }
                    mean_dh /= dn;
                    mean_dh_h /= dn;
                    for j in 0..d {
                        let dh = gr[j] * gv[j];
                        dx[r * d + j] = rs * (dh - mean_dh - hr[j] * mean_dh_h);
                    }
                }
                acc(*x, Tensor::new(self.shape(*x), dx)?);
                acc(*gain, Tensor::new(&[d], dgain)?);
                acc(*bias, Tensor::new(&[d], dbias)?);
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let d = y.last_dim();
                let mut dx = g.clone();
                for (dxr, yr) in dx.data_mut().chunks_mut(d).zip(y.data().chunks(d)) {
                    let dot: T = dxr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for (v, &yy) in dxr.iter_mut().zip(yr) {
                        *v = yy * (*v - dot);
                    }
                }
                acc(*x, dx);
            }
            Op::Permute { x, perm } => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                acc(*x, permute_tensor(&g, &inverse));
            }
            Op::Gather { x, idx } => {
                let shape = self.shape(*x);
                let (n, d) = (shape[1], shape[2]);
                let k = idx.first().map_or(0, Vec::len);
                let mut dx = Tensor::zeros(shape);
                let gd = g.data();
                for (b, row) in idx.iter().enumerate() {
                    for (j, &i) in row.iter().enumerate() {
                        let dst = &mut dx.data_mut()[(b * n + i) * d..(b * n + i + 1) * d];
                        for (o, &v) in dst.iter_mut().zip(&gd[(b * k + j) * d..(b * k + j + 1) * d]) {
                            *o += v;
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::Scatter { kept, fill, keep_idx } => {
                let ks = self.shape(*kept);
                let (k, d) = (ks[1], ks[2]);
                let n = node.value.shape()[1];
                let gd = g.data();
                let mut dkept = Tensor::zeros(ks);
                let mut dfill = vec![T::zero(); d];
                for (b, row) in keep_idx.iter().enumerate() {
                    let mut is_kept = vec![false; n];
                    for (j, &i) in row.iter().enumerate() {
                        is_kept[i] = true;
                        dkept.data_mut()[(b * k + j) * d..(b * k + j + 1) * d].copy_from_slice(&gd[(b * n + i) * d..(b * n + i + 1) * d]);
                    }
                    for (t, kept_here) in is_kept.iter().enumerate() {
                        if !kept_here {
                            for (o, &v) in dfill.iter_mut().zip(&gd[(b * n + t) * d..(b * n + t + 1) * d]) {
                                *o += v;
                            }
                        }
                    }
                }
                acc(*kept, dkept);
                acc(*fill, Tensor::new(&[d], dfill)?);
            }
            Op::Concat(parts) => {
                let os = node.value.shape();
                let (b, total, d) = (os[0], os[1], os[2]);
                let sizes: Vec<usize> = parts.iter().map(|&p| self.shape(p)[1]).collect();
                let mut pieces: Vec<Vec<T>> = sizes.iter().map(|&n| Vec::with_capacity(b * n * d)).collect();
                for bi in 0..b {
                    let mut offset = 0;
                    for (pi, &n) in sizes.iter().enumerate() {
                        let start = (bi * total + offset) * d;
                        pieces[pi].extend_from_slice(&g.data()[start..start + n * d]);
                        offset += n;
                    }
                }
                for ((&p, piece), &n) in parts.iter().zip(pieces).zip(&sizes) {
                    acc(p, Tensor::new(&[b, n, d], piece)?);
                }
            }
            Op::MeanTokens(x) => {
                let shape = self.shape(*x);
                let (b, n, d) = (shape[0], shape[1], shape[2]);
                let inv = T::one() / T::of(n as f64);
                let mut dx = Vec::with_capacity(b * n * d);
                for bi in 0..b {
                    let row: Vec<T> = g.data()[bi * d..(bi + 1) * d].iter().map(|&v| v * inv).collect();
                    for _ in 0..n {
                        dx.extend_from_slice(&row);
                    }
                }
                acc(*x, Tensor::new(shape, dx)?);
            }
            Op::SumAll(x) => acc(*x, Tensor::full(self.shape(*x), g.item())),
            Op::MeanAll(x) => {
                let len = self.value(*x).len().max(1);
                acc(*x, Tensor::full(self.shape(*x), g.item() / T::of(len as f64)));
            }
            Op::SumLast(x) => {
                let d = self.value(*x).last_dim();
                let mut dx = Vec::with_capacity(g.len() * d);
                for &v in g.data() {
                    dx.extend(std::iter::repeat_n(v, d));
                }
                acc(*x, Tensor::new(self.shape(*x), dx)?);
            }
            Op::Patchify { x, patch } => {
                let shape = self.shape(*x);
                acc(*x, unpatchify(&g, *patch, shape[1], shape[2])?);
            }
            Op::Expand(x) => {
                let xs = self.value(*x);
                let mut dx = vec![T::zero(); xs.len()];
                for chunk in g.data().chunks(xs.len()) {
                    for (o, &v) in dx.iter_mut().zip(chunk) {
                        *o += v;
                    }
                }
                acc(*x, Tensor::new(xs.shape(), dx)?);
            }
        }
        Ok(())
    }
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

/// `tanh` through one `exp`; noticeably faster than the libm call on large tensors.
#[inline]
fn fast_tanh<T: Scalar>(y: T) -> T {
    let e = (y + y).exp();
    if e.is_infinite() {
        return T::one();
    }
    (e - T::one()) / (e + T::one())
}

#[inline]
fn gelu<T: Scalar>(x: T, c: T, k: T) -> T {
    let half = T::one() / (T::one() + T::one());
    half * x * (T::one() + fast_tanh(c * (x + k * x * x * x)))
}

#[inline]
fn gelu_grad<T: Scalar>(x: T, c: T, k: T) -> T {
    let half = T::one() / (T::one() + T::one());
    let three = T::one() + T::one() + T::one();
    let t = fast_tanh(c * (x + k * x * x * x));
    let dinner = c * (T::one() + three * k * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * dinner
}

pub(crate) fn permute_tensor<T: Scalar>(x: &Tensor<T>, perm: &[usize]) -> Tensor<T> {
    let shape = x.shape();
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(x.len());
    let mut counter = vec![0usize; rank];
    let src = x.data();
    let inner = out_shape.last().copied().unwrap_or(1);
    let inner_stride = strides.last().copied().unwrap_or(1);
    if x.is_empty() {
        return Tensor::new(&out_shape, out).expect("permute shape");
    }
    loop {
        let base: usize = counter.iter().zip(&strides).map(|(c, s)| c * s).sum();
        if inner_stride == 1 {
            out.extend_from_slice(&src[base..base + inner]);
        } else {
            for j in 0..inner {
                out.push(src[base + j * inner_stride]);
            }
        }
        // advance all but the innermost axis
        let mut axis = rank.saturating_sub(1);
        loop {
            if axis == 0 {
                return Tensor::new(&out_shape, out).expect("permute shape");
            }
            axis -= 1;
            counter[axis] += 1;
            if counter[axis] < out_shape[axis] {
                break;
            }
            counter[axis] = 0;
        }
    }
}

/// `[B, H, W, C] -> [B, (H/p)*(W/p), p*p*C]`.
pub fn patchify<T: Scalar>(x: &Tensor<T>, patch: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() != 4 || patch == 0 || !s[1].is_multiple_of(patch) || !s[2].is_multiple_of(patch) {
        return shape_err(format!("patchify: input {s:?} with patch {patch}"));
    }
    let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
    let (gh, gw) = (h / patch, w / patch);
    let payload = patch * patch * c;
    let mut out = Vec::with_capacity(x.len());
    let src = x.data();
    for bi in 0..b {
        for gy in 0..gh {
            for gx in 0..gw {
                for py in 0..patch {
                    let y = gy * patch + py;
                    let start = ((bi * h + y) * w + gx * patch) * c;
                    out.extend_from_slice(&src[start..start + patch * c]);
                }
            }
        }
    }
    Tensor::new(&[b, gh * gw, payload], out)
}

/// Inverse of [`patchify`] for a known output height and width.
pub fn unpatchify<T: Scalar>(x: &Tensor<T>, patch: usize, h: usize, w: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() != 3 || patch == 0 || !h.is_multiple_of(patch) || !w.is_multiple_of(patch) {
        return shape_err(format!("unpatchify: input {s:?} to {h}x{w} with patch {patch}"));
    }
    let (gh, gw) = (h / patch, w / patch);
    if s[1] != gh * gw || !s[2].is_multiple_of(patch * patch) {
        return shape_err(format!("unpatchify: input {s:?} does not tile {h}x{w} with patch {patch}"));
    }
    let b = s[0];
    let c = s[2] / (patch * patch);
    let mut out = vec![T::zero(); b * h * w * c];
    let src = x.data();
    let mut cursor = 0;
    for bi in 0..b {
        for gy in 0..gh {
            for gx in 0..gw {
                for py in 0..patch {
                    let y = gy * patch + py;
                    let start = ((bi * h + y) * w + gx * patch) * c;
                    out[start..start + patch * c].copy_from_slice(&src[cursor..cursor + patch * c]);
                    cursor += patch * c;
                }
            }
        }
    }
    Tensor::new(&[b, h, w, c], out)
}
