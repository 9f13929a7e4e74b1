//! Pre-norm bidirectional self-attention blocks and stacks of them.

use rand::Rng;

use super::layers::{gelu, gelu_backward, softmax_rows, Affine, LayerNorm, LayerNormCache};
use super::params::{Grads, ParamStore};
use super::tensor::{gemm, MatMut, MatRef, Real, Tensor};
use super::NnError;

/// One residual block: `x + MHSA(LN(x))`, then `+ MLP(LN(·))` with a 4× GELU MLP.
#[derive(Clone, Debug)]
pub struct AttentionBlock {
    pub dim: usize,
    pub n_heads: usize,
    ln1: LayerNorm,
    qkv: Affine,
    out: Affine,
    ln2: LayerNorm,
    fc1: Affine,
    fc2: Affine,
}

/// Activations kept for [`AttentionBlock::backward`].
#[derive(Clone, Debug)]
pub struct BlockCache<T> {
    ln1: LayerNormCache<T>,
    h1: Tensor<T>,
    qkv: Tensor<T>,
    /// `n_heads × T × T` attention weights.
    pub probs: Vec<T>,
    ctx: Tensor<T>,
    ln2: LayerNormCache<T>,
    h2: Tensor<T>,
    pre: Tensor<T>,
    act: Tensor<T>,
}

impl AttentionBlock {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        n_heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self, NnError> {
        if n_heads == 0 || dim % n_heads != 0 {
            return Err(NnError::Shape(format!("dim {dim} not divisible by {n_heads} heads")));
        }
        let std = 0.02;
        Ok(Self {
            dim,
            n_heads,
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim)?,
            qkv: Affine::new(store, &format!("{name}.qkv"), dim, 3 * dim, std, rng)?,
            out: Affine::new(store, &format!("{name}.out"), dim, dim, std, rng)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim)?,
            fc1: Affine::new(store, &format!("{name}.fc1"), dim, 4 * dim, std, rng)?,
            fc2: Affine::new(store, &format!("{name}.fc2"), 4 * dim, dim, std, rng)?,
        })
    }

    /// `key_mask[j] == false` hides token `j` from every query.
    pub fn forward<T: Real>(
        &self,
        ps: &ParamStore<T>,
        x: &Tensor<T>,
        key_mask: Option<&[bool]>,
    ) -> Result<(Tensor<T>, BlockCache<T>), NnError> {
        let t = x.rows();
        if t == 0 || x.cols() != self.dim || x.shape().len() != 2 {
            return Err(NnError::Shape(format!(
                "attention block expects T×{} input, got {:?}",
                self.dim,
                x.shape()
            )));
        }
        if let Some(m) = key_mask {
            if m.len() != t || !m.iter().any(|&v| v) {
                return Err(NnError::Shape("key mask must match T and keep one token".into()));
            }
        }
        let (h1, ln1) = self.ln1.forward(ps, x)?;
        let qkv = self.qkv.forward(ps, &h1)?;
        let dh = self.dim / self.n_heads;
        let scale = T::lit(1.0 / (dh as f64).sqrt());
        let stride = 3 * self.dim;
        let mut probs = vec![T::zero(); self.n_heads * t * t];
        let mut ctx = Tensor::zeros(&[t, self.dim]);
        for head in 0..self.n_heads {
            let q = MatRef::strided(qkv.data(), head * dh, t, dh, stride);
            let k = MatRef::strided(qkv.data(), self.dim + head * dh, t, dh, stride);
            let v = MatRef::strided(qkv.data(), 2 * self.dim + head * dh, t, dh, stride);
            let p = &mut probs[head * t * t..(head + 1) * t * t];
            gemm(scale, q, k.t(), T::zero(), MatMut::new(p, t, t));
            if let Some(m) = key_mask {
                for row in p.chunks_mut(t) {
                    for (s, &keep) in row.iter_mut().zip(m) {
                        if !keep {
                            *s = T::neg_infinity();
                        }
                    }
                }
            }
            softmax_rows(p, t);
            gemm(
                T::one(),
                MatRef::new(p, t, t),
                v,
                T::zero(),
                MatMut::strided(ctx.data_mut(), head * dh, t, dh, self.dim),
            );
        }
        let mut x1 = self.out.forward(ps, &ctx)?;
        x1.add_assign(x);
        let (h2, ln2) = self.ln2.forward(ps, &x1)?;
        let pre = self.fc1.forward(ps, &h2)?;
        let act = gelu(&pre);
        let mut y = self.fc2.forward(ps, &act)?;
        y.add_assign(&x1);
        y.check_finite("attention block")?;
        Ok((y, BlockCache { ln1, h1, qkv, probs, ctx, ln2, h2, pre, act }))
    }

    pub fn backward<T: Real>(
        &self,
        ps: &ParamStore<T>,
        cache: &BlockCache<T>,
        dy: &Tensor<T>,
        grads: &mut Grads<T>,
    ) -> Tensor<T> {
        let t = dy.rows();
        let dim = self.dim;
        let dh = dim / self.n_heads;
        let scale = T::lit(1.0 / (dh as f64).sqrt());
        let stride = 3 * dim;

        // MLP branch
        let dact = self.fc2.backward(ps, &cache.act, dy, grads);
        let dpre = gelu_backward(&cache.pre, &dact);
        let dh2 = self.fc1.backward(ps, &cache.h2, &dpre, grads);
        let mut dx1 = self.ln2.backward(ps, &cache.ln2, &dh2, grads);
        dx1.add_assign(dy);

        // attention branch
        let dctx = self.out.backward(ps, &cache.ctx, &dx1, grads);
        let mut dqkv = Tensor::zeros(&[t, stride]);
        let mut dp = vec![T::zero(); t * t];
        for head in 0..self.n_heads {
            let p = &cache.probs[head * t * t..(head + 1) * t * t];
            let q = MatRef::strided(cache.qkv.data(), head * dh, t, dh, stride);
            let k = MatRef::strided(cache.qkv.data(), dim + head * dh, t, dh, stride);
            let v = MatRef::strided(cache.qkv.data(), 2 * dim + head * dh, t, dh, stride);
            let dc = MatRef::strided(dctx.data(), head * dh, t, dh, dim);
            // dV = Pᵀ dC
            gemm(
                T::one(),
                MatRef::new(p, t, t).t(),
                dc,
                T::zero(),
                MatMut::strided(dqkv.data_mut(), 2 * dim + head * dh, t, dh, stride),
            );
            // dP = dC Vᵀ, then softmax backward into dS
            gemm(T::one(), dc, v.t(), T::zero(), MatMut::new(&mut dp, t, t));
            for (drow, prow) in dp.chunks_mut(t).zip(p.chunks(t)) {
                let dot: T = drow.iter().zip(prow).map(|(&a, &b)| a * b).sum();
                for (d, &pv) in drow.iter_mut().zip(prow) {
                    *d = pv * (*d - dot) * scale;
                }
            }
            // dQ = dS K, dK = dSᵀ Q
            gemm(
                T::one(),
                MatRef::new(&dp, t, t),
                k,
                T::zero(),
                MatMut::strided(dqkv.data_mut(), head * dh, t, dh, stride),
            );
            gemm(
                T::one(),
                MatRef::new(&dp, t, t).t(),
                q,
                T::zero(),
                MatMut::strided(dqkv.data_mut(), dim + head * dh, t, dh, stride),
            );
        }
        let dh1 = self.qkv.backward(ps, &cache.h1, &dqkv, grads);
        let mut dx = self.ln1.backward(ps, &cache.ln1, &dh1, grads);
        dx.add_assign(&dx1);
        dx
    }
}

/// A sequence of [`AttentionBlock`]s sharing width and head count.
#[derive(Clone, Debug)]
pub struct BlockStack {
    pub dim: usize,
    pub n_heads: usize,
    pub blocks: Vec<AttentionBlock>,
}

impl BlockStack {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        n_blocks: usize,
        dim: usize,
        n_heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self, NnError> {
        let blocks = (0..n_blocks)
            .map(|i| AttentionBlock::new(store, &format!("{name}.{i}"), dim, n_heads, rng))
            .collect::<Result<_, _>>()?;
        Ok(Self { dim, n_heads, blocks })
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn forward<T: Real>(
        &self,
        ps: &ParamStore<T>,
        x: &Tensor<T>,
        key_mask: Option<&[bool]>,
    ) -> Result<(Tensor<T>, Vec<BlockCache<T>>), NnError> {
        let mut h = x.clone();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (y, c) = b.forward(ps, &h, key_mask)?;
            caches.push(c);
            h = y;
        }
        Ok((h, caches))
    }

    pub fn backward<T: Real>(
        &self,
        ps: &ParamStore<T>,
        caches: &[BlockCache<T>],
        dy: &Tensor<T>,
        grads: &mut Grads<T>,
    ) -> Tensor<T> {
        let mut d = dy.clone();
        for (b, c) in self.blocks.iter().zip(caches).rev() {
            d = b.backward(ps, c, &d, grads);
        }
        d
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn block(dim: usize, heads: usize) -> (ParamStore<f64>, AttentionBlock) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut ps = ParamStore::new();
        let b = AttentionBlock::new(&mut ps, "blk", dim, heads, &mut rng).unwrap();
        (ps, b)
    }

    fn random_input(t: usize, dim: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..t * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(&[t, dim], data).unwrap()
    }

    #[test]
    fn single_token_attends_to_itself_with_weight_one() {
        let (ps, b) = block(8, 2);
        let (_, cache) = b.forward(&ps, &random_input(1, 8, 1), None).unwrap();
        assert!(cache.probs.iter().all(|&p| p == 1.0));
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let (ps, b) = block(8, 2);
        let (_, cache) = b.forward(&ps, &random_input(5, 8, 2), None).unwrap();
        for row in cache.probs.chunks(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn permutation_equivariant() {
        let (ps, b) = block(8, 2);
        let x = random_input(4, 8, 3);
        let perm = [2usize, 0, 3, 1];
        let mut xp = Tensor::zeros(&[4, 8]);
        for (i, &p) in perm.iter().enumerate() {
            xp.row_mut(i).copy_from_slice(x.row(p));
        }
        let (y, _) = b.forward(&ps, &x, None).unwrap();
        let (yp, _) = b.forward(&ps, &xp, None).unwrap();
        for (i, &p) in perm.iter().enumerate() {
            for (a, c) in yp.row(i).iter().zip(y.row(p)) {
                assert!((a - c).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn masked_keys_get_zero_weight() {
        let (ps, b) = block(8, 2);
        let mask = [true, false, true];
        let (_, cache) = b.forward(&ps, &random_input(3, 8, 4), Some(&mask)).unwrap();
        for row in cache.probs.chunks(3) {
            assert_eq!(row[1], 0.0);
        }
    }

    #[test]
    fn rejects_bad_head_count_and_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ps = ParamStore::<f32>::new();
        assert!(AttentionBlock::new(&mut ps, "b", 10, 4, &mut rng).is_err());
        let (ps, b) = block(8, 2);
        assert!(b.forward(&ps, &random_input(3, 6, 0), None).is_err());
    }
}
