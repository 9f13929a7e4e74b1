//! Affine maps, layer normalization, and the GELU nonlinearity, each with an
//! explicit backward pass.

use rand::Rng;

use super::params::{Grads, ParamId, ParamStore};
use super::tensor::{gemm, matmul, Real, Tensor};
use super::NnError;

/// `y = x·W + b` for `x: N×I`, `W: I×O`, `b: O`.
pub fn affine<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, NnError> {
    let (n, i) = (x.rows(), x.cols());
    if x.shape().len() != 2 || w.shape() != [i, b.len()] || b.shape().len() != 1 {
        return Err(NnError::Shape(format!(
            "affine: x {:?}, w {:?}, b {:?}",
            x.shape(),
            w.shape(),
            b.shape()
        )));
    }
    let o = b.len();
    let mut y = Tensor::zeros(&[n, o]);
    for r in 0..n {
        y.row_mut(r).copy_from_slice(b.data());
    }
    gemm(T::one(), x.as_mat(), w.as_mat(), T::one(), y.as_mat_mut());
    y.check_finite("affine")?;
    Ok(y)
}

/// Gradients of [`affine`]: `(dx, dw, db)`.
pub fn affine_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let dx = matmul(dy.as_mat(), w.as_mat().t());
    let dw = matmul(x.as_mat().t(), dy.as_mat());
    let mut db = Tensor::zeros(&[dy.cols()]);
    for r in 0..dy.rows() {
        for (acc, &g) in db.data_mut().iter_mut().zip(dy.row(r)) {
            *acc += g;
        }
    }
    (dx, dw, db)
}

/// Affine layer whose weights live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Affine {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Affine {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        std: f64,
        rng: &mut impl Rng,
    ) -> Result<Self, NnError> {
        let w = store.add_normal(&format!("{name}.w"), &[in_dim, out_dim], std, rng)?;
        let b = store.add_zeros(&format!("{name}.b"), &[out_dim])?;
        Ok(Self { w, b, in_dim, out_dim })
    }

    pub fn forward<T: Real>(&self, ps: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        affine(x, ps.get(self.w), ps.get(self.b))
    }

    /// Accumulates weight gradients into `grads` and returns `dx`.
    pub fn backward<T: Real>(
        &self,
        ps: &ParamStore<T>,
        x: &Tensor<T>,
        dy: &Tensor<T>,
        grads: &mut Grads<T>,
    ) -> Tensor<T> {
        let dx = matmul(dy.as_mat(), ps.get(self.w).as_mat().t());
        self.accumulate_weight_grads(x, dy, grads);
        dx
    }

    /// Weight and bias gradients only, for layers whose input needs no gradient.
    pub fn accumulate_weight_grads<T: Real>(&self, x: &Tensor<T>, dy: &Tensor<T>, grads: &mut Grads<T>) {
        gemm(T::one(), x.as_mat().t(), dy.as_mat(), T::one(), grads.get_mut(self.w).as_mat_mut());
        let db = grads.get_mut(self.b).data_mut();
        for r in 0..dy.rows() {
            for (acc, &g) in db.iter_mut().zip(dy.row(r)) {
                *acc += g;
            }
        }
    }
}

const LN_EPS: f64 = 1e-5;

/// Row-wise layer normalization with learned gain and bias.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub dim: usize,
}

/// Saved normalized activations for the backward pass.
#[derive(Clone, Debug)]
pub struct LayerNormCache<T> {
    xhat: Tensor<T>,
    rstd: Vec<T>,
}

impl LayerNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Result<Self, NnError> {
        let gain = store.add_full(&format!("{name}.gain"), &[dim], T::one())?;
        let bias = store.add_zeros(&format!("{name}.bias"), &[dim])?;
        Ok(Self { gain, bias, dim })
    }

    pub fn forward<T: Real>(
        &self,
        ps: &ParamStore<T>,
        x: &Tensor<T>,
    ) -> Result<(Tensor<T>, LayerNormCache<T>), NnError> {
        if x.cols() != self.dim {
            return Err(NnError::Shape(format!("layer norm width {} vs {}", x.cols(), self.dim)));
        }
        let (g, b) = (ps.get(self.gain).data(), ps.get(self.bias).data());
        let n = x.rows();
        let d = T::lit(self.dim as f64);
        let mut xhat = Tensor::zeros(x.shape());
        let mut y = Tensor::zeros(x.shape());
        let mut rstd = Vec::with_capacity(n);
        for r in 0..n {
            let row = x.row(r);
            let mean = row.iter().copied().sum::<T>() / d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / d;
            let rs = T::one() / (var + T::lit(LN_EPS)).sqrt();
            rstd.push(rs);
            let xh = xhat.row_mut(r);
            for (o, &v) in xh.iter_mut().zip(row) {
                *o = (v - mean) * rs;
            }
            let yr = y.row_mut(r);
            for c in 0..self.dim {
                yr[c] = xhat.data()[r * self.dim + c] * g[c] + b[c];
            }
        }
        Ok((y, LayerNormCache { xhat, rstd }))
    }

    pub fn backward<T: Real>(
        &self,
        ps: &ParamStore<T>,
        cache: &LayerNormCache<T>,
        dy: &Tensor<T>,
        grads: &mut Grads<T>,
    ) -> Tensor<T> {
        let g = ps.get(self.gain).data();
        let d = self.dim;
        let dn = T::lit(d as f64);
        let mut dx = Tensor::zeros(dy.shape());
        {
            let dg = grads.get_mut(self.gain).data_mut();
            for r in 0..dy.rows() {
                for c in 0..d {
                    dg[c] += dy.data()[r * d + c] * cache.xhat.data()[r * d + c];
                }
            }
        }
        {
            let db = grads.get_mut(self.bias).data_mut();
            for r in 0..dy.rows() {
                for c in 0..d {
                    db[c] += dy.data()[r * d + c];
                }
            }
        }
        for r in 0..dy.rows() {
            let dyr = dy.row(r);
            let xh = cache.xhat.row(r);
            let mut sum_dxh = T::zero();
            let mut sum_dxh_xh = T::zero();
            for c in 0..d {
                let dxh = dyr[c] * g[c];
                sum_dxh += dxh;
                sum_dxh_xh += dxh * xh[c];
            }
            let rs = cache.rstd[r];
            let out = dx.row_mut(r);
            for c in 0..d {
                let dxh = dyr[c] * g[c];
                out[c] = rs * (dxh - sum_dxh / dn - xh[c] * sum_dxh_xh / dn);
            }
        }
        dx
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)
const GELU_C: f64 = 0.044_715;

/// Tanh-approximated GELU, elementwise.
pub fn gelu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (k, c, half) = (T::lit(GELU_K), T::lit(GELU_C), T::lit(0.5));
    let data = x
        .data()
        .iter()
        .map(|&v| half * v * (T::one() + tanh(k * (v + c * v * v * v))))
        .collect();
    Tensor::from_vec(x.shape(), data).expect("same shape")
}

/// `dL/dx` of [`gelu`] given its input and the upstream gradient.
pub fn gelu_backward<T: Real>(x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let (k, c, half) = (T::lit(GELU_K), T::lit(GELU_C), T::lit(0.5));
    let three = T::lit(3.0);
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&v, &g)| {
            let u = k * (v + c * v * v * v);
            let th = tanh(u);
            let du = k * (T::one() + three * c * v * v);
            let d = half * (T::one() + th) + half * v * (T::one() - th * th) * du;
            g * d
        })
        .collect();
    Tensor::from_vec(x.shape(), data).expect("same shape")
}

// one exp instead of libm's tanh
fn tanh<T: Real>(u: T) -> T {
    let two = T::lit(2.0);
    T::one() - two / ((two * u).exp() + T::one())
}

/// Row-wise softmax in place.
pub fn softmax_rows<T: Real>(data: &mut [T], cols: usize) {
    for row in data.chunks_mut(cols) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}
