//! Vector quantization with usage tracking and k-means revival of dead codes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::nncore::{adam_update, AdamConfig, NnError, Real, Tensor};

/// A code unused for more than this many iterations is dead.
pub const DEAD_WINDOW: u64 = 256;

#[derive(Debug, thiserror::Error)]
pub enum CodebookError {
    #[error("codebook needs at least 2 codes, got {0}")]
    TooFewCodes(usize),
    #[error("embedding width {got} does not match code width {want}")]
    Width { got: usize, want: usize },
    #[error("non-finite embedding at row {0}")]
    NonFinite(usize),
    #[error("memory bank is empty")]
    EmptyBank,
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// `K` learnable `D`-wide codes with per-code usage bookkeeping and optimizer state.
#[derive(Clone, Debug)]
pub struct Codebook<T = f32> {
    codes: Tensor<T>,
    last_used: Vec<u64>,
    ever_used: Vec<bool>,
    m1: Tensor<T>,
    m2: Tensor<T>,
    step: u64,
}

impl<T: Real> Codebook<T> {
    pub fn new(codes: Tensor<T>) -> Result<Self, CodebookError> {
        let k = codes.rows();
        if codes.shape().len() != 2 || k < 2 {
            return Err(CodebookError::TooFewCodes(k));
        }
        codes.check_finite("codebook")?;
        Ok(Self {
            m1: Tensor::zeros(codes.shape()),
            m2: Tensor::zeros(codes.shape()),
            last_used: vec![0; k],
            ever_used: vec![false; k],
            codes,
            step: 0,
        })
    }

    /// Codes drawn from `N(0, std²)`.
    pub fn random(k: usize, d: usize, std: f64, rng: &mut impl Rng) -> Result<Self, CodebookError> {
        let normal = rand_distr::Normal::new(0.0, std).map_err(|e| NnError::Shape(e.to_string()))?;
        let data = (0..k * d).map(|_| T::lit(rand_distr::Distribution::sample(&normal, rng))).collect();
        Self::new(Tensor::from_vec(&[k, d], data)?)
    }

    pub fn k(&self) -> usize {
        self.codes.rows()
    }

    pub fn d(&self) -> usize {
        self.codes.cols()
    }

    pub fn codes(&self) -> &Tensor<T> {
        &self.codes
    }

    pub fn code(&self, k: usize) -> &[T] {
        self.codes.row(k)
    }

    pub fn last_used(&self) -> &[u64] {
        &self.last_used
    }

    pub fn ever_used(&self) -> &[bool] {
        &self.ever_used
    }

    /// Restores usage bookkeeping, e.g. from a checkpoint.
    pub fn set_usage(&mut self, last_used: Vec<u64>, ever_used: Vec<bool>) {
        assert_eq!(last_used.len(), self.k());
        assert_eq!(ever_used.len(), self.k());
        self.last_used = last_used;
        self.ever_used = ever_used;
    }

    pub fn set_codes(&mut self, codes: Tensor<T>) -> Result<(), CodebookError> {
        if codes.shape() != self.codes.shape() {
            return Err(NnError::Shape(format!("codes {:?} vs {:?}", codes.shape(), self.codes.shape())).into());
        }
        self.codes = codes;
        Ok(())
    }

    /// One optimizer step on the codes.
    pub fn apply_grad(&mut self, grad: &Tensor<T>, cfg: &AdamConfig) {
        self.step += 1;
        adam_update(&mut self.codes, grad, &mut self.m1, &mut self.m2, cfg, self.step);
    }

    /// Never used, or unused for more than [`DEAD_WINDOW`] iterations.
    pub fn is_dead(&self, k: usize, iter: u64) -> bool {
        !self.ever_used[k] || iter.saturating_sub(self.last_used[k]) > DEAD_WINDOW
    }

    /// Stamps every code in `indices` as used at `iter`.
    pub fn record_usage(&mut self, indices: &[usize], iter: u64) {
        for &k in indices {
            self.last_used[k] = iter;
            self.ever_used[k] = true;
        }
    }

    /// Fraction of codes used within the last [`DEAD_WINDOW`] iterations.
    pub fn utilization(&self, iter: u64) -> f64 {
        let live = (0..self.k()).filter(|&k| !self.is_dead(k, iter)).count();
        live as f64 / self.k() as f64
    }

    fn replace_code(&mut self, k: usize, value: &[T], iter: u64) {
        self.codes.row_mut(k).copy_from_slice(value);
        self.m1.row_mut(k).fill(T::zero());
        self.m2.row_mut(k).fill(T::zero());
        self.last_used[k] = iter;
        self.ever_used[k] = true;
    }
}

/// Nearest-code assignment of a batch of embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizeResult<T = f32> {
    pub indices: Vec<usize>,
    /// `quantized.row(i) == codes.row(indices[i])` exactly.
    pub quantized: Tensor<T>,
    pub mse: f64,
}

/// `argmin_k ‖z_i − e_k‖²` per row, ties to the lowest index.
pub fn quantize<T: Real>(z: &Tensor<T>, cb: &Codebook<T>) -> Result<QuantizeResult<T>, CodebookError> {
    let (n, d) = (z.rows(), z.cols());
    if d != cb.d() || z.shape().len() != 2 {
        return Err(CodebookError::Width { got: d, want: cb.d() });
    }
    let mut indices = Vec::with_capacity(n);
    let mut quantized = Tensor::zeros(&[n, d]);
    let mut total = 0.0;
    for i in 0..n {
        let row = z.row(i);
        if !row.iter().all(|v| v.is_finite()) {
            return Err(CodebookError::NonFinite(i));
        }
        let mut best = (0usize, f64::INFINITY);
        for k in 0..cb.k() {
            let dist: f64 = row
                .iter()
                .zip(cb.code(k))
                .map(|(&a, &b)| {
                    let diff = a.as_f64() - b.as_f64();
                    diff * diff
                })
                .sum();
            if dist < best.1 {
                best = (k, dist);
            }
        }
        indices.push(best.0);
        quantized.row_mut(i).copy_from_slice(cb.code(best.0));
        total += best.1;
    }
    let mse = if n == 0 { 0.0 } else { total / (n * d) as f64 };
    Ok(QuantizeResult { indices, quantized, mse })
}

/// Values and gradients of the two quantization terms, both mean squared distances.
#[derive(Clone, Debug)]
pub struct VqLossTerms<T = f32> {
    /// `‖sg[z] − ẑ‖²`: trains the codes only.
    pub codebook_loss: T,
    /// `‖z − sg[ẑ]‖²`: trains the encoder only.
    pub commitment_loss: T,
    /// `∂ codebook_loss / ∂ẑ`, per quantized row.
    pub d_quantized: Tensor<T>,
    /// `∂ commitment_loss / ∂z`.
    pub d_z: Tensor<T>,
}

pub fn vq_loss_terms<T: Real>(z: &Tensor<T>, zq: &Tensor<T>) -> Result<VqLossTerms<T>, CodebookError> {
    if z.shape() != zq.shape() {
        return Err(NnError::Shape(format!("z {:?} vs ẑ {:?}", z.shape(), zq.shape())).into());
    }
    let n = T::lit(z.len().max(1) as f64);
    let two = T::lit(2.0);
    let mut sq = T::zero();
    let mut d_z = Tensor::zeros(z.shape());
    let mut d_q = Tensor::zeros(z.shape());
    for (((&a, &b), gz), gq) in z.data().iter().zip(zq.data()).zip(d_z.data_mut()).zip(d_q.data_mut()) {
        let diff = a - b;
        sq += diff * diff;
        *gz = two * diff / n;
        *gq = -two * diff / n;
    }
    let mean = sq / n;
    Ok(VqLossTerms { codebook_loss: mean, commitment_loss: mean, d_quantized: d_q, d_z })
}

/// Scatters per-row `∂L/∂ẑ` onto the codes they were copied from.
pub fn code_gradient<T: Real>(indices: &[usize], d_quantized: &Tensor<T>, k: usize) -> Tensor<T> {
    let d = d_quantized.cols();
    let mut g = Tensor::zeros(&[k, d]);
    for (i, &idx) in indices.iter().enumerate() {
        for (acc, &v) in g.row_mut(idx).iter_mut().zip(d_quantized.row(i)) {
            *acc += v;
        }
    }
    g
}

/// Forward value `ẑ`; the backward pass hands the upstream gradient to `z` unchanged and
/// nothing to the codes.
pub fn straight_through_compose<T: Real>(z: &Tensor<T>, zq: &Tensor<T>) -> Tensor<T> {
    debug_assert_eq!(z.shape(), zq.shape());
    zq.clone()
}

/// `(∂L/∂z, ∂L/∂codes)` contributed by [`straight_through_compose`].
pub fn straight_through_backward<T: Real>(upstream: &Tensor<T>, k: usize) -> (Tensor<T>, Tensor<T>) {
    (upstream.clone(), Tensor::zeros(&[k, upstream.cols()]))
}

/// Linear warmup weight: `min(1, iter / warmup_iters)`.
pub fn warmup_alpha(iter: u64, warmup_iters: u64) -> f64 {
    (iter as f64 / warmup_iters.max(1) as f64).min(1.0)
}

/// `α·straight_through(z, ẑ) + (1 − α)·z`. Its gradient to `z` is the identity.
pub fn warmup_blend<T: Real>(z: &Tensor<T>, zq: &Tensor<T>, iter: u64, warmup_iters: u64) -> Tensor<T> {
    let a = T::lit(warmup_alpha(iter, warmup_iters));
    let st = straight_through_compose(z, zq);
    let data = st.data().iter().zip(z.data()).map(|(&q, &c)| a * q + (T::one() - a) * c).collect();
    Tensor::from_vec(z.shape(), data).expect("same shape")
}

/// Ring buffer of recent encoder outputs.
#[derive(Clone, Debug)]
pub struct MemoryBank<T = f32> {
    capacity: usize,
    d: usize,
    rows: Vec<T>,
    len: usize,
    cursor: usize,
}

impl<T: Real> MemoryBank<T> {
    pub fn new(capacity: usize, d: usize) -> Self {
        Self { capacity, d, rows: vec![T::zero(); capacity * d], len: 0, cursor: 0 }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn is_full(&self) -> bool {
        self.len == self.capacity
    }

    /// Copies each row in, overwriting the oldest once full.
    pub fn push(&mut self, z: &Tensor<T>) {
        debug_assert_eq!(z.cols(), self.d);
        if self.capacity == 0 {
            return;
        }
        for i in 0..z.rows() {
            let at = self.cursor * self.d;
            self.rows[at..at + self.d].copy_from_slice(z.row(i));
            self.cursor = (self.cursor + 1) % self.capacity;
            self.len = (self.len + 1).min(self.capacity);
        }
    }

    /// Stored rows in slot order.
    pub fn rows(&self) -> &[T] {
        &self.rows[..self.len * self.d]
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.rows[i * self.d..(i + 1) * self.d]
    }
}

fn sq_dist<T: Real>(a: &[T], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x.as_f64() - y).powi(2)).sum()
}

/// k-means++ seeding followed by `iters` Lloyd iterations over `n` rows of width `d`.
///
/// Empty clusters keep their previous centroid. Fewer rows than `k` falls back to sampling
/// rows with replacement.
pub fn kmeans<T: Real>(data: &[T], d: usize, k: usize, iters: usize, seed: u64) -> Vec<Vec<f64>> {
    let n = data.len() / d;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let row = |i: usize| &data[i * d..(i + 1) * d];
    let to_f64 = |r: &[T]| r.iter().map(|v| v.as_f64()).collect::<Vec<f64>>();
    if n == 0 || k == 0 {
        return Vec::new();
    }
    if n < k {
        return (0..k).map(|_| to_f64(row(rng.random_range(0..n)))).collect();
    }
    let mut centroids = vec![to_f64(row(rng.random_range(0..n)))];
    let mut dist: Vec<f64> = (0..n).map(|i| sq_dist(row(i), &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in dist.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let c = to_f64(row(pick));
        for (i, dv) in dist.iter_mut().enumerate() {
            *dv = dv.min(sq_dist(row(i), &c));
        }
        centroids.push(c);
    }
    let mut assign = vec![0usize; n];
    for _ in 0..iters {
        for (i, a) in assign.iter_mut().enumerate() {
            let r = row(i);
            let mut best = (0, f64::INFINITY);
            for (c, cent) in centroids.iter().enumerate() {
                let dv = sq_dist(r, cent);
                if dv < best.1 {
                    best = (c, dv);
                }
            }
            *a = best.0;
        }
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (i, &a) in assign.iter().enumerate() {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(row(i)) {
                *s += v.as_f64();
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
    }
    centroids
}

/// Parameters for [`reinit_dead_codes`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReinitConfig {
    /// Revive when utilization falls below this fraction.
    pub threshold: f64,
    pub kmeans_iters: usize,
    pub seed: u64,
}

impl Default for ReinitConfig {
    fn default() -> Self {
        Self { threshold: 0.5, kmeans_iters: 10, seed: 0 }
    }
}

/// Replaces dead codes with k-means centroids of the bank when utilization is below the
/// threshold. Returns the replaced code indices; live codes are never touched.
pub fn reinit_dead_codes<T: Real>(
    cb: &mut Codebook<T>,
    bank: &MemoryBank<T>,
    iter: u64,
    cfg: &ReinitConfig,
) -> Result<Vec<usize>, CodebookError> {
    if cb.utilization(iter) >= cfg.threshold {
        return Ok(Vec::new());
    }
    if bank.is_empty() {
        return Err(CodebookError::EmptyBank);
    }
    let dead: Vec<usize> = (0..cb.k()).filter(|&k| cb.is_dead(k, iter)).collect();
    let centroids = kmeans(bank.rows(), cb.d(), dead.len(), cfg.kmeans_iters, cfg.seed ^ iter);
    for (&k, c) in dead.iter().zip(&centroids) {
        let v: Vec<T> = c.iter().map(|&x| T::lit(x)).collect();
        cb.replace_code(k, &v, iter);
    }
    Ok(dead)
}

/// Overwrites every code with k-means centroids of the bank (data-dependent initialization).
pub fn init_from_bank<T: Real>(
    cb: &mut Codebook<T>,
    bank: &MemoryBank<T>,
    iter: u64,
    cfg: &ReinitConfig,
) -> Result<(), CodebookError> {
    if bank.is_empty() {
        return Err(CodebookError::EmptyBank);
    }
    let centroids = kmeans(bank.rows(), cb.d(), cb.k(), cfg.kmeans_iters, cfg.seed ^ iter);
    let mut codes = Tensor::zeros(&[cb.k(), cb.d()]);
    for (k, c) in centroids.iter().enumerate() {
        for (dst, &v) in codes.row_mut(k).iter_mut().zip(c) {
            *dst = T::lit(v);
        }
    }
    cb.set_codes(codes)?;
    cb.m1.fill(T::zero());
    cb.m2.fill(T::zero());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cb(rows: &[[f64; 2]]) -> Codebook<f64> {
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Codebook::new(Tensor::from_vec(&[rows.len(), 2], data).unwrap()).unwrap()
    }

    #[test]
    fn exact_code_maps_to_itself() {
        let c = cb(&[[0.0, 0.0], [1.0, 1.0], [2.0, 0.0], [5.0, -1.0]]);
        let z = Tensor::from_vec(&[1, 2], vec![5.0, -1.0]).unwrap();
        let q = quantize(&z, &c).unwrap();
        assert_eq!(q.indices, vec![3]);
        assert_eq!(q.mse, 0.0);
    }

    #[test]
    fn tie_goes_to_lower_index() {
        let c = cb(&[[3.0, 0.0], [-1.0, 0.0], [1.0, 0.0]]);
        let z = Tensor::from_vec(&[1, 2], vec![0.0, 0.0]).unwrap();
        assert_eq!(quantize(&z, &c).unwrap().indices, vec![1]);
    }

    #[test]
    fn rejects_nan_and_wrong_width() {
        let c = cb(&[[0.0, 0.0], [1.0, 1.0]]);
        let z = Tensor::from_vec(&[1, 2], vec![f64::NAN, 0.0]).unwrap();
        assert!(matches!(quantize(&z, &c), Err(CodebookError::NonFinite(0))));
        let z = Tensor::from_vec(&[1, 3], vec![0.0; 3]).unwrap();
        assert!(matches!(quantize(&z, &c), Err(CodebookError::Width { .. })));
        assert!(Codebook::new(Tensor::<f64>::zeros(&[1, 2])).is_err());
    }

    #[test]
    fn scalar_loss_terms() {
        let z = Tensor::from_vec(&[1, 1], vec![1.0f64]).unwrap();
        let q = Tensor::from_vec(&[1, 1], vec![0.0f64]).unwrap();
        let t = vq_loss_terms(&z, &q).unwrap();
        assert_eq!(t.codebook_loss, 1.0);
        assert_eq!(t.commitment_loss, 1.0);
        assert_eq!(t.d_quantized.data(), &[-2.0]);
        assert_eq!(t.d_z.data(), &[2.0]);
        let same = vq_loss_terms(&z, &z).unwrap();
        assert_eq!((same.codebook_loss, same.commitment_loss), (0.0, 0.0));
    }

    #[test]
    fn straight_through_routes_gradient_to_z_only() {
        let z = Tensor::from_vec(&[2, 2], vec![0.1f64, 0.2, 0.3, 0.4]).unwrap();
        let q = Tensor::from_vec(&[2, 2], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(straight_through_compose(&z, &q), q);
        let g = Tensor::from_vec(&[2, 2], vec![5.0f64, -1.0, 0.5, 2.0]).unwrap();
        let (dz, dcodes) = straight_through_backward(&g, 7);
        assert_eq!(dz, g);
        assert!(dcodes.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn warmup_endpoints_and_midpoint() {
        let z = Tensor::from_vec(&[1, 2], vec![0.0f64, 4.0]).unwrap();
        let q = Tensor::from_vec(&[1, 2], vec![2.0f64, 0.0]).unwrap();
        assert_eq!(warmup_blend(&z, &q, 0, 100), z);
        assert_eq!(warmup_blend(&z, &q, 100, 100), q);
        assert_eq!(warmup_blend(&z, &q, 250, 100), q);
        assert_eq!(warmup_blend(&z, &q, 50, 100).data(), &[1.0, 2.0]);
    }

    #[test]
    fn dead_after_257_idle_iterations() {
        let mut c = cb(&[[0.0, 0.0], [1.0, 1.0]]);
        assert_eq!(c.utilization(0), 0.0);
        c.record_usage(&[0, 1], 10);
        assert_eq!(c.utilization(10), 1.0);
        c.record_usage(&[1], 20);
        assert_eq!(c.last_used()[0], 10);
        assert!(!c.is_dead(0, 10 + 256));
        assert!(c.is_dead(0, 10 + 257));
        assert_eq!(c.utilization(10 + 257), 0.5);
    }

    #[test]
    fn bank_is_a_ring() {
        let mut bank = MemoryBank::<f64>::new(4, 1);
        let rows = Tensor::from_vec(&[7, 1], (0..7).map(|v| v as f64).collect()).unwrap();
        bank.push(&rows);
        assert_eq!(bank.len(), 4);
        // slots 0..3 were written with 0,1,2,3 then 4,5,6 overwrote slots 0,1,2
        assert_eq!(bank.rows(), &[4.0, 5.0, 6.0, 3.0]);
    }

    #[test]
    fn reinit_noop_when_utilization_high() {
        let mut c = cb(&[[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]]);
        c.record_usage(&[0, 1], 5);
        let before = c.codes().clone();
        let mut bank = MemoryBank::new(8, 2);
        bank.push(&Tensor::from_vec(&[2, 2], vec![9.0, 9.0, 8.0, 8.0]).unwrap());
        let replaced = reinit_dead_codes(&mut c, &bank, 6, &ReinitConfig::default()).unwrap();
        assert!(replaced.is_empty());
        assert_eq!(c.codes(), &before);
    }

    #[test]
    fn small_bank_samples_with_replacement() {
        let data = [1.0f64, 2.0, 3.0, 4.0];
        let cents = kmeans(&data, 2, 5, 10, 1);
        assert_eq!(cents.len(), 5);
        assert!(cents.iter().all(|c| c == &vec![1.0, 2.0] || c == &vec![3.0, 4.0]));
    }
}
