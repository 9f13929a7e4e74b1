//! Named parameters, their gradients, and the adaptive-moment optimizer.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::tensor::{Real, Tensor};
use super::NnError;

/// Handle to one tensor in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Named parameters plus first/second moment estimates for each.
#[derive(Clone, Debug)]
pub struct ParamStore<T = f32> {
    names: Vec<String>,
    index: HashMap<String, usize>,
    values: Vec<Tensor<T>>,
    m1: Vec<Tensor<T>>,
    m2: Vec<Tensor<T>>,
    step: u64,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            index: HashMap::new(),
            values: Vec::new(),
            m1: Vec::new(),
            m2: Vec::new(),
            step: 0,
        }
    }

    pub fn add(&mut self, name: &str, value: Tensor<T>) -> Result<ParamId, NnError> {
        if self.index.contains_key(name) {
            return Err(NnError::DuplicateParam(name.to_string()));
        }
        let id = self.values.len();
        self.names.push(name.to_string());
        self.index.insert(name.to_string(), id);
        self.m1.push(Tensor::zeros(value.shape()));
        self.m2.push(Tensor::zeros(value.shape()));
        self.values.push(value);
        Ok(ParamId(id))
    }

    /// Adds a parameter drawn from `N(0, std²)`.
    pub fn add_normal(
        &mut self,
        name: &str,
        shape: &[usize],
        std: f64,
        rng: &mut impl Rng,
    ) -> Result<ParamId, NnError> {
        let len: usize = shape.iter().product();
        let normal = Normal::new(0.0, std).map_err(|e| NnError::Shape(e.to_string()))?;
        let data = (0..len).map(|_| T::lit(normal.sample(rng))).collect();
        self.add(name, Tensor::from_vec(shape, data)?)
    }

    pub fn add_zeros(&mut self, name: &str, shape: &[usize]) -> Result<ParamId, NnError> {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn add_full(&mut self, name: &str, shape: &[usize], value: T) -> Result<ParamId, NnError> {
        self.add(name, Tensor::full(shape, value))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.values.len()).map(ParamId)
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn moments(&self, id: ParamId) -> (&Tensor<T>, &Tensor<T>) {
        (&self.m1[id.0], &self.m2[id.0])
    }

    /// Replaces moments and the step counter, e.g. when restoring a checkpoint.
    pub fn set_optimizer_state(
        &mut self,
        id: ParamId,
        m1: Tensor<T>,
        m2: Tensor<T>,
    ) -> Result<(), NnError> {
        let shape = self.values[id.0].shape();
        if m1.shape() != shape || m2.shape() != shape {
            return Err(NnError::Shape(format!("moments for {}", self.names[id.0])));
        }
        self.m1[id.0] = m1;
        self.m2[id.0] = m2;
        Ok(())
    }

    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    /// Overwrites a parameter value keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<(), NnError> {
        if value.shape() != self.values[id.0].shape() {
            return Err(NnError::Shape(format!(
                "{}: expected {:?}, got {:?}",
                self.names[id.0],
                self.values[id.0].shape(),
                value.shape()
            )));
        }
        self.values[id.0] = value;
        Ok(())
    }

    pub fn zero_grads(&self) -> Grads<T> {
        Grads { values: self.values.iter().map(|v| Tensor::zeros(v.shape())).collect() }
    }

    /// Same names, shapes, and values converted to another element type; moments reset.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for (name, v) in self.names.iter().zip(&self.values) {
            out.add(name, v.cast()).expect("names already unique");
        }
        out
    }

    /// Flattened copy of every parameter, in id order.
    pub fn flatten(&self) -> Vec<T> {
        self.values.iter().flat_map(|v| v.data().iter().copied()).collect()
    }

    pub fn unflatten(&mut self, flat: &[T]) {
        let mut at = 0;
        for v in &mut self.values {
            let n = v.len();
            v.data_mut().copy_from_slice(&flat[at..at + n]);
            at += n;
        }
    }
}

/// Gradient buffers parallel to a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Grads<T = f32> {
    values: Vec<Tensor<T>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn zero(&mut self) {
        self.values.iter_mut().for_each(|v| v.fill(T::zero()));
    }

    pub fn scale(&mut self, s: T) {
        self.values.iter_mut().for_each(|v| v.scale(s));
    }

    pub fn global_norm(&self) -> f64 {
        self.values.iter().map(Tensor::sum_sq).sum::<f64>().sqrt()
    }

    /// Rescales so the global L2 norm is at most `max_norm`; returns the norm before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            self.scale(T::lit(max_norm / norm));
        }
        norm
    }

    pub fn flatten(&self) -> Vec<T> {
        self.values.iter().flat_map(|v| v.data().iter().copied()).collect()
    }
}

/// Adaptive-moment hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.96, eps: 1e-8 }
    }
}

/// One bias-corrected update of a single tensor. `t` is the 1-based step number.
pub fn adam_update<T: Real>(
    value: &mut Tensor<T>,
    grad: &Tensor<T>,
    m1: &mut Tensor<T>,
    m2: &mut Tensor<T>,
    cfg: &AdamConfig,
    t: u64,
) {
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let bc1 = T::lit(1.0 - cfg.beta1.powi(t as i32));
    let bc2 = T::lit(1.0 - cfg.beta2.powi(t as i32));
    let lr = T::lit(cfg.lr);
    let eps = T::lit(cfg.eps);
    let one = T::one();
    let it = value
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(m1.data_mut().iter_mut().zip(m2.data_mut().iter_mut()));
    for ((p, &g), (m, v)) in it {
        *m = b1 * *m + (one - b1) * g;
        *v = b2 * *v + (one - b2) * g * g;
        let mhat = *m / bc1;
        let vhat = *v / bc2;
        *p -= lr * mhat / (vhat.sqrt() + eps);
    }
}

/// Applies one optimizer step to every parameter in the store.
pub fn adam_step<T: Real>(
    store: &mut ParamStore<T>,
    grads: &Grads<T>,
    cfg: &AdamConfig,
) -> Result<(), NnError> {
    if grads.len() != store.len() {
        return Err(NnError::Shape(format!(
            "{} gradients for {} parameters",
            grads.len(),
            store.len()
        )));
    }
    for (i, g) in grads.values.iter().enumerate() {
        if g.shape() != store.values[i].shape() {
            return Err(NnError::Shape(format!("gradient for {}", store.names[i])));
        }
    }
    store.step += 1;
    let t = store.step;
    for i in 0..store.values.len() {
        adam_update(
            &mut store.values[i],
            &grads.values[i],
            &mut store.m1[i],
            &mut store.m2[i],
            cfg,
            t,
        );
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store() -> (ParamStore<f64>, ParamId) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut s = ParamStore::new();
        let id = s.add_normal("w", &[3, 2], 1.0, &mut rng).unwrap();
        (s, id)
    }

    #[test]
    fn duplicate_names_rejected() {
        let (mut s, _) = store();
        assert!(matches!(s.add_zeros("w", &[1]), Err(NnError::DuplicateParam(_))));
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let (mut s, id) = store();
        let before = s.get(id).clone();
        let g = s.zero_grads();
        adam_step(&mut s, &g, &AdamConfig::default()).unwrap();
        assert_eq!(s.get(id), &before);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        // m̂ = g, v̂ = g², so Δθ = −lr·g/(|g|+ε)
        let mut s = ParamStore::<f64>::new();
        let id = s.add("x", Tensor::from_vec(&[2], vec![1.0, -1.0]).unwrap()).unwrap();
        let mut g = s.zero_grads();
        g.get_mut(id).data_mut().copy_from_slice(&[0.5, -3.0]);
        let cfg = AdamConfig { lr: 0.01, beta1: 0.9, beta2: 0.96, eps: 1e-8 };
        adam_step(&mut s, &g, &cfg).unwrap();
        let want0 = 1.0 - 0.01 * 0.5 / (0.5 + 1e-8);
        let want1 = -1.0 + 0.01 * 3.0 / (3.0 + 1e-8);
        assert!((s.get(id).data()[0] - want0).abs() < 1e-12);
        assert!((s.get(id).data()[1] - want1).abs() < 1e-12);
    }

    #[test]
    fn identical_state_gives_identical_update() {
        let (a, id) = store();
        let mut b = a.clone();
        let mut a = a;
        let mut g = a.zero_grads();
        g.get_mut(id).data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = i as f64 - 2.5);
        adam_step(&mut a, &g, &AdamConfig::default()).unwrap();
        adam_step(&mut b, &g, &AdamConfig::default()).unwrap();
        assert_eq!(a.flatten(), b.flatten());
    }

    #[test]
    fn mismatched_gradients_rejected() {
        let (mut s, _) = store();
        let other = ParamStore::<f64>::new().zero_grads();
        assert!(adam_step(&mut s, &other, &AdamConfig::default()).is_err());
    }

    #[test]
    fn clip_scales_to_max_norm() {
        let (s, id) = store();
        let mut g = s.zero_grads();
        g.get_mut(id).fill(2.0);
        let before = g.clip_global_norm(1.0);
        assert!((before - (6.0f64 * 4.0).sqrt()).abs() < 1e-12);
        assert!((g.global_norm() - 1.0).abs() < 1e-12);
    }
}
