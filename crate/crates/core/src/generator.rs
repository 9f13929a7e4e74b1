//! Masked bidirectional transformer over code maps: training, BLANK identification,
//! confidence-ordered sampling with free-space suppression, infilling, denoising, and
//! copy-paste manipulation.

use std::f64::consts::FRAC_PI_2;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::codemap::{CodeMap, Rect};
use crate::io::FormatError;
use crate::nncore::{
    adam_step, cross_entropy_smoothed, softmax_rows, Affine, AdamConfig, BlockCache, BlockStack, Checkpoint, Grads,
    LayerNorm, NnError, ParamId, ParamStore, Real, Tensor, TensorF,
};
use crate::scenes::derive_seed;
use crate::vqvae::gumbel;

#[derive(Debug, thiserror::Error)]
pub enum GenError {
    #[error("code-map corpus is empty")]
    EmptyCorpus,
    #[error("degenerate blank set: every code is suppressed")]
    DegenerateBlankSet,
    #[error("code map geometry {got:?} does not match generator geometry {want:?}")]
    Geometry { got: (usize, usize), want: (usize, usize) },
    #[error("code {code} at cell {cell} is not below K = {k}")]
    CodeRange { code: u16, cell: usize, k: usize },
    #[error("rectangle {0:?} is out of bounds")]
    OutOfBounds(Rect),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("non-finite loss at iteration {0}")]
    NonFiniteLoss(u64),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Format(#[from] FormatError),
}

/// Number of tokens still masked after step `t` of `total`: `⌈n·cos(π/2 · t/T)⌉`.
pub fn mask_schedule(t: usize, total: usize, n_tokens: usize) -> usize {
    if t >= total {
        return 0;
    }
    let r = (FRAC_PI_2 * t as f64 / total as f64).cos();
    ((n_tokens as f64 * r).ceil() as usize).min(n_tokens)
}

/// Architecture of the token model.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorConfig {
    pub h: usize,
    pub w: usize,
    /// Codebook size; the mask token is index `k`.
    pub k: usize,
    pub n_blocks: usize,
    pub dim: usize,
    pub n_heads: usize,
}

impl GeneratorConfig {
    /// 6 blocks of width 128 over a 16×16 map of 128 codes.
    pub fn desk() -> Self {
        Self { h: 16, w: 16, k: 128, n_blocks: 6, dim: 128, n_heads: 4 }
    }

    pub fn n_tokens(&self) -> usize {
        self.h * self.w
    }

    pub fn mask_token(&self) -> u16 {
        self.k as u16
    }
}

/// Sampling settings.
#[derive(Clone, Debug, PartialEq)]
pub struct GenConfig {
    /// Total refinement steps `T`.
    pub steps: usize,
    /// BLANK codes are suppressed for steps `1..=suppress_steps`.
    pub suppress_steps: usize,
    /// Initial temperature; step `t` samples at `τ0·(1 − t/T)`.
    pub temperature: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self { steps: 12, suppress_steps: 6, temperature: 1.0, seed: 0 }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<(), GenError> {
        if self.steps == 0 || self.suppress_steps > self.steps {
            return Err(GenError::Config(format!(
                "need 0 ≤ S ≤ T and T ≥ 1, got S = {}, T = {}",
                self.suppress_steps, self.steps
            )));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(GenError::Config(format!("temperature {} must be ≥ 0", self.temperature)));
        }
        Ok(())
    }

    fn temperature_at(&self, t: usize) -> f64 {
        self.temperature * (1.0 - t as f64 / self.steps as f64)
    }
}

/// Codes designated as free space, with the corpus frequency table they came from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlankSet {
    /// Sorted by descending frequency, ties by index.
    pub codes: Vec<usize>,
    pub frequencies: Vec<u64>,
}

impl BlankSet {
    pub fn contains(&self, code: usize) -> bool {
        self.codes.contains(&code)
    }

    pub fn mask(&self, k: usize) -> Vec<bool> {
        let mut m = vec![false; k];
        for &c in &self.codes {
            if c < k {
                m[c] = true;
            }
        }
        m
    }

    /// Fraction of entries of `map` that are BLANK codes.
    pub fn fraction_in(&self, map: &CodeMap) -> f64 {
        let k = self.frequencies.len();
        let m = self.mask(k);
        let n = map.entries.iter().filter(|&&e| (e as usize) < k && m[e as usize]).count();
        n as f64 / map.len().max(1) as f64
    }
}

/// Smallest most-frequent prefix of codes whose share of all entries reaches `coverage`.
pub fn identify_blank(corpus: &[CodeMap], k: usize, coverage: f64) -> Result<BlankSet, GenError> {
    if !(coverage > 0.0 && coverage < 1.0) {
        return Err(GenError::Config(format!("coverage {coverage} must lie in (0, 1)")));
    }
    let mut frequencies = vec![0u64; k];
    for map in corpus {
        for (cell, &e) in map.entries.iter().enumerate() {
            let c = e as usize;
            if c >= k {
                return Err(GenError::CodeRange { code: e, cell, k });
            }
            frequencies[c] += 1;
        }
    }
    let total: u64 = frequencies.iter().sum();
    if total == 0 {
        return Err(GenError::EmptyCorpus);
    }
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| frequencies[b].cmp(&frequencies[a]).then(a.cmp(&b)));
    let mut codes = Vec::new();
    let mut cum = 0u64;
    for c in order {
        codes.push(c);
        cum += frequencies[c];
        if cum as f64 >= coverage * total as f64 {
            break;
        }
    }
    Ok(BlankSet { codes, frequencies })
}

/// Token embedding, learned positions, a block stack, and a `K`-way head.
#[derive(Clone, Debug)]
pub struct Generator<T: Real = f32> {
    pub config: GeneratorConfig,
    pub params: ParamStore<T>,
    tok: ParamId,
    pos: ParamId,
    stack: BlockStack,
    ln: LayerNorm,
    head: Affine,
}

struct GenCache<T> {
    blocks: Vec<BlockCache<T>>,
    ln: crate::nncore::layers::LayerNormCache<T>,
    normed: Tensor<T>,
}

impl<T: Real> Generator<T> {
    pub fn new(config: GeneratorConfig, seed: u64) -> Result<Self, GenError> {
        if config.k < 2 || config.k >= u16::MAX as usize || config.h == 0 || config.w == 0 {
            return Err(GenError::Config(format!("K = {}, map {}×{}", config.k, config.h, config.w)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let tok = params.add_normal("gen.tok", &[config.k + 1, config.dim], 0.02, &mut rng)?;
        let pos = params.add_normal("gen.pos", &[config.n_tokens(), config.dim], 0.02, &mut rng)?;
        let stack = BlockStack::new(&mut params, "gen.blocks", config.n_blocks, config.dim, config.n_heads, &mut rng)?;
        let ln = LayerNorm::new(&mut params, "gen.ln", config.dim)?;
        let head = Affine::new(&mut params, "gen.head", config.dim, config.k, 0.02, &mut rng)?;
        Ok(Self { config, params, tok, pos, stack, ln, head })
    }

    fn check_map(&self, map: &CodeMap, allow_mask: bool) -> Result<(), GenError> {
        let c = &self.config;
        if (map.h, map.w) != (c.h, c.w) {
            return Err(GenError::Geometry { got: (map.h, map.w), want: (c.h, c.w) });
        }
        let limit = if allow_mask { c.k } else { c.k - 1 };
        if let Some((cell, &code)) = map.entries.iter().enumerate().find(|(_, &e)| e as usize > limit) {
            return Err(GenError::CodeRange { code, cell, k: c.k });
        }
        Ok(())
    }

    fn forward_cached(&self, map: &CodeMap) -> Result<(Tensor<T>, GenCache<T>), GenError> {
        self.check_map(map, true)?;
        let dim = self.config.dim;
        let tok = self.params.get(self.tok);
        let mut x = self.params.get(self.pos).clone();
        for (i, &e) in map.entries.iter().enumerate() {
            for (d, &v) in x.row_mut(i).iter_mut().zip(tok.row(e as usize)) {
                *d += v;
            }
        }
        debug_assert_eq!(x.cols(), dim);
        let (h, blocks) = self.stack.forward(&self.params, &x, None)?;
        let (normed, ln) = self.ln.forward(&self.params, &h)?;
        let logits = self.head.forward(&self.params, &normed)?;
        Ok((logits, GenCache { blocks, ln, normed }))
    }

    /// `(h·w) × K` logits for a map whose entries may include the mask token.
    pub fn forward(&self, map: &CodeMap) -> Result<Tensor<T>, GenError> {
        Ok(self.forward_cached(map)?.0)
    }

    fn backward(&self, map: &CodeMap, cache: &GenCache<T>, dlogits: &Tensor<T>, grads: &mut Grads<T>) {
        let dnormed = self.head.backward(&self.params, &cache.normed, dlogits, grads);
        let dh = self.ln.backward(&self.params, &cache.ln, &dnormed, grads);
        let dx = self.stack.backward(&self.params, &cache.blocks, &dh, grads);
        grads.get_mut(self.pos).add_assign(&dx);
        let dtok = grads.get_mut(self.tok);
        for (i, &e) in map.entries.iter().enumerate() {
            for (d, &v) in dtok.row_mut(e as usize).iter_mut().zip(dx.row(i)) {
                *d += v;
            }
        }
    }

    /// Masked cross-entropy of one corrupted map and its gradients.
    pub fn loss_and_grads(
        &self,
        input: &CodeMap,
        target: &CodeMap,
        smoothing: f64,
        grads: &mut Grads<T>,
    ) -> Result<f64, GenError> {
        self.check_map(target, false)?;
        let mask_token = self.config.mask_token();
        let mask: Vec<bool> = input.entries.iter().map(|&e| e == mask_token).collect();
        let targets: Vec<usize> = target.entries.iter().map(|&e| e as usize).collect();
        let (logits, cache) = self.forward_cached(input)?;
        let (loss, dlogits) = cross_entropy_smoothed(&logits, &targets, &mask, smoothing)?;
        self.backward(input, &cache, &dlogits, grads);
        Ok(loss.as_f64())
    }
}

/// Committed tokens of one sampling step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepTrace {
    pub step: usize,
    pub temperature: f64,
    /// `(cell, code)` pairs fixed at this step.
    pub committed: Vec<(usize, u16)>,
    pub suppressed: bool,
}

impl Generator<f32> {
    /// Fills every mask-token cell of `condition` (or an all-mask canvas) in `cfg.steps`
    /// refinement steps. Non-mask cells of the condition are never changed.
    pub fn sample(&self, cfg: &GenConfig, blanks: &BlankSet, condition: Option<&CodeMap>) -> Result<CodeMap, GenError> {
        Ok(self.sample_traced(cfg, blanks, condition)?.0)
    }

    /// [`Self::sample`] plus the per-step commit log.
    pub fn sample_traced(
        &self,
        cfg: &GenConfig,
        blanks: &BlankSet,
        condition: Option<&CodeMap>,
    ) -> Result<(CodeMap, Vec<StepTrace>), GenError> {
        cfg.validate()?;
        let c = &self.config;
        let mask_token = c.mask_token();
        let mut canvas = match condition {
            Some(m) => {
                self.check_map(m, true)?;
                m.clone()
            }
            None => CodeMap::filled(c.h, c.w, mask_token),
        };
        let blank_mask = blanks.mask(c.k);
        if cfg.suppress_steps > 0 && blank_mask.iter().all(|&b| b) {
            return Err(GenError::DegenerateBlankSet);
        }
        let n0 = canvas.masked_count(mask_token);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut trace = Vec::with_capacity(cfg.steps);
        for t in 1..=cfg.steps {
            let tau = cfg.temperature_at(t);
            let suppressed = t <= cfg.suppress_steps;
            let masked: Vec<usize> = (0..canvas.len()).filter(|&i| canvas.entries[i] == mask_token).collect();
            let mut step = StepTrace { step: t, temperature: tau, committed: Vec::new(), suppressed };
            if masked.is_empty() {
                trace.push(step);
                continue;
            }
            let logits = self.forward(&canvas)?;
            let mut candidates = Vec::with_capacity(masked.len());
            for &cell in &masked {
                let row: Vec<f64> = logits.row(cell).iter().map(|&v| v as f64).collect();
                let allowed = |k: usize| !(suppressed && blank_mask[k]);
                let (code, prob) = sample_token(&row, tau, allowed, &mut rng);
                let confidence = prob + tau * gumbel(&mut rng);
                candidates.push((cell, code, confidence));
            }
            let keep_masked = mask_schedule(t, cfg.steps, n0).min(masked.len());
            let n_commit = masked.len() - keep_masked;
            candidates.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)));
            for &(cell, code, _) in candidates.iter().take(n_commit) {
                canvas.entries[cell] = code as u16;
                step.committed.push((cell, code as u16));
            }
            trace.push(step);
        }
        debug_assert!(canvas.is_complete(mask_token));
        Ok((canvas, trace))
    }

    /// Re-generates random rectangles covering about `mask_fraction` of the map, `rounds`
    /// times. Returns the final map and the rectangles in order.
    pub fn denoise_traced(
        &self,
        map: &CodeMap,
        rounds: usize,
        mask_fraction: f64,
        cfg: &GenConfig,
        blanks: &BlankSet,
    ) -> Result<(CodeMap, Vec<Rect>), GenError> {
        self.check_map(map, false)?;
        if !(mask_fraction > 0.0 && mask_fraction < 1.0) {
            return Err(GenError::Config(format!("mask fraction {mask_fraction} must lie in (0, 1)")));
        }
        let (h, w) = (map.h, map.w);
        let side = mask_fraction.sqrt();
        let rh = ((h as f64 * side).round() as usize).clamp(1, h);
        let rw = ((w as f64 * side).round() as usize).clamp(1, w);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut current = map.clone();
        let mut rects = Vec::with_capacity(rounds);
        for round in 0..rounds {
            let rect = Rect::new(rng.random_range(0..=h - rh), rng.random_range(0..=w - rw), rh, rw);
            for (r, col) in rect.cells() {
                current.set(r, col, self.config.mask_token());
            }
            let round_cfg = GenConfig { seed: derive_seed(cfg.seed, round as u64 + 1), ..cfg.clone() };
            current = self.sample(&round_cfg, blanks, Some(&current))?;
            rects.push(rect);
        }
        Ok((current, rects))
    }

    pub fn denoise(
        &self,
        map: &CodeMap,
        rounds: usize,
        mask_fraction: f64,
        cfg: &GenConfig,
        blanks: &BlankSet,
    ) -> Result<CodeMap, GenError> {
        Ok(self.denoise_traced(map, rounds, mask_fraction, cfg, blanks)?.0)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let c = &self.config;
        let mut ck = Checkpoint::new();
        ck.push(
            "meta.generator",
            TensorF::from_vec(&[6], [c.h, c.w, c.k, c.n_blocks, c.dim, c.n_heads].iter().map(|&v| v as f32).collect())
                .expect("6 values"),
        );
        ck.push_store("", &self.params);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, GenError> {
        let m: Vec<usize> = ck.require("meta.generator")?.data().iter().map(|&v| v as usize).collect();
        if m.len() != 6 {
            return Err(FormatError::Invalid("meta.generator must hold 6 values".into()).into());
        }
        let config = GeneratorConfig { h: m[0], w: m[1], k: m[2], n_blocks: m[3], dim: m[4], n_heads: m[5] };
        let mut g = Self::new(config, 0)?;
        ck.load_store("", &mut g.params)?;
        Ok(g)
    }
}

/// Draws a code from `softmax(logits/τ)` restricted to `allowed` (argmax when `τ = 0`).
/// Returns the code and its untempered probability under the restricted distribution.
fn sample_token(logits: &[f64], tau: f64, allowed: impl Fn(usize) -> bool, rng: &mut impl Rng) -> (usize, f64) {
    let masked: Vec<f64> = logits.iter().enumerate().map(|(k, &l)| if allowed(k) { l } else { f64::NEG_INFINITY }).collect();
    let mut probs = masked.clone();
    softmax_rows(&mut probs, logits.len());
    let code = if tau <= 0.0 {
        // first maximum wins
        let mut best = 0;
        for k in 1..masked.len() {
            if masked[k] > masked[best] {
                best = k;
            }
        }
        best
    } else {
        let mut tempered: Vec<f64> = masked.iter().map(|&l| l / tau).collect();
        softmax_rows(&mut tempered, logits.len());
        let u: f64 = rng.random();
        let mut cum = 0.0;
        let mut pick = None;
        for (k, &p) in tempered.iter().enumerate() {
            if p > 0.0 {
                cum += p;
                pick = Some(k);
                if u < cum {
                    break;
                }
            }
        }
        pick.expect("at least one allowed code")
    };
    (code, probs[code])
}

/// Replaces `dst[dst_origin + r]` with `src[src_rect + r]` for every cell of the rectangle.
pub fn paste_region(dst: &CodeMap, src: &CodeMap, src_rect: Rect, dst_origin: (usize, usize)) -> Result<CodeMap, GenError> {
    if !src_rect.fits(src.h, src.w) {
        return Err(GenError::OutOfBounds(src_rect));
    }
    let dst_rect = Rect::new(dst_origin.0, dst_origin.1, src_rect.height, src_rect.width);
    if !dst_rect.fits(dst.h, dst.w) {
        return Err(GenError::OutOfBounds(dst_rect));
    }
    let mut out = dst.clone();
    for (r, c) in src_rect.cells() {
        out.set(r - src_rect.row + dst_rect.row, c - src_rect.col + dst_rect.col, src.get(r, c));
    }
    Ok(out)
}

/// Optimization settings for [`train_masked`].
#[derive(Clone, Debug, PartialEq)]
pub struct GenTrainConfig {
    pub iterations: u64,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub label_smoothing: f64,
    pub grad_clip: Option<f64>,
    pub seed: u64,
}

impl Default for GenTrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            batch_size: 4,
            adam: AdamConfig { lr: 1e-4, beta1: 0.9, beta2: 0.96, eps: 1e-8 },
            label_smoothing: 0.1,
            grad_clip: Some(1.0),
            seed: 0,
        }
    }
}

/// Replaces a uniformly chosen schedule fraction of cells with the mask token. A draw
/// that would mask nothing is rejected and redrawn.
pub fn random_masking(map: &CodeMap, mask_token: u16, rng: &mut impl Rng) -> CodeMap {
    let n = map.len();
    let count = loop {
        let r: f64 = rng.random();
        let c = ((n as f64 * (FRAC_PI_2 * r).cos()).ceil() as usize).min(n);
        if c > 0 {
            break c;
        }
    };
    let mut cells: Vec<usize> = (0..n).collect();
    for i in 0..count {
        let j = rng.random_range(i..n);
        cells.swap(i, j);
    }
    let mut out = map.clone();
    for &cell in &cells[..count] {
        out.entries[cell] = mask_token;
    }
    out
}

/// Stepwise masked-token trainer.
pub struct GenTrainer {
    model: Generator<f32>,
    cfg: GenTrainConfig,
    rng: ChaCha8Rng,
    iter: u64,
    losses: Vec<f64>,
}

impl GenTrainer {
    pub fn new(model_cfg: GeneratorConfig, cfg: GenTrainConfig) -> Result<Self, GenError> {
        if cfg.iterations == 0 || cfg.batch_size == 0 || !(cfg.adam.lr > 0.0) {
            return Err(GenError::Config("iterations, batch size and learning rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&cfg.label_smoothing) {
            return Err(GenError::Config(format!("label smoothing {} must lie in [0, 1)", cfg.label_smoothing)));
        }
        let model = Generator::new(model_cfg, cfg.seed)?;
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6E6E_0001);
        Ok(Self { model, cfg, rng, iter: 0, losses: Vec::new() })
    }

    pub fn model(&self) -> &Generator<f32> {
        &self.model
    }

    pub fn iteration(&self) -> u64 {
        self.iter
    }

    /// One optimizer step; returns the mean masked cross-entropy of the batch.
    pub fn step(&mut self, corpus: &[CodeMap]) -> Result<f64, GenError> {
        if corpus.is_empty() {
            return Err(GenError::EmptyCorpus);
        }
        self.iter += 1;
        let mut grads = self.model.params.zero_grads();
        let mut total = 0.0;
        let mask_token = self.model.config.mask_token();
        for _ in 0..self.cfg.batch_size {
            let target = &corpus[self.rng.random_range(0..corpus.len())];
            let input = random_masking(target, mask_token, &mut self.rng);
            total += self.model.loss_and_grads(&input, target, self.cfg.label_smoothing, &mut grads)?;
        }
        let loss = total / self.cfg.batch_size as f64;
        if !loss.is_finite() {
            return Err(GenError::NonFiniteLoss(self.iter));
        }
        grads.scale(1.0 / self.cfg.batch_size as f32);
        if let Some(clip) = self.cfg.grad_clip {
            grads.clip_global_norm(clip);
        }
        adam_step(&mut self.model.params, &grads, &self.cfg.adam)?;
        self.losses.push(loss);
        Ok(loss)
    }

    pub fn losses(&self) -> &[f64] {
        &self.losses
    }

    pub fn finish(self) -> (Generator<f32>, Vec<f64>) {
        (self.model, self.losses)
    }
}

/// Trains a fresh generator on complete code maps.
pub fn train_masked(
    corpus: &[CodeMap],
    model_cfg: &GeneratorConfig,
    cfg: &GenTrainConfig,
) -> Result<(Generator<f32>, Vec<f64>), GenError> {
    if corpus.is_empty() {
        return Err(GenError::EmptyCorpus);
    }
    let mut trainer = GenTrainer::new(model_cfg.clone(), cfg.clone())?;
    for map in corpus {
        trainer.model.check_map(map, false)?;
    }
    for _ in 0..cfg.iterations {
        trainer.step(corpus)?;
    }
    Ok(trainer.finish())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> GeneratorConfig {
        GeneratorConfig { h: 4, w: 4, k: 6, n_blocks: 1, dim: 8, n_heads: 2 }
    }

    fn blank0() -> BlankSet {
        BlankSet { codes: vec![0], frequencies: vec![10, 1, 1, 1, 1, 1] }
    }

    #[test]
    fn schedule_values() {
        assert_eq!(mask_schedule(0, 12, 256), 256);
        assert_eq!(mask_schedule(12, 12, 256), 0);
        assert_eq!(mask_schedule(6, 12, 256), 182);
        let counts: Vec<usize> = (0..=12).map(|t| mask_schedule(t, 12, 256)).collect();
        assert!(counts.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn blank_identification() {
        let mut entries = vec![3u16; 9];
        entries.push(1);
        let corpus = vec![CodeMap::new(2, 5, entries).unwrap()];
        assert_eq!(identify_blank(&corpus, 8, 0.5).unwrap().codes, vec![3]);

        let uniform = vec![CodeMap::new(1, 10, (0..10).collect()).unwrap()];
        assert_eq!(identify_blank(&uniform, 10, 0.35).unwrap().codes, vec![0, 1, 2, 3]);
        assert_eq!(identify_blank(&uniform, 10, 0.35).unwrap(), identify_blank(&uniform, 10, 0.35).unwrap());
        assert!(matches!(identify_blank(&[], 10, 0.5), Err(GenError::EmptyCorpus)));
    }

    #[test]
    fn full_condition_is_returned_unchanged() {
        let g = Generator::<f32>::new(tiny(), 1).unwrap();
        let cond = CodeMap::new(4, 4, (0..16).map(|i| (i % 6) as u16).collect()).unwrap();
        let out = g.sample(&GenConfig::default(), &blank0(), Some(&cond)).unwrap();
        assert_eq!(out, cond);
    }

    #[test]
    fn sampling_is_deterministic_and_complete() {
        let g = Generator::<f32>::new(tiny(), 2).unwrap();
        let cfg = GenConfig { seed: 5, ..GenConfig::default() };
        let a = g.sample(&cfg, &blank0(), None).unwrap();
        assert_eq!(a, g.sample(&cfg, &blank0(), None).unwrap());
        assert!(a.is_complete(6));
    }

    #[test]
    fn degenerate_blank_set_errors() {
        let g = Generator::<f32>::new(tiny(), 2).unwrap();
        let all = BlankSet { codes: (0..6).collect(), frequencies: vec![1; 6] };
        assert!(matches!(g.sample(&GenConfig::default(), &all, None), Err(GenError::DegenerateBlankSet)));
    }

    #[test]
    fn suppressed_steps_commit_no_blanks() {
        let g = Generator::<f32>::new(tiny(), 3).unwrap();
        let blanks = BlankSet { codes: vec![0, 1, 2], frequencies: vec![1; 6] };
        for seed in 0..5 {
            let cfg = GenConfig { seed, ..GenConfig::default() };
            let (_, trace) = g.sample_traced(&cfg, &blanks, None).unwrap();
            assert_eq!(trace.len(), 12);
            for s in trace.iter().filter(|s| s.suppressed) {
                assert!(s.committed.iter().all(|&(_, c)| !blanks.contains(c as usize)));
            }
        }
    }

    #[test]
    fn paste_semantics() {
        let a = CodeMap::new(3, 3, (0..9).collect()).unwrap();
        let b = CodeMap::filled(3, 3, 7);
        let r = Rect::new(0, 0, 2, 2);
        assert_eq!(paste_region(&a, &a, r, (0, 0)).unwrap(), a);
        let p = paste_region(&b, &a, r, (1, 1)).unwrap();
        assert_eq!(p.entries, vec![7, 7, 7, 7, 0, 1, 7, 3, 4]);
        assert!(matches!(paste_region(&b, &a, r, (2, 2)), Err(GenError::OutOfBounds(_))));
    }

    #[test]
    fn denoise_zero_rounds_is_identity() {
        let g = Generator::<f32>::new(tiny(), 4).unwrap();
        let m = CodeMap::new(4, 4, (0..16).map(|i| (i % 6) as u16).collect()).unwrap();
        assert_eq!(g.denoise(&m, 0, 0.25, &GenConfig::default(), &blank0()).unwrap(), m);
        let (out, rects) = g.denoise_traced(&m, 2, 0.25, &GenConfig::default(), &blank0()).unwrap();
        for r in 0..4 {
            for c in 0..4 {
                if !rects.iter().any(|rect| rect.contains(r, c)) {
                    assert_eq!(out.get(r, c), m.get(r, c));
                }
            }
        }
    }

    #[test]
    fn masking_never_empty() {
        let m = CodeMap::filled(2, 2, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            assert!(random_masking(&m, 6, &mut rng).masked_count(6) > 0);
        }
    }

    #[test]
    fn training_lowers_loss() {
        let corpus: Vec<CodeMap> =
            (0..4).map(|s| CodeMap::new(4, 4, (0..16).map(|i| ((i + s) % 3) as u16).collect()).unwrap()).collect();
        let cfg = GenTrainConfig {
            iterations: 300,
            adam: AdamConfig { lr: 3e-3, ..AdamConfig::default() },
            ..GenTrainConfig::default()
        };
        let (_, losses) = train_masked(&corpus, &tiny(), &cfg).unwrap();
        let first: f64 = losses[..30].iter().sum::<f64>() / 30.0;
        let last: f64 = losses[270..].iter().sum::<f64>() / 30.0;
        assert!(last < first, "{first} -> {last}");
    }
}
