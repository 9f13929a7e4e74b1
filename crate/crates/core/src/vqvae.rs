//! The LiDAR VQ-VAE: dense and sparse encoders sharing one codebook and one dense
//! decoder, trained jointly so that sparse scans decode into dense ones.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::codebook::{
    code_gradient, init_from_bank, quantize, reinit_dead_codes, vq_loss_terms, warmup_alpha, Codebook, CodebookError,
    MemoryBank, QuantizeResult, ReinitConfig, DEAD_WINDOW,
};
use crate::codemap::CodeMap;
use crate::io::FormatError;
use crate::nncore::{
    adam_step, bce_with_logits_weighted, patch::PATCH, Affine, AdamConfig, BlockCache, BlockStack, Checkpoint, Grads,
    LayerNorm, NnError, ParamId, ParamStore, PatchEmbed, PatchUnembed, Real, Tensor, TensorF,
};
use crate::scenes::PairedSample;
use crate::voxel::{voxelize, GridConfig, OccupancyGrid};

#[derive(Debug, thiserror::Error)]
pub enum VqVaeError {
    #[error("grid geometry mismatch: {0}")]
    Geometry(String),
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("non-finite loss at iteration {iter} (bce {bce}, codebook {codebook}, commitment {commitment})")]
    NonFiniteLoss { iter: u64, bce: f64, codebook: f64, commitment: f64 },
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Codebook(#[from] CodebookError),
    #[error(transparent)]
    Format(#[from] FormatError),
}

/// Architecture and codebook geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct VqVaeConfig {
    pub grid: GridConfig,
    pub n_blocks: usize,
    pub dim: usize,
    pub n_heads: usize,
    pub codebook_size: usize,
    pub code_dim: usize,
    pub bank_capacity: usize,
}

impl VqVaeConfig {
    /// 128×128×16 grids, 4 blocks of width 64, K = 128 codes of width 64.
    pub fn desk() -> Self {
        Self {
            grid: GridConfig::desk(),
            n_blocks: 4,
            dim: 64,
            n_heads: 4,
            codebook_size: 128,
            code_dim: 64,
            bank_capacity: 8192,
        }
    }

    pub fn validate(&self) -> Result<(), VqVaeError> {
        if self.dim == 0 || self.n_heads == 0 || self.dim % self.n_heads != 0 {
            return Err(VqVaeError::Config(format!("dim {} vs {} heads", self.dim, self.n_heads)));
        }
        if self.codebook_size < 2 || self.codebook_size >= u16::MAX as usize || self.code_dim == 0 {
            return Err(VqVaeError::Config(format!("codebook {}×{}", self.codebook_size, self.code_dim)));
        }
        Ok(())
    }
}

/// Which encoder reads the input grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Dense,
    Sparse,
}

#[derive(Clone, Debug)]
struct Encoder {
    embed: PatchEmbed,
    stack: BlockStack,
    ln: LayerNorm,
    proj: Affine,
}

struct EncoderCache<T> {
    patches: Tensor<T>,
    blocks: Vec<BlockCache<T>>,
    ln: crate::nncore::layers::LayerNormCache<T>,
    normed: Tensor<T>,
}

impl Encoder {
    fn new<T: Real>(ps: &mut ParamStore<T>, name: &str, cfg: &VqVaeConfig, rng: &mut impl Rng) -> Result<Self, NnError> {
        let g = &cfg.grid;
        Ok(Self {
            embed: PatchEmbed::new(ps, &format!("{name}.embed"), g.h(), g.w(), g.c(), cfg.dim, rng)?,
            stack: BlockStack::new(ps, &format!("{name}.blocks"), cfg.n_blocks, cfg.dim, cfg.n_heads, rng)?,
            ln: LayerNorm::new(ps, &format!("{name}.ln"), cfg.dim)?,
            proj: Affine::new(ps, &format!("{name}.proj"), cfg.dim, cfg.code_dim, (1.0 / cfg.dim as f64).sqrt(), rng)?,
        })
    }

    fn forward<T: Real>(&self, ps: &ParamStore<T>, grid: &OccupancyGrid) -> Result<(Tensor<T>, EncoderCache<T>), NnError> {
        let (tokens, patches) = self.embed.forward(ps, grid)?;
        let (h, blocks) = self.stack.forward(ps, &tokens, None)?;
        let (normed, ln) = self.ln.forward(ps, &h)?;
        let z = self.proj.forward(ps, &normed)?;
        Ok((z, EncoderCache { patches, blocks, ln, normed }))
    }

    fn backward<T: Real>(&self, ps: &ParamStore<T>, cache: &EncoderCache<T>, dz: &Tensor<T>, grads: &mut Grads<T>) {
        let dnormed = self.proj.backward(ps, &cache.normed, dz, grads);
        let dh = self.ln.backward(ps, &cache.ln, &dnormed, grads);
        let dtokens = self.stack.backward(ps, &cache.blocks, &dh, grads);
        self.embed.backward(&cache.patches, &dtokens, grads);
    }
}

#[derive(Clone, Debug)]
struct Decoder {
    proj: Affine,
    pos: ParamId,
    stack: BlockStack,
    ln: LayerNorm,
    unembed: PatchUnembed,
}

struct DecoderCache<T> {
    input: Tensor<T>,
    blocks: Vec<BlockCache<T>>,
    ln: crate::nncore::layers::LayerNormCache<T>,
    normed: Tensor<T>,
}

impl Decoder {
    fn new<T: Real>(ps: &mut ParamStore<T>, cfg: &VqVaeConfig, rng: &mut impl Rng) -> Result<Self, NnError> {
        let g = &cfg.grid;
        let n_tokens = (g.h() / PATCH) * (g.w() / PATCH);
        Ok(Self {
            proj: Affine::new(ps, "decoder.proj", cfg.code_dim, cfg.dim, (1.0 / cfg.code_dim as f64).sqrt(), rng)?,
            pos: ps.add_normal("decoder.pos", &[n_tokens, cfg.dim], 0.02, rng)?,
            stack: BlockStack::new(ps, "decoder.blocks", cfg.n_blocks, cfg.dim, cfg.n_heads, rng)?,
            ln: LayerNorm::new(ps, "decoder.ln", cfg.dim)?,
            unembed: PatchUnembed::new(ps, "decoder.unembed", g.h(), g.w(), g.c(), cfg.dim, rng)?,
        })
    }

    fn forward<T: Real>(&self, ps: &ParamStore<T>, zin: &Tensor<T>) -> Result<(Tensor<T>, DecoderCache<T>), NnError> {
        if zin.rows() != self.unembed.n_tokens() || zin.cols() != self.proj.in_dim {
            return Err(NnError::Shape(format!(
                "decoder expects {}×{}, got {:?}",
                self.unembed.n_tokens(),
                self.proj.in_dim,
                zin.shape()
            )));
        }
        let mut tokens = self.proj.forward(ps, zin)?;
        tokens.add_assign(ps.get(self.pos));
        let (h, blocks) = self.stack.forward(ps, &tokens, None)?;
        let (normed, ln) = self.ln.forward(ps, &h)?;
        let logits = self.unembed.forward(ps, &normed)?;
        Ok((logits, DecoderCache { input: zin.clone(), blocks, ln, normed }))
    }

    fn backward<T: Real>(
        &self,
        ps: &ParamStore<T>,
        cache: &DecoderCache<T>,
        dlogits: &Tensor<T>,
        grads: &mut Grads<T>,
    ) -> Result<Tensor<T>, NnError> {
        let dnormed = self.unembed.backward(ps, &cache.normed, dlogits, grads)?;
        let dh = self.ln.backward(ps, &cache.ln, &dnormed, grads);
        let dtokens = self.stack.backward(ps, &cache.blocks, &dh, grads);
        grads.get_mut(self.pos).add_assign(&dtokens);
        Ok(self.proj.backward(ps, &cache.input, &dtokens, grads))
    }
}

/// How logits become occupancy bits.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Binarize {
    /// `logit > 0`.
    Threshold,
    /// `logit + g₁ − g₀ > 0` with per-voxel Gumbel noise, i.e. a hard sample from
    /// the two-class Gumbel-softmax. The sign test does not depend on temperature.
    Gumbel { temperature: f64, seed: u64 },
}

/// Uniform sample from the open interval `(0, 1)`.
pub(crate) fn open_unit(rng: &mut impl Rng) -> f64 {
    ((rng.random::<u64>() >> 11) as f64 + 0.5) / (1u64 << 53) as f64
}

pub(crate) fn gumbel(rng: &mut impl Rng) -> f64 {
    -(-open_unit(rng).ln()).ln()
}

/// Turns an `H×W×C` logit grid into occupancy.
pub fn binarize<T: Real>(logits: &Tensor<T>, cfg: &GridConfig, mode: Binarize) -> Result<OccupancyGrid, VqVaeError> {
    if logits.len() != cfg.voxel_count() {
        return Err(VqVaeError::Geometry(format!("{} logits for {} voxels", logits.len(), cfg.voxel_count())));
    }
    let bits = match mode {
        Binarize::Threshold => logits.data().iter().map(|&l| l > T::zero()).collect(),
        Binarize::Gumbel { temperature, seed } => {
            if !(temperature > 0.0) {
                return Err(VqVaeError::Config(format!("gumbel temperature {temperature} must be positive")));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            logits
                .data()
                .iter()
                .map(|&l| {
                    let (g1, g0) = (gumbel(&mut rng), gumbel(&mut rng));
                    (l.as_f64() + g1 - g0) / temperature > 0.0
                })
                .collect()
        }
    };
    OccupancyGrid::from_bits(cfg, bits).map_err(|e| VqVaeError::Geometry(e.to_string()))
}

/// Per-branch loss terms. `commitment` is already scaled by β.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub bce: f64,
    pub codebook: f64,
    pub commitment: f64,
}

impl LossBreakdown {
    pub fn total(&self) -> f64 {
        self.bce + self.codebook + self.commitment
    }

    fn is_finite(&self) -> bool {
        self.bce.is_finite() && self.codebook.is_finite() && self.commitment.is_finite()
    }
}

/// Output of [`VqVaeModel::reconstruct`].
#[derive(Clone, Debug)]
pub struct Reconstruction<T = f32> {
    pub logits: Tensor<T>,
    pub codes: CodeMap,
    pub losses: LossBreakdown,
}

/// Options for one differentiable pass through a branch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PassOptions {
    /// Warmup weight on the quantized embedding; `0` feeds the decoder `z`, `1` feeds `ẑ`.
    pub alpha: f64,
    /// Commitment weight β.
    pub commitment: f64,
    pub pos_weight: f64,
}

/// Per-pass result of [`VqVaeModel::forward_backward`].
#[derive(Clone, Debug)]
pub struct PassOutput<T> {
    pub losses: LossBreakdown,
    pub indices: Vec<usize>,
    pub z: Tensor<T>,
    pub logits: Tensor<T>,
}

/// Extra loss on the decoded logits (for example a perceptual term from a frozen
/// detector). Returns the loss and its gradient with respect to the logits.
pub trait FeatureLoss {
    fn loss(&self, logits: &TensorF, target: &OccupancyGrid) -> (f64, TensorF);
}

/// Dense encoder, sparse encoder, shared codebook, dense decoder.
#[derive(Clone, Debug)]
pub struct VqVaeModel<T: Real = f32> {
    pub config: VqVaeConfig,
    pub params: ParamStore<T>,
    pub codebook: Codebook<T>,
    dense: Encoder,
    sparse: Encoder,
    decoder: Decoder,
}

impl<T: Real> VqVaeModel<T> {
    /// Sets every output logit bias to `ln(p / (1 − p))`.
    pub fn set_output_prior(&mut self, p: f64) {
        let p = p.clamp(1e-6, 1.0 - 1e-6);
        let b = T::lit((p / (1.0 - p)).ln());
        self.params.get_mut(self.decoder.unembed.proj.b).data_mut().fill(b);
    }

    /// Fresh model; codes start as `N(0, 1)` draws.
    pub fn new(config: VqVaeConfig, seed: u64) -> Result<Self, VqVaeError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let dense = Encoder::new(&mut params, "dense_encoder", &config, &mut rng)?;
        let sparse = Encoder::new(&mut params, "sparse_encoder", &config, &mut rng)?;
        let decoder = Decoder::new(&mut params, &config, &mut rng)?;
        let codebook = Codebook::random(config.codebook_size, config.code_dim, 1.0, &mut rng)?;
        Ok(Self { config, params, codebook, dense, sparse, decoder })
    }

    /// Same model in another precision.
    pub fn cast<U: Real>(&self) -> VqVaeModel<U> {
        let mut codebook = Codebook::new(self.codebook.codes().cast()).expect("codes already valid");
        codebook.set_usage(self.codebook.last_used().to_vec(), self.codebook.ever_used().to_vec());
        VqVaeModel {
            config: self.config.clone(),
            params: self.params.cast(),
            codebook,
            dense: self.dense.clone(),
            sparse: self.sparse.clone(),
            decoder: self.decoder.clone(),
        }
    }

    fn encoder(&self, branch: Branch) -> &Encoder {
        match branch {
            Branch::Dense => &self.dense,
            Branch::Sparse => &self.sparse,
        }
    }

    /// Parameter names owned by one encoder, e.g. for ablations.
    pub fn encoder_param_prefix(branch: Branch) -> &'static str {
        match branch {
            Branch::Dense => "dense_encoder.",
            Branch::Sparse => "sparse_encoder.",
        }
    }

    fn check_grid(&self, grid: &OccupancyGrid) -> Result<(), VqVaeError> {
        if grid.config() != &self.config.grid {
            return Err(VqVaeError::Geometry("grid config differs from the model's".into()));
        }
        Ok(())
    }

    /// Continuous embedding map, `(h·w) × D`.
    pub fn encode(&self, grid: &OccupancyGrid, branch: Branch) -> Result<Tensor<T>, VqVaeError> {
        self.check_grid(grid)?;
        Ok(self.encoder(branch).forward(&self.params, grid)?.0)
    }

    pub fn quantize(&self, z: &Tensor<T>) -> Result<(QuantizeResult<T>, CodeMap), VqVaeError> {
        let q = quantize(z, &self.codebook)?;
        let (h, w) = self.config.grid.code_dims();
        let map = CodeMap::from_indices(h, w, &q.indices)?;
        Ok((q, map))
    }

    /// `H×W×C` logits for a `(h·w) × D` decoder input.
    pub fn decode(&self, zq: &Tensor<T>) -> Result<Tensor<T>, VqVaeError> {
        Ok(self.decoder.forward(&self.params, zq)?.0)
    }

    /// Looks up every entry of a complete code map and decodes it.
    pub fn decode_codes(&self, codes: &CodeMap) -> Result<Tensor<T>, VqVaeError> {
        let (h, w) = self.config.grid.code_dims();
        if (codes.h, codes.w) != (h, w) {
            return Err(VqVaeError::Geometry(format!("{}×{} code map, model uses {h}×{w}", codes.h, codes.w)));
        }
        let k = self.codebook.k();
        let mut zq = Tensor::zeros(&[h * w, self.config.code_dim]);
        for (i, &e) in codes.entries.iter().enumerate() {
            if e as usize >= k {
                return Err(VqVaeError::Geometry(format!("code {e} at cell {i} is not below K = {k}")));
            }
            zq.row_mut(i).copy_from_slice(self.codebook.code(e as usize));
        }
        self.decode(&zq)
    }

    /// encode → quantize → decode at inference (pure `ẑ`), with loss terms against `grid`.
    pub fn reconstruct(&self, grid: &OccupancyGrid, branch: Branch) -> Result<Reconstruction<T>, VqVaeError> {
        self.reconstruct_against(grid, grid, branch, 0.25)
    }

    /// Like [`Self::reconstruct`] but scoring against a separate target grid.
    pub fn reconstruct_against(
        &self,
        input: &OccupancyGrid,
        target: &OccupancyGrid,
        branch: Branch,
        commitment: f64,
    ) -> Result<Reconstruction<T>, VqVaeError> {
        self.check_grid(target)?;
        let z = self.encode(input, branch)?;
        let (q, codes) = self.quantize(&z)?;
        let logits = self.decode(&q.quantized)?;
        let (bce, _) = bce_with_logits_weighted(&logits, target.bits(), 1.0)?;
        let terms = vq_loss_terms(&z, &q.quantized)?;
        let losses = LossBreakdown {
            bce: bce.as_f64(),
            codebook: terms.codebook_loss.as_f64(),
            commitment: commitment * terms.commitment_loss.as_f64(),
        };
        Ok(Reconstruction { logits, codes, losses })
    }

    /// Sparse encoder → shared codebook → dense decoder → threshold.
    pub fn complete(&self, sparse: &OccupancyGrid) -> Result<OccupancyGrid, VqVaeError> {
        let rec = self.reconstruct(sparse, Branch::Sparse)?;
        binarize(&rec.logits, &self.config.grid, Binarize::Threshold)
    }

    /// One differentiable pass: accumulates parameter gradients into `grads` and code
    /// gradients into `code_grads`.
    ///
    /// With `alpha = 0` the decoder reads `z` directly and the returned gradients are the
    /// exact gradients of the loss; for `alpha > 0` the quantizer is bypassed with the
    /// straight-through estimator.
    pub fn forward_backward(
        &self,
        input: &OccupancyGrid,
        target: &OccupancyGrid,
        branch: Branch,
        opts: &PassOptions,
        grads: &mut Grads<T>,
        code_grads: &mut Tensor<T>,
        feature_loss: Option<&dyn Fn(&Tensor<T>, &OccupancyGrid) -> (f64, Tensor<T>)>,
    ) -> Result<PassOutput<T>, VqVaeError> {
        self.check_grid(input)?;
        self.check_grid(target)?;
        let encoder = self.encoder(branch);
        let (z, enc_cache) = encoder.forward(&self.params, input)?;
        let q = quantize(&z, &self.codebook)?;
        let a = T::lit(opts.alpha);
        let dec_in = if opts.alpha == 0.0 {
            z.clone()
        } else {
            let data = q.quantized.data().iter().zip(z.data()).map(|(&qv, &zv)| a * qv + (T::one() - a) * zv).collect();
            Tensor::from_vec(z.shape(), data)?
        };
        let (logits, dec_cache) = self.decoder.forward(&self.params, &dec_in)?;
        let (bce, mut dlogits) = bce_with_logits_weighted(&logits, target.bits(), opts.pos_weight)?;
        let mut bce = bce.as_f64();
        if let Some(f) = feature_loss {
            let (extra, g) = f(&logits, target);
            bce += extra;
            dlogits.add_assign(&g);
        }
        let terms = vq_loss_terms(&z, &q.quantized)?;
        let beta = T::lit(opts.commitment);

        let ddec_in = self.decoder.backward(&self.params, &dec_cache, &dlogits, grads)?;
        // blend and straight-through both pass the decoder gradient to z unchanged
        let mut dz = ddec_in;
        for (g, &c) in dz.data_mut().iter_mut().zip(terms.d_z.data()) {
            *g += beta * c;
        }
        encoder.backward(&self.params, &enc_cache, &dz, grads);
        code_grads.add_assign(&code_gradient(&q.indices, &terms.d_quantized, self.codebook.k()));

        let losses = LossBreakdown {
            bce,
            codebook: terms.codebook_loss.as_f64(),
            commitment: opts.commitment * terms.commitment_loss.as_f64(),
        };
        Ok(PassOutput { losses, indices: q.indices, z, logits })
    }
}

impl VqVaeModel<f32> {
    /// Serializes parameters, optimizer state, the codebook, and architecture metadata.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let c = &self.config;
        let mut ck = Checkpoint::new();
        ck.push(
            "meta.vqvae",
            TensorF::from_vec(
                &[8],
                [c.grid.h(), c.grid.w(), c.grid.c(), c.n_blocks, c.dim, c.n_heads, c.codebook_size, c.code_dim]
                    .iter()
                    .map(|&v| v as f32)
                    .collect(),
            )
            .expect("8 values"),
        );
        ck.push_store("", &self.params);
        ck.push("codebook.codes", self.codebook.codes().clone());
        let k = self.codebook.k();
        ck.push(
            "codebook.last_used",
            TensorF::from_vec(&[k], self.codebook.last_used().iter().map(|&v| v as f32).collect()).expect("k values"),
        );
        ck.push(
            "codebook.ever_used",
            TensorF::from_vec(&[k], self.codebook.ever_used().iter().map(|&v| v as u8 as f32).collect())
                .expect("k values"),
        );
        ck
    }

    /// Rebuilds a model for `grid` from a checkpoint written by [`Self::to_checkpoint`].
    pub fn from_checkpoint(ck: &Checkpoint, grid: &GridConfig, bank_capacity: usize) -> Result<Self, VqVaeError> {
        let meta: Vec<usize> = ck.require("meta.vqvae")?.data().iter().map(|&v| v as usize).collect();
        if meta.len() != 8 {
            return Err(FormatError::Invalid("meta.vqvae must hold 8 values".into()).into());
        }
        if meta[..3] != [grid.h(), grid.w(), grid.c()] {
            return Err(VqVaeError::Geometry(format!(
                "checkpoint grid {:?} vs config {:?}",
                &meta[..3],
                [grid.h(), grid.w(), grid.c()]
            )));
        }
        let config = VqVaeConfig {
            grid: grid.clone(),
            n_blocks: meta[3],
            dim: meta[4],
            n_heads: meta[5],
            codebook_size: meta[6],
            code_dim: meta[7],
            bank_capacity,
        };
        let mut model = Self::new(config, 0)?;
        ck.load_store("", &mut model.params)?;
        model.codebook.set_codes(ck.require("codebook.codes")?.clone())?;
        let last = ck.require("codebook.last_used")?.data().iter().map(|&v| v as u64).collect();
        let ever = ck.require("codebook.ever_used")?.data().iter().map(|&v| v != 0.0).collect();
        model.codebook.set_usage(last, ever);
        Ok(model)
    }
}

/// Optimization settings for [`train`].
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub iterations: u64,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub warmup_iters: u64,
    /// Commitment weight β.
    pub commitment: f64,
    pub seed: u64,
    /// Data-dependent codebook initialization and dead-code revival from the memory bank.
    pub reinit: bool,
    pub reinit_threshold: f64,
    pub kmeans_iters: usize,
    pub pos_weight: f64,
    pub grad_clip: Option<f64>,
    /// Linear learning-rate ramp length; the rate then follows a cosine decay to zero.
    pub lr_warmup: u64,
    pub cosine_decay: bool,
    /// Start the output bias at the training set's occupancy rate.
    pub prior_bias: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 3000,
            batch_size: 1,
            adam: AdamConfig { lr: 2e-3, beta1: 0.9, beta2: 0.99, eps: 1e-8 },
            warmup_iters: 500,
            commitment: 0.25,
            seed: 0,
            reinit: true,
            reinit_threshold: 0.5,
            kmeans_iters: 10,
            pos_weight: 3.0,
            grad_clip: Some(1.0),
            lr_warmup: 200,
            cosine_decay: true,
            prior_bias: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), VqVaeError> {
        if self.iterations == 0 || self.batch_size == 0 || self.warmup_iters == 0 {
            return Err(VqVaeError::Config("iterations, batch size and warmup must be positive".into()));
        }
        if !(self.adam.lr > 0.0 && self.commitment > 0.0 && self.pos_weight > 0.0) {
            return Err(VqVaeError::Config("learning rate, β and positive weight must be positive".into()));
        }
        Ok(())
    }

    /// Learning rate for 1-based step `iter`.
    pub fn lr_at(&self, iter: u64) -> f64 {
        let ramp = if self.lr_warmup == 0 { 1.0 } else { (iter as f64 / self.lr_warmup as f64).min(1.0) };
        let decay = if self.cosine_decay {
            let t = (iter.saturating_sub(1) as f64 / self.iterations as f64).min(1.0);
            0.5 * (1.0 + (std::f64::consts::PI * t).cos())
        } else {
            1.0
        };
        self.adam.lr * ramp * decay
    }
}

/// Statistics of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub iter: u64,
    pub dense: LossBreakdown,
    pub sparse: LossBreakdown,
    pub utilization: f64,
    pub reinitialized: usize,
}

impl StepStats {
    pub fn total(&self) -> f64 {
        self.dense.total() + self.sparse.total()
    }
}

/// Loss curve and codebook health over a run.
#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub losses: Vec<f64>,
    pub utilization: Vec<f64>,
    /// `(iteration, codes replaced)` for every revival.
    pub reinit_events: Vec<(u64, usize)>,
    pub initialized_at: Option<u64>,
}

impl TrainReport {
    pub fn final_utilization(&self) -> f64 {
        self.utilization.last().copied().unwrap_or(0.0)
    }
}

/// A voxelized training pair: sparse input, dense target.
#[derive(Clone, Debug)]
pub struct GridPair {
    pub sparse: OccupancyGrid,
    pub dense: OccupancyGrid,
}

impl GridPair {
    pub fn from_sample(s: &PairedSample, cfg: &GridConfig) -> Self {
        Self { sparse: voxelize(&s.sparse, cfg), dense: voxelize(&s.dense, cfg) }
    }
}

/// Stepwise joint trainer. [`train`] drives it to completion.
pub struct Trainer {
    model: VqVaeModel<f32>,
    cfg: TrainConfig,
    bank: MemoryBank<f32>,
    rng: ChaCha8Rng,
    iter: u64,
    initialized: bool,
    report: TrainReport,
    feature_loss: Option<Box<dyn FeatureLoss>>,
}

impl Trainer {
    pub fn new(model_cfg: VqVaeConfig, cfg: TrainConfig) -> Result<Self, VqVaeError> {
        cfg.validate()?;
        let model = VqVaeModel::new(model_cfg, cfg.seed)?;
        let bank = MemoryBank::new(model.config.bank_capacity, model.config.code_dim);
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_DA7A);
        Ok(Self { model, cfg, bank, rng, iter: 0, initialized: false, report: TrainReport::default(), feature_loss: None })
    }

    /// Adds a loss on decoded logits to both branches.
    pub fn with_feature_loss(mut self, f: Box<dyn FeatureLoss>) -> Self {
        self.feature_loss = Some(f);
        self
    }

    pub fn model(&self) -> &VqVaeModel<f32> {
        &self.model
    }

    pub fn iteration(&self) -> u64 {
        self.iter
    }

    pub fn report(&self) -> &TrainReport {
        &self.report
    }

    /// One optimizer step on a random minibatch.
    pub fn step(&mut self, data: &[GridPair]) -> Result<StepStats, VqVaeError> {
        if data.is_empty() {
            return Err(VqVaeError::EmptyTrainingSet);
        }
        if self.iter == 0 && self.cfg.prior_bias {
            let cells: usize = data.iter().map(|p| p.dense.bits().len()).sum();
            let occupied: usize = data.iter().map(|p| p.dense.occupied()).sum();
            self.model.set_output_prior(occupied as f64 / cells.max(1) as f64);
        }
        self.iter += 1;
        let iter = self.iter;
        let opts = PassOptions {
            alpha: warmup_alpha(iter - 1, self.cfg.warmup_iters),
            commitment: self.cfg.commitment,
            pos_weight: self.cfg.pos_weight,
        };
        let mut grads = self.model.params.zero_grads();
        let mut code_grads = Tensor::zeros(self.model.codebook.codes().shape());
        let mut dense = LossBreakdown::default();
        let mut sparse = LossBreakdown::default();
        let mut used = Vec::new();
        let mut embeddings = Vec::new();
        let feature = self.feature_loss.as_deref();
        let feature_fn = feature.map(|f| move |l: &TensorF, t: &OccupancyGrid| f.loss(l, t));
        for _ in 0..self.cfg.batch_size {
            let pair = &data[self.rng.random_range(0..data.len())];
            for (branch, input, acc) in
                [(Branch::Dense, &pair.dense, &mut dense), (Branch::Sparse, &pair.sparse, &mut sparse)]
            {
                let out = self.model.forward_backward(
                    input,
                    &pair.dense,
                    branch,
                    &opts,
                    &mut grads,
                    &mut code_grads,
                    feature_fn.as_ref().map(|f| f as &dyn Fn(&TensorF, &OccupancyGrid) -> (f64, TensorF)),
                )?;
                if !out.losses.is_finite() {
                    return Err(VqVaeError::NonFiniteLoss {
                        iter,
                        bce: out.losses.bce,
                        codebook: out.losses.codebook,
                        commitment: out.losses.commitment,
                    });
                }
                acc.bce += out.losses.bce;
                acc.codebook += out.losses.codebook;
                acc.commitment += out.losses.commitment;
                used.extend(out.indices);
                embeddings.push(out.z);
            }
        }
        let inv = 1.0 / self.cfg.batch_size as f64;
        for acc in [&mut dense, &mut sparse] {
            acc.bce *= inv;
            acc.codebook *= inv;
            acc.commitment *= inv;
        }
        grads.scale(inv as f32);
        code_grads.scale(inv as f32);
        if let Some(clip) = self.cfg.grad_clip {
            grads.clip_global_norm(clip);
        }
        let adam = AdamConfig { lr: self.cfg.lr_at(iter), ..self.cfg.adam };
        adam_step(&mut self.model.params, &grads, &adam)?;
        self.model.codebook.apply_grad(&code_grads, &adam);

        self.model.codebook.record_usage(&used, iter);
        for z in &embeddings {
            self.bank.push(z);
        }
        let reinit_cfg = ReinitConfig {
            threshold: self.cfg.reinit_threshold,
            kmeans_iters: self.cfg.kmeans_iters,
            seed: self.cfg.seed,
        };
        let mut reinitialized = 0;
        if self.cfg.reinit {
            if !self.initialized && self.bank.is_full() {
                init_from_bank(&mut self.model.codebook, &self.bank, iter, &reinit_cfg)?;
                self.initialized = true;
                self.report.initialized_at = Some(iter);
            } else if self.initialized && iter % DEAD_WINDOW == 0 {
                let replaced = reinit_dead_codes(&mut self.model.codebook, &self.bank, iter, &reinit_cfg)?;
                reinitialized = replaced.len();
                if reinitialized > 0 {
                    self.report.reinit_events.push((iter, reinitialized));
                }
            }
        }
        let utilization = self.model.codebook.utilization(iter);
        let stats = StepStats { iter, dense, sparse, utilization, reinitialized };
        self.report.losses.push(stats.total());
        self.report.utilization.push(utilization);
        Ok(stats)
    }

    pub fn finish(self) -> (VqVaeModel<f32>, TrainReport) {
        (self.model, self.report)
    }
}

/// Voxelizes `pairs` and trains for `cfg.iterations` steps.
pub fn train(
    pairs: &[PairedSample],
    model_cfg: &VqVaeConfig,
    cfg: &TrainConfig,
) -> Result<(VqVaeModel<f32>, TrainReport), VqVaeError> {
    let data: Vec<GridPair> = pairs.iter().map(|p| GridPair::from_sample(p, &model_cfg.grid)).collect();
    train_grids(&data, model_cfg, cfg)
}

/// [`train`] on already voxelized pairs.
pub fn train_grids(
    data: &[GridPair],
    model_cfg: &VqVaeConfig,
    cfg: &TrainConfig,
) -> Result<(VqVaeModel<f32>, TrainReport), VqVaeError> {
    if data.is_empty() {
        return Err(VqVaeError::EmptyTrainingSet);
    }
    let mut trainer = Trainer::new(model_cfg.clone(), cfg.clone())?;
    for _ in 0..cfg.iterations {
        trainer.step(data)?;
    }
    Ok(trainer.finish())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> VqVaeConfig {
        VqVaeConfig {
            grid: GridConfig::new((0.0, 6.4), (-3.2, 3.2), (-0.8, 0.8), (0.4, 0.4, 0.4)).unwrap(),
            n_blocks: 1,
            dim: 8,
            n_heads: 2,
            codebook_size: 8,
            code_dim: 4,
            bank_capacity: 64,
        }
    }

    fn grid(cfg: &GridConfig, seed: u64) -> OccupancyGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bits = (0..cfg.voxel_count()).map(|_| rng.random_bool(0.1)).collect();
        OccupancyGrid::from_bits(cfg, bits).unwrap()
    }

    #[test]
    fn encode_shape_and_determinism() {
        let m = VqVaeModel::<f32>::new(toy(), 1).unwrap();
        let g = grid(&m.config.grid, 2);
        let z = m.encode(&g, Branch::Dense).unwrap();
        assert_eq!(z.shape(), &[4, 4]);
        assert_eq!(z, m.encode(&g, Branch::Dense).unwrap());
        let logits = m.decode(&z).unwrap();
        assert_eq!(logits.shape(), &[16, 16, 4]);
    }

    #[test]
    fn geometry_mismatch_rejected() {
        let m = VqVaeModel::<f32>::new(toy(), 1).unwrap();
        let other = GridConfig::new((0.0, 6.4), (-3.2, 3.2), (-1.2, 1.2), (0.4, 0.4, 0.4)).unwrap();
        assert!(matches!(m.encode(&OccupancyGrid::empty(&other), Branch::Dense), Err(VqVaeError::Geometry(_))));
        assert!(m.decode(&Tensor::zeros(&[3, 4])).is_err());
        assert!(m.decode_codes(&CodeMap::filled(2, 2, 8)).is_err());
    }

    #[test]
    fn untrained_loss_is_near_ln2() {
        let m = VqVaeModel::<f32>::new(toy(), 3).unwrap();
        let g = grid(&m.config.grid, 4);
        let rec = m.reconstruct(&g, Branch::Dense).unwrap();
        assert!((rec.losses.bce - 2f64.ln()).abs() < 0.05, "{}", rec.losses.bce);
        assert!(rec.codes.entries.iter().all(|&e| (e as usize) < 8));
    }

    #[test]
    fn code_map_replays_to_same_logits() {
        let m = VqVaeModel::<f32>::new(toy(), 5).unwrap();
        let g = grid(&m.config.grid, 6);
        let rec = m.reconstruct(&g, Branch::Sparse).unwrap();
        assert_eq!(m.decode_codes(&rec.codes).unwrap(), rec.logits);
    }

    #[test]
    fn threshold_and_gumbel_binarization() {
        let cfg = toy().grid;
        let low = Tensor::<f32>::full(&[16, 16, 4], -5.0);
        assert_eq!(binarize(&low, &cfg, Binarize::Threshold).unwrap().occupied(), 0);
        let zero = Tensor::<f32>::zeros(&[16, 16, 4]);
        let mode = Binarize::Gumbel { temperature: 1.0, seed: 9 };
        assert_eq!(binarize(&zero, &cfg, mode).unwrap(), binarize(&zero, &cfg, mode).unwrap());
        assert!(binarize(&zero, &cfg, Binarize::Gumbel { temperature: 0.0, seed: 1 }).is_err());
    }

    #[test]
    fn checkpoint_roundtrip() {
        let m = VqVaeModel::<f32>::new(toy(), 7).unwrap();
        let ck = m.to_checkpoint();
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        let back = VqVaeModel::from_checkpoint(&Checkpoint::read_from(&buf[..]).unwrap(), &m.config.grid, 64).unwrap();
        assert_eq!(back.params.flatten(), m.params.flatten());
        assert_eq!(back.codebook.codes(), m.codebook.codes());
    }

    #[test]
    fn empty_training_set_rejected() {
        assert!(matches!(train_grids(&[], &toy(), &TrainConfig::default()), Err(VqVaeError::EmptyTrainingSet)));
    }
}
