#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use ultralidar::codebook::vq_loss_terms;
use ultralidar::codemap::CodeMap;
use ultralidar::generator::{Generator, GeneratorConfig};
use ultralidar::nncore::{
    affine, affine_backward, bce_with_logits_weighted, cross_entropy_smoothed, gelu, gelu_backward, grad_check,
    AttentionBlock, BlockStack, GradCheckReport, LayerNorm, ParamStore, PatchEmbed, PatchUnembed, Tensor,
};
use ultralidar::voxel::{GridConfig, OccupancyGrid};
use ultralidar::vqvae::{Branch, PassOptions, VqVaeConfig, VqVaeModel};

pub const EPS: f64 = 1e-5;
pub const TOL: f64 = 1e-3;
pub const FLOOR: f64 = 1e-6;

pub fn randn(n: usize, std: f64, rng: &mut impl Rng) -> Vec<f64> {
    (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn tensor(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
    Tensor::from_vec(shape, data).unwrap()
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn check(f: impl FnMut(&[f64]) -> f64, theta: &[f64], analytic: &[f64]) -> GradCheckReport {
    grad_check(f, theta, analytic, EPS, TOL, FLOOR)
}

/// 16×16×4 grid, 2×2 code map.
pub fn toy_grid() -> GridConfig {
    GridConfig::new((0.0, 6.4), (-3.2, 3.2), (-0.8, 0.8), (0.4, 0.4, 0.4)).unwrap()
}

pub fn toy_vqvae() -> VqVaeConfig {
    VqVaeConfig { grid: toy_grid(), n_blocks: 1, dim: 8, n_heads: 2, codebook_size: 8, code_dim: 4, bank_capacity: 64 }
}

pub fn random_grid(cfg: &GridConfig, p: f64, rng: &mut impl Rng) -> OccupancyGrid {
    let bits = (0..cfg.voxel_count()).map(|_| rng.random_bool(p)).collect();
    OccupancyGrid::from_bits(cfg, bits).unwrap()
}

fn randomize(ps: &mut ParamStore<f64>, std: f64, rng: &mut impl Rng) {
    let n = ps.flatten().len();
    ps.unflatten(&randn(n, std, rng));
}

fn check_affine(rng: &mut ChaCha8Rng) -> GradCheckReport {
    let (n, i, o) = (3, 5, 4);
    let theta = randn(n * i + i * o + o, 1.0, rng);
    let r = tensor(&[n, o], randn(n * o, 1.0, rng));
    let split = |t: &[f64]| {
        (
            tensor(&[n, i], t[..n * i].to_vec()),
            tensor(&[i, o], t[n * i..n * i + i * o].to_vec()),
            tensor(&[o], t[n * i + i * o..].to_vec()),
        )
    };
    let (x, w, _) = split(&theta);
    let (dx, dw, db) = affine_backward(&x, &w, &r);
    let analytic: Vec<f64> = dx.data().iter().chain(dw.data()).chain(db.data()).copied().collect();
    check(
        |t| {
            let (x, w, b) = split(t);
            dot(&affine(&x, &w, &b).unwrap(), &r)
        },
        &theta,
        &analytic,
    )
}

fn check_layer_norm(rng: &mut ChaCha8Rng) -> GradCheckReport {
    let (n, d) = (4, 6);
    let mut ps = ParamStore::new();
    let ln = LayerNorm::new(&mut ps, "ln", d).unwrap();
    randomize(&mut ps, 1.0, rng);
    let x = randn(n * d, 2.0, rng);
    let r = tensor(&[n, d], randn(n * d, 1.0, rng));
    let p0 = ps.flatten();
    let (_, cache) = ln.forward(&ps, &tensor(&[n, d], x.clone())).unwrap();
    let mut grads = ps.zero_grads();
    let dx = ln.backward(&ps, &cache, &r, &mut grads);
    let theta: Vec<f64> = x.iter().chain(&p0).copied().collect();
    let analytic: Vec<f64> = dx.data().iter().copied().chain(grads.flatten()).collect();
    check(
        |t| {
            ps.unflatten(&t[n * d..]);
            dot(&ln.forward(&ps, &tensor(&[n, d], t[..n * d].to_vec())).unwrap().0, &r)
        },
        &theta,
        &analytic,
    )
}

fn check_gelu(rng: &mut ChaCha8Rng) -> GradCheckReport {
    let x = randn(24, 2.0, rng);
    let r = tensor(&[4, 6], randn(24, 1.0, rng));
    let dx = gelu_backward(&tensor(&[4, 6], x.clone()), &r);
    check(|t| dot(&gelu(&tensor(&[4, 6], t.to_vec())), &r), &x, dx.data())
}

fn check_attention_block(rng: &mut ChaCha8Rng) -> GradCheckReport {
    let (t, d) = (5, 8);
    let mut ps = ParamStore::new();
    let block = AttentionBlock::new(&mut ps, "blk", d, 2, rng).unwrap();
    randomize(&mut ps, 0.3, rng);
    let mask = [true, true, false, true, true];
    let x = randn(t * d, 1.0, rng);
    let r = tensor(&[t, d], randn(t * d, 1.0, rng));
    let p0 = ps.flatten();
    let (_, cache) = block.forward(&ps, &tensor(&[t, d], x.clone()), Some(&mask)).unwrap();
    let mut grads = ps.zero_grads();
    let dx = block.backward(&ps, &cache, &r, &mut grads);
    let theta: Vec<f64> = x.iter().chain(&p0).copied().collect();
    let analytic: Vec<f64> = dx.data().iter().copied().chain(grads.flatten()).collect();
    check(
        |th| {
            ps.unflatten(&th[t * d..]);
            dot(&block.forward(&ps, &tensor(&[t, d], th[..t * d].to_vec()), Some(&mask)).unwrap().0, &r)
        },
        &theta,
        &analytic,
    )
}

fn check_block_stack(rng: &mut ChaCha8Rng) -> GradCheckReport {
    let (t, d) = (4, 8);
    let mut ps = ParamStore::new();
    let stack = BlockStack::new(&mut ps, "stack", 2, d, 4, rng).unwrap();
    randomize(&mut ps, 0.3, rng);
    let x = randn(t * d, 1.0, rng);
    let r = tensor(&[t, d], randn(t * d, 1.0, rng));
    let p0 = ps.flatten();
    let (_, caches) = stack.forward(&ps, &tensor(&[t, d], x.clone()), None).unwrap();
    let mut grads = ps.zero_grads();
    let dx = stack.backward(&ps, &caches, &r, &mut grads);
    let theta: Vec<f64> = x.iter().chain(&p0).copied().collect();
    let analytic: Vec<f64> = dx.data().iter().copied().chain(grads.flatten()).collect();
    check(
        |th| {
            ps.unflatten(&th[t * d..]);
            dot(&stack.forward(&ps, &tensor(&[t, d], th[..t * d].to_vec()), None).unwrap().0, &r)
        },
        &theta,
        &analytic,
    )
}

fn check_patch_embed(rng: &mut ChaCha8Rng) -> GradCheckReport {
    let cfg = toy_grid();
    let grid = random_grid(&cfg, 0.2, rng);
    let mut ps = ParamStore::new();
    let embed = PatchEmbed::new(&mut ps, "embed", cfg.h(), cfg.w(), cfg.c(), 8, rng).unwrap();
    let (tokens, patches) = embed.forward(&ps, &grid).unwrap();
    let r = tensor(tokens.shape(), randn(tokens.len(), 1.0, rng));
    let mut grads = ps.zero_grads();
    embed.backward(&patches, &r, &mut grads);
    let theta = ps.flatten();
    let analytic = grads.flatten();
    check(
        |th| {
            ps.unflatten(th);
            dot(&embed.forward(&ps, &grid).unwrap().0, &r)
        },
        &theta,
        &analytic,
    )
}

fn check_patch_unembed(rng: &mut ChaCha8Rng) -> GradCheckReport {
    let cfg = toy_grid();
    let d = 8;
    let mut ps = ParamStore::new();
    let unembed = PatchUnembed::new(&mut ps, "unembed", cfg.h(), cfg.w(), cfg.c(), d, rng).unwrap();
    randomize(&mut ps, 0.3, rng);
    let n = unembed.n_tokens();
    let x = randn(n * d, 1.0, rng);
    let r = tensor(&[cfg.h(), cfg.w(), cfg.c()], randn(cfg.voxel_count(), 1.0, rng));
    let p0 = ps.flatten();
    let tokens = tensor(&[n, d], x.clone());
    let mut grads = ps.zero_grads();
    let dx = unembed.backward(&ps, &tokens, &r, &mut grads).unwrap();
    let theta: Vec<f64> = x.iter().chain(&p0).copied().collect();
    let analytic: Vec<f64> = dx.data().iter().copied().chain(grads.flatten()).collect();
    check(
        |th| {
            ps.unflatten(&th[n * d..]);
            dot(&unembed.forward(&ps, &tensor(&[n, d], th[..n * d].to_vec())).unwrap(), &r)
        },
        &theta,
        &analytic,
    )
}

fn check_bce(rng: &mut ChaCha8Rng) -> GradCheckReport {
    let n = 40;
    let logits = randn(n, 3.0, rng);
    let targets: Vec<bool> = (0..n).map(|_| rng.random_bool(0.3)).collect();
    let (_, g) = bce_with_logits_weighted(&tensor(&[n], logits.clone()), &targets, 3.0).unwrap();
    check(|t| bce_with_logits_weighted(&tensor(&[n], t.to_vec()), &targets, 3.0).unwrap().0, &logits, g.data())
}

fn check_cross_entropy(rng: &mut ChaCha8Rng) -> GradCheckReport {
    let (n, k) = (6, 5);
    let logits = randn(n * k, 2.0, rng);
    let targets: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
    let mask = [true, false, true, true, false, true];
    let (_, g) = cross_entropy_smoothed(&tensor(&[n, k], logits.clone()), &targets, &mask, 0.1).unwrap();
    check(
        |t| cross_entropy_smoothed(&tensor(&[n, k], t.to_vec()), &targets, &mask, 0.1).unwrap().0,
        &logits,
        g.data(),
    )
}

/// Codebook term as a function of ẑ, commitment term as a function of z.
fn check_vq_terms(rng: &mut ChaCha8Rng) -> GradCheckReport {
    let (n, d) = (5, 4);
    let z = randn(n * d, 1.0, rng);
    let zq = randn(n * d, 1.0, rng);
    let terms = vq_loss_terms(&tensor(&[n, d], z.clone()), &tensor(&[n, d], zq.clone())).unwrap();
    let theta: Vec<f64> = z.iter().chain(&zq).copied().collect();
    let analytic: Vec<f64> = terms.d_z.data().iter().chain(terms.d_quantized.data()).copied().collect();
    let (z0, q0) = (tensor(&[n, d], z), tensor(&[n, d], zq));
    check(
        |t| {
            let commit = vq_loss_terms(&tensor(&[n, d], t[..n * d].to_vec()), &q0).unwrap().commitment_loss;
            let book = vq_loss_terms(&z0, &tensor(&[n, d], t[n * d..].to_vec())).unwrap().codebook_loss;
            commit + book
        },
        &theta,
        &analytic,
    )
}

/// Both branches of the VQ-VAE loss with the decoder reading `z` (no straight-through),
/// checked over every network parameter and every code.
fn check_vqvae(rng: &mut ChaCha8Rng, seed: u64) -> GradCheckReport {
    let beta = 0.25;
    let mut model = VqVaeModel::<f64>::new(toy_vqvae(), seed).unwrap();
    randomize(&mut model.params, 0.3, rng);
    let dense = random_grid(&model.config.grid, 0.15, rng);
    let sparse = random_grid(&model.config.grid, 0.05, rng);
    let opts = PassOptions { alpha: 0.0, commitment: beta, pos_weight: 2.0 };
    let mut grads = model.params.zero_grads();
    let mut code_grads = Tensor::zeros(model.codebook.codes().shape());
    let mut frozen = Vec::new();
    for (branch, input) in [(Branch::Dense, &dense), (Branch::Sparse, &sparse)] {
        let out = model.forward_backward(input, &dense, branch, &opts, &mut grads, &mut code_grads, None).unwrap();
        let (q, _) = model.quantize(&out.z).unwrap();
        frozen.push((branch, input, out.z, q.indices, q.quantized));
    }
    let n_params = model.params.flatten().len();
    let theta: Vec<f64> = model.params.flatten().into_iter().chain(model.codebook.codes().data().to_vec()).collect();
    let analytic: Vec<f64> = grads.flatten().into_iter().chain(code_grads.data().to_vec()).collect();
    let (k, d) = (model.codebook.k(), model.codebook.d());
    check(
        |t| {
            model.params.unflatten(&t[..n_params]);
            let codes = &t[n_params..];
            let mut total = 0.0;
            for (branch, input, z0, indices, zq0) in &frozen {
                let z = model.encode(input, *branch).unwrap();
                let logits = model.decode(&z).unwrap();
                total += bce_with_logits_weighted(&logits, dense.bits(), opts.pos_weight).unwrap().0;
                total += beta * vq_loss_terms(&z, zq0).unwrap().commitment_loss;
                let picked: Vec<f64> = indices.iter().flat_map(|&i| codes[i * d..(i + 1) * d].to_vec()).collect();
                total += vq_loss_terms(z0, &tensor(z0.shape(), picked)).unwrap().codebook_loss;
            }
            debug_assert_eq!(codes.len(), k * d);
            total
        },
        &theta,
        &analytic,
    )
}

fn check_generator(rng: &mut ChaCha8Rng, seed: u64) -> GradCheckReport {
    let cfg = GeneratorConfig { h: 3, w: 4, k: 6, n_blocks: 1, dim: 8, n_heads: 2 };
    let mut g = Generator::<f64>::new(cfg.clone(), seed).unwrap();
    randomize(&mut g.params, 0.3, rng);
    let target: Vec<u16> = (0..cfg.n_tokens()).map(|_| rng.random_range(0..cfg.k as u16)).collect();
    let mut input = target.clone();
    for (i, e) in input.iter_mut().enumerate() {
        if i % 3 != 1 {
            *e = cfg.mask_token();
        }
    }
    let target = CodeMap::new(cfg.h, cfg.w, target).unwrap();
    let input = CodeMap::new(cfg.h, cfg.w, input).unwrap();
    let mut grads = g.params.zero_grads();
    g.loss_and_grads(&input, &target, 0.1, &mut grads).unwrap();
    let theta = g.params.flatten();
    let analytic = grads.flatten();
    check(
        |t| {
            g.params.unflatten(t);
            let mut scratch = g.params.zero_grads();
            g.loss_and_grads(&input, &target, 0.1, &mut scratch).unwrap()
        },
        &theta,
        &analytic,
    )
}

/// Every differentiable operation, checked at one seed.
pub fn gradient_suite(seed: u64) -> Vec<(&'static str, GradCheckReport)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    vec![
        ("affine", check_affine(&mut rng)),
        ("layer_norm", check_layer_norm(&mut rng)),
        ("gelu", check_gelu(&mut rng)),
        ("attention_block", check_attention_block(&mut rng)),
        ("block_stack", check_block_stack(&mut rng)),
        ("patch_embed", check_patch_embed(&mut rng)),
        ("patch_unembed", check_patch_unembed(&mut rng)),
        ("bce", check_bce(&mut rng)),
        ("cross_entropy", check_cross_entropy(&mut rng)),
        ("vq_terms", check_vq_terms(&mut rng)),
        ("vqvae_loss", check_vqvae(&mut rng, seed)),
        ("generator_loss", check_generator(&mut rng, seed)),
    ]
}

/// Lowest index among the minimal squared distances, computed independently of the crate.
pub fn brute_force_nearest(row: &[f32], codes: &[f32], d: usize) -> usize {
    let mut best = 0;
    let mut best_dist = f64::INFINITY;
    for (k, code) in codes.chunks(d).enumerate() {
        let dist: f64 = row.iter().zip(code).map(|(&a, &b)| ((a - b) as f64).powi(2)).sum();
        if dist < best_dist {
            best = k;
            best_dist = dist;
        }
    }
    best
}

/// One random quantizer instance with K ≤ 64 on a half-integer lattice, so exact ties are
/// common. Rows include codes themselves and exact midpoints between two codes.
pub fn quantizer_instance(rng: &mut impl Rng) -> (Vec<f32>, Vec<f32>, usize, usize) {
    let k = rng.random_range(2..=64);
    let d = rng.random_range(1..=6);
    let lattice = |rng: &mut dyn rand::RngCore| rng.random_range(-4i32..=4) as f32 * 0.5;
    let mut codes: Vec<f32> = (0..k * d).map(|_| lattice(rng)).collect();
    if rng.random_bool(0.3) {
        // duplicated codes
        let (a, b) = (rng.random_range(0..k), rng.random_range(0..k));
        let src = codes[a * d..(a + 1) * d].to_vec();
        codes[b * d..(b + 1) * d].copy_from_slice(&src);
    }
    let n = rng.random_range(1..=16);
    let mut rows = Vec::with_capacity(n * d);
    for _ in 0..n {
        match rng.random_range(0..3) {
            0 => rows.extend((0..d).map(|_| lattice(rng))),
            1 => {
                let c = rng.random_range(0..k);
                rows.extend_from_slice(&codes[c * d..(c + 1) * d]);
            }
            _ => {
                let (a, b) = (rng.random_range(0..k), rng.random_range(0..k));
                rows.extend((0..d).map(|j| 0.5 * (codes[a * d + j] + codes[b * d + j])));
            }
        }
    }
    (codes, rows, k, d)
}

/// `(name, passed, detail)` for every metric oracle.
pub fn metric_oracles() -> Vec<(&'static str, bool, String)> {
    use ultralidar::metrics::{jsd_distributions, mmd, Bandwidth, HistogramSet};
    use ultralidar::voxel::HistMode;
    let mut out = Vec::new();

    let same = jsd_distributions(&[1.0, 2.0, 3.0, 0.0], &[2.0, 4.0, 6.0, 0.0]).unwrap();
    out.push(("jsd(P,P) = 0", same == 0.0, format!("{same}")));
    let disjoint = jsd_distributions(&[1.0, 0.0], &[0.0, 1.0]).unwrap();
    out.push(("jsd of disjoint supports = 1", disjoint == 1.0, format!("{disjoint}")));
    let (pq, qp) = (
        jsd_distributions(&[0.2, 0.3, 0.5], &[0.6, 0.1, 0.3]).unwrap(),
        jsd_distributions(&[0.6, 0.1, 0.3], &[0.2, 0.3, 0.5]).unwrap(),
    );
    out.push(("jsd symmetric", (pq - qp).abs() <= 1e-15, format!("{pq} vs {qp}")));
    let half = jsd_distributions(&[0.5, 0.5], &[1.0, 0.0]).unwrap();
    let closed = 1.5 - 0.75 * 3f64.log2();
    out.push(("jsd((.5,.5),(1,0)) closed form", (half - closed).abs() <= 1e-9, format!("{half} vs {closed}")));

    let xs: [[f64; 3]; 3] = [[1.0, 2.0, 1.0], [3.0, 0.0, 1.0], [1.0, 1.0, 1.0]];
    let ys: [[f64; 3]; 3] = [[0.0, 1.0, 3.0], [2.0, 2.0, 0.0], [1.0, 0.0, 0.0]];
    let sigma = 0.4;
    let norm = |h: &[f64; 3]| {
        let s: f64 = h.iter().sum();
        [h[0] / s, h[1] / s, h[2] / s]
    };
    let k = |a: &[f64; 3], b: &[f64; 3]| {
        let (a, b) = (norm(a), norm(b));
        let d2: f64 = (0..3).map(|i| (a[i] - b[i]).powi(2)).sum();
        (-d2 / (2.0 * sigma * sigma)).exp()
    };
    let (mut kxx, mut kyy, mut kxy) = (0.0, 0.0, 0.0);
    for i in 0..3 {
        for j in 0..3 {
            if i != j {
                kxx += k(&xs[i], &xs[j]);
                kyy += k(&ys[i], &ys[j]);
            }
            kxy += k(&xs[i], &ys[j]);
        }
    }
    let hand = kxx / 6.0 + kyy / 6.0 - 2.0 * kxy / 9.0;
    let set = |v: &[[f64; 3]; 3]| HistogramSet::new(v.iter().map(|h| h.to_vec()).collect(), HistMode::Occupancy).unwrap();
    let got = mmd(&set(&xs), &set(&ys), Bandwidth::Fixed(sigma)).unwrap();
    out.push(("mmd 3-vs-3 hand double sum", (got.raw - hand).abs() <= 1e-9, format!("{} vs {hand}", got.raw)));
    let selfm = mmd(&set(&xs), &set(&xs), Bandwidth::Median).unwrap();
    out.push((
        "mmd(A,A) ≤ 1e-12 before clamping",
        selfm.raw <= 1e-12 && selfm.value == 0.0,
        format!("raw {} clamped {}", selfm.raw, selfm.value),
    ));
    out
}
