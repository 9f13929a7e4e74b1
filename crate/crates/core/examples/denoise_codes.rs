//! Code-map denoising: corrupts a real code map, then lets the generator re-mask random
//! rectangles and resample them. Cells outside the masked rectangles never change.
//!
//! `cargo run --release --example denoise_codes`

use std::error::Error;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ultralidar::codemap::CodeMap;
use ultralidar::generator::{identify_blank, train_masked, GenConfig, GenTrainConfig, GeneratorConfig};
use ultralidar::scenes::{derive_seed, make_pair, random_scene, BeamConfig, SceneConfig};
use ultralidar::vqvae::{train_grids, Branch, GridPair, TrainConfig, VqVaeConfig};

pub fn run(quick: bool) -> Result<(), Box<dyn Error>> {
    let cfg = VqVaeConfig::desk();
    let data = (0..if quick { 4 } else { 64 })
        .map(|i| {
            let scene = random_scene(derive_seed(2, i), &SceneConfig::default())?;
            Ok(GridPair::from_sample(&make_pair(&scene, &BeamConfig::default(), 4)?, &cfg.grid))
        })
        .collect::<Result<Vec<_>, Box<dyn Error>>>()?;
    let iters = if quick { 10 } else { 400 };
    let train = TrainConfig { iterations: iters, warmup_iters: (iters / 6).max(1), ..TrainConfig::default() };
    let (vq, _) = train_grids(&data, &cfg, &train)?;
    let corpus = data
        .iter()
        .map(|p| Ok(vq.reconstruct(&p.dense, Branch::Dense)?.codes))
        .collect::<Result<Vec<CodeMap>, Box<dyn Error>>>()?;
    let blanks = identify_blank(&corpus, cfg.codebook_size, 0.5)?;

    let (h, w) = cfg.grid.code_dims();
    let gen_cfg = if quick {
        GeneratorConfig { h, w, k: cfg.codebook_size, n_blocks: 1, dim: 32, n_heads: 2 }
    } else {
        GeneratorConfig { h, w, k: cfg.codebook_size, ..GeneratorConfig::desk() }
    };
    let gen_train = GenTrainConfig { iterations: if quick { 3 } else { 300 }, ..GenTrainConfig::default() };
    let (generator, _) = train_masked(&corpus, &gen_cfg, &gen_train)?;

    let clean = &corpus[0];
    let mut noisy = clean.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for e in noisy.entries.iter_mut() {
        if rng.random_bool(0.1) {
            *e = rng.random_range(0..cfg.codebook_size as u16);
        }
    }
    let corrupted = noisy.entries.iter().zip(&clean.entries).filter(|(a, b)| a != b).count();
    let steps = if quick { 4 } else { 12 };
    let sample = GenConfig { steps, suppress_steps: steps / 2, seed: 8, ..GenConfig::default() };
    let (denoised, rects) = generator.denoise_traced(&noisy, 2, 0.25, &sample, &blanks)?;
    let changed = denoised.entries.iter().zip(&noisy.entries).filter(|(a, b)| a != b).count();
    let wrong_after = denoised.entries.iter().zip(&clean.entries).filter(|(a, b)| a != b).count();
    println!("{corrupted} corrupted cells; denoising resampled rectangles {rects:?}");
    println!("{changed} cells changed, {wrong_after} cells now differ from the clean map");
    Ok(())
}

fn main() -> Result<(), Box<dyn Error>> {
    run(std::env::args().any(|a| a == "--quick"))
}
