//! Masked-token generation: encodes a corpus to code maps, trains the bidirectional
//! transformer, then samples unconditionally (with and without BLANK suppression) and
//! conditionally on half of a real map.
//!
//! `cargo run --release --example generate_scenes`

use std::error::Error;

use ultralidar::cli::render_pgm;
use ultralidar::codemap::CodeMap;
use ultralidar::generator::{identify_blank, train_masked, GenConfig, GenTrainConfig, GeneratorConfig};
use ultralidar::nncore::Checkpoint;
use ultralidar::scenes::{derive_seed, make_pair, random_scene, BeamConfig, SceneConfig};
use ultralidar::vqvae::{binarize, train_grids, Binarize, Branch, GridPair, TrainConfig, VqVaeConfig, VqVaeModel};

fn pairs(range: std::ops::Range<u64>, cfg: &VqVaeConfig) -> Result<Vec<GridPair>, Box<dyn Error>> {
    range
        .map(|i| {
            let scene = random_scene(derive_seed(1, i), &SceneConfig::default())?;
            Ok(GridPair::from_sample(&make_pair(&scene, &BeamConfig::default(), 4)?, &cfg.grid))
        })
        .collect()
}

fn model(quick: bool, data: &[GridPair]) -> Result<VqVaeModel<f32>, Box<dyn Error>> {
    let cfg = VqVaeConfig::desk();
    let ckpt = std::env::temp_dir().join("ultralidar-examples/vqvae.ckpt");
    if !quick && ckpt.exists() {
        return Ok(VqVaeModel::from_checkpoint(&Checkpoint::load(&ckpt)?, &cfg.grid, cfg.bank_capacity)?);
    }
    let iters = if quick { 10 } else { 600 };
    let train = TrainConfig { iterations: iters, warmup_iters: (iters / 6).max(1), ..TrainConfig::default() };
    Ok(train_grids(data, &cfg, &train)?.0)
}

pub fn run(quick: bool) -> Result<(), Box<dyn Error>> {
    let data = pairs(0..if quick { 4 } else { 128 }, &VqVaeConfig::desk())?;
    let vq = model(quick, &data)?;
    let corpus = data
        .iter()
        .map(|p| Ok(vq.reconstruct(&p.dense, Branch::Dense)?.codes))
        .collect::<Result<Vec<CodeMap>, Box<dyn Error>>>()?;
    let blanks = identify_blank(&corpus, vq.config.codebook_size, 0.5)?;
    println!("BLANK set: {} codes covering half of all cells", blanks.codes.len());

    let (h, w) = vq.config.grid.code_dims();
    let gen_cfg = if quick {
        GeneratorConfig { h, w, k: vq.config.codebook_size, n_blocks: 1, dim: 32, n_heads: 2 }
    } else {
        GeneratorConfig { h, w, k: vq.config.codebook_size, ..GeneratorConfig::desk() }
    };
    let train = GenTrainConfig { iterations: if quick { 3 } else { 300 }, ..GenTrainConfig::default() };
    let (generator, losses) = train_masked(&corpus, &gen_cfg, &train)?;
    println!("generator loss {:.3} → {:.3}", losses[0], losses[losses.len() - 1]);

    let dir = std::env::temp_dir().join("ultralidar-examples");
    std::fs::create_dir_all(&dir)?;
    let steps = if quick { 4 } else { 12 };
    for suppress in [steps / 2, 0] {
        let cfg = GenConfig { steps, suppress_steps: suppress, seed: 5, ..GenConfig::default() };
        let map = generator.sample(&cfg, &blanks, None)?;
        let grid = binarize(&vq.decode_codes(&map)?, &vq.config.grid, Binarize::Threshold)?;
        println!(
            "unconditional, BLANK suppressed for {suppress} steps: BLANK fraction {:.2}, {} voxels",
            blanks.fraction_in(&map),
            grid.occupied()
        );
        std::fs::write(dir.join(format!("sample_s{suppress}.pgm")), render_pgm(&grid))?;
        map.save(&dir.join(format!("sample_s{suppress}.ulcm")))?;
    }

    // keep the near half of a real map and regenerate the far half
    let mut condition = corpus[0].clone();
    for r in h / 2..h {
        for c in 0..w {
            condition.set(r, c, gen_cfg.mask_token());
        }
    }
    let cfg = GenConfig { steps, suppress_steps: steps / 2, seed: 6, ..GenConfig::default() };
    let map = generator.sample(&cfg, &blanks, Some(&condition))?;
    let kept = (0..h / 2).all(|r| (0..w).all(|c| map.get(r, c) == corpus[0].get(r, c)));
    println!("conditional sample keeps the given half: {kept}");
    Ok(())
}

fn main() -> Result<(), Box<dyn Error>> {
    run(std::env::args().any(|a| a == "--quick"))
}
