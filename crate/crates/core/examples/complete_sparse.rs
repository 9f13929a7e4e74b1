//! Sparse-to-dense completion: sparse scan → sparse encoder → shared codebook → dense
//! decoder. Reuses the checkpoint written by `train_vqvae` when present.
//!
//! `cargo run --release --example complete_sparse`

use std::error::Error;

use ultralidar::cli::render_pgm;
use ultralidar::nncore::Checkpoint;
use ultralidar::scenes::{derive_seed, make_pair, random_scene, BeamConfig, SceneConfig};
use ultralidar::vqvae::{train_grids, GridPair, TrainConfig, VqVaeConfig, VqVaeModel};

fn pairs(range: std::ops::Range<u64>, cfg: &VqVaeConfig) -> Result<Vec<GridPair>, Box<dyn Error>> {
    range
        .map(|i| {
            let scene = random_scene(derive_seed(1, i), &SceneConfig::default())?;
            Ok(GridPair::from_sample(&make_pair(&scene, &BeamConfig::default(), 4)?, &cfg.grid))
        })
        .collect()
}

fn model(quick: bool) -> Result<VqVaeModel<f32>, Box<dyn Error>> {
    let cfg = VqVaeConfig::desk();
    let ckpt = std::env::temp_dir().join("ultralidar-examples/vqvae.ckpt");
    if !quick && ckpt.exists() {
        println!("loading {}", ckpt.display());
        return Ok(VqVaeModel::from_checkpoint(&Checkpoint::load(&ckpt)?, &cfg.grid, cfg.bank_capacity)?);
    }
    let (n, iters) = if quick { (4, 10) } else { (128, 600) };
    println!("training a VQ-VAE for {iters} iterations");
    let train = TrainConfig { iterations: iters, warmup_iters: (iters / 6).max(1), ..TrainConfig::default() };
    Ok(train_grids(&pairs(0..n, &cfg)?, &cfg, &train)?.0)
}

pub fn run(quick: bool) -> Result<(), Box<dyn Error>> {
    let model = model(quick)?;
    let test = pairs(20_000..20_000 + if quick { 2 } else { 8 }, &model.config)?;
    let dir = std::env::temp_dir().join("ultralidar-examples");
    std::fs::create_dir_all(&dir)?;
    for (i, p) in test.iter().enumerate() {
        let completed = model.complete(&p.sparse)?;
        println!(
            "scene {i}: IoU sparse {:.3} → completed {:.3} ({} → {} voxels, dense {})",
            p.sparse.iou(&p.dense)?,
            completed.iou(&p.dense)?,
            p.sparse.occupied(),
            completed.occupied(),
            p.dense.occupied()
        );
        if i == 0 {
            std::fs::write(dir.join("completed.pgm"), render_pgm(&completed))?;
            completed.save(&dir.join("completed.ulog"))?;
        }
    }
    Ok(())
}

fn main() -> Result<(), Box<dyn Error>> {
    run(std::env::args().any(|a| a == "--quick"))
}
