//! Trains the sparse/dense VQ-VAE on procedural scenes, reports codebook health and held-out
//! IoU, and saves a checkpoint.
//!
//! `cargo run --release --example train_vqvae -- [iterations]`

use std::error::Error;

use ultralidar::scenes::{derive_seed, make_pair, random_scene, BeamConfig, SceneConfig};
use ultralidar::vqvae::{binarize, Binarize, Branch, GridPair, TrainConfig, Trainer, VqVaeConfig};

fn pairs(range: std::ops::Range<u64>, beams: &BeamConfig, cfg: &VqVaeConfig) -> Result<Vec<GridPair>, Box<dyn Error>> {
    range
        .map(|i| {
            let scene = random_scene(derive_seed(1, i), &SceneConfig::default())?;
            Ok(GridPair::from_sample(&make_pair(&scene, beams, 4)?, &cfg.grid))
        })
        .collect()
}

pub fn run(quick: bool, iterations: Option<u64>) -> Result<(), Box<dyn Error>> {
    let model_cfg = VqVaeConfig::desk();
    let beams = BeamConfig::default();
    let (n_train, iters) = if quick { (8, 20) } else { (256, iterations.unwrap_or(1500)) };
    let train = pairs(0..n_train, &beams, &model_cfg)?;
    let test = pairs(10_000..10_008, &beams, &model_cfg)?;

    let cfg = TrainConfig { iterations: iters, warmup_iters: (iters / 6).max(1), ..TrainConfig::default() };
    let mut trainer = Trainer::new(model_cfg, cfg)?;
    for i in 1..=iters {
        let stats = trainer.step(&train)?;
        if i % 250 == 0 || i == iters {
            println!(
                "iter {i:5}  bce {:.4}  codebook {:.4}  utilization {:.3}",
                stats.dense.bce + stats.sparse.bce,
                stats.dense.codebook + stats.sparse.codebook,
                stats.utilization
            );
        }
    }
    let (model, report) = trainer.finish();
    println!("k-means init at {:?}, revivals {:?}", report.initialized_at, report.reinit_events);

    let (mut rec, mut comp) = (0.0, 0.0);
    for p in &test {
        let r = model.reconstruct(&p.dense, Branch::Dense)?;
        rec += binarize(&r.logits, &model.config.grid, Binarize::Threshold)?.iou(&p.dense)?;
        comp += model.complete(&p.sparse)?.iou(&p.dense)?;
    }
    let n = test.len() as f64;
    println!("held-out IoU: reconstruction {:.3}, completion {:.3}", rec / n, comp / n);

    let dir = std::env::temp_dir().join("ultralidar-examples");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("vqvae.ckpt");
    model.to_checkpoint().save(&path)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn main() -> Result<(), Box<dyn Error>> {
    let quick = std::env::args().any(|a| a == "--quick");
    let iterations = std::env::args().skip(1).find_map(|a| a.parse().ok());
    run(quick, iterations)
}
