//! Scene editing in code space: copies the code patch around a car into an empty stretch
//! of ground and decodes both versions.
//!
//! `cargo run --release --example manipulate_codes`

use std::error::Error;

use ultralidar::cli::render_pgm;
use ultralidar::codemap::Rect;
use ultralidar::generator::paste_region;
use ultralidar::nncore::{Checkpoint, PATCH};
use ultralidar::scenes::{derive_seed, make_pair, random_scene, BeamConfig, SceneConfig};
use ultralidar::voxel::OccupancyGrid;
use ultralidar::vqvae::{binarize, train_grids, Binarize, Branch, GridPair, TrainConfig, VqVaeConfig, VqVaeModel};

fn occupancy(g: &OccupancyGrid, rect: Rect) -> usize {
    let mut n = 0;
    for i in rect.row * PATCH..(rect.row + rect.height) * PATCH {
        for j in rect.col * PATCH..(rect.col + rect.width) * PATCH {
            n += (0..g.config().c()).filter(|&k| g.get(i, j, k)).count();
        }
    }
    n
}

pub fn run(quick: bool) -> Result<(), Box<dyn Error>> {
    let cfg = VqVaeConfig::desk();
    let ckpt = std::env::temp_dir().join("ultralidar-examples/vqvae.ckpt");
    let model = if !quick && ckpt.exists() {
        VqVaeModel::from_checkpoint(&Checkpoint::load(&ckpt)?, &cfg.grid, cfg.bank_capacity)?
    } else {
        let data = (0..if quick { 4 } else { 128 })
            .map(|i| {
                let scene = random_scene(derive_seed(1, i), &SceneConfig::default())?;
                Ok(GridPair::from_sample(&make_pair(&scene, &BeamConfig::default(), 4)?, &cfg.grid))
            })
            .collect::<Result<Vec<_>, Box<dyn Error>>>()?;
        let iters = if quick { 10 } else { 600 };
        let train = TrainConfig { iterations: iters, warmup_iters: (iters / 6).max(1), ..TrainConfig::default() };
        train_grids(&data, &cfg, &train)?.0
    };

    let scene = random_scene(derive_seed(1, 30_000), &SceneConfig::default())?;
    let pair = GridPair::from_sample(&make_pair(&scene, &BeamConfig::default(), 4)?, &cfg.grid);
    let codes = model.reconstruct(&pair.dense, Branch::Dense)?.codes;
    let grid = &model.config.grid;
    let (hc, wc) = grid.code_dims();

    let car = &scene.boxes[0];
    let z = grid.center(0, 0, 0)[2];
    let Some((i, j, _)) = grid.cell_of([car.center[0] as f32, car.center[1] as f32, z]) else {
        println!("first box lies outside the grid");
        return Ok(());
    };
    let src = Rect::new((i / PATCH).saturating_sub(1).min(hc - 2), (j / PATCH).saturating_sub(1).min(wc - 2), 2, 2);
    // a spot on the far side of the sensor
    let dst = ((hc / 2).min(hc - 2), if src.col < wc / 2 { wc - 4 } else { 2 });
    let edited = paste_region(&codes, &codes, src, dst)?;

    let decode = |m| -> Result<OccupancyGrid, Box<dyn Error>> {
        Ok(binarize(&model.decode_codes(m)?, grid, Binarize::Threshold)?)
    };
    let (before, after) = (decode(&codes)?, decode(&edited)?);
    let dst_rect = Rect::new(dst.0, dst.1, 2, 2);
    println!(
        "pasted cells {:?} onto {:?}: destination occupancy {} → {}",
        src,
        dst,
        occupancy(&before, dst_rect),
        occupancy(&after, dst_rect)
    );
    let dir = std::env::temp_dir().join("ultralidar-examples");
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("manipulated.pgm"), render_pgm(&after))?;
    Ok(())
}

fn main() -> Result<(), Box<dyn Error>> {
    run(std::env::args().any(|a| a == "--quick"))
}
