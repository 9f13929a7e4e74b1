//! Voxelizes a scan into a BEV occupancy grid, checks the devoxelize round trip, and renders
//! a top-down PGM image and the 100×100 ground-plane histogram.
//!
//! `cargo run --release --example voxelize_and_render`

use std::error::Error;

use ultralidar::cli::render_pgm;
use ultralidar::scenes::{make_pair, random_scene, BeamConfig, SceneConfig};
use ultralidar::voxel::{bev_histogram, devoxelize, voxelize, GridConfig};

pub fn run(quick: bool) -> Result<(), Box<dyn Error>> {
    let grid_cfg = GridConfig::desk();
    let beams = if quick { BeamConfig { azimuth_steps: 64, ..BeamConfig::default() } } else { BeamConfig::default() };
    let scene = random_scene(3, &SceneConfig::default())?;
    let pair = make_pair(&scene, &beams, 4)?;

    let sparse = voxelize(&pair.sparse, &grid_cfg);
    let dense = voxelize(&pair.dense, &grid_cfg);
    println!("grid {}×{}×{}, code map {:?}", grid_cfg.h(), grid_cfg.w(), grid_cfg.c(), grid_cfg.code_dims());
    println!("occupied voxels: sparse {}, dense {}", sparse.occupied(), dense.occupied());
    println!("IoU(sparse, dense) = {:.3}", sparse.iou(&dense)?);
    assert_eq!(voxelize(&devoxelize(&dense), &grid_cfg), dense);

    let hist = bev_histogram(&dense);
    let busiest = hist.bins.iter().cloned().fold(0.0, f64::max);
    println!("histogram total {} (busiest bin {busiest})", hist.total());

    let dir = std::env::temp_dir().join("ultralidar-examples");
    std::fs::create_dir_all(&dir)?;
    dense.save(&dir.join("scene3_dense.ulog"))?;
    std::fs::write(dir.join("scene3_dense.pgm"), render_pgm(&dense))?;
    std::fs::write(dir.join("scene3_sparse.pgm"), render_pgm(&sparse))?;
    println!("wrote {}", dir.display());
    Ok(())
}

fn main() -> Result<(), Box<dyn Error>> {
    run(std::env::args().any(|a| a == "--quick"))
}
