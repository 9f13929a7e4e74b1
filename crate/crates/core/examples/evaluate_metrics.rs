//! BEV-histogram MMD and JSD between two sets of scans, in occupancy and duplicated mode.
//!
//! `cargo run --release --example evaluate_metrics`

use std::error::Error;

use ultralidar::metrics::{evaluate_sets, EvalMode};
use ultralidar::scenes::{derive_seed, make_pair, random_scene, BeamConfig, SceneConfig};
use ultralidar::voxel::{voxelize, GridConfig, OccupancyGrid};

fn scans(seed: u64, n: u64, scene_cfg: &SceneConfig, dense: bool) -> Result<Vec<OccupancyGrid>, Box<dyn Error>> {
    (0..n)
        .map(|i| {
            let pair = make_pair(&random_scene(derive_seed(seed, i), scene_cfg)?, &BeamConfig::default(), 4)?;
            Ok(voxelize(if dense { &pair.dense } else { &pair.sparse }, &GridConfig::desk()))
        })
        .collect()
}

pub fn run(quick: bool) -> Result<(), Box<dyn Error>> {
    let n = if quick { 3 } else { 16 };
    let base = SceneConfig::default();
    let real = scans(1, n, &base, true)?;
    let other_seeds = scans(2, n, &base, true)?;
    let crowded = scans(3, n, &SceneConfig { boxes: (14, 18), ..base.clone() }, true)?;
    let sparse = scans(1, n, &base, false)?;

    for (name, set) in [("same distribution", &other_seeds), ("crowded scenes", &crowded), ("sparse scans", &sparse)] {
        for mode in [EvalMode::Occupancy, EvalMode::Duplicated] {
            let r = evaluate_sets(&real, set, mode)?;
            println!("{name:18} {}", r.machine_line());
        }
    }
    let same = evaluate_sets(&real, &real, EvalMode::Occupancy)?;
    println!("{:18} {}", "identical sets", same.machine_line());
    Ok(())
}

fn main() -> Result<(), Box<dyn Error>> {
    run(std::env::args().any(|a| a == "--quick"))
}
