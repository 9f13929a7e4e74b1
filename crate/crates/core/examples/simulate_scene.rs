//! Builds one procedural scene and scans it with the sparse sensor and its 4× denser
//! counterpart, then writes both clouds.
//!
//! `cargo run --release --example simulate_scene`

use std::error::Error;

use ultralidar::scenes::{make_pair, random_scene, BeamConfig, SceneConfig};

pub fn run(quick: bool) -> Result<(), Box<dyn Error>> {
    let scene_cfg = SceneConfig::default();
    let beams = if quick { BeamConfig { azimuth_steps: 64, ..BeamConfig::default() } } else { BeamConfig::default() };
    let scene = random_scene(7, &scene_cfg)?;
    println!("ground z = {:.2} + {:.4}·x with {} boxes", scene.ground_z0, scene.ground_slope, scene.boxes.len());
    for b in &scene.boxes {
        println!(
            "  box at ({:5.1}, {:5.1}) size {:.1}×{:.1}×{:.1} yaw {:.2}",
            b.center[0],
            b.center[1],
            2.0 * b.half_extents[0],
            2.0 * b.half_extents[1],
            2.0 * b.half_extents[2],
            b.yaw
        );
    }
    let pair = make_pair(&scene, &beams, 4)?;
    println!("sparse scan: {} points, dense scan: {} points", pair.sparse.len(), pair.dense.len());

    let dir = std::env::temp_dir().join("ultralidar-examples");
    std::fs::create_dir_all(&dir)?;
    pair.sparse.save(&dir.join("scene7_sparse.ulpc"))?;
    pair.dense.save(&dir.join("scene7_dense.csv"))?;
    println!("wrote {}", dir.display());
    Ok(())
}

fn main() -> Result<(), Box<dyn Error>> {
    run(std::env::args().any(|a| a == "--quick"))
}
