//! Procedural driving-like scenes and a simulated spinning LiDAR.
//!
//! A scene is a tilted ground plane plus non-overlapping oriented boxes. Rays are cast
//! analytically from the origin, one per (beam, azimuth step).

use std::f64::consts::{PI, TAU};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::pointcloud::PointCloud;

#[derive(Debug, thiserror::Error)]
pub enum SceneError {
    #[error("scene too dense: could not place {wanted} boxes within {budget} attempts")]
    TooDense { wanted: usize, budget: usize },
    #[error("invalid scene config: {0}")]
    Config(String),
    #[error("invalid beam config: {0}")]
    Beams(String),
}

/// A box resting anywhere in the scene, rotated about z.
#[derive(Clone, Debug, PartialEq)]
pub struct OrientedBox {
    pub center: [f64; 3],
    pub half_extents: [f64; 3],
    /// Radians in `[0, 2π)`.
    pub yaw: f64,
}

impl OrientedBox {
    /// Half of the ground-plane diagonal.
    pub fn half_diagonal(&self) -> f64 {
        self.half_extents[0].hypot(self.half_extents[1])
    }

    fn to_local(&self, v: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.yaw.sin_cos();
        [c * v[0] + s * v[1], -s * v[0] + c * v[1], v[2]]
    }

    /// Whether `p` lies inside or on the box.
    pub fn contains(&self, p: [f64; 3]) -> bool {
        let rel = [p[0] - self.center[0], p[1] - self.center[1], p[2] - self.center[2]];
        let l = self.to_local(rel);
        (0..3).all(|a| l[a].abs() <= self.half_extents[a])
    }

    /// Entry distance of the ray `origin + t·dir`, `t > 0`, by the slab method in the box frame.
    pub fn intersect(&self, origin: [f64; 3], dir: [f64; 3]) -> Option<f64> {
        let rel = [origin[0] - self.center[0], origin[1] - self.center[1], origin[2] - self.center[2]];
        let o = self.to_local(rel);
        let d = self.to_local(dir);
        let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
        for a in 0..3 {
            let e = self.half_extents[a];
            if d[a].abs() < 1e-15 {
                if o[a].abs() > e {
                    return None;
                }
                continue;
            }
            let ta = (-e - o[a]) / d[a];
            let tb = (e - o[a]) / d[a];
            t0 = t0.max(ta.min(tb));
            t1 = t1.min(ta.max(tb));
        }
        if t1 < t0 || t1 <= 0.0 {
            return None;
        }
        Some(if t0 > 0.0 { t0 } else { t1 })
    }
}

/// Ground `z = ground_z0 + ground_slope·x` plus boxes.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub ground_slope: f64,
    pub ground_z0: f64,
    pub boxes: Vec<OrientedBox>,
    pub seed: u64,
}

impl Scene {
    pub fn ground_z(&self, x: f64) -> f64 {
        self.ground_z0 + self.ground_slope * x
    }
}

/// Sampling ranges for [`random_scene`].
#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    /// Box centers are drawn from this `(x, y)` region.
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    /// Inclusive box-count range.
    pub boxes: (usize, usize),
    pub slope: (f64, f64),
    pub ground_z0: (f64, f64),
    pub half_x: (f64, f64),
    pub half_y: (f64, f64),
    pub half_z: (f64, f64),
    /// Boxes keep this ground-plane clearance from the sensor.
    pub min_sensor_distance: f64,
    pub retry_budget: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            x_range: (4.0, 48.0),
            y_range: (-22.0, 22.0),
            boxes: (4, 10),
            slope: (-0.05, 0.05),
            ground_z0: (-1.73, -1.73),
            half_x: (0.8, 1.2),
            half_y: (1.8, 2.6),
            half_z: (0.6, 0.9),
            min_sensor_distance: 4.0,
            retry_budget: 1000,
        }
    }
}

impl SceneConfig {
    fn validate(&self) -> Result<(), SceneError> {
        let ok = |r: (f64, f64)| r.0.is_finite() && r.1.is_finite() && r.0 <= r.1;
        if self.boxes.0 > self.boxes.1 {
            return Err(SceneError::Config("empty box-count range".into()));
        }
        if !(ok(self.x_range) && ok(self.y_range) && ok(self.slope) && ok(self.ground_z0)) {
            return Err(SceneError::Config("invalid region or ground range".into()));
        }
        if !(ok(self.half_x) && ok(self.half_y) && ok(self.half_z)) || self.half_x.0 <= 0.0 || self.half_y.0 <= 0.0 || self.half_z.0 <= 0.0 {
            return Err(SceneError::Config("box half-extents must be positive".into()));
        }
        Ok(())
    }
}

fn uniform(rng: &mut impl Rng, r: (f64, f64)) -> f64 {
    if r.0 == r.1 {
        r.0
    } else {
        rng.random_range(r.0..r.1)
    }
}

/// Whether two boxes are far enough apart to be guaranteed disjoint.
pub fn boxes_separated(a: &OrientedBox, b: &OrientedBox) -> bool {
    let d = (a.center[0] - b.center[0]).hypot(a.center[1] - b.center[1]);
    d > a.half_diagonal() + b.half_diagonal()
}

/// Deterministic scene for `(seed, cfg)`.
pub fn random_scene(seed: u64, cfg: &SceneConfig) -> Result<Scene, SceneError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ground_slope = uniform(&mut rng, cfg.slope);
    let ground_z0 = uniform(&mut rng, cfg.ground_z0);
    let wanted = if cfg.boxes.0 == cfg.boxes.1 { cfg.boxes.0 } else { rng.random_range(cfg.boxes.0..=cfg.boxes.1) };
    let mut boxes: Vec<OrientedBox> = Vec::with_capacity(wanted);
    let mut attempts = 0;
    while boxes.len() < wanted {
        if attempts == cfg.retry_budget {
            return Err(SceneError::TooDense { wanted, budget: cfg.retry_budget });
        }
        attempts += 1;
        let half_extents = [uniform(&mut rng, cfg.half_x), uniform(&mut rng, cfg.half_y), uniform(&mut rng, cfg.half_z)];
        let x = uniform(&mut rng, cfg.x_range);
        let y = uniform(&mut rng, cfg.y_range);
        let yaw = rng.random_range(0.0..TAU);
        let candidate = OrientedBox {
            center: [x, y, ground_z0 + ground_slope * x + half_extents[2]],
            half_extents,
            yaw,
        };
        if x.hypot(y) <= cfg.min_sensor_distance + candidate.half_diagonal() {
            continue;
        }
        if boxes.iter().all(|b| boxes_separated(b, &candidate)) {
            boxes.push(candidate);
        }
    }
    Ok(Scene { ground_slope, ground_z0, boxes, seed })
}

/// Multi-beam spinning sensor with linearly spaced beam elevations.
#[derive(Clone, Debug, PartialEq)]
pub struct BeamConfig {
    pub n_beams: usize,
    /// Degrees.
    pub elevation_min: f64,
    pub elevation_max: f64,
    pub azimuth_steps: usize,
    pub max_range: f64,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self { n_beams: 8, elevation_min: -30.0, elevation_max: -2.0, azimuth_steps: 256, max_range: 60.0 }
    }
}

impl BeamConfig {
    pub fn validate(&self) -> Result<(), SceneError> {
        if self.n_beams < 2 {
            return Err(SceneError::Beams("need at least 2 beams".into()));
        }
        if !(self.elevation_min < self.elevation_max) {
            return Err(SceneError::Beams("elevation_min must be below elevation_max".into()));
        }
        if self.azimuth_steps < 4 {
            return Err(SceneError::Beams("need at least 4 azimuth steps".into()));
        }
        if !(self.max_range > 0.0) {
            return Err(SceneError::Beams("max_range must be positive".into()));
        }
        Ok(())
    }

    /// Beam elevations in degrees, lowest first.
    pub fn elevations(&self) -> Vec<f64> {
        (0..self.n_beams).map(|i| self.elevation_at(i as u64, (self.n_beams - 1) as u64)).collect()
    }

    /// `min + (max − min)·num/den` with the fraction reduced first, so equal ratios give
    /// bit-identical angles whatever beam count they came from.
    fn elevation_at(&self, num: u64, den: u64) -> f64 {
        let g = gcd(num, den).max(1);
        let (num, den) = (num / g, den / g);
        self.elevation_min + (self.elevation_max - self.elevation_min) * num as f64 / den as f64
    }

    /// Dense elevations with `factor − 1` beams interleaved after every sparse beam; the
    /// sparse beams sit at indices `0, factor, 2·factor, …`.
    pub fn densified_elevations(&self, factor: usize) -> Vec<f64> {
        let den = ((self.n_beams - 1) * factor) as u64;
        (0..self.n_beams * factor).map(|j| self.elevation_at(j as u64, den)).collect()
    }
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Unit ray direction for an elevation and azimuth in degrees / radians.
pub fn ray_direction(elevation_deg: f64, azimuth: f64) -> [f64; 3] {
    let el = elevation_deg * PI / 180.0;
    let (se, ce) = el.sin_cos();
    let (sa, ca) = azimuth.sin_cos();
    [ce * ca, ce * sa, se]
}

/// Range to the nearest surface along `dir`, boxes winning exact ties with the ground.
pub fn cast_ray(scene: &Scene, dir: [f64; 3], max_range: f64) -> Option<f64> {
    let mut best: Option<f64> = None;
    let denom = dir[2] - scene.ground_slope * dir[0];
    if denom.abs() > 1e-15 {
        let t = scene.ground_z0 / denom;
        if t > 0.0 && t <= max_range {
            best = Some(t);
        }
    }
    for b in &scene.boxes {
        if let Some(t) = b.intersect([0.0; 3], dir) {
            if t <= max_range && best.is_none_or(|g| t <= g) {
                best = Some(t);
            }
        }
    }
    best
}

/// A returned point tagged with the index of the elevation that produced it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BeamHit {
    pub beam: usize,
    pub point: [f32; 3],
}

/// Casts one ray per (elevation, azimuth step), beam-major.
pub fn raycast_elevations(scene: &Scene, elevations: &[f64], azimuth_steps: usize, max_range: f64) -> Vec<BeamHit> {
    let mut hits = Vec::new();
    for (beam, &el) in elevations.iter().enumerate() {
        for a in 0..azimuth_steps {
            let az = TAU * a as f64 / azimuth_steps as f64;
            let d = ray_direction(el, az);
            if let Some(t) = cast_ray(scene, d, max_range) {
                hits.push(BeamHit { beam, point: [(t * d[0]) as f32, (t * d[1]) as f32, (t * d[2]) as f32] });
            }
        }
    }
    hits
}

/// Point cloud seen by `beams` from the origin.
pub fn raycast(scene: &Scene, beams: &BeamConfig) -> Result<PointCloud, SceneError> {
    beams.validate()?;
    let hits = raycast_elevations(scene, &beams.elevations(), beams.azimuth_steps, beams.max_range);
    Ok(PointCloud::new(hits.into_iter().map(|h| h.point).collect()))
}

/// Sparse and dense scans of one scene.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedSample {
    pub sparse: PointCloud,
    pub dense: PointCloud,
    /// Elevation index of every dense point.
    pub dense_beams: Vec<usize>,
    pub densify_factor: usize,
}

/// Scans `scene` with `sparse_beams` and with a `densify_factor`× denser beam set that
/// contains every sparse elevation.
pub fn make_pair(scene: &Scene, sparse_beams: &BeamConfig, densify_factor: usize) -> Result<PairedSample, SceneError> {
    sparse_beams.validate()?;
    if densify_factor < 2 {
        return Err(SceneError::Beams(format!("densify factor {densify_factor} < 2")));
    }
    let dense_el = sparse_beams.densified_elevations(densify_factor);
    let hits = raycast_elevations(scene, &dense_el, sparse_beams.azimuth_steps, sparse_beams.max_range);
    let sparse = hits.iter().filter(|h| h.beam % densify_factor == 0).map(|h| h.point).collect();
    Ok(PairedSample {
        sparse: PointCloud::new(sparse),
        dense_beams: hits.iter().map(|h| h.beam).collect(),
        dense: PointCloud::new(hits.into_iter().map(|h| h.point).collect()),
        densify_factor,
    })
}

/// SplitMix64 finalizer over `(master, index)`: independent per-item seeds.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut z = master ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat(z: f64) -> Scene {
        Scene { ground_slope: 0.0, ground_z0: z, boxes: vec![], seed: 0 }
    }

    #[test]
    fn forty_five_degree_ray_hits_at_two_meters() {
        let d = ray_direction(-45.0, 0.0);
        let t = cast_ray(&flat(-2.0), d, 60.0).unwrap();
        let p = [t * d[0], t * d[1], t * d[2]];
        assert!((p[0] - 2.0).abs() < 1e-12 && p[1].abs() < 1e-12 && (p[2] + 2.0).abs() < 1e-12);
    }

    #[test]
    fn upward_beams_miss_empty_scene() {
        let beams = BeamConfig { n_beams: 4, elevation_min: 0.0, elevation_max: 10.0, azimuth_steps: 16, max_range: 100.0 };
        assert!(raycast(&flat(-2.0), &beams).unwrap().is_empty());
    }

    #[test]
    fn zero_boxes_gives_ground_only() {
        let cfg = SceneConfig { boxes: (0, 0), ..SceneConfig::default() };
        let s = random_scene(7, &cfg).unwrap();
        assert!(s.boxes.is_empty());
        assert_eq!(s, random_scene(7, &cfg).unwrap());
    }

    #[test]
    fn impossible_density_reports_error() {
        let cfg = SceneConfig { x_range: (10.0, 12.0), y_range: (0.0, 1.0), boxes: (5, 5), ..SceneConfig::default() };
        assert!(matches!(random_scene(1, &cfg), Err(SceneError::TooDense { .. })));
    }

    #[test]
    fn box_wins_exact_tie() {
        let b = OrientedBox { center: [5.0, 0.0, -1.0], half_extents: [1.0, 1.0, 1.0], yaw: 0.0 };
        let s = Scene { ground_slope: 0.0, ground_z0: -2.0, boxes: vec![b.clone()], seed: 0 };
        let d = ray_direction(0.0, 0.0);
        assert_eq!(cast_ray(&s, d, 60.0), Some(4.0));
        assert!(b.contains([4.0, 0.0, -1.0]));
    }

    #[test]
    fn beam_validation() {
        let b = BeamConfig::default();
        assert!(BeamConfig { n_beams: 1, ..b.clone() }.validate().is_err());
        assert!(BeamConfig { elevation_min: 5.0, elevation_max: 5.0, ..b.clone() }.validate().is_err());
        assert!(BeamConfig { azimuth_steps: 3, ..b.clone() }.validate().is_err());
        assert!(BeamConfig { max_range: 0.0, ..b }.validate().is_err());
    }

    #[test]
    fn densified_set_contains_sparse_exactly() {
        let b = BeamConfig::default();
        let sparse = b.elevations();
        let dense = b.densified_elevations(2);
        assert_eq!(dense.len(), 16);
        for (i, e) in sparse.iter().enumerate() {
            assert_eq!(dense[2 * i].to_bits(), e.to_bits());
        }
        let full = BeamConfig { n_beams: 64, ..BeamConfig::default() };
        assert_eq!(full.densified_elevations(8).len(), 512);
    }

    #[test]
    fn densify_factor_one_rejected() {
        assert!(make_pair(&flat(-2.0), &BeamConfig::default(), 1).is_err());
    }

    #[test]
    fn seeds_differ_per_index() {
        assert_ne!(derive_seed(1, 0), derive_seed(1, 1));
        assert_eq!(derive_seed(9, 3), derive_seed(9, 3));
    }
}
