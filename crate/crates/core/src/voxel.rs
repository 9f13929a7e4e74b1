//! Birds-eye-view occupancy grids, ground-plane histograms, and the per-bin
//! duplication correction used when comparing against point-count statistics.

use std::io::{Read, Write};

use crate::io::{expect_header, read_u32, FormatError};
use crate::nncore::PATCH;
use crate::pointcloud::PointCloud;

/// Histogram resolution along each ground-plane axis.
pub const HIST_BINS: usize = 100;

#[derive(Debug, thiserror::Error)]
pub enum VoxelError {
    #[error("invalid grid config: {0}")]
    Config(String),
    #[error("grid geometry mismatch: {0}")]
    Geometry(String),
}

/// Region of interest and voxel size. Derived dimensions are fixed at construction.
#[derive(Clone, Debug, PartialEq)]
pub struct GridConfig {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub z_min: f64,
    pub z_max: f64,
    pub vx: f64,
    pub vy: f64,
    pub vz: f64,
    h: usize,
    w: usize,
    c: usize,
}

fn cells(lo: f64, hi: f64, v: f64, axis: &str) -> Result<usize, VoxelError> {
    if !(lo.is_finite() && hi.is_finite() && v.is_finite()) || hi <= lo || v <= 0.0 {
        return Err(VoxelError::Config(format!("{axis}: [{lo}, {hi}) with voxel {v}")));
    }
    let extent = hi - lo;
    let n = (extent / v).round();
    if n < 1.0 || (n * v - extent).abs() > 1e-9 * extent.max(1.0) {
        return Err(VoxelError::Config(format!("{axis}: extent {extent} is not a multiple of {v}")));
    }
    Ok(n as usize)
}

impl GridConfig {
    pub fn new(x: (f64, f64), y: (f64, f64), z: (f64, f64), voxel: (f64, f64, f64)) -> Result<Self, VoxelError> {
        let h = cells(x.0, x.1, voxel.0, "x")?;
        let w = cells(y.0, y.1, voxel.1, "y")?;
        let c = cells(z.0, z.1, voxel.2, "z")?;
        if h % PATCH != 0 || w % PATCH != 0 {
            return Err(VoxelError::Config(format!("{h}×{w} is not divisible by {PATCH}")));
        }
        Ok(Self {
            x_min: x.0,
            x_max: x.1,
            y_min: y.0,
            y_max: y.1,
            z_min: z.0,
            z_max: z.1,
            vx: voxel.0,
            vy: voxel.1,
            vz: voxel.2,
            h,
            w,
            c,
        })
    }

    /// `[0, 51.2) × [−25.6, 25.6) × [−2.4, 2.4)` at 0.4 × 0.4 × 0.3 m: 128 × 128 × 16.
    pub fn desk() -> Self {
        Self::new((0.0, 51.2), (-25.6, 25.6), (-2.4, 2.4), (0.4, 0.4, 0.3)).expect("valid desk grid")
    }

    /// `[0, 80) × [−40, 40) × [−3, 3)` at 15.625 × 15.625 × 15 cm: 512 × 512 × 40.
    pub fn full_scale() -> Self {
        Self::new((0.0, 80.0), (-40.0, 40.0), (-3.0, 3.0), (0.15625, 0.15625, 0.15)).expect("valid full-scale grid")
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn c(&self) -> usize {
        self.c
    }

    pub fn voxel_count(&self) -> usize {
        self.h * self.w * self.c
    }

    /// Code-map geometry after the 8× downsample.
    pub fn code_dims(&self) -> (usize, usize) {
        (self.h / PATCH, self.w / PATCH)
    }

    /// Voxel containing `p`, or `None` outside the half-open region of interest.
    pub fn cell_of(&self, p: [f32; 3]) -> Option<(usize, usize, usize)> {
        let i = axis_index(p[0] as f64, self.x_min, self.x_max, self.vx, self.h)?;
        let j = axis_index(p[1] as f64, self.y_min, self.y_max, self.vy, self.w)?;
        let k = axis_index(p[2] as f64, self.z_min, self.z_max, self.vz, self.c)?;
        Some((i, j, k))
    }

    pub fn center(&self, i: usize, j: usize, k: usize) -> [f32; 3] {
        [
            (self.x_min + (i as f64 + 0.5) * self.vx) as f32,
            (self.y_min + (j as f64 + 0.5) * self.vy) as f32,
            (self.z_min + (k as f64 + 0.5) * self.vz) as f32,
        ]
    }

    /// Histogram bin of a ground-plane position, or `None` outside the `(x, y)` extent.
    pub fn hist_bin(&self, x: f64, y: f64) -> Option<usize> {
        let bx = axis_index(x, self.x_min, self.x_max, (self.x_max - self.x_min) / HIST_BINS as f64, HIST_BINS)?;
        let by = axis_index(y, self.y_min, self.y_max, (self.y_max - self.y_min) / HIST_BINS as f64, HIST_BINS)?;
        Some(bx * HIST_BINS + by)
    }

    fn check_same(&self, other: &GridConfig) -> Result<(), VoxelError> {
        if self != other {
            return Err(VoxelError::Geometry("grids use different configs".into()));
        }
        Ok(())
    }
}

fn axis_index(v: f64, lo: f64, hi: f64, size: f64, n: usize) -> Option<usize> {
    if !(v >= lo && v < hi) {
        return None;
    }
    Some((((v - lo) / size).floor() as usize).min(n - 1))
}

/// Binary `H×W×C` occupancy, x-index outermost, then y, then z.
#[derive(Clone, Debug, PartialEq)]
pub struct OccupancyGrid {
    config: GridConfig,
    bits: Vec<bool>,
}

impl OccupancyGrid {
    pub fn empty(config: &GridConfig) -> Self {
        Self { bits: vec![false; config.voxel_count()], config: config.clone() }
    }

    pub fn from_bits(config: &GridConfig, bits: Vec<bool>) -> Result<Self, VoxelError> {
        if bits.len() != config.voxel_count() {
            return Err(VoxelError::Geometry(format!(
                "{} bits for a {}×{}×{} grid",
                bits.len(),
                config.h,
                config.w,
                config.c
            )));
        }
        Ok(Self { config: config.clone(), bits })
    }

    pub fn config(&self) -> &GridConfig {
        &self.config
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.config.w + j) * self.config.c + k
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> bool {
        self.bits[self.index(i, j, k)]
    }

    pub fn set(&mut self, i: usize, j: usize, k: usize, v: bool) {
        let idx = self.index(i, j, k);
        self.bits[idx] = v;
    }

    pub fn occupied(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// `(i, j, k)` of every occupied voxel in row-major order.
    pub fn occupied_cells(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        let (w, c) = (self.config.w, self.config.c);
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(move |(idx, _)| (idx / (w * c), (idx / c) % w, idx % c))
    }

    /// Occupied voxels inside the 8×8 BEV patch `(pi, pj)`.
    pub fn patch_occupancy(&self, pi: usize, pj: usize) -> usize {
        let mut n = 0;
        for i in pi * PATCH..(pi + 1) * PATCH {
            for j in pj * PATCH..(pj + 1) * PATCH {
                let base = self.index(i, j, 0);
                n += self.bits[base..base + self.config.c].iter().filter(|&&b| b).count();
            }
        }
        n
    }

    /// Intersection over union of occupied voxels; two empty grids score 1.
    pub fn iou(&self, other: &OccupancyGrid) -> Result<f64, VoxelError> {
        self.config.check_same(&other.config)?;
        let (mut inter, mut union) = (0usize, 0usize);
        for (&a, &b) in self.bits.iter().zip(&other.bits) {
            inter += (a && b) as usize;
            union += (a || b) as usize;
        }
        Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
    }

    /// `ULOG`: magic, version `u16 = 1`, `H, W, C` as `u32`, then LSB-first packed bits.
    pub fn write_ulog(&self, mut w: impl Write) -> Result<(), FormatError> {
        let mut buf = Vec::with_capacity(18 + self.bits.len().div_ceil(8));
        buf.extend_from_slice(b"ULOG");
        buf.extend_from_slice(&1u16.to_le_bytes());
        for d in [self.config.h, self.config.w, self.config.c] {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        buf.extend(self.bits.chunks(8).map(|chunk| {
            chunk.iter().enumerate().fold(0u8, |acc, (bit, &v)| acc | ((v as u8) << bit))
        }));
        w.write_all(&buf)?;
        Ok(())
    }

    /// Reads a `ULOG` grid whose dimensions must match `config`.
    pub fn read_ulog(mut r: impl Read, config: &GridConfig) -> Result<Self, FormatError> {
        expect_header(&mut r, b"ULOG", "ULOG")?;
        let dims = [read_u32(&mut r)?, read_u32(&mut r)?, read_u32(&mut r)?].map(|d| d as usize);
        if dims != [config.h, config.w, config.c] {
            return Err(FormatError::Invalid(format!(
                "grid is {:?}, config expects {:?}",
                dims,
                [config.h, config.w, config.c]
            )));
        }
        let n = config.voxel_count();
        let mut packed = vec![0u8; n.div_ceil(8)];
        r.read_exact(&mut packed)?;
        let bits = (0..n).map(|i| packed[i / 8] >> (i % 8) & 1 == 1).collect();
        Ok(Self { config: config.clone(), bits })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), FormatError> {
        let mut buf = Vec::new();
        self.write_ulog(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path, config: &GridConfig) -> Result<Self, FormatError> {
        Self::read_ulog(std::io::BufReader::new(std::fs::File::open(path)?), config)
    }
}

/// Occupancy of every voxel holding at least one point; points outside the region are dropped.
pub fn voxelize(cloud: &PointCloud, cfg: &GridConfig) -> OccupancyGrid {
    let mut grid = OccupancyGrid::empty(cfg);
    for &p in cloud.iter() {
        if let Some((i, j, k)) = cfg.cell_of(p) {
            grid.set(i, j, k, true);
        }
    }
    grid
}

/// One point at the center of each occupied voxel, row-major.
pub fn devoxelize(grid: &OccupancyGrid) -> PointCloud {
    let cfg = grid.config();
    PointCloud::new(grid.occupied_cells().map(|(i, j, k)| cfg.center(i, j, k)).collect())
}

/// What a histogram bin counts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum HistMode {
    Occupancy,
    Points,
}

impl std::fmt::Display for HistMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            HistMode::Occupancy => "occupancy",
            HistMode::Points => "points",
        })
    }
}

/// `100 × 100` ground-plane counts, x-bin outermost.
#[derive(Clone, Debug, PartialEq)]
pub struct BevHistogram {
    pub bins: Vec<f64>,
    pub mode: HistMode,
}

impl BevHistogram {
    pub fn zeros(mode: HistMode) -> Self {
        Self { bins: vec![0.0; HIST_BINS * HIST_BINS], mode }
    }

    pub fn total(&self) -> f64 {
        self.bins.iter().sum()
    }

    pub fn get(&self, bx: usize, by: usize) -> f64 {
        self.bins[bx * HIST_BINS + by]
    }
}

/// Occupancy-mode histogram: every occupied voxel counts once, at its center's bin.
pub fn bev_histogram(grid: &OccupancyGrid) -> BevHistogram {
    let cfg = grid.config();
    let mut hist = BevHistogram::zeros(HistMode::Occupancy);
    let xbins: Vec<Option<usize>> = (0..cfg.h)
        .map(|i| cfg.hist_bin(cfg.center(i, 0, 0)[0] as f64, cfg.y_min).map(|b| b / HIST_BINS))
        .collect();
    let ybins: Vec<Option<usize>> = (0..cfg.w)
        .map(|j| cfg.hist_bin(cfg.x_min, cfg.center(0, j, 0)[1] as f64).map(|b| b % HIST_BINS))
        .collect();
    for i in 0..cfg.h {
        for j in 0..cfg.w {
            let base = grid.index(i, j, 0);
            let n = grid.bits[base..base + cfg.c].iter().filter(|&&b| b).count();
            if n == 0 {
                continue;
            }
            if let (Some(bx), Some(by)) = (xbins[i], ybins[j]) {
                hist.bins[bx * HIST_BINS + by] += n as f64;
            }
        }
    }
    hist
}

/// Points-mode histogram of the points inside the grid's region of interest.
pub fn bev_histogram_points(cloud: &PointCloud, cfg: &GridConfig) -> BevHistogram {
    let mut hist = BevHistogram::zeros(HistMode::Points);
    for &p in cloud.iter() {
        if cfg.cell_of(p).is_none() {
            continue;
        }
        if let Some(b) = cfg.hist_bin(p[0] as f64, p[1] as f64) {
            hist.bins[b] += 1.0;
        }
    }
    hist
}

/// `real[b] / gen[b]` where `gen[b] > 0`, else 0.
pub fn duplication_coefficients(real: &BevHistogram, gen: &BevHistogram) -> Vec<f64> {
    real.bins
        .iter()
        .zip(&gen.bins)
        .map(|(&r, &g)| if g > 0.0 { r / g } else { 0.0 })
        .collect()
}

/// Emits `round(coeff)` copies (at least one when `coeff > 0`) of each occupied voxel center.
pub fn apply_duplication(grid: &OccupancyGrid, coeffs: &[f64]) -> Result<PointCloud, VoxelError> {
    if coeffs.len() != HIST_BINS * HIST_BINS {
        return Err(VoxelError::Geometry(format!("{} coefficients, need {}", coeffs.len(), HIST_BINS * HIST_BINS)));
    }
    let cfg = grid.config();
    let mut points = Vec::new();
    for (i, j, k) in grid.occupied_cells() {
        let p = cfg.center(i, j, k);
        let Some(b) = cfg.hist_bin(p[0] as f64, p[1] as f64) else { continue };
        let coeff = coeffs[b];
        if coeff <= 0.0 {
            continue;
        }
        let copies = (coeff.round() as usize).max(1);
        points.extend(std::iter::repeat_n(p, copies));
    }
    Ok(PointCloud::new(points))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small() -> GridConfig {
        GridConfig::new((0.0, 6.4), (-3.2, 3.2), (-1.0, 1.0), (0.4, 0.4, 0.25)).unwrap()
    }

    #[test]
    fn desk_and_full_scale_dimensions() {
        let d = GridConfig::desk();
        assert_eq!((d.h(), d.w(), d.c()), (128, 128, 16));
        let p = GridConfig::full_scale();
        assert_eq!((p.h(), p.w()), (512, 512));
        assert_eq!(p.code_dims(), (64, 64));
    }

    #[test]
    fn config_validation() {
        assert!(GridConfig::new((0.0, 10.0), (0.0, 6.4), (0.0, 1.0), (0.3, 0.4, 0.5)).is_err());
        assert!(GridConfig::new((0.0, 4.0), (0.0, 6.4), (0.0, 1.0), (0.4, 0.4, 0.5)).is_err());
        assert!(GridConfig::new((1.0, 0.0), (0.0, 6.4), (0.0, 1.0), (0.4, 0.4, 0.5)).is_err());
    }

    #[test]
    fn empty_cloud_gives_empty_grid() {
        let g = voxelize(&PointCloud::default(), &small());
        assert_eq!(g.occupied(), 0);
        assert!(devoxelize(&g).is_empty());
        assert_eq!(bev_histogram(&g).total(), 0.0);
    }

    #[test]
    fn full_scale_corner_point() {
        let cfg = GridConfig::full_scale();
        let p = [0.1f32, -39.9, (cfg.z_min + 0.01) as f32];
        let expect = (
            ((0.1f32 as f64 - 0.0) / 0.15625).floor() as usize,
            ((-39.9f32 as f64 + 40.0) / 0.15625).floor() as usize,
            ((p[2] as f64 - cfg.z_min) / 0.15).floor() as usize,
        );
        assert_eq!(expect, (0, 0, 0));
        assert_eq!(cfg.cell_of(p), Some(expect));
    }

    #[test]
    fn upper_boundary_is_excluded() {
        let cfg = small();
        assert_eq!(cfg.cell_of([6.4, 0.0, 0.0]), None);
        assert_eq!(cfg.cell_of([0.0, -3.0, -1.0]), Some((0, 0, 0)));
        assert_eq!(cfg.cell_of([6.39, 3.19, 0.99]), Some((15, 15, 7)));
    }

    #[test]
    fn single_cell_center() {
        let cfg = small();
        let mut g = OccupancyGrid::empty(&cfg);
        g.set(3, 5, 2, true);
        let pc = devoxelize(&g);
        let want = [
            (0.0 + 3.5 * 0.4) as f32,
            (-3.2 + 5.5 * 0.4) as f32,
            (-1.0 + 2.5 * 0.25) as f32,
        ];
        assert_eq!(pc.points, vec![want]);
    }

    #[test]
    fn column_of_five_counts_five() {
        let cfg = small();
        let mut g = OccupancyGrid::empty(&cfg);
        for k in 0..5 {
            g.set(7, 9, k, true);
        }
        let h = bev_histogram(&g);
        assert_eq!(h.total(), 5.0);
        assert_eq!(h.bins.iter().filter(|&&v| v > 0.0).count(), 1);
        assert_eq!(h.bins.iter().cloned().fold(0.0, f64::max), 5.0);
    }

    #[test]
    fn coefficient_conventions() {
        let mut real = BevHistogram::zeros(HistMode::Occupancy);
        let mut gen = BevHistogram::zeros(HistMode::Occupancy);
        real.bins[0] = 4.0;
        gen.bins[0] = 2.0;
        real.bins[1] = 3.0;
        let c = duplication_coefficients(&real, &gen);
        assert_eq!(c[0], 2.0);
        assert_eq!(c[1], 0.0);
        let same = duplication_coefficients(&real, &real);
        assert_eq!(same[0], 1.0);
        assert_eq!(same[1], 1.0);
        assert_eq!(same[2], 0.0);
    }

    #[test]
    fn triple_coefficient_on_two_voxels() {
        let cfg = GridConfig::desk();
        let mut g = OccupancyGrid::empty(&cfg);
        g.set(10, 10, 3, true);
        g.set(10, 10, 4, true);
        g.set(60, 60, 4, true);
        let p = cfg.center(10, 10, 3);
        let b = cfg.hist_bin(p[0] as f64, p[1] as f64).unwrap();
        let mut coeffs = vec![0.0; HIST_BINS * HIST_BINS];
        coeffs[b] = 3.0;
        let pc = apply_duplication(&g, &coeffs).unwrap();
        assert_eq!(pc.len(), 6);
        // coefficient 1 everywhere reproduces devoxelize
        let ones = vec![1.0; HIST_BINS * HIST_BINS];
        assert_eq!(apply_duplication(&g, &ones).unwrap(), devoxelize(&g));
        // small positive coefficients still emit one copy
        let mut tiny = vec![0.0; HIST_BINS * HIST_BINS];
        tiny[b] = 0.2;
        assert_eq!(apply_duplication(&g, &tiny).unwrap().len(), 2);
    }

    #[test]
    fn ulog_header_and_packing() {
        let cfg = small();
        let mut g = OccupancyGrid::empty(&cfg);
        g.set(0, 0, 0, true);
        g.set(0, 0, 3, true);
        g.set(0, 1, 1, true); // index 9
        let mut buf = Vec::new();
        g.write_ulog(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"ULOG");
        assert_eq!(&buf[6..10], &16u32.to_le_bytes());
        assert_eq!(&buf[14..18], &8u32.to_le_bytes());
        assert_eq!(buf[18], 0b0000_1001);
        assert_eq!(buf[19], 0b0000_0010);
        assert_eq!(buf.len(), 18 + (16 * 16 * 8) / 8);
        assert_eq!(OccupancyGrid::read_ulog(&buf[..], &cfg).unwrap(), g);
        assert!(OccupancyGrid::read_ulog(&buf[..], &GridConfig::desk()).is_err());
    }

    #[test]
    fn iou_cases() {
        let cfg = small();
        let mut a = OccupancyGrid::empty(&cfg);
        let b = OccupancyGrid::empty(&cfg);
        assert_eq!(a.iou(&b).unwrap(), 1.0);
        a.set(1, 1, 1, true);
        assert_eq!(a.iou(&b).unwrap(), 0.0);
        let mut c = a.clone();
        c.set(2, 2, 2, true);
        assert_eq!(a.iou(&c).unwrap(), 0.5);
    }

    proptest! {
        #[test]
        fn devoxelize_then_voxelize_is_identity(bits in prop::collection::vec(prop::bool::weighted(0.1), 16 * 16 * 8)) {
            let cfg = small();
            let g = OccupancyGrid::from_bits(&cfg, bits).unwrap();
            prop_assert_eq!(voxelize(&devoxelize(&g), &cfg), g);
        }

        #[test]
        fn adding_points_never_clears_bits(
            pts in prop::collection::vec(prop::array::uniform3(-4f32..8.0), 0..60),
            extra in prop::array::uniform3(-4f32..8.0),
        ) {
            let cfg = small();
            let before = voxelize(&PointCloud::new(pts.clone()), &cfg);
            let mut more = pts;
            more.push(extra);
            let after = voxelize(&PointCloud::new(more), &cfg);
            for (a, b) in before.bits().iter().zip(after.bits()) {
                prop_assert!(!a || *b);
            }
        }

        #[test]
        fn histogram_total_equals_occupied(bits in prop::collection::vec(prop::bool::weighted(0.05), 16 * 16 * 8)) {
            let g = OccupancyGrid::from_bits(&small(), bits).unwrap();
            prop_assert_eq!(bev_histogram(&g).total() as usize, g.occupied());
        }
    }
}
