//! BEV distribution metrics: Jensen–Shannon divergence of aggregate histograms and
//! kernel MMD over per-sample histograms.

use std::fmt;
use std::str::FromStr;

use crate::voxel::{
    apply_duplication, bev_histogram, bev_histogram_points, duplication_coefficients, BevHistogram, HistMode,
    OccupancyGrid, VoxelError, HIST_BINS,
};

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("{0} set is empty")]
    EmptySet(&'static str),
    #[error("{which} set needs at least {need} samples, got {got}")]
    TooFewSamples { which: &'static str, need: usize, got: usize },
    #[error("aggregate histogram of the {0} set is all zero")]
    ZeroAggregate(&'static str),
    #[error("histogram shape mismatch: {0}")]
    Shape(String),
    #[error("bandwidth {0} must be positive")]
    Bandwidth(f64),
    #[error("unknown evaluation mode {0:?} (expected occupancy or duplicated)")]
    Mode(String),
    #[error(transparent)]
    Voxel(#[from] VoxelError),
}

/// Per-sample `100 × 100` histograms of one set, all in the same mode.
#[derive(Clone, Debug, PartialEq)]
pub struct HistogramSet {
    pub hists: Vec<Vec<f64>>,
    pub mode: HistMode,
}

impl HistogramSet {
    pub fn new(hists: Vec<Vec<f64>>, mode: HistMode) -> Result<Self, MetricsError> {
        if let Some(first) = hists.first() {
            if hists.iter().any(|h| h.len() != first.len()) {
                return Err(MetricsError::Shape("histograms differ in length".into()));
            }
            if hists.iter().flatten().any(|&v| !(v.is_finite() && v >= 0.0)) {
                return Err(MetricsError::Shape("histogram counts must be finite and ≥ 0".into()));
            }
        }
        Ok(Self { hists, mode })
    }

    pub fn from_histograms(hists: Vec<BevHistogram>) -> Result<Self, MetricsError> {
        let mode = hists.first().map_or(HistMode::Occupancy, |h| h.mode);
        if hists.iter().any(|h| h.mode != mode) {
            return Err(MetricsError::Shape("mixed histogram modes".into()));
        }
        Self::new(hists.into_iter().map(|h| h.bins).collect(), mode)
    }

    /// Occupancy-mode histograms of `grids`.
    pub fn from_grids(grids: &[OccupancyGrid]) -> Self {
        Self { hists: grids.iter().map(|g| bev_histogram(g).bins).collect(), mode: HistMode::Occupancy }
    }

    pub fn len(&self) -> usize {
        self.hists.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hists.is_empty()
    }

    /// Bin-wise sum over samples.
    pub fn aggregate(&self) -> Vec<f64> {
        let n = self.hists.first().map_or(0, Vec::len);
        let mut agg = vec![0.0; n];
        for h in &self.hists {
            for (a, &v) in agg.iter_mut().zip(h) {
                *a += v;
            }
        }
        agg
    }
}

fn normalized(v: &[f64], which: &'static str) -> Result<Vec<f64>, MetricsError> {
    let total: f64 = v.iter().sum();
    if total <= 0.0 {
        return Err(MetricsError::ZeroAggregate(which));
    }
    Ok(v.iter().map(|&x| x / total).collect())
}

/// Base-2 Jensen–Shannon divergence of two nonnegative vectors after normalizing each.
pub fn jsd_distributions(p: &[f64], q: &[f64]) -> Result<f64, MetricsError> {
    if p.len() != q.len() {
        return Err(MetricsError::Shape(format!("{} vs {} bins", p.len(), q.len())));
    }
    let p = normalized(p, "first")?;
    let q = normalized(q, "second")?;
    let kl_to_mid = |a: &[f64], b: &[f64]| -> f64 {
        a.iter()
            .zip(b)
            .filter(|(&x, _)| x > 0.0)
            .map(|(&x, &y)| x * (2.0 * x / (x + y)).log2())
            .sum()
    };
    let d = 0.5 * kl_to_mid(&p, &q) + 0.5 * kl_to_mid(&q, &p);
    Ok(d.clamp(0.0, 1.0))
}

/// JSD between the aggregate histograms of two sets.
pub fn jsd(a: &HistogramSet, b: &HistogramSet) -> Result<f64, MetricsError> {
    if a.is_empty() {
        return Err(MetricsError::EmptySet("first"));
    }
    if b.is_empty() {
        return Err(MetricsError::EmptySet("second"));
    }
    jsd_distributions(&a.aggregate(), &b.aggregate())
}

/// Kernel bandwidth choice for [`mmd`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Bandwidth {
    /// Median pairwise distance over both sets, or 1 when that median is 0.
    Median,
    Fixed(f64),
}

/// Squared MMD estimate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MmdValue {
    /// Clamped at 0.
    pub value: f64,
    /// The U-statistic before clamping; may be slightly negative.
    pub raw: f64,
    pub bandwidth: f64,
}

fn sq_dist(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(&a, &b)| (a - b) * (a - b)).sum()
}

/// Sum of values in ascending order, so the result does not depend on how the inputs
/// were enumerated.
fn ordered_sum(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v.iter().sum()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return 0.0;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Unbiased squared MMD with the Gaussian kernel `exp(−‖u−v‖²/2σ²)` over L1-normalized
/// histograms.
pub fn mmd(a: &HistogramSet, b: &HistogramSet, bandwidth: Bandwidth) -> Result<MmdValue, MetricsError> {
    for (set, which) in [(a, "first"), (b, "second")] {
        if set.len() < 2 {
            return Err(MetricsError::TooFewSamples { which, need: 2, got: set.len() });
        }
    }
    let norm = |set: &HistogramSet, which| -> Result<Vec<Vec<f64>>, MetricsError> {
        set.hists.iter().map(|h| normalized(h, which)).collect()
    };
    let xa = norm(a, "first")?;
    let xb = norm(b, "second")?;
    if xa[0].len() != xb[0].len() {
        return Err(MetricsError::Shape(format!("{} vs {} bins", xa[0].len(), xb[0].len())));
    }
    let (m, n) = (xa.len(), xb.len());
    let all: Vec<&Vec<f64>> = xa.iter().chain(&xb).collect();
    let total = m + n;
    let mut d2 = vec![0.0; total * total];
    for i in 0..total {
        for j in i + 1..total {
            let d = sq_dist(all[i], all[j]);
            d2[i * total + j] = d;
            d2[j * total + i] = d;
        }
    }
    let sigma = match bandwidth {
        Bandwidth::Fixed(s) if s > 0.0 && s.is_finite() => s,
        Bandwidth::Fixed(s) => return Err(MetricsError::Bandwidth(s)),
        Bandwidth::Median => {
            let pairs = (0..total).flat_map(|i| (i + 1..total).map(move |j| (i, j)));
            let med = median(pairs.map(|(i, j)| d2[i * total + j].sqrt()).collect());
            if med > 0.0 { med } else { 1.0 }
        }
    };
    let kernel = |i: usize, j: usize| (-d2[i * total + j] / (2.0 * sigma * sigma)).exp();
    let within = |lo: usize, hi: usize| {
        ordered_sum((lo..hi).flat_map(|i| (lo..hi).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| kernel(i, j)).collect())
    };
    let kxx = within(0, m) / (m * (m - 1)) as f64;
    let kyy = within(m, total) / (n * (n - 1)) as f64;
    let kxy = ordered_sum((0..m).flat_map(|i| (m..total).map(move |j| (i, j))).map(|(i, j)| kernel(i, j)).collect())
        / (m * n) as f64;
    let raw = kxx + kyy - 2.0 * kxy;
    Ok(MmdValue { value: raw.max(0.0), raw, bandwidth: sigma })
}

/// How generated grids are histogrammed in [`evaluate_sets`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalMode {
    Occupancy,
    /// Generated voxels are replicated per bin to match the real point density.
    Duplicated,
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EvalMode::Occupancy => "occupancy",
            EvalMode::Duplicated => "duplicated",
        })
    }
}

impl FromStr for EvalMode {
    type Err = MetricsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "occupancy" => Ok(EvalMode::Occupancy),
            "duplicated" => Ok(EvalMode::Duplicated),
            other => Err(MetricsError::Mode(other.to_string())),
        }
    }
}

/// Both metrics for one real/generated comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub mmd: f64,
    pub mmd_raw: f64,
    pub jsd: f64,
    pub mode: EvalMode,
    pub bandwidth: f64,
    pub n_real: usize,
    pub n_gen: usize,
}

impl MetricReport {
    /// `mmd=<v> jsd=<v> mode=<m> bandwidth=<v>`
    pub fn machine_line(&self) -> String {
        format!("mmd={:e} jsd={} mode={} bandwidth={:e}", self.mmd, self.jsd, self.mode, self.bandwidth)
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "real samples: {}", self.n_real)?;
        writeln!(f, "generated samples: {}", self.n_gen)?;
        writeln!(f, "mode: {}", self.mode)?;
        writeln!(f, "MMD (BEV): {:e}", self.mmd)?;
        writeln!(f, "JSD (BEV): {}", self.jsd)?;
        writeln!(f, "kernel bandwidth: {:e}", self.bandwidth)?;
        write!(f, "{}", self.machine_line())
    }
}

fn report(real: &HistogramSet, gen: &HistogramSet, mode: EvalMode) -> Result<MetricReport, MetricsError> {
    let j = jsd(real, gen)?;
    let m = mmd(real, gen, Bandwidth::Median)?;
    Ok(MetricReport {
        mmd: m.value,
        mmd_raw: m.raw,
        jsd: j,
        mode,
        bandwidth: m.bandwidth,
        n_real: real.len(),
        n_gen: gen.len(),
    })
}

/// MMD and JSD between real and generated grids.
pub fn evaluate_sets(real: &[OccupancyGrid], gen: &[OccupancyGrid], mode: EvalMode) -> Result<MetricReport, MetricsError> {
    if real.is_empty() {
        return Err(MetricsError::EmptySet("real"));
    }
    if gen.is_empty() {
        return Err(MetricsError::EmptySet("generated"));
    }
    match mode {
        EvalMode::Occupancy => report(&HistogramSet::from_grids(real), &HistogramSet::from_grids(gen), mode),
        EvalMode::Duplicated => {
            let real_set = HistogramSet::from_grids(real);
            let gen_occ = HistogramSet::from_grids(gen);
            let coeffs = duplication_coefficients(
                &BevHistogram { bins: real_set.aggregate(), mode: HistMode::Occupancy },
                &BevHistogram { bins: gen_occ.aggregate(), mode: HistMode::Occupancy },
            );
            evaluate_with_coefficients(real, gen, &coeffs)
        }
    }
}

/// Duplicated-mode evaluation with caller-supplied per-bin coefficients.
pub fn evaluate_with_coefficients(
    real: &[OccupancyGrid],
    gen: &[OccupancyGrid],
    coeffs: &[f64],
) -> Result<MetricReport, MetricsError> {
    if coeffs.len() != HIST_BINS * HIST_BINS {
        return Err(MetricsError::Shape(format!("{} coefficients", coeffs.len())));
    }
    if real.is_empty() {
        return Err(MetricsError::EmptySet("real"));
    }
    if gen.is_empty() {
        return Err(MetricsError::EmptySet("generated"));
    }
    let real_set = HistogramSet::from_grids(real);
    let gen_hists = gen
        .iter()
        .map(|g| Ok(bev_histogram_points(&apply_duplication(g, coeffs)?, g.config()).bins))
        .collect::<Result<Vec<_>, MetricsError>>()?;
    let gen_set = HistogramSet::new(gen_hists, HistMode::Points)?;
    report(&real_set, &gen_set, EvalMode::Duplicated)
}
