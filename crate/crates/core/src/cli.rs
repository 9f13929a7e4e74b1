//! Command-line driver over the whole pipeline.
//!
//! Every subcommand reads its settings from an optional `key = value` config file
//! (see [`RunConfig`]) and takes all randomness from `--seed`. Exit codes: 0 success,
//! 1 usage error, 2 data or model error.

use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Parser, Subcommand};

use crate::codemap::{CodeMap, Rect};
use crate::generator::{
    identify_blank, paste_region, BlankSet, GenConfig, GenError, GenTrainConfig, GenTrainer, Generator,
    GeneratorConfig,
};
use crate::io::FormatError;
use crate::metrics::{evaluate_sets, EvalMode, MetricsError};
use crate::nncore::{AdamConfig, Checkpoint, TensorF};
use crate::scenes::{derive_seed, make_pair, random_scene, BeamConfig, SceneConfig, SceneError};
use crate::voxel::{voxelize, GridConfig, OccupancyGrid, VoxelError};
use crate::vqvae::{binarize, Binarize, Branch, GridPair, TrainConfig, Trainer, VqVaeConfig, VqVaeError, VqVaeModel};
use crate::PointCloud;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("bad value {value:?} for key {key:?}")]
    BadValue { key: String, value: String },
    #[error("line {line}: expected `key = value`, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::BadValue { key: key.into(), value: value.into() })
}

macro_rules! run_config {
    ($($field:ident : $ty:ty = $default:expr;)*) => {
        /// Every tunable of the pipeline. Config files hold one `key = value` per line
        /// with `#` comments; keys left out keep their defaults.
        #[derive(Clone, Debug, PartialEq)]
        pub struct RunConfig {
            $(pub $field: $ty,)*
        }

        impl Default for RunConfig {
            fn default() -> Self {
                Self { $($field: $default,)* }
            }
        }

        impl RunConfig {
            pub const KEYS: &'static [&'static str] = &[$(stringify!($field)),*];

            pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
                match key {
                    $(stringify!($field) => self.$field = parse_value(key, value)?,)*
                    _ => return Err(ConfigError::UnknownKey(key.to_string())),
                }
                Ok(())
            }

            /// The config in file syntax; parsing it back yields `self`.
            pub fn to_text(&self) -> String {
                let mut s = String::new();
                $(s.push_str(&format!("{} = {}\n", stringify!($field), display(&self.$field)));)*
                s
            }
        }
    };
}

fn display<T: Display>(v: &T) -> String {
    v.to_string()
}

run_config! {
    grid: String = "desk".to_string();
    scenes: usize = 256;
    min_boxes: usize = 4;
    max_boxes: usize = 10;
    sparse_beams: usize = 8;
    elevation_min: f64 = -30.0;
    elevation_max: f64 = -2.0;
    azimuth_steps: usize = 256;
    max_range: f64 = 60.0;
    densify_factor: usize = 4;
    vq_blocks: usize = 4;
    vq_dim: usize = 64;
    vq_heads: usize = 4;
    codebook_size: usize = 128;
    code_dim: usize = 64;
    bank_capacity: usize = 8192;
    vq_iterations: u64 = 3000;
    vq_batch: usize = 1;
    vq_lr: f64 = 2e-3;
    vq_beta1: f64 = 0.9;
    vq_beta2: f64 = 0.99;
    warmup_iters: u64 = 500;
    commitment: f64 = 0.25;
    reinit: bool = true;
    reinit_threshold: f64 = 0.5;
    kmeans_iters: usize = 10;
    pos_weight: f64 = 3.0;
    vq_grad_clip: f64 = 1.0;
    vq_lr_warmup: u64 = 200;
    vq_cosine_decay: bool = true;
    prior_bias: bool = true;
    gen_blocks: usize = 6;
    gen_dim: usize = 128;
    gen_heads: usize = 4;
    gen_iterations: u64 = 2000;
    gen_batch: usize = 4;
    gen_lr: f64 = 1e-4;
    gen_beta1: f64 = 0.9;
    gen_beta2: f64 = 0.96;
    label_smoothing: f64 = 0.1;
    gen_grad_clip: f64 = 1.0;
    steps: usize = 12;
    suppress_steps: usize = 6;
    temperature: f64 = 1.0;
    blank_coverage: f64 = 0.5;
    samples: usize = 16;
    denoise_rounds: usize = 2;
    denoise_fraction: f64 = 0.25;
    log_every: u64 = 250;
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) =
                line.split_once('=').ok_or_else(|| ConfigError::Syntax { line: n + 1, text: raw.to_string() })?;
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn grid_config(&self) -> Result<GridConfig, CliError> {
        match self.grid.as_str() {
            "desk" => Ok(GridConfig::desk()),
            "full" => Ok(GridConfig::full_scale()),
            other => Err(CliError::Usage(format!("grid must be desk or full, got {other:?}"))),
        }
    }

    pub fn scene_config(&self) -> SceneConfig {
        SceneConfig { boxes: (self.min_boxes, self.max_boxes), ..SceneConfig::default() }
    }

    pub fn beam_config(&self) -> BeamConfig {
        BeamConfig {
            n_beams: self.sparse_beams,
            elevation_min: self.elevation_min,
            elevation_max: self.elevation_max,
            azimuth_steps: self.azimuth_steps,
            max_range: self.max_range,
        }
    }

    pub fn vqvae_config(&self) -> Result<VqVaeConfig, CliError> {
        Ok(VqVaeConfig {
            grid: self.grid_config()?,
            n_blocks: self.vq_blocks,
            dim: self.vq_dim,
            n_heads: self.vq_heads,
            codebook_size: self.codebook_size,
            code_dim: self.code_dim,
            bank_capacity: self.bank_capacity,
        })
    }

    pub fn vq_train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            iterations: self.vq_iterations,
            batch_size: self.vq_batch,
            adam: AdamConfig { lr: self.vq_lr, beta1: self.vq_beta1, beta2: self.vq_beta2, eps: 1e-8 },
            warmup_iters: self.warmup_iters,
            commitment: self.commitment,
            seed,
            reinit: self.reinit,
            reinit_threshold: self.reinit_threshold,
            kmeans_iters: self.kmeans_iters,
            pos_weight: self.pos_weight,
            grad_clip: (self.vq_grad_clip > 0.0).then_some(self.vq_grad_clip),
            lr_warmup: self.vq_lr_warmup,
            cosine_decay: self.vq_cosine_decay,
            prior_bias: self.prior_bias,
        }
    }

    pub fn generator_config(&self, h: usize, w: usize) -> GeneratorConfig {
        GeneratorConfig { h, w, k: self.codebook_size, n_blocks: self.gen_blocks, dim: self.gen_dim, n_heads: self.gen_heads }
    }

    pub fn gen_train_config(&self, seed: u64) -> GenTrainConfig {
        GenTrainConfig {
            iterations: self.gen_iterations,
            batch_size: self.gen_batch,
            adam: AdamConfig { lr: self.gen_lr, beta1: self.gen_beta1, beta2: self.gen_beta2, eps: 1e-8 },
            label_smoothing: self.label_smoothing,
            grad_clip: (self.gen_grad_clip > 0.0).then_some(self.gen_grad_clip),
            seed,
        }
    }

    pub fn gen_config(&self, seed: u64) -> GenConfig {
        GenConfig { steps: self.steps, suppress_steps: self.suppress_steps, temperature: self.temperature, seed }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Voxel(#[from] VoxelError),
    #[error(transparent)]
    VqVae(#[from] VqVaeError),
    #[error(transparent)]
    Gen(#[from] GenError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 1,
            _ => 2,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_path_buf(), source }
}

#[derive(Parser, Debug)]
#[command(name = "ultralidar", version, about = "Discrete BEV codebooks for LiDAR: simulate, train, generate, evaluate")]
struct Cli {
    /// `key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate paired sparse/dense scans into `<out>/{sparse,dense}` plus `manifest.txt`.
    GenData {
        #[arg(long)]
        out: PathBuf,
        /// Defaults to the `scenes` config key.
        #[arg(long)]
        count: Option<usize>,
    },
    /// Jointly train the dense and sparse VQ-VAE branches on a gen-data directory.
    TrainVqvae {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Encode every scan of a gen-data directory into a code map.
    EncodeCorpus {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "dense")]
        branch: String,
    },
    /// Train the masked-token generator on a directory of code maps.
    TrainGen {
        #[arg(long)]
        codes: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Dense-branch reconstruction of a grid or point cloud.
    Reconstruct {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the code map.
        #[arg(long)]
        codes: Option<PathBuf>,
    },
    /// Sparse-to-dense completion of a grid or point cloud.
    Complete {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample code maps, optionally infilling a condition.
    Generate {
        #[arg(long)]
        generator: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to the `samples` config key.
        #[arg(long)]
        count: Option<usize>,
        /// Partial code map; cells holding the mask token (K) are generated.
        #[arg(long)]
        condition: Option<PathBuf>,
        /// Code map whose nonzero cells are regenerated (overrides the condition there).
        #[arg(long, requires = "condition")]
        mask: Option<PathBuf>,
        /// Also decode each sample to an occupancy grid with this VQ-VAE.
        #[arg(long)]
        vqvae: Option<PathBuf>,
    },
    /// Re-generate random rectangles of a code map.
    Denoise {
        #[arg(long)]
        generator: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        rounds: Option<usize>,
        #[arg(long)]
        fraction: Option<f64>,
    },
    /// Copy a rectangle of codes from one map into another.
    Manipulate {
        #[arg(long)]
        input: PathBuf,
        /// Source map; defaults to the input map.
        #[arg(long)]
        src: Option<PathBuf>,
        /// `row,col,height,width` in code cells.
        #[arg(long)]
        src_rect: String,
        /// `row,col` in code cells.
        #[arg(long)]
        dst_origin: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// MMD and JSD between two directories of grids or point clouds.
    Eval {
        #[arg(long)]
        real: PathBuf,
        #[arg(long)]
        generated: PathBuf,
        #[arg(long, default_value = "occupancy")]
        mode: String,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Top-down PGM image of a grid or point cloud.
    Render {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parses `argv` (without the program name) and runs one subcommand.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let args = std::iter::once(std::ffi::OsString::from("ultralidar")).chain(argv.into_iter().map(Into::into));
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn execute(cli: Cli) -> Result<(), CliError> {
    let cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let seed = cli.seed;
    match cli.command {
        Command::GenData { out, count } => gen_data(&cfg, seed, &out, count.unwrap_or(cfg.scenes)),
        Command::TrainVqvae { data, out } => train_vqvae(&cfg, seed, &data, &out),
        Command::EncodeCorpus { model, data, out, branch } => encode_corpus(&cfg, &model, &data, &out, &branch),
        Command::TrainGen { codes, out } => train_gen(&cfg, seed, &codes, &out),
        Command::Reconstruct { model, input, out, codes } => {
            let grid_cfg = cfg.grid_config()?;
            let m = load_vqvae(&model, &cfg)?;
            let rec = m.reconstruct(&load_grid(&input, &grid_cfg)?, Branch::Dense)?;
            binarize(&rec.logits, &grid_cfg, Binarize::Threshold)?.save(&out)?;
            if let Some(p) = codes {
                rec.codes.save(&p)?;
            }
            Ok(())
        }
        Command::Complete { model, input, out } => {
            let grid_cfg = cfg.grid_config()?;
            let m = load_vqvae(&model, &cfg)?;
            m.complete(&load_grid(&input, &grid_cfg)?)?.save(&out)?;
            Ok(())
        }
        Command::Generate { generator, out, count, condition, mask, vqvae } => generate(
            &cfg,
            seed,
            &generator,
            &out,
            count.unwrap_or(cfg.samples),
            condition.as_deref(),
            mask.as_deref(),
            vqvae.as_deref(),
        ),
        Command::Denoise { generator, input, out, rounds, fraction } => {
            let (g, blanks) = load_generator(&generator)?;
            let map = CodeMap::load(&input)?;
            let out_map = g.denoise(
                &map,
                rounds.unwrap_or(cfg.denoise_rounds),
                fraction.unwrap_or(cfg.denoise_fraction),
                &cfg.gen_config(seed),
                &blanks,
            )?;
            out_map.save(&out)?;
            Ok(())
        }
        Command::Manipulate { input, src, src_rect, dst_origin, out } => {
            let dst = CodeMap::load(&input)?;
            let src_map = match src {
                Some(p) => CodeMap::load(&p)?,
                None => dst.clone(),
            };
            let r = parse_usizes(&src_rect, 4, "--src-rect")?;
            let o = parse_usizes(&dst_origin, 2, "--dst-origin")?;
            paste_region(&dst, &src_map, Rect::new(r[0], r[1], r[2], r[3]), (o[0], o[1]))?.save(&out)?;
            Ok(())
        }
        Command::Eval { real, generated, mode, out } => {
            let mode: EvalMode = mode.parse().map_err(|e: MetricsError| CliError::Usage(e.to_string()))?;
            let grid_cfg = cfg.grid_config()?;
            let real_grids = load_grid_dir(&real, &grid_cfg)?;
            let gen_grids = load_grid_dir(&generated, &grid_cfg)?;
            let report = evaluate_sets(&real_grids, &gen_grids, mode)?;
            let text = format!("{report}\n");
            print!("{text}");
            if let Some(p) = out {
                fs::write(&p, text).map_err(io_err(&p))?;
            }
            Ok(())
        }
        Command::Render { input, out } => {
            let grid = load_grid(&input, &cfg.grid_config()?)?;
            fs::write(&out, render_pgm(&grid)).map_err(io_err(&out))?;
            Ok(())
        }
    }
}

fn parse_usizes(s: &str, n: usize, flag: &str) -> Result<Vec<usize>, CliError> {
    let v: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse())
        .collect::<Result<_, _>>()
        .map_err(|_| CliError::Usage(format!("{flag} expects {n} comma-separated integers, got {s:?}")))?;
    if v.len() != n {
        return Err(CliError::Usage(format!("{flag} expects {n} comma-separated integers, got {s:?}")));
    }
    Ok(v)
}

/// 8-bit binary PGM, one pixel per BEV column: `⌊255 · occupied / C⌋`. Rows follow x.
pub fn render_pgm(grid: &OccupancyGrid) -> Vec<u8> {
    let cfg = grid.config();
    let (h, w, c) = (cfg.h(), cfg.w(), cfg.c());
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    for i in 0..h {
        for j in 0..w {
            let n = (0..c).filter(|&k| grid.get(i, j, k)).count();
            out.push((255 * n / c) as u8);
        }
    }
    out
}

/// Loads a `.ulog` grid, or voxelizes a `.ulpc`/`.csv` point cloud.
pub fn load_grid(path: &Path, cfg: &GridConfig) -> Result<OccupancyGrid, CliError> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("ulog") => Ok(OccupancyGrid::load(path, cfg)?),
        Some("ulpc") | Some("csv") => Ok(voxelize(&PointCloud::load(path)?, cfg)),
        _ => Err(CliError::Usage(format!("{}: expected a .ulog, .ulpc or .csv file", path.display()))),
    }
}

fn sorted_files(dir: &Path, exts: &[&str]) -> Result<Vec<PathBuf>, CliError> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().and_then(|e| e.to_str()).is_some_and(|e| exts.contains(&e)))
        .collect();
    files.sort();
    Ok(files)
}

/// Every grid or cloud in `dir`; a gen-data directory contributes its dense scans.
pub fn load_grid_dir(dir: &Path, cfg: &GridConfig) -> Result<Vec<OccupancyGrid>, CliError> {
    let dense = dir.join("dense");
    let dir = if dense.is_dir() { dense.as_path() } else { dir };
    let files = sorted_files(dir, &["ulog", "ulpc"])?;
    if files.is_empty() {
        return Err(CliError::Data(format!("{}: no .ulog or .ulpc files", dir.display())));
    }
    files.iter().map(|p| load_grid(p, cfg)).collect()
}

/// One row of `manifest.txt`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub index: u64,
    pub seed: u64,
    pub sparse: PathBuf,
    pub dense: PathBuf,
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestEntry>, CliError> {
    let path = dir.join("manifest.txt");
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let mut entries = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        let bad = || CliError::Data(format!("{}:{}: malformed manifest line", path.display(), n + 1));
        if f.len() != 4 {
            return Err(bad());
        }
        entries.push(ManifestEntry {
            index: f[0].parse().map_err(|_| bad())?,
            seed: f[1].parse().map_err(|_| bad())?,
            sparse: dir.join(f[2]),
            dense: dir.join(f[3]),
        });
    }
    if entries.is_empty() {
        return Err(CliError::Data(format!("{}: no samples", path.display())));
    }
    Ok(entries)
}

fn gen_data(cfg: &RunConfig, seed: u64, out: &Path, count: usize) -> Result<(), CliError> {
    let scene_cfg = cfg.scene_config();
    let beams = cfg.beam_config();
    for sub in ["sparse", "dense"] {
        let d = out.join(sub);
        fs::create_dir_all(&d).map_err(io_err(&d))?;
    }
    let mut manifest = String::from("# index seed sparse dense\n");
    for i in 0..count {
        let s = derive_seed(seed, i as u64);
        let pair = make_pair(&random_scene(s, &scene_cfg)?, &beams, cfg.densify_factor)?;
        let name = format!("{i:06}.ulpc");
        pair.sparse.save(&out.join("sparse").join(&name))?;
        pair.dense.save(&out.join("dense").join(&name))?;
        manifest.push_str(&format!("{i} {s} sparse/{name} dense/{name}\n"));
    }
    let p = out.join("manifest.txt");
    fs::write(&p, manifest).map_err(io_err(&p))?;
    Ok(())
}

fn load_pairs(cfg: &RunConfig, data: &Path) -> Result<Vec<GridPair>, CliError> {
    let grid = cfg.grid_config()?;
    read_manifest(data)?
        .iter()
        .map(|e| {
            Ok(GridPair {
                sparse: voxelize(&PointCloud::load(&e.sparse)?, &grid),
                dense: voxelize(&PointCloud::load(&e.dense)?, &grid),
            })
        })
        .collect()
}

fn train_vqvae(cfg: &RunConfig, seed: u64, data: &Path, out: &Path) -> Result<(), CliError> {
    let pairs = load_pairs(cfg, data)?;
    let train_cfg = cfg.vq_train_config(seed);
    let mut trainer = Trainer::new(cfg.vqvae_config()?, train_cfg.clone())?;
    for _ in 0..train_cfg.iterations {
        let s = trainer.step(&pairs)?;
        if cfg.log_every > 0 && s.iter % cfg.log_every == 0 {
            eprintln!("iter {} loss {:.5} utilization {:.3}", s.iter, s.total(), s.utilization);
        }
    }
    let (model, _) = trainer.finish();
    model.to_checkpoint().save(out)?;
    Ok(())
}

fn load_vqvae(path: &Path, cfg: &RunConfig) -> Result<VqVaeModel<f32>, CliError> {
    Ok(VqVaeModel::from_checkpoint(&Checkpoint::load(path)?, &cfg.grid_config()?, cfg.bank_capacity)?)
}

fn encode_corpus(cfg: &RunConfig, model: &Path, data: &Path, out: &Path, branch: &str) -> Result<(), CliError> {
    let branch = match branch {
        "dense" => Branch::Dense,
        "sparse" => Branch::Sparse,
        other => return Err(CliError::Usage(format!("--branch must be dense or sparse, got {other:?}"))),
    };
    let m = load_vqvae(model, cfg)?;
    let grid = cfg.grid_config()?;
    fs::create_dir_all(out).map_err(io_err(out))?;
    for e in read_manifest(data)? {
        let src = match branch {
            Branch::Dense => &e.dense,
            Branch::Sparse => &e.sparse,
        };
        let z = m.encode(&voxelize(&PointCloud::load(src)?, &grid), branch)?;
        let (_, codes) = m.quantize(&z)?;
        codes.save(&out.join(format!("{:06}.ulcm", e.index)))?;
    }
    Ok(())
}

fn load_code_dir(dir: &Path) -> Result<Vec<CodeMap>, CliError> {
    let files = sorted_files(dir, &["ulcm"])?;
    if files.is_empty() {
        return Err(CliError::Data(format!("{}: no .ulcm files", dir.display())));
    }
    files.iter().map(|p| Ok(CodeMap::load(p)?)).collect()
}

fn train_gen(cfg: &RunConfig, seed: u64, codes: &Path, out: &Path) -> Result<(), CliError> {
    let corpus = load_code_dir(codes)?;
    let (h, w) = (corpus[0].h, corpus[0].w);
    let blanks = identify_blank(&corpus, cfg.codebook_size, cfg.blank_coverage)?;
    let train_cfg = cfg.gen_train_config(seed);
    let mut trainer = GenTrainer::new(cfg.generator_config(h, w), train_cfg.clone())?;
    for _ in 0..train_cfg.iterations {
        let loss = trainer.step(&corpus)?;
        let it = trainer.iteration();
        if cfg.log_every > 0 && it % cfg.log_every == 0 {
            eprintln!("iter {it} masked cross-entropy {loss:.5}");
        }
    }
    let (g, _) = trainer.finish();
    let mut ck = g.to_checkpoint();
    push_blanks(&mut ck, &blanks);
    ck.save(out)?;
    Ok(())
}

fn push_blanks(ck: &mut Checkpoint, blanks: &BlankSet) {
    let codes = blanks.codes.iter().map(|&c| c as f32).collect::<Vec<_>>();
    ck.push("blank.codes", TensorF::from_vec(&[codes.len()], codes).expect("1-d"));
    let freq = blanks.frequencies.iter().map(|&f| f as f32).collect::<Vec<_>>();
    ck.push("blank.frequencies", TensorF::from_vec(&[freq.len()], freq).expect("1-d"));
}

fn load_generator(path: &Path) -> Result<(Generator<f32>, BlankSet), CliError> {
    let ck = Checkpoint::load(path)?;
    let g = Generator::from_checkpoint(&ck)?;
    let blanks = BlankSet {
        codes: ck.require("blank.codes")?.data().iter().map(|&v| v as usize).collect(),
        frequencies: ck.require("blank.frequencies")?.data().iter().map(|&v| v as u64).collect(),
    };
    Ok((g, blanks))
}

#[allow(clippy::too_many_arguments)]
fn generate(
    cfg: &RunConfig,
    seed: u64,
    generator: &Path,
    out: &Path,
    count: usize,
    condition: Option<&Path>,
    mask: Option<&Path>,
    vqvae: Option<&Path>,
) -> Result<(), CliError> {
    let (g, blanks) = load_generator(generator)?;
    let cond = match condition {
        Some(p) => {
            let mut c = CodeMap::load(p)?;
            if let Some(mp) = mask {
                let m = CodeMap::load(mp)?;
                if (m.h, m.w) != (c.h, c.w) {
                    return Err(CliError::Data("mask and condition differ in size".into()));
                }
                for (e, &flag) in c.entries.iter_mut().zip(&m.entries) {
                    if flag != 0 {
                        *e = g.config.mask_token();
                    }
                }
            }
            Some(c)
        }
        None => None,
    };
    let decoder = vqvae.map(|p| load_vqvae(p, cfg)).transpose()?;
    fs::create_dir_all(out).map_err(io_err(out))?;
    for i in 0..count {
        let map = g.sample(&cfg.gen_config(derive_seed(seed, i as u64)), &blanks, cond.as_ref())?;
        map.save(&out.join(format!("{i:06}.ulcm")))?;
        if let Some(m) = &decoder {
            let logits = m.decode_codes(&map)?;
            binarize(&logits, &m.config.grid, Binarize::Threshold)?.save(&out.join(format!("{i:06}.ulog")))?;
        }
    }
    Ok(())
}
