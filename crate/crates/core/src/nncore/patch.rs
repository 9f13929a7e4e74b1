//! Conversion between `H×W×C` voxel grids and `(H/8·W/8)` patch tokens.

use rand::Rng;

use super::layers::Affine;
use super::params::{Grads, ParamId, ParamStore};
use super::tensor::{Real, Tensor};
use super::NnError;
use crate::voxel::OccupancyGrid;

/// Side length of a square BEV patch, in voxels.
pub const PATCH: usize = 8;

/// Rearranges a row-major `h×w×c` volume into `(h/8·w/8) × (64·c)` patch rows.
///
/// Token `pi·(w/8) + pj` holds voxel `(8·pi + di, 8·pj + dj, k)` at feature `(di·8 + dj)·c + k`.
pub fn patchify<T: Copy>(values: &[T], h: usize, w: usize, c: usize) -> Result<Vec<T>, NnError> {
    check_geometry(h, w)?;
    if values.len() != h * w * c {
        return Err(NnError::Shape(format!("{} values for {h}×{w}×{c}", values.len())));
    }
    let (ph, pw) = (h / PATCH, w / PATCH);
    let feat = PATCH * PATCH * c;
    let mut out = Vec::with_capacity(values.len());
    for pi in 0..ph {
        for pj in 0..pw {
            for di in 0..PATCH {
                for dj in 0..PATCH {
                    let base = ((pi * PATCH + di) * w + pj * PATCH + dj) * c;
                    out.extend_from_slice(&values[base..base + c]);
                }
            }
        }
    }
    debug_assert_eq!(out.len(), ph * pw * feat);
    Ok(out)
}

/// Inverse of [`patchify`].
pub fn unpatchify<T: Copy + Default>(tokens: &[T], h: usize, w: usize, c: usize) -> Result<Vec<T>, NnError> {
    check_geometry(h, w)?;
    if tokens.len() != h * w * c {
        return Err(NnError::Shape(format!("{} token values for {h}×{w}×{c}", tokens.len())));
    }
    let (ph, pw) = (h / PATCH, w / PATCH);
    let mut out = vec![T::default(); tokens.len()];
    let mut at = 0;
    for pi in 0..ph {
        for pj in 0..pw {
            for di in 0..PATCH {
                for dj in 0..PATCH {
                    let base = ((pi * PATCH + di) * w + pj * PATCH + dj) * c;
                    out[base..base + c].copy_from_slice(&tokens[at..at + c]);
                    at += c;
                }
            }
        }
    }
    Ok(out)
}

fn check_geometry(h: usize, w: usize) -> Result<(), NnError> {
    if h == 0 || w == 0 || h % PATCH != 0 || w % PATCH != 0 {
        return Err(NnError::Shape(format!("{h}×{w} grid is not divisible into {PATCH}×{PATCH} patches")));
    }
    Ok(())
}

/// Grid bits as `0.0/1.0` patch rows.
pub fn grid_patches<T: Real>(grid: &OccupancyGrid) -> Result<Tensor<T>, NnError> {
    let cfg = grid.config();
    let (h, w, c) = (cfg.h(), cfg.w(), cfg.c());
    let vals: Vec<T> = grid.bits().iter().map(|&b| if b { T::one() } else { T::zero() }).collect();
    let rows = patchify(&vals, h, w, c)?;
    Tensor::from_vec(&[(h / PATCH) * (w / PATCH), PATCH * PATCH * c], rows)
}

/// Flattened patch → width `dim`, plus a learned embedding per token position.
#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub proj: Affine,
    pub pos: ParamId,
    pub n_tokens: usize,
    pub channels: usize,
}

impl PatchEmbed {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        grid_h: usize,
        grid_w: usize,
        channels: usize,
        dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self, NnError> {
        check_geometry(grid_h, grid_w)?;
        let n_tokens = (grid_h / PATCH) * (grid_w / PATCH);
        let feat = PATCH * PATCH * channels;
        let proj = Affine::new(store, &format!("{name}.proj"), feat, dim, (1.0 / feat as f64).sqrt(), rng)?;
        let pos = store.add_normal(&format!("{name}.pos"), &[n_tokens, dim], 0.02, rng)?;
        Ok(Self { proj, pos, n_tokens, channels })
    }

    /// Returns the tokens and the patch rows needed by [`PatchEmbed::backward`].
    pub fn forward<T: Real>(
        &self,
        ps: &ParamStore<T>,
        grid: &OccupancyGrid,
    ) -> Result<(Tensor<T>, Tensor<T>), NnError> {
        let patches = grid_patches::<T>(grid)?;
        if patches.rows() != self.n_tokens || patches.cols() != self.proj.in_dim {
            return Err(NnError::Shape(format!(
                "grid gives {}×{} patches, embed expects {}×{}",
                patches.rows(),
                patches.cols(),
                self.n_tokens,
                self.proj.in_dim
            )));
        }
        let tokens = self.forward_patches(ps, &patches)?;
        Ok((tokens, patches))
    }

    pub fn forward_patches<T: Real>(
        &self,
        ps: &ParamStore<T>,
        patches: &Tensor<T>,
    ) -> Result<Tensor<T>, NnError> {
        let mut tokens = self.proj.forward(ps, patches)?;
        tokens.add_assign(ps.get(self.pos));
        Ok(tokens)
    }

    pub fn backward<T: Real>(&self, patches: &Tensor<T>, dtokens: &Tensor<T>, grads: &mut Grads<T>) {
        self.proj.accumulate_weight_grads(patches, dtokens, grads);
        grads.get_mut(self.pos).add_assign(dtokens);
    }
}

/// Width `dim` → per-voxel logits laid back out as an `H×W×C` grid.
#[derive(Clone, Debug)]
pub struct PatchUnembed {
    pub proj: Affine,
    pub grid_h: usize,
    pub grid_w: usize,
    pub channels: usize,
}

impl PatchUnembed {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        grid_h: usize,
        grid_w: usize,
        channels: usize,
        dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self, NnError> {
        check_geometry(grid_h, grid_w)?;
        let proj = Affine::new(store, &format!("{name}.proj"), dim, PATCH * PATCH * channels, 0.02, rng)?;
        Ok(Self { proj, grid_h, grid_w, channels })
    }

    pub fn n_tokens(&self) -> usize {
        (self.grid_h / PATCH) * (self.grid_w / PATCH)
    }

    /// Logits with shape `[H, W, C]`.
    pub fn forward<T: Real>(&self, ps: &ParamStore<T>, tokens: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        if tokens.rows() != self.n_tokens() {
            return Err(NnError::Shape(format!(
                "{} tokens for a {}×{} grid",
                tokens.rows(),
                self.grid_h,
                self.grid_w
            )));
        }
        let rows = self.proj.forward(ps, tokens)?;
        let grid = unpatchify(rows.data(), self.grid_h, self.grid_w, self.channels)?;
        Tensor::from_vec(&[self.grid_h, self.grid_w, self.channels], grid)
    }

    pub fn backward<T: Real>(
        &self,
        ps: &ParamStore<T>,
        tokens: &Tensor<T>,
        dlogits: &Tensor<T>,
        grads: &mut Grads<T>,
    ) -> Result<Tensor<T>, NnError> {
        let rows = patchify(dlogits.data(), self.grid_h, self.grid_w, self.channels)?;
        let drows = Tensor::from_vec(&[self.n_tokens(), self.proj.out_dim], rows)?;
        Ok(self.proj.backward(ps, tokens, &drows, grads))
    }
}
