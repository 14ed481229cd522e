//! Patch-wise gamma search followed by global CLAHE (APAGE), plus PGM I/O.

mod apage;
mod clahe;
mod gamma;
mod image;
mod pgm;

pub use apage::{apage, patch_augment, PatchChoice};
pub use clahe::clahe;
pub use gamma::{gamma_correct, select_gamma, split_patches, GammaChoice, PatchGrid};
pub use image::{ImageGray, Rect};
pub use pgm::{decode_pgm, encode_pgm, read_pgm, write_pgm};

use crate::error::{Error, Result};

/// Parameters of the enhancement pipeline.
#[derive(Clone, Debug, PartialEq)]
pub struct ApageConfig {
    pub patch_h: usize,
    pub patch_w: usize,
    /// Candidate gamma exponents, strictly increasing, containing 1.0.
    pub gamma_grid: Vec<f64>,
    pub clahe_clip: f64,
    /// Tile grid as (columns, rows).
    pub clahe_tiles: (usize, usize),
}

impl Default for ApageConfig {
    fn default() -> Self {
        ApageConfig {
            patch_h: 100,
            patch_w: 100,
            gamma_grid: default_gamma_grid(),
            clahe_clip: 2.0,
            clahe_tiles: (8, 8),
        }
    }
}

/// 0.5, 0.6, ..., 2.0.
pub fn default_gamma_grid() -> Vec<f64> {
    (5..=20).map(|i| i as f64 / 10.0).collect()
}

impl ApageConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_h == 0 || self.patch_w == 0 {
            return Err(Error::InvalidArgument("patch size must be positive".into()));
        }
        if self.gamma_grid.iter().any(|g| !(*g > 0.0) || !g.is_finite()) {
            return Err(Error::InvalidArgument("gamma values must be positive".into()));
        }
        if self.gamma_grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument("gamma grid must be strictly increasing".into()));
        }
        if !self.gamma_grid.contains(&1.0) {
            return Err(Error::InvalidArgument("gamma grid must contain 1.0".into()));
        }
        if !(self.clahe_clip > 0.0) || !self.clahe_clip.is_finite() {
            return Err(Error::InvalidArgument("clahe clip must be positive".into()));
        }
        if self.clahe_tiles.0 == 0 || self.clahe_tiles.1 == 0 {
            return Err(Error::InvalidArgument("clahe tile grid must be positive".into()));
        }
        Ok(())
    }
}
