use super::image::{moments, spread, ImageGray, Rect};
use super::ApageConfig;
use crate::error::{Error, Result};

/// Tiling of an image into `rows x cols` patches of at most `patch_h x patch_w`
/// pixels. Edge patches keep the residual size, so every pixel belongs to
/// exactly one patch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchGrid {
    pub rows: usize,
    pub cols: usize,
    pub patches: Vec<Rect>,
}

pub fn split_patches(img: &ImageGray, cfg: &ApageConfig) -> PatchGrid {
    let rows = img.height().div_ceil(cfg.patch_h);
    let cols = img.width().div_ceil(cfg.patch_w);
    let mut patches = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let (x, y) = (c * cfg.patch_w, r * cfg.patch_h);
            patches.push(Rect {
                x,
                y,
                w: cfg.patch_w.min(img.width() - x),
                h: cfg.patch_h.min(img.height() - y),
            });
        }
    }
    PatchGrid {
        rows,
        cols,
        patches,
    }
}

fn gamma_lut(gamma: f64) -> [u8; 256] {
    let mut lut = [0u8; 256];
    for (v, out) in lut.iter_mut().enumerate() {
        let y = 255.0 * (v as f64 / 255.0).powf(gamma);
        *out = y.round().clamp(0.0, 255.0) as u8;
    }
    lut
}

/// `out = round(255 * (in / 255)^gamma)`.
pub fn gamma_correct(patch: &ImageGray, gamma: f64) -> Result<ImageGray> {
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(Error::domain("gamma_correct", format!("gamma {gamma} must be > 0")));
    }
    let lut = gamma_lut(gamma);
    let pixels = patch.pixels().iter().map(|&p| lut[p as usize]).collect();
    ImageGray::new(patch.width(), patch.height(), pixels)
}

/// Result of the per-patch gamma search.
#[derive(Clone, Debug, PartialEq)]
pub struct GammaChoice {
    pub gamma: f64,
    pub corrected: ImageGray,
    /// Population variance of `corrected`, measured after rounding to 8 bits.
    pub variance: f64,
}

/// Picks the grid gamma that maximizes the variance of the corrected patch.
///
/// Ties go to the gamma closest to 1.0, then to the smaller gamma. Variances
/// are compared exactly in integer arithmetic.
pub fn select_gamma(patch: &ImageGray, cfg: &ApageConfig) -> Result<GammaChoice> {
    let mut best: Option<(u128, f64, ImageGray)> = None;
    for &gamma in &cfg.gamma_grid {
        let corrected = gamma_correct(patch, gamma)?;
        let (n, s1, s2) = moments(corrected.pixels());
        let score = spread(n, s1, s2);
        let better = match &best {
            None => true,
            Some((bs, bg, _)) => {
                score > *bs
                    || (score == *bs
                        && ((gamma - 1.0).abs() < (bg - 1.0).abs()
                            || ((gamma - 1.0).abs() == (bg - 1.0).abs() && gamma < *bg)))
            }
        };
        if better {
            best = Some((score, gamma, corrected));
        }
    }
    let (_, gamma, corrected) =
        best.ok_or_else(|| Error::InvalidArgument("empty gamma grid".into()))?;
    let variance = corrected.variance();
    Ok(GammaChoice {
        gamma,
        corrected,
        variance,
    })
}
