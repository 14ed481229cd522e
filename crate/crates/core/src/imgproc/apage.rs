use super::gamma::{select_gamma, split_patches};
use super::image::{ImageGray, Rect};
use super::{clahe, ApageConfig};
use crate::error::Result;

/// Gamma chosen for one patch.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchChoice {
    pub rect: Rect,
    pub gamma: f64,
    pub variance_before: f64,
    pub variance_after: f64,
}

/// The patch stage alone: every patch gets its own variance-maximizing gamma.
pub fn patch_augment(img: &ImageGray, cfg: &ApageConfig) -> Result<(ImageGray, Vec<PatchChoice>)> {
    cfg.validate()?;
    let grid = split_patches(img, cfg);
    let mut out = img.clone();
    let mut choices = Vec::with_capacity(grid.patches.len());
    for rect in grid.patches {
        let patch = img.crop(rect)?;
        let pick = select_gamma(&patch, cfg)?;
        out.paste(rect, &pick.corrected)?;
        choices.push(PatchChoice {
            rect,
            gamma: pick.gamma,
            variance_before: patch.variance(),
            variance_after: pick.variance,
        });
    }
    Ok((out, choices))
}

/// Patch gamma search followed by CLAHE over the whole image, which smooths
/// the seams between independently corrected patches.
pub fn apage(img: &ImageGray, cfg: &ApageConfig) -> Result<ImageGray> {
    let (patched, _) = patch_augment(img, cfg)?;
    clahe(&patched, cfg)
}
