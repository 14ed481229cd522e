use super::image::ImageGray;
use super::ApageConfig;
use crate::error::{Error, Result};

const BINS: usize = 256;

/// Contrast-limited adaptive histogram equalization.
///
/// The image is partitioned into `clahe_tiles` tiles (sizes differ by at most
/// one pixel when the dimensions do not divide evenly). Each tile's 256-bin
/// histogram is clipped at `clip * tile_pixels / 256` counts, the excess is
/// spread evenly over all bins, and the cumulative histogram becomes the
/// tile's lookup table. Pixels blend the tables of the four nearest tile
/// centers bilinearly.
///
/// A tile whose pixels all share one level has no contrast to redistribute;
/// its table is the identity, so flat images pass through unchanged.
pub fn clahe(img: &ImageGray, cfg: &ApageConfig) -> Result<ImageGray> {
    let (tiles_x, tiles_y) = cfg.clahe_tiles;
    let (w, h) = (img.width(), img.height());
    if tiles_x == 0 || tiles_y == 0 || w < tiles_x || h < tiles_y {
        return Err(Error::Size(format!(
            "{w}x{h} image cannot hold a {tiles_x}x{tiles_y} tile grid"
        )));
    }
    let xs = partition(w, tiles_x);
    let ys = partition(h, tiles_y);

    let mut luts = Vec::with_capacity(tiles_x * tiles_y);
    for ty in 0..tiles_y {
        for tx in 0..tiles_x {
            let mut hist = [0u32; BINS];
            for y in ys[ty]..ys[ty + 1] {
                for &p in &img.pixels()[y * w + xs[tx]..y * w + xs[tx + 1]] {
                    hist[p as usize] += 1;
                }
            }
            let n = ((xs[tx + 1] - xs[tx]) * (ys[ty + 1] - ys[ty])) as u32;
            luts.push(tile_lut(&mut hist, n, cfg.clahe_clip));
        }
    }

    let wx = blend_weights(&xs);
    let wy = blend_weights(&ys);
    let mut out = Vec::with_capacity(w * h);
    for (y, &(ty0, ty1, ay)) in wy.iter().enumerate() {
        for (x, &(tx0, tx1, ax)) in wx.iter().enumerate() {
            let v = img.pixels()[y * w + x] as usize;
            let at = |tx: usize, ty: usize| luts[ty * tiles_x + tx][v] as f64;
            let top = (1.0 - ax) * at(tx0, ty0) + ax * at(tx1, ty0);
            let bottom = (1.0 - ax) * at(tx0, ty1) + ax * at(tx1, ty1);
            let blended = (1.0 - ay) * top + ay * bottom;
            out.push(blended.round().clamp(0.0, 255.0) as u8);
        }
    }
    ImageGray::new(w, h, out)
}

/// Boundaries `0 = b0 < b1 < ... < bn = len` of `n` near-equal segments.
fn partition(len: usize, n: usize) -> Vec<usize> {
    (0..=n).map(|i| i * len / n).collect()
}

fn tile_lut(hist: &mut [u32; BINS], n: u32, clip: f64) -> [u8; BINS] {
    let mut lut = [0u8; BINS];
    if hist.iter().filter(|&&c| c > 0).count() <= 1 {
        for (v, out) in lut.iter_mut().enumerate() {
            *out = v as u8;
        }
        return lut;
    }

    let limit = ((clip * n as f64 / BINS as f64) as u32).max(1);
    let mut clipped = 0u32;
    for c in hist.iter_mut() {
        if *c > limit {
            clipped += *c - limit;
            *c = limit;
        }
    }
    let batch = clipped / BINS as u32;
    let mut residual = clipped - batch * BINS as u32;
    for c in hist.iter_mut() {
        *c += batch;
    }
    if residual > 0 {
        let step = (BINS / residual as usize).max(1);
        let mut i = 0;
        while i < BINS && residual > 0 {
            hist[i] += 1;
            residual -= 1;
            i += step;
        }
    }

    let scale = 255.0 / n as f64;
    let mut cdf = 0u32;
    for (out, c) in lut.iter_mut().zip(hist.iter()) {
        cdf += c;
        *out = (cdf as f64 * scale).round().clamp(0.0, 255.0) as u8;
    }
    lut
}

/// For every coordinate, the two tiles whose centers bracket it and the
/// weight of the second.
fn blend_weights(bounds: &[usize]) -> Vec<(usize, usize, f64)> {
    let n = bounds.len() - 1;
    let len = bounds[n];
    let centers: Vec<f64> = (0..n)
        .map(|i| (bounds[i] + bounds[i + 1] - 1) as f64 / 2.0)
        .collect();
    (0..len)
        .map(|p| {
            let p = p as f64;
            if p <= centers[0] {
                (0, 0, 0.0)
            } else if p >= centers[n - 1] {
                (n - 1, n - 1, 0.0)
            } else {
                let i = centers.iter().rposition(|&c| c <= p).expect("p > centers[0]");
                let a = (p - centers[i]) / (centers[i + 1] - centers[i]);
                (i, i + 1, a)
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_image_is_unchanged() {
        let cfg = ApageConfig::default();
        for v in [0u8, 77, 128, 255] {
            let img = ImageGray::filled(64, 48, v).unwrap();
            assert_eq!(clahe(&img, &cfg).unwrap(), img);
        }
    }

    #[test]
    fn low_contrast_image_gains_spread() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let px = (0..64 * 64).map(|_| rng.gen_range(100..=140)).collect();
        let img = ImageGray::new(64, 64, px).unwrap();
        let out = clahe(&img, &ApageConfig::default()).unwrap();
        assert!(out.std_dev() > img.std_dev(), "{} vs {}", out.std_dev(), img.std_dev());
    }

    #[test]
    fn too_small_for_grid_is_a_size_error() {
        let img = ImageGray::filled(7, 20, 3).unwrap();
        assert!(matches!(clahe(&img, &ApageConfig::default()), Err(Error::Size(_))));
    }

    #[test]
    fn lut_is_monotone_and_reaches_top() {
        let mut hist = [0u32; BINS];
        for (i, c) in hist.iter_mut().enumerate() {
            *c = (i % 7) as u32 * 3;
        }
        let n: u32 = hist.iter().sum();
        let lut = tile_lut(&mut hist, n, 2.0);
        assert!(lut.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(lut[255], 255);
    }

    #[test]
    fn blend_weights_bracket_tile_centers() {
        let w = blend_weights(&partition(16, 2));
        // Centers at 3.5 and 11.5.
        assert_eq!(w[0], (0, 0, 0.0));
        assert_eq!(w[15], (1, 1, 0.0));
        let (a, b, t) = w[7];
        assert_eq!((a, b), (0, 1));
        assert!((t - 3.5 / 8.0).abs() < 1e-12);
    }
}
