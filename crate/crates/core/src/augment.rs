//! Label-consistent training augmentations and pixel corruption.

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::bbox::BBox;
use crate::data::{LabeledImage, ObjectLabel};
use crate::error::{Error, Result};
use crate::imgproc::ImageGray;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AugKind {
    Sharpen,
    ChannelScale,
    GaussianNoise,
    Rotate,
    Translate,
    Contrast,
}

impl AugKind {
    pub const ALL: [AugKind; 6] = [
        AugKind::Sharpen,
        AugKind::ChannelScale,
        AugKind::GaussianNoise,
        AugKind::Rotate,
        AugKind::Translate,
        AugKind::Contrast,
    ];
}

/// Magnitudes of the random augmentations.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentParams {
    /// Unsharp-mask amount over a 3x3 box blur.
    pub sharpen_amount: f64,
    /// Brightness factor range (grayscale stand-in for per-channel scaling).
    pub scale_range: (f64, f64),
    pub noise_sigma: f64,
    pub max_rotation_deg: f64,
    /// Maximum shift per axis as a fraction of the image size.
    pub max_translate: f64,
    /// Contrast factor range about the image mean.
    pub contrast_range: (f64, f64),
}

impl Default for AugmentParams {
    fn default() -> Self {
        AugmentParams {
            sharpen_amount: 0.5,
            scale_range: (0.8, 1.2),
            noise_sigma: 5.0,
            max_rotation_deg: 10.0,
            max_translate: 0.1,
            contrast_range: (0.7, 1.3),
        }
    }
}

pub fn augment<R: Rng + ?Sized>(
    sample: &LabeledImage,
    kind: AugKind,
    params: &AugmentParams,
    rng: &mut R,
) -> LabeledImage {
    let img = &sample.image;
    match kind {
        AugKind::Sharpen => relabel(sample, sharpen(img, params.sharpen_amount)),
        AugKind::ChannelScale => {
            let f = rng.gen_range(params.scale_range.0..=params.scale_range.1);
            relabel(sample, map_pixels(img, |v| v * f))
        }
        AugKind::GaussianNoise => {
            let normal = Normal::new(0.0, params.noise_sigma).expect("finite sigma");
            let px = img
                .pixels()
                .iter()
                .map(|&p| to_u8(p as f64 + normal.sample(rng)))
                .collect();
            relabel(sample, ImageGray::new(img.width(), img.height(), px).expect("same size"))
        }
        AugKind::Rotate => {
            let deg = rng.gen_range(-params.max_rotation_deg..=params.max_rotation_deg);
            rotate(sample, deg)
        }
        AugKind::Translate => {
            let m = params.max_translate;
            let dx = rng.gen_range(-m..=m);
            let dy = rng.gen_range(-m..=m);
            translate(sample, dx, dy)
        }
        AugKind::Contrast => {
            let f = rng.gen_range(params.contrast_range.0..=params.contrast_range.1);
            let mean = img.mean();
            relabel(sample, map_pixels(img, |v| mean + f * (v - mean)))
        }
    }
}

fn relabel(sample: &LabeledImage, image: ImageGray) -> LabeledImage {
    LabeledImage {
        image,
        labels: sample.labels.clone(),
    }
}

fn to_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

fn map_pixels(img: &ImageGray, f: impl Fn(f64) -> f64) -> ImageGray {
    let px = img.pixels().iter().map(|&p| to_u8(f(p as f64))).collect();
    ImageGray::new(img.width(), img.height(), px).expect("same size")
}

fn sharpen(img: &ImageGray, amount: f64) -> ImageGray {
    let (w, h) = (img.width(), img.height());
    let mut px = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let mut sum = 0.0;
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    let sx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                    let sy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                    sum += img.get(sx, sy) as f64;
                }
            }
            let v = img.get(x, y) as f64;
            px.push(to_u8(v + amount * (v - sum / 9.0)));
        }
    }
    ImageGray::new(w, h, px).expect("same size")
}

/// Shifts the image by `(dx, dy)` of its size (rounded to whole pixels);
/// vacated pixels replicate the nearest edge.
pub fn translate(sample: &LabeledImage, dx: f64, dy: f64) -> LabeledImage {
    let img = &sample.image;
    let (w, h) = (img.width(), img.height());
    let sx = (dx * w as f64).round() as isize;
    let sy = (dy * h as f64).round() as isize;
    let mut px = Vec::with_capacity(w * h);
    for y in 0..h as isize {
        for x in 0..w as isize {
            let ix = (x - sx).clamp(0, w as isize - 1) as usize;
            let iy = (y - sy).clamp(0, h as isize - 1) as usize;
            px.push(img.get(ix, iy));
        }
    }
    let (fx, fy) = (sx as f64 / w as f64, sy as f64 / h as f64);
    let labels = sample
        .labels
        .iter()
        .filter_map(|l| {
            let b = BBox {
                x1: l.bbox.x1 + fx,
                y1: l.bbox.y1 + fy,
                x2: l.bbox.x2 + fx,
                y2: l.bbox.y2 + fy,
            };
            keep(l.class, b)
        })
        .collect();
    LabeledImage {
        image: ImageGray::new(w, h, px).expect("same size"),
        labels,
    }
}

/// Rotates counter-clockwise (in image coordinates, y down) by `degrees`
/// about the image center with bilinear sampling; boxes become the clipped
/// axis-aligned hull of their rotated corners.
pub fn rotate(sample: &LabeledImage, degrees: f64) -> LabeledImage {
    let img = &sample.image;
    let (w, h) = (img.width(), img.height());
    let (wf, hf) = (w as f64, h as f64);
    let (s, c) = degrees.to_radians().sin_cos();
    let (cx, cy) = (wf / 2.0, hf / 2.0);
    let mut px = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            // Inverse map the output pixel center into the source.
            let (ox, oy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            let srcx = c * ox + s * oy + cx - 0.5;
            let srcy = -s * ox + c * oy + cy - 0.5;
            px.push(to_u8(bilinear(img, srcx, srcy)));
        }
    }
    let labels = sample
        .labels
        .iter()
        .filter_map(|l| {
            let corners = [
                (l.bbox.x1, l.bbox.y1),
                (l.bbox.x2, l.bbox.y1),
                (l.bbox.x1, l.bbox.y2),
                (l.bbox.x2, l.bbox.y2),
            ];
            let mut hull = BBox {
                x1: f64::INFINITY,
                y1: f64::INFINITY,
                x2: f64::NEG_INFINITY,
                y2: f64::NEG_INFINITY,
            };
            for (nx, ny) in corners {
                let (ox, oy) = (nx * wf - cx, ny * hf - cy);
                let rx = (c * ox - s * oy + cx) / wf;
                let ry = (s * ox + c * oy + cy) / hf;
                hull.x1 = hull.x1.min(rx);
                hull.y1 = hull.y1.min(ry);
                hull.x2 = hull.x2.max(rx);
                hull.y2 = hull.y2.max(ry);
            }
            keep(l.class, snap(hull))
        })
        .collect();
    LabeledImage {
        image: ImageGray::new(w, h, px).expect("same size"),
        labels,
    }
}

/// Removes floating-point dust from rotated coordinates.
fn snap(b: BBox) -> BBox {
    let s = |v: f64| (v * 1e12).round() / 1e12;
    BBox {
        x1: s(b.x1),
        y1: s(b.y1),
        x2: s(b.x2),
        y2: s(b.y2),
    }
}

fn keep(class: usize, b: BBox) -> Option<ObjectLabel> {
    let b = b.clipped();
    (b.x2 > b.x1 && b.y2 > b.y1).then_some(ObjectLabel { class, bbox: b })
}

fn bilinear(img: &ImageGray, x: f64, y: f64) -> f64 {
    let (w, h) = (img.width() as isize, img.height() as isize);
    let x0 = x.floor();
    let y0 = y.floor();
    let (ax, ay) = (x - x0, y - y0);
    let at = |xi: isize, yi: isize| -> f64 {
        img.get(xi.clamp(0, w - 1) as usize, yi.clamp(0, h - 1) as usize) as f64
    };
    let (xi, yi) = (x0 as isize, y0 as isize);
    let top = (1.0 - ax) * at(xi, yi) + ax * at(xi + 1, yi);
    let bottom = (1.0 - ax) * at(xi, yi + 1) + ax * at(xi + 1, yi + 1);
    (1.0 - ay) * top + ay * bottom
}

/// Perturbs exactly `round(ratio * W * H)` distinct, uniformly chosen pixels
/// with `N(0, sigma^2)` noise. Returns the image and the chosen positions.
pub fn corrupt_gaussian_positions<R: Rng + ?Sized>(
    img: &ImageGray,
    ratio: f64,
    sigma: f64,
    rng: &mut R,
) -> Result<(ImageGray, Vec<usize>)> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::InvalidArgument(format!("noise ratio {ratio} outside [0, 1]")));
    }
    let normal = Normal::new(0.0, sigma)
        .map_err(|_| Error::InvalidArgument(format!("noise sigma {sigma} must be >= 0")))?;
    let n = img.pixels().len();
    let k = (ratio * n as f64).round() as usize;
    let mut positions = index::sample(rng, n, k).into_vec();
    positions.sort_unstable();
    let mut out = img.clone();
    for &p in &positions {
        let v = out.pixels()[p] as f64 + normal.sample(rng);
        out.pixels_mut()[p] = to_u8(v);
    }
    Ok((out, positions))
}

pub fn corrupt_gaussian<R: Rng + ?Sized>(
    img: &ImageGray,
    ratio: f64,
    sigma: f64,
    rng: &mut R,
) -> Result<ImageGray> {
    corrupt_gaussian_positions(img, ratio, sigma, rng).map(|(img, _)| img)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample_with(b: BBox) -> LabeledImage {
        let px = (0..64 * 64).map(|i| ((i * 31) % 251) as u8).collect();
        LabeledImage::new(
            ImageGray::new(64, 64, px).unwrap(),
            vec![ObjectLabel { class: 1, bbox: b }],
        )
        .unwrap()
    }

    #[test]
    fn zero_translation_is_identity() {
        let s = sample_with(BBox::new(0.1, 0.2, 0.4, 0.5).unwrap());
        assert_eq!(translate(&s, 0.0, 0.0), s);
    }

    #[test]
    fn translation_moves_box_by_the_shift() {
        let s = sample_with(BBox::new(0.1, 0.1, 0.3, 0.3).unwrap());
        let t = translate(&s, 0.25, 0.0);
        let b = t.labels[0].bbox;
        assert!((b.x1 - 0.35).abs() < 1e-12 && (b.x2 - 0.55).abs() < 1e-12);
        assert!((b.y1 - 0.1).abs() < 1e-12 && (b.y2 - 0.3).abs() < 1e-12);
        assert_eq!(t.image.get(20, 5), s.image.get(4, 5));
    }

    #[test]
    fn quarter_turn_keeps_centered_square() {
        let b = BBox::new(0.25, 0.25, 0.75, 0.75).unwrap();
        let r = rotate(&sample_with(b), 90.0);
        assert_eq!(r.labels.len(), 1);
        let got = r.labels[0].bbox;
        for (u, v) in [(got.x1, b.x1), (got.y1, b.y1), (got.x2, b.x2), (got.y2, b.y2)] {
            assert!((u - v).abs() < 1e-9);
        }
    }

    #[test]
    fn boxes_pushed_out_are_dropped() {
        let s = sample_with(BBox::new(0.0, 0.0, 0.05, 0.05).unwrap());
        let t = translate(&s, -0.1, 0.0);
        assert!(t.labels.is_empty());
    }

    #[test]
    fn every_kind_preserves_size_and_validity() {
        let s = sample_with(BBox::new(0.3, 0.2, 0.6, 0.9).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for kind in AugKind::ALL {
            let a = augment(&s, kind, &AugmentParams::default(), &mut rng);
            assert_eq!((a.image.width(), a.image.height()), (64, 64));
            assert_eq!(a.labels.len(), 1, "{kind:?}");
            LabeledImage::new(a.image.clone(), a.labels.clone()).unwrap();
        }
    }

    #[test]
    fn same_seed_same_output() {
        let s = sample_with(BBox::new(0.3, 0.2, 0.6, 0.9).unwrap());
        for kind in AugKind::ALL {
            let a = augment(&s, kind, &AugmentParams::default(), &mut ChaCha8Rng::seed_from_u64(9));
            let b = augment(&s, kind, &AugmentParams::default(), &mut ChaCha8Rng::seed_from_u64(9));
            assert_eq!(a, b);
        }
    }

    #[test]
    fn corruption_counts_and_identities() {
        let img = ImageGray::new(100, 100, (0..10000).map(|i| (i % 200) as u8 + 20).collect())
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(corrupt_gaussian(&img, 0.0, 25.0, &mut rng).unwrap(), img);
        assert_eq!(corrupt_gaussian(&img, 1.0, 0.0, &mut rng).unwrap(), img);
        let (out, pos) = corrupt_gaussian_positions(&img, 0.3, 25.0, &mut rng).unwrap();
        assert_eq!(pos.len(), 3000);
        assert!(pos.windows(2).all(|w| w[0] < w[1]));
        for i in 0..10000 {
            if pos.binary_search(&i).is_err() {
                assert_eq!(out.pixels()[i], img.pixels()[i]);
            }
        }
        assert!(corrupt_gaussian(&img, 1.5, 25.0, &mut rng).is_err());
    }
}
