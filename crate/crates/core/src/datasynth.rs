//! Synthetic two-domain pavement benchmark.
//!
//! Source images are bright and evenly lit with mild noise and strong crack
//! contrast. Target images are darker, lit by a left-to-right gradient, carry
//! speckle texture and faint cracks.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::bbox::BBox;
use crate::data::{format_labels, format_manifest, Domain, LabelRecord, LabeledImage, ManifestEntry, ObjectLabel};
use crate::error::{Error, Result};
use crate::fsio;
use crate::imgproc::{encode_pgm, ImageGray};

/// Rendering parameters of one domain.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainStyle {
    pub background: (f64, f64),
    /// Std of per-pixel Gaussian texture.
    pub texture: f64,
    /// Illumination falls to `1 - gradient` at the left edge.
    pub gradient: (f64, f64),
    pub crack_contrast: (f64, f64),
    pub line_width: (usize, usize),
}

impl DomainStyle {
    pub fn source() -> Self {
        DomainStyle {
            background: (170.0, 200.0),
            texture: 6.0,
            gradient: (0.0, 0.0),
            crack_contrast: (80.0, 110.0),
            line_width: (2, 4),
        }
    }

    pub fn target() -> Self {
        DomainStyle {
            background: (85.0, 110.0),
            texture: 9.0,
            gradient: (0.3, 0.5),
            crack_contrast: (28.0, 40.0),
            line_width: (2, 4),
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = self.background.0 <= self.background.1
            && (0.0..=255.0).contains(&self.background.0)
            && (0.0..=255.0).contains(&self.background.1)
            && self.texture >= 0.0
            && 0.0 <= self.gradient.0
            && self.gradient.0 <= self.gradient.1
            && self.gradient.1 < 1.0
            && 0.0 <= self.crack_contrast.0
            && self.crack_contrast.0 <= self.crack_contrast.1
            && 1 <= self.line_width.0
            && self.line_width.0 <= self.line_width.1;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid domain style {self:?}")))
        }
    }
}

/// Sizes, counts and styles of a benchmark.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub size: usize,
    pub categories: usize,
    pub source_train: usize,
    pub target_train: usize,
    pub target_test: usize,
    pub source: DomainStyle,
    pub target: DomainStyle,
    pub objects_per_image: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            size: 64,
            categories: 4,
            source_train: 200,
            target_train: 50,
            target_test: 50,
            source: DomainStyle::source(),
            target: DomainStyle::target(),
            objects_per_image: 1,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size < 32 {
            return Err(Error::InvalidArgument(format!("image size {} below 32", self.size)));
        }
        if self.categories == 0 || self.categories > 4 {
            return Err(Error::InvalidArgument("categories must be 1..=4".into()));
        }
        if self.source_train == 0 || self.target_train == 0 || self.target_test == 0 || self.objects_per_image == 0 {
            return Err(Error::InvalidArgument("counts must be at least 1".into()));
        }
        self.source.validate()?;
        self.target.validate()
    }

    fn style(&self, domain: Domain) -> &DomainStyle {
        match domain {
            Domain::Source => &self.source,
            _ => &self.target,
        }
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

/// Draws the structure of `category` into `mask`; returns its pixel box.
fn draw_structure<R: Rng + ?Sized>(
    mask: &mut [bool],
    n: usize,
    category: usize,
    width: usize,
    rng: &mut R,
) -> (usize, usize, usize, usize) {
    let ni = n as isize;
    let mut put = |x: isize, y: isize| {
        if (0..ni).contains(&x) && (0..ni).contains(&y) {
            mask[y as usize * n + x as usize] = true;
        }
    };
    let w = width as isize;
    match category {
        // Long thin wandering line; vertical for 0, horizontal for 1.
        0 | 1 => {
            let len = rng.gen_range(n * 7 / 16..=n * 3 / 4) as isize;
            let start = rng.gen_range(2..=(ni - len - 2).max(2));
            let base = rng.gen_range(ni / 5..=ni * 4 / 5 - w);
            let mut across = base;
            for along in start..start + len {
                if along % 4 == 0 {
                    across = (across + rng.gen_range(-1..=1)).clamp(base - 2, base + 2);
                }
                for k in 0..w {
                    if category == 0 {
                        put(across + k, along);
                    } else {
                        put(along, across + k);
                    }
                }
            }
        }
        // Square patch crossed by a lattice of thin lines.
        2 => {
            let side = rng.gen_range(n * 5 / 16..=n / 2) as isize;
            let x0 = rng.gen_range(2..=ni - side - 2);
            let y0 = rng.gen_range(2..=ni - side - 2);
            let step = rng.gen_range(4..=6);
            for y in y0..y0 + side {
                for x in x0..x0 + side {
                    let (dx, dy) = (x - x0, y - y0);
                    if dx % step == 0 || dy % step == 0 || dx == side - 1 || dy == side - 1 {
                        put(x, y);
                    }
                }
            }
        }
        // Filled ellipse.
        _ => {
            let rx = rng.gen_range(n as f64 * 0.1..n as f64 * 0.19);
            let ry = rng.gen_range(n as f64 * 0.08..n as f64 * 0.16);
            let cx = rng.gen_range(rx + 2.0..n as f64 - rx - 2.0);
            let cy = rng.gen_range(ry + 2.0..n as f64 - ry - 2.0);
            for y in 0..ni {
                for x in 0..ni {
                    let (u, v) = ((x as f64 + 0.5 - cx) / rx, (y as f64 + 0.5 - cy) / ry);
                    if u * u + v * v <= 1.0 {
                        put(x, y);
                    }
                }
            }
        }
    }
    let (mut x1, mut y1, mut x2, mut y2) = (n, n, 0, 0);
    for y in 0..n {
        for x in 0..n {
            if mask[y * n + x] {
                x1 = x1.min(x);
                y1 = y1.min(y);
                x2 = x2.max(x + 1);
                y2 = y2.max(y + 1);
            }
        }
    }
    (x1, y1, x2, y2)
}

/// Renders one sample containing `spec.objects_per_image` structures, the
/// first of `category` and the rest of random categories.
pub fn synth_sample<R: Rng + ?Sized>(spec: &SynthSpec, domain: Domain, category: usize, rng: &mut R) -> Result<LabeledImage> {
    if category >= spec.categories {
        return Err(Error::InvalidArgument(format!("category {category} out of range")));
    }
    let n = spec.size;
    let style = spec.style(domain);
    let background = uniform(rng, style.background);
    let gradient = uniform(rng, style.gradient);
    let mut darkness = vec![0.0; n * n];
    let mut labels = Vec::new();
    for k in 0..spec.objects_per_image {
        let class = if k == 0 { category } else { rng.gen_range(0..spec.categories) };
        let contrast = uniform(rng, style.crack_contrast);
        let width = rng.gen_range(style.line_width.0..=style.line_width.1);
        let mut mask = vec![false; n * n];
        let (x1, y1, x2, y2) = draw_structure(&mut mask, n, class, width, rng);
        for (d, &m) in darkness.iter_mut().zip(&mask) {
            if m {
                *d = f64::max(*d, contrast);
            }
        }
        let nf = n as f64;
        labels.push(ObjectLabel {
            class,
            bbox: BBox::new(x1 as f64 / nf, y1 as f64 / nf, x2 as f64 / nf, y2 as f64 / nf)?,
        });
    }
    let noise = Normal::new(0.0, style.texture).expect("non-negative texture");
    let mut px = Vec::with_capacity(n * n);
    for y in 0..n {
        for x in 0..n {
            let illum = 1.0 - gradient * (1.0 - x as f64 / (n - 1) as f64);
            let v = illum * (background - darkness[y * n + x]) + noise.sample(rng);
            px.push(v.round().clamp(0.0, 255.0) as u8);
        }
    }
    LabeledImage::new(ImageGray::new(n, n, px)?, labels)
}

/// A generated sample with its manifest entry.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthItem {
    pub entry: ManifestEntry,
    pub sample: LabeledImage,
}

/// Generates every sample of the benchmark in manifest order. Each sample
/// draws from its own generator seeded by `(seed, index)`.
pub fn synth_items(spec: &SynthSpec) -> Result<Vec<SynthItem>> {
    spec.validate()?;
    let groups = [
        (Domain::Source, "train", spec.source_train),
        (Domain::Target, "train", spec.target_train),
        (Domain::Target, "test", spec.target_test),
    ];
    let mut items = Vec::new();
    for (domain, split, count) in groups {
        for category in 0..spec.categories {
            for i in 0..count {
                let index = items.len() as u64;
                let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
                let sample = synth_sample(spec, domain, category, &mut rng)?;
                let tag = if domain == Domain::Source { 's' } else { 't' };
                items.push(SynthItem {
                    entry: ManifestEntry {
                        stem: format!("{tag}_{split}_c{category}_{i:04}"),
                        domain,
                        split: split.to_string(),
                    },
                    sample,
                });
            }
        }
    }
    Ok(items)
}

/// Writes `images/`, `labels/` and `manifest.txt` under `root`.
pub fn synth_dataset(spec: &SynthSpec, root: &Path) -> Result<Vec<ManifestEntry>> {
    let items = synth_items(spec)?;
    for it in &items {
        let stem = &it.entry.stem;
        fsio::write_atomic(&root.join("images").join(format!("{stem}.pgm")), &encode_pgm(&it.sample.image))?;
        let recs: Vec<LabelRecord> = it.sample.labels.iter().map(LabelRecord::from_label).collect();
        fsio::write_atomic(&root.join("labels").join(format!("{stem}.txt")), format_labels(&recs).as_bytes())?;
    }
    let entries: Vec<ManifestEntry> = items.into_iter().map(|it| it.entry).collect();
    fsio::write_atomic(&root.join("manifest.txt"), format_manifest(&entries).as_bytes())?;
    Ok(entries)
}
