//! Labeled samples, the label-file format and dataset manifests.
//!
//! A dataset directory holds `images/<stem>.pgm`, `labels/<stem>.txt` and a
//! `manifest.txt` with one `stem<TAB>domain<TAB>split` line per sample. Label
//! files carry one `class cx cy w h` line per object, normalized, with six
//! decimals.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::fsio;
use crate::imgproc::{read_pgm, ImageGray};

/// The four damage categories shared by both domains.
pub const CATEGORY_NAMES: [&str; 4] = ["longitudinal", "transverse", "alligator", "pothole"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Domain {
    Source,
    Target,
    Intermediate,
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Domain::Source => "source",
            Domain::Target => "target",
            Domain::Intermediate => "intermediate",
        })
    }
}

impl FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source" => Ok(Domain::Source),
            "target" => Ok(Domain::Target),
            "intermediate" => Ok(Domain::Intermediate),
            _ => Err(Error::InvalidArgument(format!("unknown domain {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectLabel {
    pub class: usize,
    pub bbox: BBox,
}

/// An image with its class-tagged boxes.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub image: ImageGray,
    pub labels: Vec<ObjectLabel>,
}

impl LabeledImage {
    /// Every box must satisfy `0 <= x1 < x2 <= 1` and `0 <= y1 < y2 <= 1`.
    pub fn new(image: ImageGray, labels: Vec<ObjectLabel>) -> Result<Self> {
        for l in &labels {
            if !l.bbox.is_valid() || l.bbox.x1 >= l.bbox.x2 || l.bbox.y1 >= l.bbox.y2 {
                return Err(Error::InvalidArgument(format!("invalid label box {:?}", l.bbox)));
            }
        }
        Ok(LabeledImage { image, labels })
    }
}

/// One line of a label file.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LabelRecord {
    pub class: usize,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl LabelRecord {
    /// Center form of a box, rounded to the six decimals the file stores.
    pub fn from_label(l: &ObjectLabel) -> Self {
        let (cx, cy) = l.bbox.center();
        LabelRecord {
            class: l.class,
            cx: round6(cx),
            cy: round6(cy),
            w: round6(l.bbox.width()),
            h: round6(l.bbox.height()),
        }
    }

    pub fn to_label(&self) -> ObjectLabel {
        ObjectLabel {
            class: self.class,
            bbox: BBox::from_cxcywh(self.cx, self.cy, self.w, self.h).clipped(),
        }
    }
}

pub fn round6(v: f64) -> f64 {
    (v * 1e6).round() / 1e6
}

pub fn format_labels(records: &[LabelRecord]) -> String {
    records
        .iter()
        .map(|r| format!("{} {:.6} {:.6} {:.6} {:.6}\n", r.class, r.cx, r.cy, r.w, r.h))
        .collect()
}

pub fn parse_labels(text: &str) -> Result<Vec<LabelRecord>> {
    let mut out = Vec::new();
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let body = line.trim();
        if !body.is_empty() {
            let fields: Vec<&str> = body.split_whitespace().collect();
            let bad = |detail: String| Error::Parse { offset, detail };
            if fields.len() != 5 {
                return Err(bad(format!("expected 5 fields, got {}", fields.len())));
            }
            let class = fields[0]
                .parse::<usize>()
                .map_err(|_| bad(format!("bad class {:?}", fields[0])))?;
            let mut v = [0.0; 4];
            for (slot, f) in v.iter_mut().zip(&fields[1..]) {
                *slot = f
                    .parse::<f64>()
                    .ok()
                    .filter(|x| (0.0..=1.0).contains(x))
                    .ok_or_else(|| bad(format!("bad coordinate {f:?}")))?;
            }
            out.push(LabelRecord {
                class,
                cx: v[0],
                cy: v[1],
                w: v[2],
                h: v[3],
            });
        }
        offset += line.len();
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub stem: String,
    pub domain: Domain,
    pub split: String,
}

pub fn format_manifest(entries: &[ManifestEntry]) -> String {
    entries
        .iter()
        .map(|e| format!("{}\t{}\t{}\n", e.stem, e.domain, e.split))
        .collect()
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let body = line.trim_end_matches(['\n', '\r']);
        if !body.trim().is_empty() {
            let f: Vec<&str> = body.split('\t').collect();
            if f.len() != 3 {
                return Err(Error::Parse {
                    offset,
                    detail: format!("manifest line needs 3 tab-separated fields: {body:?}"),
                });
            }
            out.push(ManifestEntry {
                stem: f[0].to_string(),
                domain: f[1].parse().map_err(|e: Error| Error::Parse {
                    offset,
                    detail: e.to_string(),
                })?,
                split: f[2].to_string(),
            });
        }
        offset += line.len();
    }
    Ok(out)
}

/// A dataset directory on disk.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let entries = parse_manifest(&fsio::read_text(&root.join("manifest.txt"))?)?;
        Ok(Dataset {
            root: root.to_path_buf(),
            entries,
        })
    }

    pub fn image_path(&self, stem: &str) -> PathBuf {
        self.root.join("images").join(format!("{stem}.pgm"))
    }

    pub fn label_path(&self, stem: &str) -> PathBuf {
        self.root.join("labels").join(format!("{stem}.txt"))
    }

    pub fn select(&self, domain: Domain, split: &str) -> Vec<&ManifestEntry> {
        self.entries
            .iter()
            .filter(|e| e.domain == domain && e.split == split)
            .collect()
    }

    /// Loads a sample; a missing label file means an unlabeled image.
    pub fn load(&self, entry: &ManifestEntry) -> Result<(LabeledImage, bool)> {
        let image = read_pgm(&self.image_path(&entry.stem))?;
        let lp = self.label_path(&entry.stem);
        if !lp.exists() {
            return Ok((LabeledImage::new(image, Vec::new())?, false));
        }
        let labels = parse_labels(&fsio::read_text(&lp)?)?
            .iter()
            .map(LabelRecord::to_label)
            .collect();
        Ok((LabeledImage::new(image, labels)?, true))
    }

    /// Loads every labeled sample of a domain/split, in manifest order.
    pub fn load_split(&self, domain: Domain, split: &str) -> Result<Vec<LabeledImage>> {
        self.select(domain, split)
            .into_iter()
            .map(|e| self.load(e).map(|(s, _)| s))
            .collect()
    }
}
