//! Noise-robustness sweeps and feature-map dumps.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::augment::corrupt_gaussian;
use crate::data::LabeledImage;
use crate::detector::ModelParams;
use crate::error::{Error, Result};
use crate::eval::{evaluate_model, metrics, EvalSettings};
use crate::fsio::write_atomic;
use crate::imgproc::ImageGray;
use crate::ndgrad::Tensor;

pub const RATIOS: [f64; 3] = [0.1, 0.2, 0.3];

#[derive(Clone, Debug, PartialEq)]
pub struct RobustRow {
    pub ratio: f64,
    pub seed: u64,
    pub class: usize,
    pub f1: f64,
}

/// Box-mode F1 per class after corrupting a `ratio` fraction of the pixels
/// of every image with N(0, sigma²) noise, once per seed. Ratio 0 evaluates
/// the clean images.
pub fn run_robustness(
    params: &ModelParams,
    samples: &[LabeledImage],
    ratios: &[f64],
    sigma: f64,
    seeds: &[u64],
    settings: &EvalSettings,
) -> Result<Vec<RobustRow>> {
    if let Some(r) = ratios.iter().find(|r| !(0.0..=1.0).contains(*r)) {
        return Err(Error::InvalidArgument(format!("corruption ratio {r} outside [0, 1]")));
    }
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!("noise sigma {sigma} must be non-negative")));
    }
    let mut rows = Vec::with_capacity(ratios.len() * seeds.len() * params.geometry.c);
    for &ratio in ratios {
        for &seed in seeds {
            let report = if ratio == 0.0 {
                evaluate_model(params, samples, settings)?
            } else {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let noisy: Vec<LabeledImage> = samples
                    .iter()
                    .map(|s| {
                        Ok(LabeledImage {
                            image: corrupt_gaussian(&s.image, ratio, sigma, &mut rng)?,
                            labels: s.labels.clone(),
                        })
                    })
                    .collect::<Result<_>>()?;
                evaluate_model(params, &noisy, settings)?
            };
            for (class, c) in report.box_counts.iter().enumerate() {
                rows.push(RobustRow { ratio, seed, class, f1: metrics(c).f1 });
            }
        }
    }
    Ok(rows)
}

pub fn robustness_csv(rows: &[RobustRow]) -> String {
    let mut out = String::from("ratio,seed,class,f1\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{:.6}", r.ratio, r.seed, crate::eval::class_name(r.class), r.f1);
    }
    out
}

/// Stage-2/3/4 feature maps of one image as `channel,row,col,value` CSVs.
pub fn feature_csvs(params: &ModelParams, image: &ImageGray) -> Result<[String; 3]> {
    let (_, pyramid) = params.predict(&[image])?;
    let render = |t: &Tensor| {
        let s = t.shape();
        let (c, h, w) = (s[1], s[2], s[3]);
        let mut out = String::with_capacity(24 * c * h * w + 32);
        out.push_str("channel,row,col,value\n");
        for (i, v) in t.data().iter().enumerate() {
            let _ = writeln!(out, "{},{},{},{:e}", i / (h * w), (i / w) % h, i % w, v);
        }
        out
    };
    Ok([render(&pyramid[0]), render(&pyramid[1]), render(&pyramid[2])])
}

/// Writes `stage2.csv`, `stage3.csv` and `stage4.csv` under `dir`.
pub fn dump_features(params: &ModelParams, image: &ImageGray, dir: &Path) -> Result<Vec<PathBuf>> {
    let csvs = feature_csvs(params, image)?;
    let mut paths = Vec::with_capacity(3);
    for (k, csv) in csvs.iter().enumerate() {
        let path = dir.join(format!("stage{}.csv", k + 2));
        write_atomic(&path, csv.as_bytes())?;
        paths.push(path);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Domain;
    use crate::datasynth::{synth_items, SynthSpec};
    use crate::detector::DetectorGeometry;

    fn test_split() -> Vec<LabeledImage> {
        let spec = SynthSpec { source_train: 1, target_train: 1, target_test: 3, ..SynthSpec::default() };
        synth_items(&spec)
            .unwrap()
            .into_iter()
            .filter(|i| i.entry.domain == Domain::Target && i.entry.split == "test")
            .map(|i| i.sample)
            .collect()
    }

    #[test]
    fn row_count_and_clean_ratio() {
        let params = ModelParams::init(DetectorGeometry::default(), 3).unwrap();
        let data = test_split();
        let settings = EvalSettings { conf_thresh: 0.01, ..EvalSettings::default() };
        let rows = run_robustness(&params, &data, &[0.0, 0.1, 0.3], 25.0, &[1, 2], &settings).unwrap();
        assert_eq!(rows.len(), 3 * 2 * 4);
        let clean = evaluate_model(&params, &data, &settings).unwrap();
        for r in rows.iter().filter(|r| r.ratio == 0.0) {
            assert_eq!(r.f1, metrics(&clean.box_counts[r.class]).f1);
        }
        let csv = robustness_csv(&rows);
        assert_eq!(csv.lines().count(), rows.len() + 1);
        assert!(csv.starts_with("ratio,seed,class,f1\n"));
        assert!(run_robustness(&params, &data, &[1.5], 25.0, &[1], &settings).is_err());
    }

    #[test]
    fn feature_dump_shapes() {
        let params = ModelParams::init(DetectorGeometry::default(), 4).unwrap();
        let img = test_split().remove(0).image;
        let csvs = feature_csvs(&params, &img).unwrap();
        for (csv, (ch, side)) in csvs.iter().zip([(16, 16), (32, 8), (64, 4)]) {
            assert_eq!(csv.lines().count(), 1 + ch * side * side);
        }
        assert_eq!(csvs, feature_csvs(&params, &img).unwrap());
    }

    #[test]
    fn zero_model_zero_image() {
        let params = ModelParams::zeros(DetectorGeometry::default()).unwrap();
        let img = ImageGray::new(64, 64, vec![0; 64 * 64]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let paths = dump_features(&params, &img, dir.path()).unwrap();
        assert_eq!(paths.len(), 3);
        for p in paths {
            let text = std::fs::read_to_string(p).unwrap();
            assert!(text.lines().skip(1).all(|l| l.ends_with(",0e0")));
        }
    }
}
