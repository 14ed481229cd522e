//! Detection metrics: box matching, image-level contingency counts,
//! precision/recall/F1/accuracy, PR curves and IoU sweeps.

use crate::bbox::iou;
use crate::data::{LabeledImage, ObjectLabel, CATEGORY_NAMES};
use crate::detector::{decode, nms, Detection, ModelParams};
use crate::error::Result;
use crate::imgproc::{apage, ApageConfig, ImageGray};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl Counts {
    fn add(&mut self, o: &Counts) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
        self.tn += o.tn;
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub acc: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Precision, recall, F1 and accuracy; every 0/0 is 0.
pub fn metrics(c: &Counts) -> Metrics {
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Metrics {
        precision,
        recall,
        f1,
        acc: ratio(c.tp + c.tn, c.tp + c.tn + c.fp + c.fn_),
    }
}

/// Greedy one-to-one matching in descending confidence order. Each detection
/// takes the unmatched same-class ground truth of highest IoU (earlier index
/// on ties) if that IoU reaches `iou_thresh`. Returns per-class counts.
pub fn match_detections(dets: &[Detection], gts: &[ObjectLabel], iou_thresh: f64, classes: usize) -> Vec<Counts> {
    let mut order: Vec<&Detection> = dets.iter().collect();
    order.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    let mut used = vec![false; gts.len()];
    let mut counts = vec![Counts::default(); classes];
    for d in order {
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts.iter().enumerate() {
            if used[j] || g.class != d.class {
                continue;
            }
            let v = iou(&d.bbox, &g.bbox);
            if v >= iou_thresh && best.is_none_or(|(_, b)| v > b) {
                best = Some((j, v));
            }
        }
        if let Some(c) = counts.get_mut(d.class) {
            match best {
                Some((j, _)) => {
                    used[j] = true;
                    c.tp += 1;
                }
                None => c.fp += 1,
            }
        }
    }
    for (j, g) in gts.iter().enumerate() {
        if !used[j] {
            if let Some(c) = counts.get_mut(g.class) {
                c.fn_ += 1;
            }
        }
    }
    counts
}

/// Per-class presence contingency of one image.
pub fn image_level_counts(dets: &[Detection], gts: &[ObjectLabel], classes: usize) -> Vec<Counts> {
    (0..classes)
        .map(|c| {
            let predicted = dets.iter().any(|d| d.class == c);
            let present = gts.iter().any(|g| g.class == c);
            match (predicted, present) {
                (true, true) => Counts { tp: 1, ..Counts::default() },
                (true, false) => Counts { fp: 1, ..Counts::default() },
                (false, true) => Counts { fn_: 1, ..Counts::default() },
                (false, false) => Counts { tn: 1, ..Counts::default() },
            }
        })
        .collect()
}

/// Summed box-mode and image-mode counts over a set of images.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub box_counts: Vec<Counts>,
    pub image_counts: Vec<Counts>,
}

impl EvalReport {
    /// Mean over classes of box-mode F1.
    pub fn macro_f1(&self) -> f64 {
        let n = self.box_counts.len().max(1) as f64;
        self.box_counts.iter().map(|c| metrics(c).f1).sum::<f64>() / n
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("mode,class,tp,fp,fn,tn,precision,recall,f1,acc\n");
        for (mode, rows) in [("box", &self.box_counts), ("image", &self.image_counts)] {
            let mut sum = Vec::new();
            for (c, k) in rows.iter().enumerate() {
                let m = metrics(k);
                sum.push(m);
                // TN does not exist for boxes, so box rows leave TN and Acc empty.
                let (tn, acc) = if mode == "box" {
                    (String::new(), String::new())
                } else {
                    (k.tn.to_string(), format!("{:.6}", m.acc))
                };
                out.push_str(&format!(
                    "{mode},{},{},{},{},{tn},{:.6},{:.6},{:.6},{acc}\n",
                    class_name(c),
                    k.tp,
                    k.fp,
                    k.fn_,
                    m.precision,
                    m.recall,
                    m.f1
                ));
            }
            let n = sum.len().max(1) as f64;
            let mean = |f: fn(&Metrics) -> f64| sum.iter().map(f).sum::<f64>() / n;
            let acc = if mode == "box" { String::new() } else { format!("{:.6}", mean(|m| m.acc)) };
            out.push_str(&format!(
                "{mode},macro,,,,,{:.6},{:.6},{:.6},{acc}\n",
                mean(|m| m.precision),
                mean(|m| m.recall),
                mean(|m| m.f1)
            ));
        }
        out
    }
}

pub fn class_name(c: usize) -> String {
    CATEGORY_NAMES.get(c).map_or_else(|| c.to_string(), |s| s.to_string())
}

pub fn evaluate(dets: &[Vec<Detection>], gts: &[&[ObjectLabel]], iou_thresh: f64, classes: usize) -> EvalReport {
    let mut box_counts = vec![Counts::default(); classes];
    let mut image_counts = vec![Counts::default(); classes];
    for (d, g) in dets.iter().zip(gts) {
        for (acc, c) in box_counts.iter_mut().zip(match_detections(d, g, iou_thresh, classes)) {
            acc.add(&c);
        }
        for (acc, c) in image_counts.iter_mut().zip(image_level_counts(d, g, classes)) {
            acc.add(&c);
        }
    }
    EvalReport { box_counts, image_counts }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PrPoint {
    pub class: usize,
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Per-class precision and recall at `n_points` confidence thresholds evenly
/// spaced over `[0, 1]`.
pub fn pr_curve(
    dets: &[Vec<Detection>],
    gts: &[&[ObjectLabel]],
    iou_thresh: f64,
    n_points: usize,
    classes: usize,
) -> Vec<PrPoint> {
    let n_points = n_points.max(2);
    let mut out = Vec::with_capacity(classes * n_points);
    let per_threshold: Vec<(f64, EvalReport)> = (0..n_points)
        .map(|i| {
            let t = i as f64 / (n_points - 1) as f64;
            let kept: Vec<Vec<Detection>> = dets
                .iter()
                .map(|d| d.iter().filter(|x| x.confidence >= t).copied().collect())
                .collect();
            (t, evaluate(&kept, gts, iou_thresh, classes))
        })
        .collect();
    for class in 0..classes {
        for (t, r) in &per_threshold {
            let m = metrics(&r.box_counts[class]);
            out.push(PrPoint { class, threshold: *t, precision: m.precision, recall: m.recall });
        }
    }
    out
}

pub fn pr_csv(points: &[PrPoint]) -> String {
    let mut out = String::from("class,threshold,precision,recall\n");
    for p in points {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6}\n",
            class_name(p.class),
            p.threshold,
            p.precision,
            p.recall
        ));
    }
    out
}

/// IoU thresholds 0.1, 0.2, ..., 0.9.
pub fn sweep_thresholds() -> Vec<f64> {
    (1..=9).map(|i| i as f64 / 10.0).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub iou_thresh: f64,
    /// Box-mode counts pooled over classes.
    pub counts: Counts,
    pub metrics: Metrics,
}

/// Metrics at every sweep threshold and the index of the first F1 maximum.
pub fn iou_sweep(dets: &[Vec<Detection>], gts: &[&[ObjectLabel]], classes: usize) -> (Vec<SweepRow>, usize) {
    let rows: Vec<SweepRow> = sweep_thresholds()
        .into_iter()
        .map(|t| {
            let mut counts = Counts::default();
            for c in evaluate(dets, gts, t, classes).box_counts {
                counts.add(&c);
            }
            SweepRow { iou_thresh: t, counts, metrics: metrics(&counts) }
        })
        .collect();
    let mut best = 0;
    for (i, r) in rows.iter().enumerate() {
        if r.metrics.f1 > rows[best].metrics.f1 {
            best = i;
        }
    }
    (rows, best)
}

pub fn sweep_csv(rows: &[SweepRow], best: usize) -> String {
    let mut out = String::from("iou,tp,fp,fn,precision,recall,f1,best\n");
    for (i, r) in rows.iter().enumerate() {
        out.push_str(&format!(
            "{:.1},{},{},{},{:.6},{:.6},{:.6},{}\n",
            r.iou_thresh,
            r.counts.tp,
            r.counts.fp,
            r.counts.fn_,
            r.metrics.precision,
            r.metrics.recall,
            r.metrics.f1,
            u8::from(i == best)
        ));
    }
    out
}

/// Inference-time thresholds.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSettings {
    pub conf_thresh: f64,
    pub nms_iou: f64,
    pub match_iou: f64,
    /// Enhance images with APAGE before inference.
    pub apage: Option<ApageConfig>,
    pub batch: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            conf_thresh: 0.25,
            nms_iou: 0.45,
            match_iou: 0.5,
            apage: None,
            batch: 32,
        }
    }
}

/// Runs the model over the images and returns post-NMS detections with
/// confidence at least `settings.conf_thresh`.
pub fn detect(params: &ModelParams, images: &[&ImageGray], settings: &EvalSettings) -> Result<Vec<Vec<Detection>>> {
    let prepared: Vec<ImageGray> = match &settings.apage {
        Some(cfg) => images.iter().map(|i| apage(i, cfg)).collect::<Result<_>>()?,
        None => images.iter().map(|i| (*i).clone()).collect(),
    };
    let mut out = Vec::with_capacity(images.len());
    for chunk in prepared.chunks(settings.batch.max(1)) {
        let refs: Vec<&ImageGray> = chunk.iter().collect();
        let (raw, _) = params.predict(&refs)?;
        for d in decode(&raw, &params.geometry, settings.conf_thresh) {
            out.push(nms(&d, settings.nms_iou));
        }
    }
    Ok(out)
}

pub fn evaluate_model(params: &ModelParams, samples: &[LabeledImage], settings: &EvalSettings) -> Result<EvalReport> {
    let images: Vec<&ImageGray> = samples.iter().map(|s| &s.image).collect();
    let dets = detect(params, &images, settings)?;
    let gts: Vec<&[ObjectLabel]> = samples.iter().map(|s| s.labels.as_slice()).collect();
    Ok(evaluate(&dets, &gts, settings.match_iou, params.geometry.c))
}
