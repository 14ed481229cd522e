use super::{DetectorGeometry, RawPredictions};
use crate::bbox::{iou, BBox};
use crate::ndgrad::sigmoid;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub class: usize,
    pub confidence: f64,
    pub bbox: BBox,
}

/// Converts head outputs into detections, one list per batch image, sorted
/// by confidence descending.
pub fn decode(raw: &RawPredictions, geom: &DetectorGeometry, conf_thresh: f64) -> Vec<Vec<Detection>> {
    let batch = raw[0].shape()[0];
    let data = |s: usize, b: usize, ch: usize, r: usize, c: usize| {
        raw[s].data()[geom.raw_index(s, b, ch, r, c)]
    };
    (0..batch)
        .map(|b| {
            let mut out = Vec::new();
            for s in 0..3 {
                let g = geom.grid(s);
                let gf = g as f64;
                for row in 0..g {
                    for col in 0..g {
                        let (class, p_cls) = (0..geom.c)
                            .map(|c| (c, sigmoid(data(s, b, geom.class_channel(c), row, col))))
                            .fold((0, f64::NEG_INFINITY), |best, x| if x.1 > best.1 { x } else { best });
                        for m in 0..geom.m {
                            let f = |k| sigmoid(data(s, b, geom.slot_channel(m, k), row, col));
                            let confidence = f(4) * p_cls;
                            if confidence < conf_thresh {
                                continue;
                            }
                            let cx = (col as f64 + f(0)) / gf;
                            let cy = (row as f64 + f(1)) / gf;
                            let bbox = BBox::from_cxcywh(cx, cy, f(2), f(3)).clipped();
                            out.push(Detection { class, confidence, bbox });
                        }
                    }
                }
            }
            out.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
            out
        })
        .collect()
}

/// Greedy per-class suppression of boxes overlapping a kept, more confident
/// box by more than `iou_thresh`.
pub fn nms(dets: &[Detection], iou_thresh: f64) -> Vec<Detection> {
    let mut sorted = dets.to_vec();
    sorted.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    let mut kept: Vec<Detection> = Vec::new();
    for d in sorted {
        if kept
            .iter()
            .all(|k| k.class != d.class || iou(&k.bbox, &d.bbox) <= iou_thresh)
        {
            kept.push(d);
        }
    }
    kept
}
