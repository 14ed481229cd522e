use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ddacdn_core::augment::corrupt_gaussian_positions;
use ddacdn_core::bbox::{giou, iou, BBox};
use ddacdn_core::detector::{nms, Detection};
use ddacdn_core::eval::{match_detections, metrics, Counts};
use ddacdn_core::data::ObjectLabel;
use ddacdn_core::imgproc::{decode_pgm, encode_pgm, ImageGray};
use ddacdn_core::mkmmd::{mmd2, Estimator, KernelBank};
use ddacdn_core::ndgrad::Tensor;

fn bbox() -> impl Strategy<Value = BBox> {
    (0.0..0.9f64, 0.0..0.9f64, 0.01..0.5f64, 0.01..0.5f64)
        .prop_map(|(x, y, w, h)| BBox::new(x, y, (x + w).min(1.0), (y + h).min(1.0)).unwrap())
}

fn detections(max: usize) -> impl Strategy<Value = Vec<Detection>> {
    prop::collection::vec((0..3usize, 0.0..1.0f64, bbox()), 0..max)
        .prop_map(|v| v.into_iter().map(|(class, confidence, bbox)| Detection { class, confidence, bbox }).collect())
}

fn points(n: usize, d: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-3.0..3.0f64, n * d).prop_map(move |v| Tensor::new([n, d], v).unwrap())
}

proptest! {
    #[test]
    fn metrics_stay_in_unit_interval(tp in 0..50usize, fp in 0..50usize, fn_ in 0..50usize, tn in 0..50usize) {
        let m = metrics(&Counts { tp, fp, fn_, tn });
        for v in [m.precision, m.recall, m.f1, m.acc] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        prop_assert!(m.f1 <= m.precision.max(m.recall) + 1e-15);
    }

    #[test]
    fn iou_and_giou_bounds(a in bbox(), b in bbox()) {
        let (i, g) = (iou(&a, &b), giou(&a, &b));
        prop_assert!((0.0..=1.0).contains(&i));
        prop_assert!((-1.0..=1.0).contains(&g));
        prop_assert!(g <= i + 1e-12);
        prop_assert!((i - iou(&b, &a)).abs() < 1e-15);
        prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn nms_output_is_a_sorted_non_overlapping_subset(dets in detections(12), thr in 0.1..0.9f64) {
        let kept = nms(&dets, thr);
        prop_assert!(kept.len() <= dets.len());
        prop_assert!(kept.windows(2).all(|w| w[0].confidence >= w[1].confidence));
        for (i, a) in kept.iter().enumerate() {
            prop_assert!(dets.contains(a));
            for b in &kept[i + 1..] {
                prop_assert!(a.class != b.class || iou(&a.bbox, &b.bbox) <= thr);
            }
        }
        if let Some(top) = dets.iter().max_by(|a, b| a.confidence.total_cmp(&b.confidence)) {
            prop_assert_eq!(kept[0].confidence, top.confidence);
        }
        prop_assert_eq!(nms(&kept, thr), kept);
    }

    #[test]
    fn matching_conserves_boxes(dets in detections(6), gts in prop::collection::vec((0..3usize, bbox()), 0..6), thr in 0.1..0.9f64) {
        let gts: Vec<ObjectLabel> = gts.into_iter().map(|(class, bbox)| ObjectLabel { class, bbox }).collect();
        let counts = match_detections(&dets, &gts, thr, 3);
        let tp: usize = counts.iter().map(|c| c.tp).sum();
        let fp: usize = counts.iter().map(|c| c.fp).sum();
        let fn_: usize = counts.iter().map(|c| c.fn_).sum();
        prop_assert_eq!(tp + fp, dets.len());
        prop_assert_eq!(tp + fn_, gts.len());
    }

    #[test]
    fn mmd_is_symmetric_and_non_negative(x in points(6, 3), y in points(5, 3), s in 0.1..5.0f64) {
        let bank = KernelBank::new(vec![s, 2.0 * s], vec![0.5, 0.5]).unwrap();
        let xy = mmd2(&bank, &x, &y, Estimator::Biased).unwrap();
        let yx = mmd2(&bank, &y, &x, Estimator::Biased).unwrap();
        prop_assert!((xy - yx).abs() < 1e-12);
        prop_assert!(xy >= -1e-12);
        let u = mmd2(&bank, &x, &y, Estimator::Unbiased).unwrap();
        let v = mmd2(&bank, &y, &x, Estimator::Unbiased).unwrap();
        prop_assert!((u - v).abs() < 1e-12);
    }

    #[test]
    fn pgm_round_trip(w in 1..30usize, h in 1..30usize, seed in any::<u64>()) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = ImageGray::new(w, h, (0..w * h).map(|_| rng.gen()).collect()).unwrap();
        prop_assert_eq!(decode_pgm(&encode_pgm(&img)).unwrap(), img);
    }

    #[test]
    fn corruption_touches_exactly_round_ratio_pixels(ratio in 0.0..=1.0f64, seed in any::<u64>()) {
        let img = ImageGray::filled(20, 15, 128).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (out, pos) = corrupt_gaussian_positions(&img, ratio, 25.0, &mut rng).unwrap();
        prop_assert_eq!(pos.len(), (ratio * 300.0).round() as usize);
        prop_assert!(pos.windows(2).all(|w| w[0] < w[1]));
        for (i, (a, b)) in img.pixels().iter().zip(out.pixels()).enumerate() {
            if a != b {
                prop_assert!(pos.binary_search(&i).is_ok());
            }
        }
    }
}
