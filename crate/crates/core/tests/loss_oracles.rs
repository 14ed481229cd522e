use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ddacdn_core::bbox::{giou, BBox};
use ddacdn_core::losses::{bce_logits, focal, focal_sum, FocalParams};
use ddacdn_core::mkmmd::{mmd2, Estimator, KernelBank};
use ddacdn_core::ndgrad::{Graph, Tensor};

fn naive_focal(t: f64, x: f64, alpha: f64, gamma: f64) -> f64 {
    let p = 1.0 / (1.0 + (-x).exp());
    let pt = t * p + (1.0 - t) * (1.0 - p);
    let at = t * alpha + (1.0 - t) * (1.0 - alpha);
    -at * (1.0 - pt).powf(gamma) * pt.ln()
}

fn naive_giou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let area = |r: [f64; 4]| (r[2] - r[0]) * (r[3] - r[1]);
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = area(a) + area(b) - inter;
    let hull = (a[2].max(b[2]) - a[0].min(b[0])) * (a[3].max(b[3]) - a[1].min(b[1]));
    inter / union - (hull - union) / hull
}

fn naive_mmd2(s: &[f64], w: &[f64], x: &[Vec<f64>], y: &[Vec<f64>]) -> f64 {
    let k = |a: &[f64], b: &[f64]| {
        let d2: f64 = a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum();
        s.iter().zip(w).map(|(s2, wi)| wi * (-d2 / (2.0 * s2)).exp()).sum::<f64>()
    };
    let mean = |u: &[Vec<f64>], v: &[Vec<f64>]| {
        let mut acc = 0.0;
        for a in u {
            for b in v {
                acc += k(a, b);
            }
        }
        acc / (u.len() * v.len()) as f64
    };
    mean(x, x) + mean(y, y) - 2.0 * mean(x, y)
}

#[test]
fn focal_matches_probability_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..2000 {
        let x = rng.gen_range(-8.0..8.0);
        let t = if rng.gen_bool(0.5) { 1.0 } else { 0.0 };
        let (alpha, gamma) = (rng.gen_range(0.05..0.95), rng.gen_range(0.0..3.0));
        let got = focal(t, x, &FocalParams { alpha, gamma });
        let want = naive_focal(t, x, alpha, gamma);
        assert!((got - want).abs() <= 1e-9 * want.abs().max(1.0), "{t} {x}: {got} vs {want}");
    }
}

#[test]
fn focal_sum_adds_elementwise_terms() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let params = FocalParams::default();
    for _ in 0..50 {
        let n = rng.gen_range(1..20);
        let xs: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let ts: Vec<f64> = (0..n).map(|_| if rng.gen_bool(0.3) { 1.0 } else { 0.0 }).collect();
        let g = Graph::new();
        let v = g.constant(Tensor::new([n], xs.clone()).unwrap());
        let got = focal_sum(v, &ts, &params).unwrap().item();
        let want: f64 = xs.iter().zip(&ts).map(|(x, t)| focal(*t, *x, &params)).sum();
        assert!((got - want).abs() < 1e-12 * want.max(1.0));
    }
}

#[test]
fn bce_is_stable_for_large_logits() {
    assert!((bce_logits(1.0, 800.0)).abs() < 1e-300);
    assert!((bce_logits(0.0, 800.0) - 800.0).abs() < 1e-9);
    assert!((bce_logits(1.0, -800.0) - 800.0).abs() < 1e-9);
}

#[test]
fn giou_matches_direct_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut r = || {
        let (x, y) = (rng.gen_range(0.0..0.8), rng.gen_range(0.0..0.8));
        [x, y, x + rng.gen_range(0.01..0.2), y + rng.gen_range(0.01..0.2)]
    };
    for _ in 0..5000 {
        let (a, b) = (r(), r());
        let got = giou(&BBox::new(a[0], a[1], a[2], a[3]).unwrap(), &BBox::new(b[0], b[1], b[2], b[3]).unwrap());
        assert!((got - naive_giou(a, b)).abs() < 1e-12);
    }
}

#[test]
fn mmd_matches_double_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..100 {
        let d = rng.gen_range(1..5);
        let (n, m) = (rng.gen_range(1..8), rng.gen_range(1..8));
        let mut pts = |k: usize| -> Vec<Vec<f64>> { (0..k).map(|_| (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect() };
        let (x, y) = (pts(n), pts(m));
        let s = vec![0.5, 1.0, 3.0];
        let w = vec![0.2, 0.3, 0.5];
        let bank = KernelBank::new(s.clone(), w.clone()).unwrap();
        let tx = Tensor::new([n, d], x.concat()).unwrap();
        let ty = Tensor::new([m, d], y.concat()).unwrap();
        let got = mmd2(&bank, &tx, &ty, Estimator::Biased).unwrap();
        assert!((got - naive_mmd2(&s, &w, &x, &y)).abs() < 1e-12);
    }
}
