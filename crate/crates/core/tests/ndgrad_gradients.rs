//! Every primitive's adjoint against central finite differences (eps = 1e-5)
//! at 100 random smooth points.

use ddacdn_core::ndgrad::{grad_check, Graph, Tensor, Var};
use ddacdn_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-4;
const POINTS: usize = 100;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Values bounded away from zero with random sign, so relu stays off its kink.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.1..2.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn check_many<F>(seed: u64, mut sample: impl FnMut(&mut ChaCha8Rng) -> Tensor, f: F)
where
    F: for<'g> Fn(&'g Graph, Var<'g>) -> Result<Var<'g>> + Copy,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..POINTS {
        let x = sample(&mut rng);
        worst = worst.max(grad_check(f, &x, EPS).unwrap());
    }
    assert!(worst < TOL, "max relative error {worst:e}");
}

/// Weighted sum with fixed pseudo-random weights, so every output element
/// has a distinct upstream gradient.
fn weighted_sum<'g>(y: Var<'g>) -> Result<Var<'g>> {
    let n = y.numel();
    let w: Vec<f64> = (0..n).map(|i| ((i as f64 + 1.0) * 0.731).sin() + 0.2).collect();
    let w = y.graph().constant(Tensor::new(y.shape(), w)?);
    Ok(y.mul(w)?.sum())
}

#[test]
fn grad_check_of_plain_sum_is_exact() {
    let x = Tensor::from_slice(&[0.3, -1.2, 4.0]);
    let err = grad_check(|_, v| Ok(v.sum()), &x, EPS).unwrap();
    assert!(err < 1e-9, "{err}");
}

#[test]
fn elementwise_binary_ops() {
    fn c(g: &Graph) -> Var<'_> {
        g.constant(Tensor::from_slice(&[0.7, -1.3, 2.1, 0.4, -0.9, 1.6]))
    }
    check_many(1, |r| rand_tensor(r, &[6], -2.0, 2.0), |g, x| weighted_sum(x.add(c(g))?));
    check_many(2, |r| rand_tensor(r, &[6], -2.0, 2.0), |g, x| weighted_sum(c(g).sub(x)?));
    check_many(3, |r| rand_tensor(r, &[6], -2.0, 2.0), |g, x| weighted_sum(x.mul(c(g))?));
    check_many(4, |r| rand_tensor(r, &[6], -2.0, 2.0), |_, x| weighted_sum(x.mul(x)?));
    check_many(5, |r| rand_tensor(r, &[6], 0.5, 2.0), |g, x| weighted_sum(c(g).div(x)?));
    check_many(6, |r| rand_tensor(r, &[6], -2.0, 2.0), |g, x| {
        weighted_sum(x.div(g.constant(Tensor::scalar(1.7)))?)
    });
}

#[test]
fn maximum_minimum_off_ties() {
    // Compare against zero with |x| >= 0.1, so no ties.
    check_many(7, |r| away_from_zero(r, &[8]), |g, x| {
        weighted_sum(x.maximum(g.constant(Tensor::zeros([8])))?)
    });
    check_many(8, |r| away_from_zero(r, &[8]), |g, x| {
        weighted_sum(x.minimum(g.constant(Tensor::zeros([8])))?)
    });
}

#[test]
fn scalar_and_unary_ops() {
    check_many(9, |r| rand_tensor(r, &[5], -3.0, 3.0), |_, x| {
        weighted_sum(x.add_scalar(0.3).mul_scalar(-2.5))
    });
    check_many(10, |r| rand_tensor(r, &[5], -6.0, 6.0), |_, x| weighted_sum(x.sigmoid()));
    check_many(11, |r| rand_tensor(r, &[5], -3.0, 3.0), |_, x| weighted_sum(x.exp()));
    check_many(12, |r| rand_tensor(r, &[5], 0.1, 5.0), |_, x| weighted_sum(x.log()?));
    check_many(13, |r| rand_tensor(r, &[5], 0.1, 3.0), |_, x| weighted_sum(x.powf(1.5)?));
    check_many(14, |r| rand_tensor(r, &[5], -3.0, 3.0), |_, x| weighted_sum(x.powf(3.0)?));
    check_many(15, |r| rand_tensor(r, &[5], -8.0, 8.0), |_, x| weighted_sum(x.softplus()));
    check_many(16, |r| away_from_zero(r, &[5]), |_, x| weighted_sum(x.relu()));
}

#[test]
fn reductions_and_shape_ops() {
    check_many(17, |r| rand_tensor(r, &[2, 3], -1.0, 1.0), |_, x| Ok(x.mean()));
    check_many(18, |r| rand_tensor(r, &[2, 3], -1.0, 1.0), |_, x| {
        weighted_sum(x.reshape([3, 2])?)
    });
    check_many(19, |r| rand_tensor(r, &[2, 3], -1.0, 1.0), |g, x| {
        let other = g.constant(Tensor::full([1, 3], 0.5));
        weighted_sum(g.concat(&[x, other, x])?)
    });
    check_many(20, |r| rand_tensor(r, &[2, 3, 2, 2], -1.0, 1.0), |_, x| {
        weighted_sum(x.global_avg_pool()?)
    });
    check_many(21, |r| rand_tensor(r, &[6], -1.0, 1.0), |_, x| {
        weighted_sum(x.gather(vec![5, 0, 0, 3], [2, 2])?)
    });
}

#[test]
fn matmul_both_sides() {
    check_many(22, |r| rand_tensor(r, &[3, 4], -1.0, 1.0), |g, x| {
        let b = g.constant(Tensor::new([4, 2], (0..8).map(|i| i as f64 * 0.3 - 1.0).collect())?);
        weighted_sum(x.matmul(b)?)
    });
    check_many(23, |r| rand_tensor(r, &[4, 2], -1.0, 1.0), |g, x| {
        let a = g.constant(Tensor::new([3, 4], (0..12).map(|i| (i as f64).cos()).collect())?);
        weighted_sum(a.matmul(x)?)
    });
}

#[test]
fn conv2d_input_weight_bias() {
    let w_data: Vec<f64> = (0..2 * 2 * 9).map(|i| ((i * 7 % 11) as f64 - 5.0) * 0.1).collect();
    let x_data: Vec<f64> = (0..2 * 2 * 5 * 6).map(|i| (i as f64 * 0.37).sin()).collect();
    check_many(24, |r| rand_tensor(r, &[2, 2, 5, 6], -1.0, 1.0), |g, x| {
        let w = g.constant(Tensor::new([2, 2, 3, 3], w_data.clone())?);
        let b = g.constant(Tensor::from_slice(&[0.1, -0.2]));
        weighted_sum(x.conv2d(w, b, 2)?)
    });
    check_many(25, |r| rand_tensor(r, &[2, 2, 3, 3], -1.0, 1.0), |g, w| {
        let x = g.constant(Tensor::new([2, 2, 5, 6], x_data.clone())?);
        let b = g.constant(Tensor::from_slice(&[0.1, -0.2]));
        weighted_sum(x.conv2d(w, b, 1)?)
    });
    check_many(26, |r| rand_tensor(r, &[2], -1.0, 1.0), |g, b| {
        let x = g.constant(Tensor::new([2, 2, 5, 6], x_data.clone())?);
        let w = g.constant(Tensor::new([2, 2, 3, 3], w_data.clone())?);
        weighted_sum(x.conv2d(w, b, 2)?)
    });
}

#[test]
fn pairwise_distances_both_sides() {
    check_many(27, |r| rand_tensor(r, &[3, 2], -1.0, 1.0), |g, x| {
        let y = g.constant(Tensor::new([4, 2], (0..8).map(|i| (i as f64).sin()).collect())?);
        weighted_sum(x.pairwise_sq_dist(y)?)
    });
    check_many(28, |r| rand_tensor(r, &[4, 2], -1.0, 1.0), |g, y| {
        let x = g.constant(Tensor::new([3, 2], (0..6).map(|i| (i as f64).cos()).collect())?);
        weighted_sum(x.pairwise_sq_dist(y)?)
    });
}

#[test]
fn random_three_layer_composition() {
    // matmul -> sigmoid -> matmul -> softplus -> log -> mean
    check_many(29, |r| rand_tensor(r, &[2, 3], -1.0, 1.0), |g, x| {
        let w1 = g.constant(Tensor::new([3, 4], (0..12).map(|i| (i as f64 * 1.3).sin()).collect())?);
        let w2 = g.constant(Tensor::new([4, 2], (0..8).map(|i| (i as f64 * 0.7).cos()).collect())?);
        let h = x.matmul(w1)?.sigmoid().matmul(w2)?.softplus().log()?;
        Ok(h.mean())
    });
}

#[test]
fn forward_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let x = rand_tensor(&mut rng, &[2, 3, 8, 8], -1.0, 1.0);
    let w = rand_tensor(&mut rng, &[4, 3, 3, 3], -1.0, 1.0);
    let run = || {
        let g = Graph::new();
        let wv = g.param(w.clone());
        let y = g
            .param(x.clone())
            .conv2d(wv, g.param(Tensor::zeros([4])), 2)
            .unwrap()
            .relu()
            .global_avg_pool()
            .unwrap();
        let bits: Vec<u64> = y.value().data().iter().map(|v| v.to_bits()).collect();
        let grads = g.backward(y.sum()).unwrap();
        let gw: Vec<u64> = grads.wrt(wv).data().iter().map(|v| v.to_bits()).collect();
        (bits, gw)
    };
    assert_eq!(run(), run());
}

#[test]
fn reshape_and_concat_preserve_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let g = Graph::new();
    let a = g.constant(rand_tensor(&mut rng, &[3, 2], -1.0, 1.0));
    let b = g.constant(rand_tensor(&mut rng, &[1, 2], -1.0, 1.0));
    let sorted = |v: &[f64]| {
        let mut v = v.to_vec();
        v.sort_by(f64::total_cmp);
        v
    };
    let r = a.reshape([6]).unwrap();
    assert_eq!(sorted(r.value().data()), sorted(a.value().data()));
    let c = g.concat(&[a, b]).unwrap();
    let mut both = a.value().data().to_vec();
    both.extend_from_slice(b.value().data());
    assert_eq!(sorted(c.value().data()), sorted(&both));
}
