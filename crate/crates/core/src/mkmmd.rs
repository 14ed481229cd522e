//! Multi-kernel maximum mean discrepancy, the three-scale domain loss and
//! intermediate-domain batches.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::data::{Domain, LabeledImage};
use crate::error::{Error, Result};
use crate::ndgrad::{Graph, Tensor, Var};

/// Bandwidth multipliers of the default bank, relative to the median heuristic.
pub const DEFAULT_MULTIPLIERS: [f64; 5] = [0.25, 0.5, 1.0, 2.0, 4.0];

/// Convex combination of Gaussian kernels `exp(-d^2 / (2 sigma^2))`.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelBank {
    /// `sigma^2` per kernel.
    pub bandwidths: Vec<f64>,
    pub weights: Vec<f64>,
}

impl KernelBank {
    pub fn new(bandwidths: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if bandwidths.is_empty() || bandwidths.len() != weights.len() {
            return Err(Error::InvalidArgument(format!(
                "kernel bank needs matching non-empty bandwidths and weights, got {} and {}",
                bandwidths.len(),
                weights.len()
            )));
        }
        if bandwidths.iter().any(|&b| !(b > 0.0 && b.is_finite())) {
            return Err(Error::InvalidArgument(format!("bandwidths must be positive: {bandwidths:?}")));
        }
        let sum: f64 = weights.iter().sum();
        if weights.iter().any(|&w| !(w >= 0.0)) || (sum - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidArgument(format!("weights must be non-negative and sum to 1: {weights:?}")));
        }
        Ok(KernelBank { bandwidths, weights })
    }

    /// Equal-weight bank with bandwidths `base * multipliers`.
    pub fn scaled(base: f64, multipliers: &[f64]) -> Result<Self> {
        let m = multipliers.len();
        Self::new(
            multipliers.iter().map(|k| base * k).collect(),
            vec![1.0 / m as f64; m],
        )
    }

    /// Default bank around the median heuristic of the pooled rows.
    pub fn from_median(xs: &Tensor, xt: &Tensor) -> Result<Self> {
        Self::scaled(median_bandwidth(xs, xt)?, &DEFAULT_MULTIPLIERS)
    }

    /// Kernel value at squared distance `d2`.
    pub fn eval_sq(&self, d2: f64) -> f64 {
        self.bandwidths
            .iter()
            .zip(&self.weights)
            .map(|(s2, w)| w * (-d2 / (2.0 * s2)).exp())
            .sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Estimator {
    Biased,
    Unbiased,
}

fn rows(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [n, d] => Ok((*n, *d)),
        s => Err(Error::InvalidArgument(format!("{what} must be a (n, d) matrix, got {s:?}"))),
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn kernel_eval(bank: &KernelBank, x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::shape("kernel_eval", &[x.len()], &[y.len()]));
    }
    Ok(bank.eval_sq(sq_dist(x, y)))
}

/// Median pairwise squared distance over the pooled rows of both sets;
/// 1.0 when that median is zero.
pub fn median_bandwidth(xs: &Tensor, xt: &Tensor) -> Result<f64> {
    let (n, d) = rows(xs, "source features")?;
    let (r, d2) = rows(xt, "target features")?;
    if d != d2 {
        return Err(Error::shape("median_bandwidth", xs.shape(), xt.shape()));
    }
    let pooled: Vec<&[f64]> = xs.data().chunks(d.max(1)).take(n).chain(xt.data().chunks(d.max(1)).take(r)).collect();
    if pooled.len() < 2 {
        return Err(Error::InvalidArgument("median heuristic needs at least two vectors".into()));
    }
    let mut dists = Vec::with_capacity(pooled.len() * (pooled.len() - 1) / 2);
    for i in 0..pooled.len() {
        for j in i + 1..pooled.len() {
            dists.push(sq_dist(pooled[i], pooled[j]));
        }
    }
    dists.sort_by(f64::total_cmp);
    let k = dists.len();
    let med = if k % 2 == 1 {
        dists[k / 2]
    } else {
        (dists[k / 2 - 1] + dists[k / 2]) / 2.0
    };
    Ok(if med > 0.0 { med } else { 1.0 })
}

fn check_sizes(n: usize, r: usize, est: Estimator) -> Result<()> {
    let min = match est {
        Estimator::Biased => 1,
        Estimator::Unbiased => 2,
    };
    if n < min || r < min {
        return Err(Error::Size(format!(
            "{est:?} MMD needs at least {min} samples per set, got {n} and {r}"
        )));
    }
    Ok(())
}

/// Squared MMD between the rows of `xs` and `xt`.
pub fn mmd2(bank: &KernelBank, xs: &Tensor, xt: &Tensor, est: Estimator) -> Result<f64> {
    let (n, d) = rows(xs, "source features")?;
    let (r, d2) = rows(xt, "target features")?;
    if d != d2 {
        return Err(Error::shape("mmd2", xs.shape(), xt.shape()));
    }
    check_sizes(n, r, est)?;
    let block = |a: &Tensor, na: usize, b: &Tensor, nb: usize, skip_diag: bool| {
        let mut s = 0.0;
        for i in 0..na {
            for j in 0..nb {
                if !(skip_diag && i == j) {
                    let (u, v) = (&a.data()[i * d..(i + 1) * d], &b.data()[j * d..(j + 1) * d]);
                    s += bank.eval_sq(sq_dist(u, v));
                }
            }
        }
        s
    };
    let (nf, rf) = (n as f64, r as f64);
    Ok(match est {
        Estimator::Biased => {
            block(xs, n, xs, n, false) / (nf * nf) + block(xt, r, xt, r, false) / (rf * rf)
                - 2.0 * block(xs, n, xt, r, false) / (nf * rf)
        }
        Estimator::Unbiased => {
            block(xs, n, xs, n, true) / (nf * (nf - 1.0)) + block(xt, r, xt, r, true) / (rf * (rf - 1.0))
                - 2.0 * block(xs, n, xt, r, false) / (nf * rf)
        }
    })
}

fn kernel_matrix<'g>(bank: &KernelBank, d2: Var<'g>) -> Var<'g> {
    let mut k: Option<Var<'g>> = None;
    for (s2, w) in bank.bandwidths.iter().zip(&bank.weights) {
        let term = d2.mul_scalar(-1.0 / (2.0 * s2)).exp().mul_scalar(*w);
        k = Some(match k {
            None => term,
            Some(acc) => acc.add(term).expect("same shape"),
        });
    }
    k.expect("bank is non-empty")
}

/// Differentiable squared MMD between the rows of two `(n, d)` variables.
pub fn mmd2_var<'g>(bank: &KernelBank, xs: Var<'g>, xt: Var<'g>, est: Estimator) -> Result<Var<'g>> {
    let (ss, tt) = (xs.shape(), xt.shape());
    if ss.len() != 2 || tt.len() != 2 || ss[1] != tt[1] {
        return Err(Error::shape("mmd2", &ss, &tt));
    }
    let (n, r) = (ss[0], tt[0]);
    check_sizes(n, r, est)?;
    let kss = kernel_matrix(bank, xs.pairwise_sq_dist(xs)?).sum();
    let ktt = kernel_matrix(bank, xt.pairwise_sq_dist(xt)?).sum();
    let kst = kernel_matrix(bank, xs.pairwise_sq_dist(xt)?).sum();
    let (nf, rf) = (n as f64, r as f64);
    let diag: f64 = bank.weights.iter().sum();
    let (a, b) = match est {
        Estimator::Biased => (kss.mul_scalar(1.0 / (nf * nf)), ktt.mul_scalar(1.0 / (rf * rf))),
        Estimator::Unbiased => (
            kss.add_scalar(-diag * nf).mul_scalar(1.0 / (nf * (nf - 1.0))),
            ktt.add_scalar(-diag * rf).mul_scalar(1.0 / (rf * (rf - 1.0))),
        ),
    };
    a.add(b)?.sub(kst.mul_scalar(2.0 / (nf * rf)))
}

/// `sum_i beta_i * mmd2(bank_i, pool(source_i), pool(target_i))` with
/// spatial global-average pooling of `(n, c, h, w)` maps.
pub fn domain_loss<'g>(
    source: &[Var<'g>; 3],
    target: &[Var<'g>; 3],
    banks: &[KernelBank; 3],
    beta: [f64; 3],
) -> Result<[Var<'g>; 3]> {
    let mut ps = Vec::with_capacity(3);
    let mut pt = Vec::with_capacity(3);
    for i in 0..3 {
        let (s, t) = (source[i].shape(), target[i].shape());
        if s.len() != 4 || t.len() != 4 || s[1..] != t[1..] {
            return Err(Error::shape("domain_loss", &s, &t));
        }
        ps.push(source[i].global_avg_pool()?);
        pt.push(target[i].global_avg_pool()?);
    }
    domain_loss_pooled(&[ps[0], ps[1], ps[2]], &[pt[0], pt[1], pt[2]], banks, beta)
}

/// Per-scale weighted MMD terms of already pooled `(n, c)` features.
pub fn domain_loss_pooled<'g>(
    source: &[Var<'g>; 3],
    target: &[Var<'g>; 3],
    banks: &[KernelBank; 3],
    beta: [f64; 3],
) -> Result<[Var<'g>; 3]> {
    let mut out = Vec::with_capacity(3);
    for i in 0..3 {
        out.push(mmd2_var(&banks[i], source[i], target[i], Estimator::Biased)?.mul_scalar(beta[i]));
    }
    Ok([out[0], out[1], out[2]])
}

/// Median-heuristic banks from the pooled feature values of each scale.
pub fn median_banks(source: &[Tensor; 3], target: &[Tensor; 3], multipliers: &[f64]) -> Result<[KernelBank; 3]> {
    let mut banks = Vec::with_capacity(3);
    for i in 0..3 {
        let g = Graph::new();
        let ps = g.constant(source[i].clone()).global_avg_pool()?.value();
        let pt = g.constant(target[i].clone()).global_avg_pool()?.value();
        banks.push(KernelBank::scaled(median_bandwidth(&ps, &pt)?, multipliers)?);
    }
    let [a, b, c]: [KernelBank; 3] = banks.try_into().expect("three banks");
    Ok([a, b, c])
}

/// A sample with its origin and whether it carries labels.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainSample {
    pub sample: LabeledImage,
    pub origin: Domain,
    pub labeled: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainBatch {
    pub samples: Vec<DomainSample>,
    pub domain: Domain,
}

/// Shuffled union of a source and a labeled target batch.
pub fn build_intermediate<R: Rng + ?Sized>(
    source: &DomainBatch,
    target: &DomainBatch,
    rng: &mut R,
) -> Result<DomainBatch> {
    if source.samples.is_empty() || target.samples.is_empty() {
        return Err(Error::InvalidArgument(
            "intermediate domain needs non-empty source and target batches".into(),
        ));
    }
    if let Some(i) = target.samples.iter().position(|s| !s.labeled) {
        return Err(Error::InvalidArgument(format!(
            "target sample {i} is unlabeled; the intermediate domain needs labels"
        )));
    }
    let mut samples: Vec<DomainSample> = source.samples.iter().chain(&target.samples).cloned().collect();
    samples.shuffle(rng);
    Ok(DomainBatch { samples, domain: Domain::Intermediate })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShiftPoint {
    pub shift: f64,
    pub biased: f64,
    pub unbiased: f64,
}

/// MMD² between `n` draws of N(0, 1) and `n` draws of N(shift, 1), with a
/// median-heuristic bank per shift. The same underlying draws are reused for
/// every shift.
pub fn gaussian_shift_sweep(shifts: &[f64], n: usize, seed: u64) -> Result<Vec<ShiftPoint>> {
    use rand::SeedableRng;
    use rand_distr::StandardNormal;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let x: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let y: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let xs = Tensor::new([n, 1], x)?;
    shifts
        .iter()
        .map(|&shift| {
            let xt = Tensor::new([n, 1], y.iter().map(|v| v + shift).collect())?;
            let bank = KernelBank::from_median(&xs, &xt)?;
            Ok(ShiftPoint {
                shift,
                biased: mmd2(&bank, &xs, &xt, Estimator::Biased)?,
                unbiased: mmd2(&bank, &xs, &xt, Estimator::Unbiased)?,
            })
        })
        .collect()
}

pub fn shift_csv(points: &[ShiftPoint]) -> String {
    let mut out = String::from("shift,mmd2_biased,mmd2_unbiased\n");
    for p in points {
        out.push_str(&format!("{},{:e},{:e}\n", p.shift, p.biased, p.unbiased));
    }
    out
}
