//! Training: the domain-adaptive trainer, the source-only baseline, the
//! optimizers and the per-iteration log.

mod optim;

pub use optim::{optimizer_step, OptimState, Optimizer};

use std::fmt::Write as _;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::augment::{augment, AugKind, AugmentParams};
use crate::data::{Domain, LabeledImage};
use crate::detector::{
    assign_targets, backbone_forward, head_forward, images_tensor, write_checkpoint, DetectorGeometry, ModelParams,
    TargetAssignment,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate_model, EvalSettings};
use crate::imgproc::{apage, ApageConfig, ImageGray};
use crate::losses::{detection_losses_rows, total_loss_var, FocalParams, LossWeights};
use crate::mkmmd::{build_intermediate, domain_loss_pooled, DomainBatch, DomainSample, KernelBank, DEFAULT_MULTIPLIERS};
use crate::ndgrad::{Graph, Tensor, Var};

/// Which training images pass through APAGE.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ApagePolicy {
    Off,
    Target,
    All,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Samples per domain per iteration.
    pub batch_size: usize,
    pub optimizer: Optimizer,
    pub weights: LossWeights,
    pub focal: FocalParams,
    pub apage: ApageConfig,
    pub apage_policy: ApagePolicy,
    pub augment: AugmentParams,
    /// Labeled target samples drawn per category.
    pub per_category: usize,
    pub mmd_multipliers: Vec<f64>,
    /// Fixed base bandwidth instead of the per-batch median heuristic.
    pub fixed_bandwidth: Option<f64>,
    /// Supervised training on the mixed source/target batch.
    pub intermediate: bool,
    pub geometry: DetectorGeometry,
    pub seed: u64,
    /// Per-epoch checkpoints land here when set.
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 60,
            batch_size: 8,
            optimizer: Optimizer::sgd(),
            weights: LossWeights::default(),
            focal: FocalParams::default(),
            apage: ApageConfig { patch_h: 32, patch_w: 32, clahe_tiles: (4, 4), ..ApageConfig::default() },
            apage_policy: ApagePolicy::Target,
            augment: AugmentParams::default(),
            per_category: 50,
            mmd_multipliers: DEFAULT_MULTIPLIERS.to_vec(),
            fixed_bandwidth: None,
            intermediate: true,
            geometry: DetectorGeometry::default(),
            seed: 0,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.per_category == 0 {
            return Err(Error::InvalidArgument(
                "epochs, batch size and per-category count must be positive".into(),
            ));
        }
        if self.mmd_multipliers.is_empty() || self.mmd_multipliers.iter().any(|m| !(*m > 0.0)) {
            return Err(Error::InvalidArgument("MMD multipliers must be positive".into()));
        }
        if let Some(b) = self.fixed_bandwidth {
            if !(b > 0.0 && b.is_finite()) {
                return Err(Error::InvalidArgument(format!("fixed bandwidth {b} must be positive")));
            }
        }
        self.optimizer.validate()?;
        self.weights.validate()?;
        self.focal.validate()?;
        self.apage.validate()?;
        self.geometry.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainRecord {
    pub epoch: usize,
    pub iter: usize,
    pub l_box: f64,
    pub l_cls: f64,
    pub l_obj: f64,
    pub l_dom: [f64; 3],
    pub total: f64,
    pub lambda_obj: f64,
}

impl TrainRecord {
    fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.iter,
            self.l_box,
            self.l_cls,
            self.l_obj,
            self.l_dom[0],
            self.l_dom[1],
            self.l_dom[2],
            self.total,
            self.lambda_obj
        )
    }

    fn is_finite(&self) -> bool {
        [self.l_box, self.l_cls, self.l_obj, self.total]
            .into_iter()
            .chain(self.l_dom)
            .all(f64::is_finite)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<TrainRecord>,
    /// Macro-F1 on the held-out split after each epoch, when one is given.
    pub epoch_f1: Vec<(usize, f64)>,
}

pub const TRAIN_LOG_HEADER: &str = "epoch,iter,l_box,l_cls,l_obj,l_dom1,l_dom2,l_dom3,total,lambda_obj";

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(64 * (self.records.len() + 1));
        out.push_str(TRAIN_LOG_HEADER);
        out.push('\n');
        for r in &self.records {
            out.push_str(&r.csv_line());
            out.push('\n');
        }
        out
    }

    pub fn epoch_csv(&self) -> String {
        let mut out = String::from("epoch,macro_f1\n");
        for (e, f) in &self.epoch_f1 {
            let _ = writeln!(out, "{e},{f}");
        }
        out
    }
}

/// Optional held-out split scored after each epoch.
pub struct EpochEval<'a> {
    pub samples: &'a [LabeledImage],
    pub settings: EvalSettings,
}

/// Independent generator streams so that enabling one phase never perturbs
/// the randomness of another.
struct Streams {
    source: ChaCha8Rng,
    target: ChaCha8Rng,
    mix: ChaCha8Rng,
}

impl Streams {
    fn new(seed: u64) -> Self {
        let stream = |k| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(k);
            r
        };
        Streams { source: stream(1), target: stream(2), mix: stream(3) }
    }
}

/// Category of a sample: the class of its first label.
fn category_of(s: &LabeledImage) -> Option<usize> {
    s.labels.first().map(|l| l.class)
}

/// APAGE'd, six-way augmented target pool per category.
fn target_pool(cfg: &TrainConfig, target: &[LabeledImage], rng: &mut ChaCha8Rng) -> Result<Vec<Vec<LabeledImage>>> {
    let classes = cfg.geometry.c;
    let mut pool = vec![Vec::new(); classes];
    let mut picked = vec![0usize; classes];
    for s in target {
        let Some(c) = category_of(s).filter(|&c| c < classes) else { continue };
        if picked[c] == cfg.per_category {
            continue;
        }
        picked[c] += 1;
        let base = if cfg.apage_policy == ApagePolicy::Off {
            s.clone()
        } else {
            LabeledImage { image: apage(&s.image, &cfg.apage)?, labels: s.labels.clone() }
        };
        for kind in AugKind::ALL {
            pool[c].push(augment(&base, kind, &cfg.augment, rng));
        }
        pool[c].push(base);
    }
    if let Some(c) = (0..classes).find(|&c| picked[c] < cfg.per_category) {
        return Err(Error::InsufficientLabels { category: c, found: picked[c], needed: cfg.per_category });
    }
    Ok(pool)
}

fn target_batch(pool: &[Vec<LabeledImage>], size: usize, rng: &mut ChaCha8Rng) -> Vec<LabeledImage> {
    let classes = pool.len();
    (0..size)
        .map(|i| {
            let c = i % classes;
            pool[c][rng.gen_range(0..pool[c].len())].clone()
        })
        .collect()
}

fn pooled_rows<'g>(pyr: &[Var<'g>; 3], rows: &[usize]) -> Result<[Var<'g>; 3]> {
    let mut out = Vec::with_capacity(3);
    for p in pyr {
        let pooled = p.global_avg_pool()?;
        let c = pooled.shape()[1];
        let idx: Vec<usize> = rows.iter().flat_map(|&r| r * c..(r + 1) * c).collect();
        out.push(pooled.gather(idx, [rows.len(), c])?);
    }
    Ok([out[0], out[1], out[2]])
}

fn banks_for(cfg: &TrainConfig, ps: &[Var<'_>; 3], pt: &[Var<'_>; 3]) -> Result<[KernelBank; 3]> {
    let mut banks = Vec::with_capacity(3);
    for i in 0..3 {
        let base = match cfg.fixed_bandwidth {
            Some(b) => b,
            None => crate::mkmmd::median_bandwidth(&ps[i].value(), &pt[i].value())?,
        };
        banks.push(KernelBank::scaled(base, &cfg.mmd_multipliers)?);
    }
    let [a, b, c]: [KernelBank; 3] = banks.try_into().expect("three banks");
    Ok([a, b, c])
}

struct Step {
    record: TrainRecord,
    grads: Vec<Tensor>,
}

/// Forward, loss and backward of one iteration.
fn step(
    cfg: &TrainConfig,
    params: &ModelParams,
    images: &[&ImageGray],
    supervised: &[(usize, TargetAssignment)],
    domains: Option<(&[usize], &[usize])>,
    epoch: usize,
    iter: usize,
) -> Result<Step> {
    let g = Graph::new();
    let vars = params.bind(&g);
    let x = g.constant(images_tensor(&cfg.geometry, images)?);
    let pyr = backbone_forward(&vars, x)?;
    let raw = head_forward(&cfg.geometry, &vars, &pyr)?;
    let rows: Vec<usize> = supervised.iter().map(|(r, _)| *r).collect();
    let targets: Vec<TargetAssignment> = supervised.iter().map(|(_, t)| t.clone()).collect();
    let parts = detection_losses_rows(&cfg.geometry, &raw, &rows, &targets, &cfg.weights, &cfg.focal)?;
    let lambda_obj = if targets.iter().any(TargetAssignment::has_objects) { 1.0 } else { 0.0 };
    let (dom, l_dom) = match domains {
        Some((src, tgt)) => {
            let ps = pooled_rows(&pyr, src)?;
            let pt = pooled_rows(&pyr, tgt)?;
            let banks = banks_for(cfg, &ps, &pt)?;
            let d = domain_loss_pooled(&ps, &pt, &banks, cfg.weights.beta)?;
            let sum = d[0].add(d[1])?.add(d[2])?;
            (sum, [d[0].item(), d[1].item(), d[2].item()])
        }
        None => (g.constant(Tensor::scalar(0.0)), [0.0; 3]),
    };
    let total = total_loss_var(&parts, dom, lambda_obj, &cfg.weights)?;
    let record = TrainRecord {
        epoch,
        iter,
        l_box: parts.box_.item(),
        l_cls: parts.cls.item(),
        l_obj: parts.obj.item(),
        l_dom,
        total: total.item(),
        lambda_obj,
    };
    if !record.is_finite() {
        return Err(Error::NonFiniteLoss { epoch, iter, record: record.csv_line() });
    }
    let grads = g.backward(total)?;
    Ok(Step { record, grads: vars.iter().map(|v| grads.wrt(*v)).collect() })
}

fn apply(params: &mut ModelParams, grads: &[Tensor], state: &mut OptimState, opt: &Optimizer) -> Result<()> {
    let mut tensors: Vec<Tensor> = params.tensors.iter().map(|(_, t)| t.clone()).collect();
    optimizer_step(&mut tensors, grads, state, opt)?;
    for ((_, t), new) in params.tensors.iter_mut().zip(tensors) {
        *t = new;
    }
    Ok(())
}

/// Domain-adaptive training. Each iteration draws a source batch (one random
/// augmentation per sample) and a category-balanced batch from the enhanced,
/// augmented target pool, forwards their shuffled union once through the
/// shared backbone, adds the three-scale MK-MMD term between the two origins
/// and takes one optimizer step on the total.
pub fn train_ddacdn(
    cfg: &TrainConfig,
    source: &[LabeledImage],
    target: &[LabeledImage],
    eval: Option<&EpochEval<'_>>,
) -> Result<(ModelParams, TrainLog)> {
    run(cfg, source, Some(target), eval)
}

/// Source-only training with the same schedule and losses, without target
/// data or domain terms.
pub fn train_baseline(
    cfg: &TrainConfig,
    source: &[LabeledImage],
    eval: Option<&EpochEval<'_>>,
) -> Result<(ModelParams, TrainLog)> {
    run(cfg, source, None, eval)
}

fn run(
    cfg: &TrainConfig,
    source: &[LabeledImage],
    target: Option<&[LabeledImage]>,
    eval: Option<&EpochEval<'_>>,
) -> Result<(ModelParams, TrainLog)> {
    cfg.validate()?;
    if source.is_empty() {
        return Err(Error::InvalidArgument("source set is empty".into()));
    }
    let mut streams = Streams::new(cfg.seed);
    let mut params = ModelParams::init(cfg.geometry.clone(), cfg.seed)?;
    let pool = match target {
        Some(t) => Some(target_pool(cfg, t, &mut streams.target)?),
        None => None,
    };
    let source: Vec<LabeledImage> = if cfg.apage_policy == ApagePolicy::All {
        source
            .iter()
            .map(|s| Ok(LabeledImage { image: apage(&s.image, &cfg.apage)?, labels: s.labels.clone() }))
            .collect::<Result<_>>()?
    } else {
        source.to_vec()
    };
    let mut state = OptimState::default();
    let mut log = TrainLog::default();
    let mut iter = 0;
    let mut order: Vec<usize> = (0..source.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut streams.source);
        for chunk in order.chunks(cfg.batch_size) {
            let src: Vec<LabeledImage> = chunk
                .iter()
                .map(|&i| {
                    let kind = AugKind::ALL[streams.source.gen_range(0..AugKind::ALL.len())];
                    augment(&source[i], kind, &cfg.augment, &mut streams.source)
                })
                .collect();
            let step = match &pool {
                None => {
                    let images: Vec<&ImageGray> = src.iter().map(|s| &s.image).collect();
                    let sup: Vec<(usize, TargetAssignment)> = src
                        .iter()
                        .enumerate()
                        .map(|(i, s)| (i, assign_targets(&s.labels, &cfg.geometry)))
                        .collect();
                    step(cfg, &params, &images, &sup, None, epoch, iter)?
                }
                Some(pool) => {
                    let tgt = target_batch(pool, cfg.batch_size, &mut streams.target);
                    let wrap = |v: Vec<LabeledImage>, origin| DomainBatch {
                        samples: v.into_iter().map(|sample| DomainSample { sample, origin, labeled: true }).collect(),
                        domain: origin,
                    };
                    let (sb, tb) = (wrap(src, Domain::Source), wrap(tgt, Domain::Target));
                    let mixed = if cfg.intermediate {
                        build_intermediate(&sb, &tb, &mut streams.mix)?.samples
                    } else {
                        sb.samples.into_iter().chain(tb.samples).collect()
                    };
                    let rows_of = |d| -> Vec<usize> {
                        mixed.iter().enumerate().filter(|(_, s)| s.origin == d).map(|(i, _)| i).collect()
                    };
                    let (src_rows, tgt_rows) = (rows_of(Domain::Source), rows_of(Domain::Target));
                    let supervised_rows = if cfg.intermediate { (0..mixed.len()).collect() } else { src_rows.clone() };
                    let sup: Vec<(usize, TargetAssignment)> = supervised_rows
                        .iter()
                        .map(|&r| (r, assign_targets(&mixed[r].sample.labels, &cfg.geometry)))
                        .collect();
                    let images: Vec<&ImageGray> = mixed.iter().map(|s| &s.sample.image).collect();
                    step(cfg, &params, &images, &sup, Some((&src_rows, &tgt_rows)), epoch, iter)?
                }
            };
            apply(&mut params, &step.grads, &mut state, &cfg.optimizer)?;
            log.records.push(step.record);
            iter += 1;
        }
        if let Some(dir) = &cfg.checkpoint_dir {
            write_checkpoint(&dir.join(format!("epoch_{:03}.ckpt", epoch + 1)), &params)?;
        }
        if let Some(ev) = eval {
            let report = evaluate_model(&params, ev.samples, &ev.settings)?;
            log.epoch_f1.push((epoch + 1, report.macro_f1()));
        }
    }
    Ok((params, log))
}
