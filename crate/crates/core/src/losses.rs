//! Detection objective: BCE with logits, focal loss, GIoU box loss,
//! objectness and classification sums, and the weighted total.

use crate::bbox::BBox;
use crate::detector::{DetectorGeometry, TargetAssignment};
use crate::error::{Error, Result};
use crate::ndgrad::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FocalParams {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        FocalParams { alpha: 0.25, gamma: 1.5 }
    }
}

impl FocalParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) || !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::InvalidArgument(format!("invalid focal parameters {self:?}")));
        }
        Ok(())
    }

    /// `alpha` for positives, `1 - alpha` for negatives, linear in between.
    fn alpha_t(&self, p: f64) -> f64 {
        p * self.alpha + (1.0 - p) * (1.0 - self.alpha)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossWeights {
    pub eta_box: f64,
    pub eta_cls: f64,
    pub eta_obj: f64,
    /// Domain-loss weight per scale.
    pub beta: [f64; 3],
    /// Objectness balance per scale (strides 4, 8, 16).
    pub balance: [f64; 3],
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            eta_box: 0.05,
            eta_cls: 0.5,
            eta_obj: 1.0,
            beta: [0.1; 3],
            balance: [4.0, 1.0, 0.4],
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.eta_box, self.eta_cls, self.eta_obj]
            .into_iter()
            .chain(self.beta)
            .chain(self.balance);
        for v in all {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidArgument(format!("invalid loss weights {self:?}")));
            }
        }
        if self.balance.iter().any(|&h| h <= 0.0) {
            return Err(Error::InvalidArgument("balance weights must be positive".into()));
        }
        Ok(())
    }
}

/// `max(x, 0) - x p + ln(1 + e^-|x|)`.
pub fn bce_logits(p: f64, logit: f64) -> f64 {
    logit.max(0.0) - logit * p + (-logit.abs()).exp().ln_1p()
}

pub fn focal(p: f64, logit: f64, params: &FocalParams) -> f64 {
    let s = crate::ndgrad::sigmoid(logit);
    let sn = crate::ndgrad::sigmoid(-logit);
    let modulating = p * sn + (1.0 - p) * s;
    params.alpha_t(p) * modulating.powf(params.gamma) * bce_logits(p, logit)
}

pub fn total_loss(box_: f64, cls: f64, obj: f64, dom: f64, lambda_obj: f64, w: &LossWeights) -> f64 {
    w.eta_box * box_ + lambda_obj * (w.eta_cls * cls + w.eta_obj * obj) + dom
}

/// Elementwise focal terms of a vector of logits, summed.
pub fn focal_sum<'g>(logits: Var<'g>, targets: &[f64], params: &FocalParams) -> Result<Var<'g>> {
    let g = logits.graph();
    let n = targets.len();
    if logits.numel() != n {
        return Err(Error::shape("focal_sum", &logits.shape(), &[n]));
    }
    let x = logits.reshape([n])?;
    let t = g.constant(Tensor::new([n], targets.to_vec())?);
    let not_t = g.constant(Tensor::new([n], targets.iter().map(|p| 1.0 - p).collect())?);
    let alpha_t = g.constant(Tensor::new([n], targets.iter().map(|&p| params.alpha_t(p)).collect())?);
    let bce = x.softplus().sub(x.mul(t)?)?;
    let mut term = bce.mul(alpha_t)?;
    if params.gamma != 0.0 {
        let modulating = x.neg().sigmoid().mul(t)?.add(x.sigmoid().mul(not_t)?)?;
        term = term.mul(modulating.powf(params.gamma)?)?;
    }
    Ok(term.sum())
}

/// Per-element GIoU between predicted corner vectors and target boxes.
pub fn giou_var<'g>(pred: [Var<'g>; 4], targets: &[BBox]) -> Result<Var<'g>> {
    let g = pred[0].graph();
    let n = targets.len();
    let col = |f: fn(&BBox) -> f64| g.constant(Tensor::new([n], targets.iter().map(f).collect()).expect("n values"));
    let (tx1, ty1, tx2, ty2) = (col(|b| b.x1), col(|b| b.y1), col(|b| b.x2), col(|b| b.y2));
    let t_area = col(|b| b.area());
    let [px1, py1, px2, py2] = pred;
    let iw = px2.minimum(tx2)?.sub(px1.maximum(tx1)?)?.relu();
    let ih = py2.minimum(ty2)?.sub(py1.maximum(ty1)?)?.relu();
    let inter = iw.mul(ih)?;
    let p_area = px2.sub(px1)?.mul(py2.sub(py1)?)?;
    let union = p_area.add(t_area)?.sub(inter)?;
    let cw = px2.maximum(tx2)?.sub(px1.minimum(tx1)?)?;
    let ch = py2.maximum(ty2)?.sub(py1.minimum(ty1)?)?;
    let c = cw.mul(ch)?;
    inter.div(union)?.sub(c.sub(union)?.div(c)?)
}

/// Supervised loss components of a batch, each averaged over images.
#[derive(Clone, Copy)]
pub struct DetectionLosses<'g> {
    pub box_: Var<'g>,
    pub cls: Var<'g>,
    pub obj: Var<'g>,
}

fn check_geometry(
    geom: &DetectorGeometry,
    raw: &[Var<'_>; 3],
    rows: &[usize],
    targets: &[TargetAssignment],
) -> Result<usize> {
    if rows.len() != targets.len() {
        return Err(Error::InvalidArgument(format!(
            "{} rows for {} assignments",
            rows.len(),
            targets.len()
        )));
    }
    let b = raw[0].shape().first().copied().unwrap_or(0);
    if rows.iter().any(|&r| r >= b) {
        return Err(Error::InvalidArgument(format!("supervised row outside batch of {b}")));
    }
    for (s, r) in raw.iter().enumerate() {
        let want = [b, geom.head_channels(), geom.grid(s), geom.grid(s)];
        if r.shape() != want {
            return Err(Error::shape("detection loss", &r.shape(), &want));
        }
    }
    for t in targets {
        for (s, st) in t.scales.iter().enumerate() {
            if st.grid != geom.grid(s) || st.obj.len() != st.grid * st.grid * geom.m {
                return Err(Error::InvalidArgument("assignment does not match geometry".into()));
            }
        }
    }
    Ok(targets.len().max(1))
}

fn all_rows(raw: &[Var<'_>; 3], targets: &[TargetAssignment]) -> Result<Vec<usize>> {
    let b = raw[0].shape().first().copied().unwrap_or(0);
    if b != targets.len() {
        return Err(Error::InvalidArgument(format!(
            "batch of {b} predictions for {} assignments",
            targets.len()
        )));
    }
    Ok((0..b).collect())
}

/// Focal terms over the class logits of every responsible cell.
pub fn cls_loss<'g>(
    geom: &DetectorGeometry,
    raw: &[Var<'g>; 3],
    targets: &[TargetAssignment],
    focal_params: &FocalParams,
) -> Result<Var<'g>> {
    cls_loss_rows(geom, raw, &all_rows(raw, targets)?, targets, focal_params)
}

fn cls_loss_rows<'g>(
    geom: &DetectorGeometry,
    raw: &[Var<'g>; 3],
    rows: &[usize],
    targets: &[TargetAssignment],
    focal_params: &FocalParams,
) -> Result<Var<'g>> {
    let batch = check_geometry(geom, raw, rows, targets)?;
    let g = raw[0].graph();
    let mut total = g.constant(Tensor::scalar(0.0));
    for s in 0..3 {
        let grid = geom.grid(s);
        let (mut idx, mut tgt) = (Vec::new(), Vec::new());
        for (&b, t) in rows.iter().zip(targets) {
            let st = &t.scales[s];
            for cell in (0..grid * grid).filter(|&c| st.responsible[c]) {
                for c in 0..geom.c {
                    idx.push(geom.raw_index(s, b, geom.class_channel(c), cell / grid, cell % grid));
                    tgt.push(st.cls[cell * geom.c + c]);
                }
            }
        }
        if !idx.is_empty() {
            let n = idx.len();
            total = total.add(focal_sum(raw[s].gather(idx, [n])?, &tgt, focal_params)?)?;
        }
    }
    Ok(total.mul_scalar(1.0 / batch as f64))
}

/// Balance-weighted focal terms over the objectness logit of every slot;
/// empty slots are negatives.
pub fn obj_loss<'g>(
    geom: &DetectorGeometry,
    raw: &[Var<'g>; 3],
    targets: &[TargetAssignment],
    weights: &LossWeights,
    focal_params: &FocalParams,
) -> Result<Var<'g>> {
    obj_loss_rows(geom, raw, &all_rows(raw, targets)?, targets, weights, focal_params)
}

fn obj_loss_rows<'g>(
    geom: &DetectorGeometry,
    raw: &[Var<'g>; 3],
    rows: &[usize],
    targets: &[TargetAssignment],
    weights: &LossWeights,
    focal_params: &FocalParams,
) -> Result<Var<'g>> {
    let batch = check_geometry(geom, raw, rows, targets)?;
    let g = raw[0].graph();
    let mut total = g.constant(Tensor::scalar(0.0));
    for s in 0..3 {
        let grid = geom.grid(s);
        let (mut idx, mut tgt) = (Vec::new(), Vec::new());
        for (&b, t) in rows.iter().zip(targets) {
            for cell in 0..grid * grid {
                for m in 0..geom.m {
                    idx.push(geom.raw_index(s, b, geom.slot_channel(m, 4), cell / grid, cell % grid));
                    tgt.push(t.scales[s].obj[cell * geom.m + m]);
                }
            }
        }
        if !idx.is_empty() {
            let n = idx.len();
            let f = focal_sum(raw[s].gather(idx, [n])?, &tgt, focal_params)?;
            total = total.add(f.mul_scalar(weights.balance[s]))?;
        }
    }
    Ok(total.mul_scalar(1.0 / batch as f64))
}

/// `1 - GIoU` per responsible cell, the GIoU averaged over the cell's
/// responsible slots.
pub fn box_loss<'g>(geom: &DetectorGeometry, raw: &[Var<'g>; 3], targets: &[TargetAssignment]) -> Result<Var<'g>> {
    box_loss_rows(geom, raw, &all_rows(raw, targets)?, targets)
}

fn box_loss_rows<'g>(
    geom: &DetectorGeometry,
    raw: &[Var<'g>; 3],
    rows: &[usize],
    targets: &[TargetAssignment],
) -> Result<Var<'g>> {
    let batch = check_geometry(geom, raw, rows, targets)?;
    let g = raw[0].graph();
    let mut total = g.constant(Tensor::scalar(0.0));
    for s in 0..3 {
        let grid = geom.grid(s);
        let inv = 1.0 / grid as f64;
        let mut idx: [Vec<usize>; 4] = Default::default();
        let (mut cols, mut ys, mut slot_w, mut boxes) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        let mut cells = 0usize;
        for (&b, t) in rows.iter().zip(targets) {
            let st = &t.scales[s];
            for cell in (0..grid * grid).filter(|&c| st.responsible[c]) {
                cells += 1;
                let n = st.slots_in(cell) as f64;
                let (row, col) = (cell / grid, cell % grid);
                for m in 0..geom.m {
                    let Some(bt) = st.boxes[cell * geom.m + m] else { continue };
                    for (f, ix) in idx.iter_mut().enumerate() {
                        ix.push(geom.raw_index(s, b, geom.slot_channel(m, f), row, col));
                    }
                    cols.push(col as f64);
                    ys.push(row as f64);
                    slot_w.push(1.0 / n);
                    boxes.push(bt);
                }
            }
        }
        if boxes.is_empty() {
            continue;
        }
        let n = boxes.len();
        let konst = |v: Vec<f64>| g.constant(Tensor::new([n], v).expect("n values"));
        let [ix, iy, iw, ih] = idx;
        let cx = raw[s].gather(ix, [n])?.sigmoid().add(konst(cols))?.mul_scalar(inv);
        let cy = raw[s].gather(iy, [n])?.sigmoid().add(konst(ys))?.mul_scalar(inv);
        let hw = raw[s].gather(iw, [n])?.sigmoid().mul_scalar(0.5);
        let hh = raw[s].gather(ih, [n])?.sigmoid().mul_scalar(0.5);
        let pred = [cx.sub(hw)?, cy.sub(hh)?, cx.add(hw)?, cy.add(hh)?];
        let weighted = giou_var(pred, &boxes)?.mul(konst(slot_w))?.sum();
        total = total.add(weighted.neg().add_scalar(cells as f64))?;
    }
    Ok(total.mul_scalar(1.0 / batch as f64))
}

pub fn detection_losses<'g>(
    geom: &DetectorGeometry,
    raw: &[Var<'g>; 3],
    targets: &[TargetAssignment],
    weights: &LossWeights,
    focal_params: &FocalParams,
) -> Result<DetectionLosses<'g>> {
    detection_losses_rows(geom, raw, &all_rows(raw, targets)?, targets, weights, focal_params)
}

/// Losses of the batch rows `rows`, whose assignments are `targets`; other
/// rows are unsupervised. Components are averaged over the supervised rows.
pub fn detection_losses_rows<'g>(
    geom: &DetectorGeometry,
    raw: &[Var<'g>; 3],
    rows: &[usize],
    targets: &[TargetAssignment],
    weights: &LossWeights,
    focal_params: &FocalParams,
) -> Result<DetectionLosses<'g>> {
    Ok(DetectionLosses {
        box_: box_loss_rows(geom, raw, rows, targets)?,
        cls: cls_loss_rows(geom, raw, rows, targets, focal_params)?,
        obj: obj_loss_rows(geom, raw, rows, targets, weights, focal_params)?,
    })
}

/// Weighted total; `lambda_obj` gates the classification and objectness terms.
pub fn total_loss_var<'g>(
    parts: &DetectionLosses<'g>,
    dom: Var<'g>,
    lambda_obj: f64,
    w: &LossWeights,
) -> Result<Var<'g>> {
    let gated = parts
        .cls
        .mul_scalar(w.eta_cls)
        .add(parts.obj.mul_scalar(w.eta_obj))?
        .mul_scalar(lambda_obj);
    parts.box_.mul_scalar(w.eta_box).add(gated)?.add(dom)
}

/// A zero scalar on `g`, for batches without a domain term.
pub fn zero<'g>(g: &'g Graph) -> Var<'g> {
    g.constant(Tensor::scalar(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bbox::giou;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn bce_values() {
        assert!((bce_logits(1.0, 0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(bce_logits(0.0, -50.0) < 1e-20);
        assert!((bce_logits(1.0, -2.0) - 2.126928).abs() < 1e-6);
    }

    #[test]
    fn focal_values() {
        let v = focal(1.0, 0.0, &FocalParams::default());
        assert!((v - 0.25 * 0.5f64.powf(1.5) * std::f64::consts::LN_2).abs() < 1e-15);
        assert!((v - 0.0612661).abs() < 1e-7);
        assert!(focal(1.0, 800.0, &FocalParams::default()) == 0.0);
    }

    #[test]
    fn focal_bounded_by_weighted_bce() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let fp = FocalParams::default();
        for _ in 0..1000 {
            let (p, x) = (rng.gen_range(0..2) as f64, rng.gen_range(-20.0..20.0));
            let f = focal(p, x, &fp);
            assert!(f >= 0.0 && f <= fp.alpha_t(p) * bce_logits(p, x) + 1e-15);
        }
    }

    #[test]
    fn total_loss_arithmetic() {
        let w = LossWeights::default();
        assert!((total_loss(1.0, 2.0, 3.0, 0.5, 1.0, &w) - 4.55).abs() < 1e-12);
        assert_eq!(total_loss(0.0, 7.0, 9.0, 0.0, 0.0, &w), 0.0);
    }

    #[test]
    fn focal_sum_matches_scalar() {
        let g = Graph::new();
        let xs = [-3.0, -0.5, 0.0, 0.7, 4.0];
        let ts = [0.0, 1.0, 1.0, 0.0, 1.0];
        let fp = FocalParams::default();
        let v = focal_sum(g.param(Tensor::from_slice(&xs)), &ts, &fp).unwrap().item();
        let want: f64 = xs.iter().zip(&ts).map(|(&x, &t)| focal(t, x, &fp)).sum();
        assert!((v - want).abs() < 1e-14);
    }

    #[test]
    fn giou_var_matches_scalar() {
        let g = Graph::new();
        let p = BBox::new(0.0, 0.0, 0.1, 0.1).unwrap();
        let t = BBox::new(0.9, 0.0, 1.0, 0.1).unwrap();
        let v = |x| g.param(Tensor::from_slice(&[x]));
        let out = giou_var([v(p.x1), v(p.y1), v(p.x2), v(p.y2)], &[t]).unwrap();
        assert!((out.item() - giou(&p, &t)).abs() < 1e-15);
        assert!((out.item() + 0.8).abs() < 1e-9);
    }

    #[test]
    fn weights_validate() {
        assert!(LossWeights::default().validate().is_ok());
        let bad = LossWeights { eta_box: -1.0, ..LossWeights::default() };
        assert!(bad.validate().is_err());
        assert!(FocalParams { alpha: 1.5, gamma: 1.0 }.validate().is_err());
    }
}
