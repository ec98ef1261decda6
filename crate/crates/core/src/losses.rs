//! Box regression losses, the heteroscedastic uncertainty loss and the
//! stage-1 composite objective.
//!
//! Each loss has a plain `f64` form and a `_graph` form recorded on a tape.
//! The graph forms take `[x_tl, y_tl, x_br, y_br]` nodes in normalized units.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Array, Tape, Var};
use crate::uld::{BoundingBox, CornerPrediction};

/// Denominator guard in the predicted aspect ratio `w / (h + ε)`.
const ASPECT_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 2.0,
            beta: 5.0,
            gamma: 2.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("loss weight {name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

fn check_lengths(mu: &[f64], sigma: &[f64], mu_gt: &[f64]) -> Result<()> {
    if mu.is_empty() || mu.len() != sigma.len() || mu.len() != mu_gt.len() {
        return Err(Error::Shape(format!(
            "uncertainty loss needs equal non-empty lengths, got {}, {}, {}",
            mu.len(),
            sigma.len(),
            mu_gt.len()
        )));
    }
    check_sigma(sigma)
}

fn check_sigma(sigma: &[f64]) -> Result<()> {
    match sigma.iter().find(|s| !(**s > 0.0) || !s.is_finite()) {
        Some(s) => Err(Error::Domain(format!("sigma must be positive and finite, got {s}"))),
        None => Ok(()),
    }
}

/// Mean over coordinates of `(μ − μ_gt)² / (2σ²) + log(σ²) / 2`.
pub fn uncertainty_loss(mu: &[f64], sigma: &[f64], mu_gt: &[f64]) -> Result<f64> {
    check_lengths(mu, sigma, mu_gt)?;
    let total: f64 = mu
        .iter()
        .zip(sigma)
        .zip(mu_gt)
        .map(|((m, s), g)| (m - g).powi(2) / (2.0 * s * s) + (s * s).ln() / 2.0)
        .sum();
    Ok(total / mu.len() as f64)
}

/// Gaussian KL form without the ground-truth entropy term; equals
/// [`uncertainty_loss`] plus `log(2π)/2`.
pub fn uncertainty_loss_full(mu: &[f64], sigma: &[f64], mu_gt: &[f64]) -> Result<f64> {
    check_lengths(mu, sigma, mu_gt)?;
    let total: f64 = mu
        .iter()
        .zip(sigma)
        .zip(mu_gt)
        .map(|((m, s), g)| {
            let var = s * s;
            (m - g).powi(2) / (2.0 * var) + (2.0 * PI * var).ln() / 2.0
        })
        .sum();
    Ok(total / mu.len() as f64)
}

fn uncertainty_graph(t: &mut Tape, mu: Var, sigma: Var, mu_gt: Var, offset: f64) -> Result<Var> {
    check_sigma(t.value(sigma).data())?;
    let d = t.sub(mu, mu_gt)?;
    let d2 = t.square(d)?;
    let s2 = t.square(sigma)?;
    let s2 = t.scale(s2, 2.0)?;
    let fit = t.div(d2, s2)?;
    let log_s = t.log(sigma)?;
    let per = t.add(fit, log_s)?;
    let per = t.offset(per, offset)?;
    t.mean(per)
}

pub fn uncertainty_loss_graph(t: &mut Tape, mu: Var, sigma: Var, mu_gt: Var) -> Result<Var> {
    uncertainty_graph(t, mu, sigma, mu_gt, 0.0)
}

pub fn uncertainty_loss_full_graph(t: &mut Tape, mu: Var, sigma: Var, mu_gt: Var) -> Result<Var> {
    uncertainty_graph(t, mu, sigma, mu_gt, (2.0 * PI).ln() / 2.0)
}

fn aspect_term(gt: &BoundingBox, w: f64, h: f64) -> f64 {
    let d = (gt.width() / gt.height()).atan() - (w / (h + ASPECT_EPS)).atan();
    4.0 / (PI * PI) * d * d
}

fn check_gt(gt: &BoundingBox) -> Result<()> {
    if !(gt.area() > 0.0) {
        return Err(Error::Domain(format!("ground-truth box has zero area: {gt:?}")));
    }
    Ok(())
}

/// `1 − IoU + ρ²/c² + α_v·v` with the predicted extent clamped at zero.
pub fn ciou_loss(b: &BoundingBox, gt: &BoundingBox) -> Result<f64> {
    check_gt(gt)?;
    let (w, h) = (b.width(), b.height());
    let iw = (b.x_br.min(gt.x_br) - b.x_tl.max(gt.x_tl)).max(0.0);
    let ih = (b.y_br.min(gt.y_br) - b.y_tl.max(gt.y_tl)).max(0.0);
    let inter = iw * ih;
    let iou = inter / (w * h + gt.area() - inter);
    let (pcx, pcy) = b.center();
    let (gcx, gcy) = gt.center();
    let rho2 = (pcx - gcx).powi(2) + (pcy - gcy).powi(2);
    let cw = b.x_br.max(gt.x_br) - b.x_tl.min(gt.x_tl);
    let ch = b.y_br.max(gt.y_br) - b.y_tl.min(gt.y_tl);
    let c2 = cw * cw + ch * ch;
    let v = aspect_term(gt, w, h);
    let alpha = alpha_v(iou, v);
    Ok(1.0 - iou + rho2 / c2 + alpha * v)
}

fn alpha_v(iou: f64, v: f64) -> f64 {
    let denom = 1.0 - iou + v;
    if denom > 0.0 {
        v / denom
    } else {
        0.0
    }
}

/// Mean absolute coordinate difference; pass normalized boxes for the
/// normalized loss.
pub fn l1_loss(b: &BoundingBox, gt: &BoundingBox) -> f64 {
    b.to_array()
        .iter()
        .zip(gt.to_array())
        .map(|(a, g)| (a - g).abs())
        .sum::<f64>()
        / 4.0
}

pub fn ciou_loss_graph(t: &mut Tape, b: Var, gt: &BoundingBox) -> Result<Var> {
    check_gt(gt)?;
    if t.value(b).shape() != [4] {
        return Err(Error::Shape(format!("box node must be [4], got {:?}", t.value(b).shape())));
    }
    let [x1, y1, x2, y2] = [0, 1, 2, 3].map(|i| t.gather(b, &[i]));
    let (x1, y1, x2, y2) = (x1?, y1?, x2?, y2?);
    let [gx1, gy1, gx2, gy2] = gt.to_array().map(|v| t.scalar(v));

    let dw = t.sub(x2, x1)?;
    let w = t.relu(dw)?;
    let dh = t.sub(y2, y1)?;
    let h = t.relu(dh)?;

    let ix_hi = t.minimum(x2, gx2)?;
    let ix_lo = t.maximum(x1, gx1)?;
    let iw = t.sub(ix_hi, ix_lo)?;
    let iw = t.relu(iw)?;
    let iy_hi = t.minimum(y2, gy2)?;
    let iy_lo = t.maximum(y1, gy1)?;
    let ih = t.sub(iy_hi, iy_lo)?;
    let ih = t.relu(ih)?;
    let inter = t.mul(iw, ih)?;
    let area = t.mul(w, h)?;
    let union = t.offset(area, gt.area())?;
    let union = t.sub(union, inter)?;
    let iou = t.div(inter, union)?;

    let (gcx, gcy) = gt.center();
    let sx = t.add(x1, x2)?;
    let dx = t.offset(sx, -2.0 * gcx)?;
    let sy = t.add(y1, y2)?;
    let dy = t.offset(sy, -2.0 * gcy)?;
    let dx2 = t.square(dx)?;
    let dy2 = t.square(dy)?;
    let rho2 = t.add(dx2, dy2)?;
    let rho2 = t.scale(rho2, 0.25)?;

    let cx_hi = t.maximum(x2, gx2)?;
    let cx_lo = t.minimum(x1, gx1)?;
    let cw = t.sub(cx_hi, cx_lo)?;
    let cy_hi = t.maximum(y2, gy2)?;
    let cy_lo = t.minimum(y1, gy1)?;
    let ch = t.sub(cy_hi, cy_lo)?;
    let cw2 = t.square(cw)?;
    let ch2 = t.square(ch)?;
    let c2 = t.add(cw2, ch2)?;
    let dist = t.div(rho2, c2)?;

    let h_safe = t.offset(h, ASPECT_EPS)?;
    let ratio = t.div(w, h_safe)?;
    let at = t.atan(ratio)?;
    let gt_at = t.scalar((gt.width() / gt.height()).atan());
    let diff = t.sub(gt_at, at)?;
    let v = t.square(diff)?;
    let v = t.scale(v, 4.0 / (PI * PI))?;
    // The trade-off weight is held constant during differentiation.
    let alpha = alpha_v(t.value(iou).data()[0], t.value(v).data()[0]);
    let av = t.scale(v, alpha)?;

    let one_minus = t.neg(iou)?;
    let one_minus = t.offset(one_minus, 1.0)?;
    let l = t.add(one_minus, dist)?;
    let l = t.add(l, av)?;
    t.sum(l)
}

pub fn l1_loss_graph(t: &mut Tape, b: Var, gt: &BoundingBox) -> Result<Var> {
    let g = t.leaf(Array::vector(&gt.to_array()));
    let d = t.sub(b, g)?;
    let a = t.abs(d)?;
    t.mean(a)
}

/// The three terms and their weighted total.
pub struct Stage1Vars {
    pub ciou: Var,
    pub l1: Var,
    pub uncertainty: Var,
    pub total: Var,
}

/// Composite objective on normalized corners `mu` and σ `sigma`.
pub fn stage1_loss_graph(
    t: &mut Tape,
    mu: Var,
    sigma: Var,
    gt: &BoundingBox,
    w: &LossWeights,
) -> Result<Stage1Vars> {
    w.validate()?;
    let ciou = ciou_loss_graph(t, mu, gt)?;
    let l1 = l1_loss_graph(t, mu, gt)?;
    let g = t.leaf(Array::vector(&gt.to_array()));
    let uncertainty = uncertainty_loss_graph(t, mu, sigma, g)?;
    let a = t.scale(ciou, w.alpha)?;
    let b = t.scale(l1, w.beta)?;
    let c = t.scale(uncertainty, w.gamma)?;
    let total = t.add(a, b)?;
    let total = t.add(total, c)?;
    Ok(Stage1Vars {
        ciou,
        l1,
        uncertainty,
        total,
    })
}

/// Composite objective for a prediction and a ground-truth box, both in
/// search-image pixels; all terms are evaluated in normalized units.
pub fn stage1_loss(pred: &CornerPrediction, gt: &BoundingBox, w: &LossWeights) -> Result<f64> {
    w.validate()?;
    let s = pred.search_size;
    let b = pred.normalized_box();
    let g = gt.scaled(1.0 / s);
    let ciou = ciou_loss(&b, &g)?;
    let l1 = l1_loss(&b, &g);
    let uc = uncertainty_loss(&b.to_array(), &pred.normalized_sigma(), &g.to_array())?;
    Ok(w.alpha * ciou + w.beta * l1 + w.gamma * uc)
}
