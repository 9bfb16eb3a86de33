//! Language-modeling and mask losses: focal, dice, IoU regression and
//! objectness, combined with fixed weights.
//!
//! Each loss exists twice: as a plain function over values (the reference)
//! and as graph operations used during training.

use serde::{Deserialize, Serialize};

use pixelrt_core::autograd::{log_sigmoid, sigmoid, Graph, Var};
use pixelrt_core::mask::{region_similarity_j, BinaryMask};
use pixelrt_core::tensor::Matrix;
use pixelrt_core::{Error, Result};

pub const FOCAL_GAMMA: f64 = 2.0;
pub const FOCAL_ALPHA: f64 = 0.25;
pub const DICE_EPS: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lm: f64,
    pub focal: f64,
    pub dice: f64,
    pub iou: f64,
    pub objectness: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lm: 1.0,
            focal: 100.0,
            dice: 5.0,
            iou: 5.0,
            objectness: 5.0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub lm: f64,
    pub focal: f64,
    pub dice: f64,
    pub iou: f64,
    pub objectness: f64,
}

impl LossComponents {
    fn named(&self) -> [(&'static str, f64); 5] {
        [
            ("lm", self.lm),
            ("focal", self.focal),
            ("dice", self.dice),
            ("iou", self.iou),
            ("objectness", self.objectness),
        ]
    }
}

fn same_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("{a} predictions against {b} targets")));
    }
    Ok(())
}

/// Mean over pixels of `-α_t (1 - p_t)^γ log p_t`.
pub fn focal_loss(logits: &[f64], target: &BinaryMask, gamma: f64, alpha: f64) -> Result<f64> {
    same_len(logits.len(), target.size().area())?;
    let mut sum = 0.0;
    for (&z, &y) in logits.iter().zip(target.as_slice()) {
        let (log_pt, pt, a) = if y != 0 {
            (log_sigmoid(z), sigmoid(z), alpha)
        } else {
            (log_sigmoid(-z), sigmoid(-z), 1.0 - alpha)
        };
        sum += -a * (1.0 - pt).powf(gamma) * log_pt;
    }
    Ok(sum / logits.len() as f64)
}

/// `1 - (2 Σ p·g + eps) / (Σ p + Σ g + eps)` with `p = sigmoid(logits)`.
pub fn dice_loss(logits: &[f64], target: &BinaryMask, eps: f64) -> Result<f64> {
    same_len(logits.len(), target.size().area())?;
    let (mut inter, mut sp, mut sg) = (0.0, 0.0, 0.0);
    for (&z, &y) in logits.iter().zip(target.as_slice()) {
        let p = sigmoid(z);
        let g = y as f64;
        inter += p * g;
        sp += p;
        sg += g;
    }
    Ok(1.0 - (2.0 * inter + eps) / (sp + sg + eps))
}

/// `|iou_pred - J(pred, gt)|` on binarized masks.
pub fn iou_mae_loss(iou_pred: f64, pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    if !(0.0..=1.0).contains(&iou_pred) {
        return Err(Error::Range(format!("predicted IoU {iou_pred} outside [0, 1]")));
    }
    Ok((iou_pred - region_similarity_j(pred, gt)?).abs())
}

/// Mean binary cross-entropy between per-frame probabilities and visibility.
pub fn objectness_ce(probs: &[f64], visible: &[bool]) -> Result<f64> {
    same_len(probs.len(), visible.len())?;
    if probs.is_empty() {
        return Ok(0.0);
    }
    let tiny = f64::MIN_POSITIVE;
    let sum: f64 = probs
        .iter()
        .zip(visible)
        .map(|(&p, &v)| if v { -(p.max(tiny)).ln() } else { -((1.0 - p).max(tiny)).ln() })
        .sum();
    Ok(sum / probs.len() as f64)
}

/// Weighted sum of the five components. Any non-finite component aborts.
pub fn total_loss(c: &LossComponents, w: &LossWeights) -> Result<f64> {
    if let Some((name, v)) = c.named().into_iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::TrainingAbort(format!("{name} loss is {v}")));
    }
    Ok(w.lm * c.lm + w.focal * c.focal + w.dice * c.dice + w.iou * c.iou + w.objectness * c.objectness)
}

/// Focal loss on the graph, averaged over all entries of `logits`.
/// `target` holds 0/1 values of the same shape.
pub fn focal_on_graph(g: &mut Graph, logits: Var, target: &Matrix, gamma: f64, alpha: f64) -> Var {
    assert_eq!(g.shape(logits), target.shape(), "focal loss shape mismatch");
    let sign = g.constant(target.map(|y| 2.0 * y - 1.0));
    // z·(2y-1) turns both cases into log σ(±z) and σ(±z).
    let zs = g.mul(logits, sign);
    let log_pt = g.log_sigmoid(zs);
    let pt = g.sigmoid(zs);
    let one_minus = g.scale(pt, -1.0);
    let one_minus = g.add_scalar(one_minus, 1.0);
    let modulating = g.powf(one_minus, gamma);
    let a = g.constant(target.map(|y| if y > 0.5 { alpha } else { 1.0 - alpha }));
    let w = g.mul(modulating, a);
    let l = g.mul(w, log_pt);
    let m = g.mean(l);
    g.scale(m, -1.0)
}

/// Dice loss per row of `logits`, averaged over rows.
pub fn dice_on_graph(g: &mut Graph, logits: Var, target: &Matrix, eps: f64) -> Var {
    assert_eq!(g.shape(logits), target.shape(), "dice loss shape mismatch");
    let (rows, cols) = target.shape();
    let p = g.sigmoid(logits);
    let y = g.constant(target.clone());
    let ones = g.constant(Matrix::filled(cols, 1, 1.0));
    let py = g.mul(p, y);
    let inter = g.matmul(py, ones);
    let sp = g.matmul(p, ones);
    let sg = Matrix::column_vector((0..rows).map(|r| target.row(r).iter().sum::<f64>() + eps).collect());
    let sg = g.constant(sg);
    let num = g.scale(inter, 2.0);
    let num = g.add_scalar(num, eps);
    let den = g.add(sp, sg);
    let inv = g.powf(den, -1.0);
    let ratio = g.mul(num, inv);
    let m = g.mean(ratio);
    let neg = g.scale(m, -1.0);
    g.add_scalar(neg, 1.0)
}

/// `|iou_pred - target|` with a detached target.
pub fn iou_mae_on_graph(g: &mut Graph, iou_pred: Var, target: f64) -> Var {
    let t = g.constant(Matrix::scalar(target));
    let d = g.sub(iou_pred, t);
    let a = g.abs(d);
    g.mean(a)
}

/// Mean binary cross-entropy from logits.
pub fn objectness_on_graph(g: &mut Graph, logits: Var, visible: &[bool]) -> Var {
    assert_eq!(g.shape(logits).0, visible.len());
    let sign = g.constant(Matrix::column_vector(
        visible.iter().map(|&v| if v { 1.0 } else { -1.0 }).collect(),
    ));
    let zs = g.mul(logits, sign);
    let ls = g.log_sigmoid(zs);
    let m = g.mean(ls);
    g.scale(m, -1.0)
}

/// Graph form of [`total_loss`]; the components must be `1 × 1`.
pub fn total_on_graph(g: &mut Graph, parts: [Var; 5], w: &LossWeights) -> Var {
    let weights = [w.lm, w.focal, w.dice, w.iou, w.objectness];
    let mut acc = g.scale(parts[0], weights[0]);
    for (&p, &wi) in parts.iter().zip(&weights).skip(1) {
        let s = g.scale(p, wi);
        acc = g.add(acc, s);
    }
    acc
}
