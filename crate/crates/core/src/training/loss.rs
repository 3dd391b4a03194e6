use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::mask::{BinaryMask, ProbMask};
use crate::nn::sigmoid;

/// Probabilities are clamped to `[EPS, 1 - EPS]` inside logarithms.
pub const PROB_CLAMP_EPS: f64 = 1e-7;
pub const DICE_SMOOTH: f64 = 1.0;
pub const DICE_WEIGHT: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Bce,
    BcePlusDice,
}

impl std::str::FromStr for LossKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "bce" => Ok(LossKind::Bce),
            "bce_plus_dice" | "bce+dice" => Ok(LossKind::BcePlusDice),
            other => Err(format!("unknown loss `{other}`")),
        }
    }
}

/// Soft Dice loss and its gradient w.r.t. the probabilities.
fn dice(p: &[f64], y: &[f64]) -> (f64, Vec<f64>) {
    let inter: f64 = p.iter().zip(y).map(|(a, b)| a * b).sum();
    let s = p.iter().sum::<f64>() + y.iter().sum::<f64>() + DICE_SMOOTH;
    let num = 2.0 * inter + DICE_SMOOTH;
    let grad = y.iter().map(|&yi| -(2.0 * yi * s - num) / (s * s)).collect();
    (1.0 - num / s, grad)
}

/// Loss and gradient w.r.t. probabilities `q`.
pub fn loss_grad_probs(q: &[f64], y: &[f64], kind: LossKind) -> (f64, Vec<f64>) {
    let n = q.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(q.len());
    for (&qi, &yi) in q.iter().zip(y) {
        let c = qi.clamp(PROB_CLAMP_EPS, 1.0 - PROB_CLAMP_EPS);
        loss -= yi * c.ln() + (1.0 - yi) * (1.0 - c).ln();
        grad.push((c - yi) / (c * (1.0 - c)) / n);
    }
    loss /= n;
    if kind == LossKind::BcePlusDice {
        let (d, dg) = dice(q, y);
        loss += DICE_WEIGHT * d;
        for (g, x) in grad.iter_mut().zip(dg) {
            *g += DICE_WEIGHT * x;
        }
    }
    (loss, grad)
}

/// Loss and gradient w.r.t. pre-sigmoid scores `z`, in the numerically
/// stable logit form.
pub fn loss_grad_logits(z: &[f64], y: &[f64], kind: LossKind) -> (f64, Vec<f64>) {
    let n = z.len() as f64;
    let p: Vec<f64> = z.iter().map(|&v| sigmoid(v)).collect();
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(z.len());
    for ((&zi, &yi), &pi) in z.iter().zip(y).zip(&p) {
        loss += zi.max(0.0) - zi * yi + (-zi.abs()).exp().ln_1p();
        grad.push((pi - yi) / n);
    }
    loss /= n;
    if kind == LossKind::BcePlusDice {
        let (d, dg) = dice(&p, y);
        loss += DICE_WEIGHT * d;
        for ((g, x), &pi) in grad.iter_mut().zip(dg).zip(&p) {
            *g += DICE_WEIGHT * x * pi * (1.0 - pi);
        }
    }
    (loss, grad)
}

/// Segmentation loss of a confidence map against a same-sized target.
pub fn seg_loss(probs: &ProbMask, gt: &BinaryMask, kind: LossKind) -> Result<f64, TrainError> {
    if (probs.width(), probs.height()) != (gt.width(), gt.height()) {
        return Err(TrainError::ShapeMismatch(format!(
            "confidences are {}x{}, target is {}x{}",
            probs.width(),
            probs.height(),
            gt.width(),
            gt.height()
        )));
    }
    let q: Vec<f64> = probs.data().iter().map(|&v| f64::from(v)).collect();
    let y: Vec<f64> = gt.data().iter().map(|&v| f64::from(v)).collect();
    Ok(loss_grad_probs(&q, &y, kind).0)
}

/// Downsamples by majority vote: a cell is on when strictly more than half
/// of the pixels it covers are on.
pub fn majority_pool(gt: &BinaryMask, width: usize, height: usize) -> Result<BinaryMask, TrainError> {
    let span = |i: usize, out: usize, src: usize| {
        let lo = i * src / out;
        let hi = ((i + 1) * src / out).max(lo + 1).min(src);
        (lo.min(src - 1), hi)
    };
    BinaryMask::from_fn(width, height, |cx, cy| {
        let (x0, x1) = span(cx, width, gt.width());
        let (y0, y1) = span(cy, height, gt.height());
        let mut on = 0usize;
        for y in y0..y1 {
            for x in x0..x1 {
                on += usize::from(gt.get(x, y));
            }
        }
        2 * on > (x1 - x0) * (y1 - y0)
    })
    .map_err(|e| TrainError::ShapeMismatch(e.to_string()))
}
