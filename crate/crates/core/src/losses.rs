//! The three training objectives and their analytic gradients.
//!
//! * range denoising: MSE between true and predicted noise on valid rays
//! * occupancy: binary cross-entropy on logits over all rays
//! * free-space consistency: `exp(-d_perp^2 / 2b^2) * (d_par / b + lambda ln b)`
//!   summed over each predicted point's neighbor rays (averaged), then
//!   averaged over points

use crate::geometry::{lateral_distance, radial_occlusion, Point3, Ray};
use crate::training::LossWeights;

/// Mean squared error over rays with `valid[i]`; zero when none are valid.
pub fn loss_diff(eps_true: &[f64], eps_hat: &[f64], valid: &[bool]) -> f64 {
    let n = valid.iter().filter(|v| **v).count();
    if n == 0 {
        return 0.0;
    }
    let s: f64 = eps_true
        .iter()
        .zip(eps_hat)
        .zip(valid)
        .filter(|(_, v)| **v)
        .map(|((a, b), _)| (a - b) * (a - b))
        .sum();
    s / n as f64
}

/// Gradient of [`loss_diff`] with respect to `eps_hat`.
pub fn loss_diff_grad(eps_true: &[f64], eps_hat: &[f64], valid: &[bool]) -> Vec<f64> {
    let n = valid.iter().filter(|v| **v).count().max(1) as f64;
    eps_true
        .iter()
        .zip(eps_hat)
        .zip(valid)
        .map(|((a, b), v)| if *v { 2.0 * (b - a) / n } else { 0.0 })
        .collect()
}

/// `-y ln sigmoid(o) - (1 - y) ln(1 - sigmoid(o))` without overflow.
pub fn bce_with_logits(logit: f64, label: bool) -> f64 {
    let y = if label { 1.0 } else { 0.0 };
    logit.max(0.0) - logit * y + (-logit.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mean BCE over all rays.
pub fn loss_occ(logits: &[f64], labels: &[bool]) -> f64 {
    if logits.is_empty() {
        return 0.0;
    }
    logits.iter().zip(labels).map(|(o, y)| bce_with_logits(*o, *y)).sum::<f64>() / logits.len() as f64
}

pub fn loss_occ_grad(logits: &[f64], labels: &[bool]) -> Vec<f64> {
    let n = logits.len().max(1) as f64;
    logits
        .iter()
        .zip(labels)
        .map(|(o, y)| (sigmoid(*o) - if *y { 1.0 } else { 0.0 }) / n)
        .collect()
}

/// A ground-truth ray with a finite return.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NeighborRay {
    pub ray: Ray,
    pub gt_range: f64,
}

/// One (point, ray) summand.
pub fn free_term(p: &Point3, b: f64, n: &NeighborRay, lambda: f64) -> f64 {
    let dp = lateral_distance(p, &n.ray);
    let dr = radial_occlusion(p, &n.ray, n.gt_range);
    (-dp * dp / (2.0 * b * b)).exp() * (dr / b + lambda * b.ln())
}

/// Free-space loss; each point averages over its neighbor rays (points
/// without neighbors contribute zero but still count in the mean).
pub fn loss_free(points: &[Point3], b_hat: &[f64], neighbors: &[Vec<NeighborRay>], lambda: f64) -> f64 {
    if points.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for ((p, b), nb) in points.iter().zip(b_hat).zip(neighbors) {
        if nb.is_empty() {
            continue;
        }
        total += nb.iter().map(|n| free_term(p, *b, n, lambda)).sum::<f64>() / nb.len() as f64;
    }
    total / points.len() as f64
}

/// Gradients of [`loss_free`] with respect to each point and each `b_hat`.
pub fn loss_free_grad(
    points: &[Point3],
    b_hat: &[f64],
    neighbors: &[Vec<NeighborRay>],
    lambda: f64,
) -> (Vec<Point3>, Vec<f64>) {
    let scale = 1.0 / points.len().max(1) as f64;
    let mut gp = vec![Point3::new(0.0, 0.0, 0.0); points.len()];
    let mut gb = vec![0.0; points.len()];
    for (i, ((p, &b), nb)) in points.iter().zip(b_hat).zip(neighbors).enumerate() {
        if nb.is_empty() {
            continue;
        }
        let s = scale / nb.len() as f64;
        for n in nb {
            let d = n.ray.direction();
            let proj = p.dot(&d);
            let perp = *p - d * proj;
            let dp2 = perp.dot(&perp);
            let gap = n.gt_range - proj;
            let dr = gap.max(0.0);
            let w = (-dp2 / (2.0 * b * b)).exp();
            let f = dr / b + lambda * b.ln();
            gb[i] += s * w * (dp2 / (b * b * b) * f - dr / (b * b) + lambda / b);
            // d(w)/dp = -w/b^2 * perp ; d(d_par)/dp = -d when the gap is open
            let mut g = perp * (-w * f / (b * b));
            if gap > 0.0 {
                g = g - d * (w / b);
            }
            gp[i] = gp[i] + g * s;
        }
    }
    (gp, gb)
}

/// Per-term values and the weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub diff: f64,
    pub occ: f64,
    pub free: f64,
    pub total: f64,
}

pub fn composite_loss(diff: f64, occ: f64, free: f64, w: &LossWeights) -> LossBreakdown {
    LossBreakdown {
        diff,
        occ,
        free,
        total: diff + w.lambda_occ * occ + w.lambda_free * free,
    }
}
