//! Overlap and boundary metrics on hard masks.
//!
//! Boundary pixels are foreground pixels with at least one 4-neighbour
//! outside the foreground, where off-image neighbours count as outside.
//! NSD at tolerance τ averages two fractions: the share of P-boundary
//! pixels within Chebyshev distance τ of the G-boundary, and the reverse.

use serde::{Deserialize, Serialize};

use crate::data::Mask;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEFAULT_TAU: usize = 2;

/// Per-pixel argmax over axis 0 of `[K, H, W]` logits; ties go to the
/// lowest class.
pub fn predict<T: Scalar>(logits: &Tensor<T>) -> Result<Mask> {
    let (k, h, w) = match *logits.shape() {
        [k, h, w] => (k, h, w),
        _ => return Err(Error::ShapeMismatch(format!("logits must be [K,H,W], got {:?}", logits.shape()))),
    };
    let n = h * w;
    let d = logits.data();
    let ids = (0..n)
        .map(|p| (1..k).fold(0, |best, c| if d[c * n + p] > d[best * n + p] { c } else { best }))
        .collect();
    Mask::new(h, w, ids)
}

fn check(p: &Mask, g: &Mask) -> Result<()> {
    if (p.h, p.w) != (g.h, g.w) {
        return Err(Error::ShapeMismatch(format!("{}x{} vs {}x{}", p.h, p.w, g.h, g.w)));
    }
    Ok(())
}

fn counts(p: &Mask, g: &Mask, k: usize) -> (usize, usize, usize) {
    let (mut pi, mut gi, mut both) = (0, 0, 0);
    for (&a, &b) in p.ids.iter().zip(&g.ids) {
        pi += (a == k) as usize;
        gi += (b == k) as usize;
        both += (a == k && b == k) as usize;
    }
    (pi, gi, both)
}

/// `2|P∩G| / (|P|+|G|)` for class `k`, 1 when both are empty.
pub fn dice_metric(p: &Mask, g: &Mask, k: usize) -> Result<f64> {
    check(p, g)?;
    let (a, b, i) = counts(p, g, k);
    Ok(if a + b == 0 { 1.0 } else { 2.0 * i as f64 / (a + b) as f64 })
}

/// `|P∩G| / |P∪G|` for class `k`, 1 when both are empty.
pub fn iou_metric(p: &Mask, g: &Mask, k: usize) -> Result<f64> {
    check(p, g)?;
    let (a, b, i) = counts(p, g, k);
    let union = a + b - i;
    Ok(if union == 0 { 1.0 } else { i as f64 / union as f64 })
}

pub fn boundary(m: &Mask, k: usize) -> Vec<bool> {
    let (h, w) = (m.h, m.w);
    let inside = |y: isize, x: isize| {
        y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && m.ids[y as usize * w + x as usize] == k
    };
    (0..h * w)
        .map(|p| {
            let (y, x) = ((p / w) as isize, (p % w) as isize);
            inside(y, x) && [(-1, 0), (1, 0), (0, -1), (0, 1)].iter().any(|&(dy, dx)| !inside(y + dy, x + dx))
        })
        .collect()
}

/// Share of `from` pixels having a `to` pixel within Chebyshev distance `tau`.
fn near_fraction(from: &[bool], to: &[bool], h: usize, w: usize, tau: usize) -> f64 {
    let mut total = 0usize;
    let mut near = 0usize;
    for p in (0..h * w).filter(|&p| from[p]) {
        total += 1;
        let (y, x) = (p / w, p % w);
        let hit = (y.saturating_sub(tau)..(y + tau + 1).min(h))
            .any(|yy| (x.saturating_sub(tau)..(x + tau + 1).min(w)).any(|xx| to[yy * w + xx]));
        near += hit as usize;
    }
    near as f64 / total as f64
}

/// Normalized surface distance of class `k` at tolerance `tau`: 1 when
/// both boundaries are empty, 0 when exactly one is.
pub fn nsd_metric(p: &Mask, g: &Mask, k: usize, tau: usize) -> Result<f64> {
    check(p, g)?;
    let (bp, bg) = (boundary(p, k), boundary(g, k));
    match (bp.contains(&true), bg.contains(&true)) {
        (false, false) => Ok(1.0),
        (true, true) => Ok(0.5 * (near_fraction(&bp, &bg, p.h, p.w, tau) + near_fraction(&bg, &bp, p.h, p.w, tau))),
        _ => Ok(0.0),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub class: usize,
    pub dice: f64,
    pub iou: f64,
    pub nsd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    /// Foreground classes `1..K`; each value is a mean over samples.
    pub per_class: Vec<ClassScores>,
    pub dice: f64,
    pub miou: f64,
    pub nsd: f64,
}

/// Foreground metrics averaged per sample, then over samples.
pub fn score(preds: &[Mask], gts: &[Mask], k: usize, tau: usize) -> Result<Scores> {
    if preds.len() != gts.len() || preds.is_empty() {
        return Err(Error::ShapeMismatch(format!("{} predictions for {} masks", preds.len(), gts.len())));
    }
    let n = preds.len() as f64;
    let mut per_class = Vec::with_capacity(k - 1);
    for c in 1..k {
        let (mut d, mut i, mut s) = (0.0, 0.0, 0.0);
        for (p, g) in preds.iter().zip(gts) {
            d += dice_metric(p, g, c)?;
            i += iou_metric(p, g, c)?;
            s += nsd_metric(p, g, c, tau)?;
        }
        per_class.push(ClassScores {
            class: c,
            dice: d / n,
            iou: i / n,
            nsd: s / n,
        });
    }
    let m = per_class.len() as f64;
    Ok(Scores {
        dice: per_class.iter().map(|c| c.dice).sum::<f64>() / m,
        miou: per_class.iter().map(|c| c.iou).sum::<f64>() / m,
        nsd: per_class.iter().map(|c| c.nsd).sum::<f64>() / m,
        per_class,
    })
}
