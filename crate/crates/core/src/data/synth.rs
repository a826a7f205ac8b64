//! Synthetic multi-scale segmentation samples.
//!
//! Each image holds 2 to 4 non-overlapping ellipses or rectangles drawn
//! from two size regimes: small (extent at most H/8) and large (at least
//! H/3). Shapes keep a one-pixel gap so every connected component is one
//! shape. Class `c` paints intensity `0.1 + 0.8·c/(K−1)` over a 0.1
//! background, then Gaussian noise (σ = 0.05) is added and clamped to [0, 1].

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::rng::CounterRng;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const NOISE_STD: f64 = 0.05;
pub const BACKGROUND: f64 = 0.1;
const PLACEMENT_TRIES: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub n: usize,
    #[serde(rename = "H")]
    pub h: usize,
    #[serde(rename = "W")]
    pub w: usize,
    #[serde(rename = "K")]
    pub k: usize,
    /// Probability that a shape is drawn from the small regime.
    pub scale_mix: f64,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("H", self.h), ("W", self.w)] {
            if v < 16 || !v.is_power_of_two() {
                return Err(Error::BadConfig(format!("data.{name} must be a power of two >= 16, got {v}")));
            }
        }
        if self.k < 2 {
            return Err(Error::BadConfig(format!("data.K must be at least 2, got {}", self.k)));
        }
        if self.n == 0 {
            return Err(Error::BadConfig("data.n must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.scale_mix) {
            return Err(Error::BadConfig(format!("data.scale_mix must lie in [0, 1], got {}", self.scale_mix)));
        }
        Ok(())
    }

    /// Inclusive extent range of the small regime along an axis of length `n`.
    pub fn small_extent(n: usize) -> (usize, usize) {
        ((n / 16).max(2), n / 8)
    }

    pub fn large_extent(n: usize) -> (usize, usize) {
        (n.div_ceil(3), n / 2)
    }
}

/// Row-major class ids of an `H×W` grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub h: usize,
    pub w: usize,
    pub ids: Vec<usize>,
}

impl Mask {
    pub fn new(h: usize, w: usize, ids: Vec<usize>) -> Result<Self> {
        if ids.len() != h * w {
            return Err(Error::ShapeMismatch(format!("mask of {} ids for {h}x{w}", ids.len())));
        }
        Ok(Self { h, w, ids })
    }

    /// Fails with `BadMask` if some id is `>= k`.
    pub fn check_classes(&self, k: usize) -> Result<()> {
        match self.ids.iter().find(|&&c| c >= k) {
            Some(c) => Err(Error::BadMask(format!("class id {c} with only {k} classes"))),
            None => Ok(()),
        }
    }

    pub fn histogram(&self, k: usize) -> Vec<usize> {
        let mut h = vec![0; k];
        for &c in &self.ids {
            h[c] += 1;
        }
        h
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_parts(vec![self.h, self.w], self.ids.iter().map(|&c| T::of(c as f64)).collect())
    }

    /// Inverse of [`Mask::to_tensor`]; values must be non-negative integers.
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Result<Self> {
        let (h, w) = match *t.shape() {
            [h, w] => (h, w),
            _ => return Err(Error::BadMask(format!("mask must be [H,W], got {:?}", t.shape()))),
        };
        let mut ids = Vec::with_capacity(h * w);
        for &v in t.data() {
            let f = v.as_f64();
            if f < 0.0 || f.fract() != 0.0 {
                return Err(Error::BadMask(format!("non-integer class id {f}")));
            }
            ids.push(f as usize);
        }
        Ok(Self { h, w, ids })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegSample<T: Scalar> {
    /// `[1, H, W]` in `[0, 1]`.
    pub image: Tensor<T>,
    pub mask: Mask,
}

#[derive(Debug, Clone, Copy)]
enum Kind {
    Ellipse,
    Rect,
}

#[derive(Debug, Clone, Copy)]
struct Shape {
    kind: Kind,
    y0: usize,
    x0: usize,
    dy: usize,
    dx: usize,
}

impl Shape {
    /// Whether pixel `(y, x)` lies in the shape; the footprint always spans
    /// exactly `dy × dx` pixels.
    fn covers(&self, y: usize, x: usize) -> bool {
        if y < self.y0 || x < self.x0 || y >= self.y0 + self.dy || x >= self.x0 + self.dx {
            return false;
        }
        match self.kind {
            Kind::Rect => true,
            Kind::Ellipse => {
                let (a, b) = (self.dx as f64 / 2.0, self.dy as f64 / 2.0);
                let u = (x - self.x0) as f64 + 0.5 - a;
                let v = (y - self.y0) as f64 + 0.5 - b;
                (u / a).powi(2) + (v / b).powi(2) <= 1.0
            }
        }
    }
}

fn draw_extent(rng: &mut CounterRng, (lo, hi): (usize, usize)) -> usize {
    rng.range_inclusive(lo, hi.max(lo))
}

/// One sample, seeded by `seed ^ index`.
pub fn synth_sample<T: Scalar>(cfg: &SynthConfig, index: usize) -> SegSample<T> {
    let (h, w) = (cfg.h, cfg.w);
    let mut rng = CounterRng::new(cfg.seed ^ index as u64);
    // occupied pixels dilated by one, so new shapes keep a gap
    let mut blocked = vec![false; h * w];
    let mut ids = vec![0usize; h * w];
    let count = rng.range_inclusive(2, 4);
    for _ in 0..count {
        let small = rng.next_f64() < cfg.scale_mix;
        let (ry, rx) = if small {
            (SynthConfig::small_extent(h), SynthConfig::small_extent(w))
        } else {
            (SynthConfig::large_extent(h), SynthConfig::large_extent(w))
        };
        let dy = draw_extent(&mut rng, ry);
        let dx = draw_extent(&mut rng, rx);
        let kind = if rng.below(2) == 0 { Kind::Ellipse } else { Kind::Rect };
        let class = rng.range_inclusive(1, cfg.k - 1);
        for _ in 0..PLACEMENT_TRIES {
            let shape = Shape {
                kind,
                y0: rng.range_inclusive(0, h - dy),
                x0: rng.range_inclusive(0, w - dx),
                dy,
                dx,
            };
            let pixels: Vec<usize> = (shape.y0..shape.y0 + dy)
                .flat_map(|y| (shape.x0..shape.x0 + dx).map(move |x| (y, x)))
                .filter(|&(y, x)| shape.covers(y, x))
                .map(|(y, x)| y * w + x)
                .collect();
            if pixels.iter().any(|&p| blocked[p]) {
                continue;
            }
            for &p in &pixels {
                ids[p] = class;
                let (y, x) = (p / w, p % w);
                for yy in y.saturating_sub(1)..(y + 2).min(h) {
                    for xx in x.saturating_sub(1)..(x + 2).min(w) {
                        blocked[yy * w + xx] = true;
                    }
                }
            }
            break;
        }
    }
    let image = ids
        .iter()
        .map(|&c| {
            let base = BACKGROUND + 0.8 * c as f64 / (cfg.k - 1) as f64;
            T::of((base + NOISE_STD * rng.normal()).clamp(0.0, 1.0))
        })
        .collect();
    SegSample {
        image: Tensor::from_parts(vec![1, h, w], image),
        mask: Mask { h, w, ids },
    }
}

pub fn synth_dataset<T: Scalar>(cfg: &SynthConfig) -> Result<Vec<SegSample<T>>> {
    cfg.validate()?;
    Ok((0..cfg.n).into_par_iter().map(|i| synth_sample(cfg, i)).collect())
}

/// Bounding-box extent `max(height, width)` of every 8-connected
/// foreground component.
pub fn component_extents(mask: &Mask) -> Vec<usize> {
    let (h, w) = (mask.h, mask.w);
    let mut seen = vec![false; h * w];
    let mut out = Vec::new();
    for start in 0..h * w {
        if seen[start] || mask.ids[start] == 0 {
            continue;
        }
        seen[start] = true;
        let mut stack = vec![start];
        let (mut y0, mut y1, mut x0, mut x1) = (h, 0, w, 0);
        while let Some(p) = stack.pop() {
            let (y, x) = (p / w, p % w);
            (y0, y1, x0, x1) = (y0.min(y), y1.max(y), x0.min(x), x1.max(x));
            for yy in y.saturating_sub(1)..(y + 2).min(h) {
                for xx in x.saturating_sub(1)..(x + 2).min(w) {
                    let q = yy * w + xx;
                    if !seen[q] && mask.ids[q] != 0 {
                        seen[q] = true;
                        stack.push(q);
                    }
                }
            }
        }
        out.push((y1 - y0 + 1).max(x1 - x0 + 1));
    }
    out
}
