//! Global, channel-axis and 2x2 pooling plus nearest-neighbour upsampling.

use crate::autodiff::Var;
use crate::data::rng::fnv1a;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolMode {
    Avg,
    Max,
}

fn chw(t: &Tensor<impl Scalar>, op: &str) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::ShapeMismatch(format!("{op} needs [C,H,W], got {:?}", t.shape()))),
    }
}

fn digest_indices(idx: &[usize]) -> u64 {
    let bytes: Vec<u8> = idx.iter().flat_map(|&i| (i as u32).to_le_bytes()).collect();
    fnv1a(&bytes)
}

/// Per-channel spatial mean: `[C,H,W] -> [C]`.
pub fn gap<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = chw(x, "gap")?;
    let n = T::of((h * w) as f64);
    let means = x
        .data()
        .chunks_exact(h * w)
        .map(|p| p.iter().fold(T::zero(), |a, &b| a + b) / n)
        .collect();
    Ok(Tensor::from_parts(vec![c], means))
}

/// Per-pixel reduction over channels, `[C,H,W] -> [1,H,W]`, plus the
/// winning channel per pixel for `Max` (lowest index on ties).
pub fn channel_pool<T: Scalar>(x: &Tensor<T>, mode: PoolMode) -> Result<(Tensor<T>, Vec<usize>)> {
    let (c, h, w) = chw(x, "channel_pool")?;
    let plane = h * w;
    let d = x.data();
    let mut out = vec![T::zero(); plane];
    let mut arg = Vec::new();
    match mode {
        PoolMode::Avg => {
            for ch in 0..c {
                for (o, &v) in out.iter_mut().zip(&d[ch * plane..(ch + 1) * plane]) {
                    *o += v;
                }
            }
            let n = T::of(c as f64);
            out.iter_mut().for_each(|o| *o /= n);
        }
        PoolMode::Max => {
            arg = vec![0; plane];
            out.copy_from_slice(&d[..plane]);
            for ch in 1..c {
                for p in 0..plane {
                    let v = d[ch * plane + p];
                    if v > out[p] {
                        out[p] = v;
                        arg[p] = ch;
                    }
                }
            }
        }
    }
    Ok((Tensor::from_parts(vec![1, h, w], out), arg))
}

/// 2x2 max pooling with stride 2, plus the flat input index of each winner.
pub fn maxpool2<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let (c, h, w) = chw(x, "maxpool2")?;
    if h % 2 != 0 {
        return Err(Error::OddExtent(h));
    }
    if w % 2 != 0 {
        return Err(Error::OddExtent(w));
    }
    let (oh, ow) = (h / 2, w / 2);
    let d = x.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut arg = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                let base = ch * h * w + 2 * y * w + 2 * xx;
                let mut best = base;
                for cand in [base + 1, base + w, base + w + 1] {
                    if d[cand] > d[best] {
                        best = cand;
                    }
                }
                out.push(d[best]);
                arg.push(best);
            }
        }
    }
    Ok((Tensor::from_parts(vec![c, oh, ow], out), arg))
}

/// Nearest-neighbour 2x enlargement, `[C,H,W] -> [C,2H,2W]`.
pub fn upsample_nearest2<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = chw(x, "upsample_nearest2")?;
    let d = x.data();
    let mut out = Vec::with_capacity(4 * c * h * w);
    for ch in 0..c {
        for y in 0..2 * h {
            let row = &d[ch * h * w + (y / 2) * w..][..w];
            for &v in row {
                out.push(v);
                out.push(v);
            }
        }
    }
    Ok(Tensor::from_parts(vec![c, 2 * h, 2 * w], out))
}

fn upsample_adjoint<T: Scalar>(g: &Tensor<T>) -> Tensor<T> {
    let (c, h2, w2) = (g.shape()[0], g.shape()[1], g.shape()[2]);
    let (h, w) = (h2 / 2, w2 / 2);
    let d = g.data();
    let mut out = vec![T::zero(); c * h * w];
    for ch in 0..c {
        for y in 0..h2 {
            for x in 0..w2 {
                out[ch * h * w + (y / 2) * w + x / 2] += d[(ch * h2 + y) * w2 + x];
            }
        }
    }
    Tensor::from_parts(vec![c, h, w], out)
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn gap(self) -> Result<Var<'t, T>> {
        let x = self.value();
        let out = gap(&x)?;
        let shape = x.shape().to_vec();
        let n = T::of((shape[1] * shape[2]) as f64);
        Ok(self.tape().push(
            "gap",
            out,
            &[self],
            Box::new(move |g, _| {
                let plane = shape[1] * shape[2];
                let data = g.data().iter().flat_map(|&v| std::iter::repeat(v / n).take(plane)).collect();
                vec![Some(Tensor::from_parts(shape.clone(), data))]
            }),
        ))
    }

    pub fn channel_pool(self, mode: PoolMode) -> Result<Var<'t, T>> {
        let x = self.value();
        let (out, arg) = channel_pool(&x, mode)?;
        if mode == PoolMode::Max {
            self.tape().record_choice(digest_indices(&arg));
        }
        let shape = x.shape().to_vec();
        Ok(self.tape().push(
            "channel_pool",
            out,
            &[self],
            Box::new(move |g, _| {
                let (c, plane) = (shape[0], shape[1] * shape[2]);
                let mut dx = vec![T::zero(); c * plane];
                match mode {
                    PoolMode::Avg => {
                        let n = T::of(c as f64);
                        for ch in 0..c {
                            for (d, &v) in dx[ch * plane..(ch + 1) * plane].iter_mut().zip(g.data()) {
                                *d = v / n;
                            }
                        }
                    }
                    PoolMode::Max => {
                        for (p, &v) in g.data().iter().enumerate() {
                            dx[arg[p] * plane + p] = v;
                        }
                    }
                }
                vec![Some(Tensor::from_parts(shape.clone(), dx))]
            }),
        ))
    }

    pub fn maxpool2(self) -> Result<Var<'t, T>> {
        let x = self.value();
        let (out, arg) = maxpool2(&x)?;
        self.tape().record_choice(digest_indices(&arg));
        let shape = x.shape().to_vec();
        Ok(self.tape().push(
            "maxpool2",
            out,
            &[self],
            Box::new(move |g, _| {
                let mut dx = vec![T::zero(); shape.iter().product()];
                for (&i, &v) in arg.iter().zip(g.data()) {
                    dx[i] += v;
                }
                vec![Some(Tensor::from_parts(shape.clone(), dx))]
            }),
        ))
    }

    pub fn upsample_nearest2(self) -> Result<Var<'t, T>> {
        let out = upsample_nearest2(&self.value())?;
        Ok(self
            .tape()
            .push("upsample_nearest2", out, &[self], Box::new(|g, _| vec![Some(upsample_adjoint(g))])))
    }
}
