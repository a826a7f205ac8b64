//! Pointwise activations and softmax.
//!
//! Subgradient convention at kinks: `relu'(0) = 0`, `leaky_relu'(0) = slope`.
//! The sign pattern of the input is folded into the tape digest so gradient
//! checking can skip coordinates that straddle a kink.

use crate::autodiff::Var;
use crate::data::rng::fnv1a;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const LEAKY_SLOPE: f64 = 0.01;

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn sign_digest<T: Scalar>(x: &Tensor<T>) -> u64 {
    let bits: Vec<u8> = x
        .data()
        .chunks(8)
        .map(|c| c.iter().enumerate().fold(0u8, |acc, (i, &v)| acc | (((v > T::zero()) as u8) << i)))
        .collect();
    fnv1a(&bits)
}

/// Softmax over the last axis with max subtraction.
pub fn softmax<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let n = *x.shape().last().ok_or(Error::BadAxis { axis: 0, rank: 0 })?;
    let mut out = x.to_vec();
    for row in out.chunks_exact_mut(n) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        row.iter_mut().for_each(|v| *v /= z);
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

/// Log-softmax over axis 0 of a `[K, ...]` tensor.
pub fn log_softmax_axis0<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let k = *x.shape().first().ok_or(Error::BadAxis { axis: 0, rank: 0 })?;
    let n = x.numel() / k;
    let d = x.data();
    let mut out = vec![T::zero(); k * n];
    for p in 0..n {
        let m = (0..k).map(|c| d[c * n + p]).fold(T::neg_infinity(), T::max);
        let z = (0..k).map(|c| (d[c * n + p] - m).exp()).fold(T::zero(), |a, b| a + b);
        let lse = m + z.ln();
        for c in 0..k {
            out[c * n + p] = d[c * n + p] - lse;
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

impl<'t, T: Scalar> Var<'t, T> {
    fn pointwise(
        self,
        op: &'static str,
        f: impl Fn(T) -> T,
        df: impl Fn(T) -> T + 'static,
    ) -> Var<'t, T> {
        let x = self.value();
        let out = x.map(f);
        self.tape().push(
            op,
            out,
            &[self],
            Box::new(move |g, _| {
                let d = g.data().iter().zip(x.data()).map(|(&gv, &xv)| gv * df(xv)).collect();
                vec![Some(Tensor::from_parts(g.shape().to_vec(), d))]
            }),
        )
    }

    pub fn relu(self) -> Var<'t, T> {
        self.tape().record_choice(sign_digest(&self.value()));
        self.pointwise(
            "relu",
            |x| x.max(T::zero()),
            |x| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    pub fn leaky_relu(self, slope: f64) -> Var<'t, T> {
        self.tape().record_choice(sign_digest(&self.value()));
        let s = T::of(slope);
        self.pointwise(
            "leaky_relu",
            move |x| if x > T::zero() { x } else { x * s },
            move |x| if x > T::zero() { T::one() } else { s },
        )
    }

    pub fn sigmoid(self) -> Var<'t, T> {
        self.pointwise("sigmoid", sigmoid, |x| {
            let s = sigmoid(x);
            s * (T::one() - s)
        })
    }

    pub fn silu(self) -> Var<'t, T> {
        self.pointwise(
            "silu",
            |x| x * sigmoid(x),
            |x| {
                let s = sigmoid(x);
                s * (T::one() + x * (T::one() - s))
            },
        )
    }

    /// Softmax over the last axis.
    pub fn softmax(self) -> Result<Var<'t, T>> {
        let y = softmax(&self.value())?;
        let saved = y.clone();
        Ok(self.tape().push(
            "softmax",
            y,
            &[self],
            Box::new(move |g, _| {
                let n = *saved.shape().last().unwrap();
                let mut dx = Vec::with_capacity(g.numel());
                for (gr, yr) in g.data().chunks_exact(n).zip(saved.data().chunks_exact(n)) {
                    let dot = gr.iter().zip(yr).fold(T::zero(), |a, (&p, &q)| a + p * q);
                    dx.extend(gr.iter().zip(yr).map(|(&p, &q)| q * (p - dot)));
                }
                vec![Some(Tensor::from_parts(saved.shape().to_vec(), dx))]
            }),
        ))
    }

    /// Log-softmax over axis 0 (the class axis of `[K, H, W]` logits).
    pub fn log_softmax_axis0(self) -> Result<Var<'t, T>> {
        let y = log_softmax_axis0(&self.value())?;
        let saved = y.clone();
        Ok(self.tape().push(
            "log_softmax",
            y,
            &[self],
            Box::new(move |g, _| {
                let k = saved.shape()[0];
                let n = saved.numel() / k;
                let (gd, yd) = (g.data(), saved.data());
                let mut dx = vec![T::zero(); k * n];
                for p in 0..n {
                    let gs = (0..k).fold(T::zero(), |a, c| a + gd[c * n + p]);
                    for c in 0..k {
                        dx[c * n + p] = gd[c * n + p] - yd[c * n + p].exp() * gs;
                    }
                }
                vec![Some(Tensor::from_parts(saved.shape().to_vec(), dx))]
            }),
        ))
    }
}
