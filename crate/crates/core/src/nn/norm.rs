//! Instance and layer normalization (biased variance, affine).

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct Norm<P> {
    pub gamma: P,
    pub beta: P,
    pub eps: f64,
}

/// Standardizes `groups` contiguous runs of length `n`. Row `r` uses affine
/// index `affine(r, j)` for element `j`. Returns `(y, xhat, inv_std)`.
fn normalize_rows<T: Scalar>(
    x: &[T],
    n: usize,
    gamma: &[T],
    beta: &[T],
    eps: T,
    affine: impl Fn(usize, usize) -> usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let nf = T::of(n as f64);
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut inv = Vec::with_capacity(x.len() / n);
    for (r, row) in x.chunks_exact(n).enumerate() {
        let mean = row.iter().fold(T::zero(), |a, &b| a + b) / nf;
        let var = row.iter().fold(T::zero(), |a, &b| a + (b - mean) * (b - mean)) / nf;
        let is = T::one() / (var + eps).sqrt();
        inv.push(is);
        for (j, &v) in row.iter().enumerate() {
            let h = (v - mean) * is;
            let a = affine(r, j);
            xhat[r * n + j] = h;
            y[r * n + j] = gamma[a] * h + beta[a];
        }
    }
    (y, xhat, inv)
}

/// Returns `(dx, dgamma, dbeta)` for [`normalize_rows`].
fn normalize_rows_backward<T: Scalar>(
    g: &[T],
    xhat: &[T],
    inv: &[T],
    n: usize,
    gamma: &[T],
    affine: impl Fn(usize, usize) -> usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let nf = T::of(n as f64);
    let mut dx = vec![T::zero(); g.len()];
    let mut dgamma = vec![T::zero(); gamma.len()];
    let mut dbeta = vec![T::zero(); gamma.len()];
    let mut dxhat = vec![T::zero(); n];
    for r in 0..g.len() / n {
        let (gr, hr) = (&g[r * n..(r + 1) * n], &xhat[r * n..(r + 1) * n]);
        let (mut s1, mut s2) = (T::zero(), T::zero());
        for j in 0..n {
            let a = affine(r, j);
            dgamma[a] += gr[j] * hr[j];
            dbeta[a] += gr[j];
            dxhat[j] = gr[j] * gamma[a];
            s1 += dxhat[j];
            s2 += dxhat[j] * hr[j];
        }
        for j in 0..n {
            dx[r * n + j] = inv[r] * (dxhat[j] - s1 / nf - hr[j] * s2 / nf);
        }
    }
    (dx, dgamma, dbeta)
}

pub fn instance_norm<T: Scalar>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
    let (c, plane) = instance_dims(x, gamma, beta)?;
    let (y, _, _) = normalize_rows(x.data(), plane, gamma.data(), beta.data(), T::of(eps), |r, _| r);
    let _ = c;
    Ok(Tensor::from_parts(x.shape().to_vec(), y))
}

pub fn layer_norm<T: Scalar>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
    let c = layer_dims(x, gamma, beta)?;
    let (y, _, _) = normalize_rows(x.data(), c, gamma.data(), beta.data(), T::of(eps), |_, j| j);
    Ok(Tensor::from_parts(x.shape().to_vec(), y))
}

fn instance_dims<T: Scalar>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<(usize, usize)> {
    let (c, h, w) = match *x.shape() {
        [c, h, w] => (c, h, w),
        _ => return Err(Error::ShapeMismatch(format!("instance_norm needs [C,H,W], got {:?}", x.shape()))),
    };
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::ShapeMismatch(format!(
            "instance_norm affine {:?}/{:?} for {c} channels",
            gamma.shape(),
            beta.shape()
        )));
    }
    Ok((c, h * w))
}

fn layer_dims<T: Scalar>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<usize> {
    let c = *x
        .shape()
        .last()
        .ok_or_else(|| Error::ShapeMismatch("layer_norm of a scalar".into()))?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::ShapeMismatch(format!(
            "layer_norm affine {:?}/{:?} for width {c}",
            gamma.shape(),
            beta.shape()
        )));
    }
    Ok(c)
}

impl<'t, T: Scalar> Var<'t, T> {
    fn normalized(
        self,
        op: &'static str,
        gamma: Var<'t, T>,
        beta: Var<'t, T>,
        eps: f64,
        n: usize,
        per_row_affine: bool,
    ) -> Var<'t, T> {
        let (x, gm, bt) = (self.value(), gamma.value(), beta.value());
        let affine = move |r: usize, j: usize| if per_row_affine { r } else { j };
        let (y, xhat, inv) = normalize_rows(x.data(), n, gm.data(), bt.data(), T::of(eps), affine);
        let shape = x.shape().to_vec();
        let out = Tensor::from_parts(shape.clone(), y);
        self.tape().push(
            op,
            out,
            &[self, gamma, beta],
            Box::new(move |g, _| {
                let (dx, dg, db) = normalize_rows_backward(g.data(), &xhat, &inv, n, gm.data(), affine);
                vec![
                    Some(Tensor::from_parts(shape.clone(), dx)),
                    Some(Tensor::from_parts(gm.shape().to_vec(), dg)),
                    Some(Tensor::from_parts(gm.shape().to_vec(), db)),
                ]
            }),
        )
    }

    /// Per-channel spatial standardization of `[C,H,W]`, then `γ`, `β`.
    pub fn instance_norm(self, gamma: Var<'t, T>, beta: Var<'t, T>, eps: f64) -> Result<Var<'t, T>> {
        let (_, plane) = instance_dims(&self.value(), &gamma.value(), &beta.value())?;
        Ok(self.normalized("instance_norm", gamma, beta, eps, plane, true))
    }

    /// Standardization over the last axis, then `γ`, `β`.
    pub fn layer_norm(self, gamma: Var<'t, T>, beta: Var<'t, T>, eps: f64) -> Result<Var<'t, T>> {
        let c = layer_dims(&self.value(), &gamma.value(), &beta.value())?;
        Ok(self.normalized("layer_norm", gamma, beta, eps, c, false))
    }
}

impl<'t, T: Scalar> Norm<Var<'t, T>> {
    pub fn instance(&self, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.instance_norm(self.gamma, self.beta, self.eps)
    }

    pub fn layer(&self, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.layer_norm(self.gamma, self.beta, self.eps)
    }
}
