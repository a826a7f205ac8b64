//! Affine maps over the last axis.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `y = x Wᵀ + b` with `W: [n_out, n_in]`.
#[derive(Debug, Clone)]
pub struct Linear<P> {
    pub weight: P,
    pub bias: Option<P>,
}

fn dims<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<(usize, usize, usize)> {
    let n_in = *x.shape().last().ok_or_else(|| Error::ShapeMismatch("linear of a scalar".into()))?;
    let n_out = match *w.shape() {
        [o, i] if i == n_in => o,
        _ => return Err(Error::ShapeMismatch(format!("linear weight {:?} for input {:?}", w.shape(), x.shape()))),
    };
    if let Some(b) = b {
        if b.shape() != [n_out] {
            return Err(Error::ShapeMismatch(format!("linear bias {:?} for {n_out} outputs", b.shape())));
        }
    }
    Ok((x.numel() / n_in, n_in, n_out))
}

pub fn linear<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let (rows, n_in, n_out) = dims(x, w, b)?;
    let (xd, wd) = (x.data(), w.data());
    let mut out = Vec::with_capacity(rows * n_out);
    for r in 0..rows {
        let xr = &xd[r * n_in..(r + 1) * n_in];
        for o in 0..n_out {
            let wr = &wd[o * n_in..(o + 1) * n_in];
            let mut acc = b.map_or(T::zero(), |b| b.data()[o]);
            for (&p, &q) in xr.iter().zip(wr) {
                acc += p * q;
            }
            out.push(acc);
        }
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = n_out;
    Ok(Tensor::from_parts(shape, out))
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn linear(self, weight: Var<'t, T>, bias: Option<Var<'t, T>>) -> Result<Var<'t, T>> {
        let (x, w) = (self.value(), weight.value());
        let out = linear(&x, &w, bias.map(|b| b.value()).as_ref())?;
        let (rows, n_in, n_out) = dims(&x, &w, None)?;
        let mut parents = vec![self, weight];
        parents.extend(bias);
        Ok(self.tape().push(
            "linear",
            out,
            &parents,
            Box::new(move |g, needs| {
                let g2 = Tensor::from_parts(vec![rows, n_out], g.to_vec());
                let x2 = Tensor::from_parts(vec![rows, n_in], x.to_vec());
                let dx = needs[0].then(|| {
                    let d = g2.matmul(&w).expect("linear shapes");
                    d.reshape(x.shape()).expect("linear shapes")
                });
                let dw = needs[1].then(|| g2.transpose().and_then(|gt| gt.matmul(&x2)).expect("linear shapes"));
                let mut grads = vec![dx, dw];
                if needs.len() > 2 {
                    grads.push(needs[2].then(|| {
                        let mut db = vec![T::zero(); n_out];
                        for row in g2.data().chunks_exact(n_out) {
                            for (d, &v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                        Tensor::from_parts(vec![n_out], db)
                    }));
                }
                grads
            }),
        ))
    }
}

impl<'t, T: Scalar> Linear<Var<'t, T>> {
    pub fn forward(&self, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.linear(self.weight, self.bias)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::data::rng::CounterRng;

    #[test]
    fn identity_and_hand_case() {
        let x = CounterRng::new(1).uniform_tensor::<f64>(&[3, 4], -1.0, 1.0);
        let y = linear(&x, &Tensor::eye(4), Some(&Tensor::zeros(&[4]))).unwrap();
        assert!(y.bitwise_eq(&x));
        let y = linear(
            &Tensor::from_slice(&[1, 2], &[1.0f64, 2.0]).unwrap(),
            &Tensor::from_slice(&[1, 2], &[3.0, 4.0]).unwrap(),
            Some(&Tensor::vector(&[1.0])),
        )
        .unwrap();
        assert_eq!(y.data(), &[12.0]);
        assert!(linear(&x, &Tensor::eye(3), None).is_err());
    }

    #[test]
    fn matches_matmul_oracle() {
        let mut rng = CounterRng::new(2);
        let x = rng.uniform_tensor::<f64>(&[5, 3], -1.0, 1.0);
        let w = rng.uniform_tensor::<f64>(&[4, 3], -1.0, 1.0);
        let b = rng.uniform_tensor::<f64>(&[4], -1.0, 1.0);
        let y = linear(&x, &w, Some(&b)).unwrap();
        let e = x.matmul(&w.transpose().unwrap()).unwrap().add(&b).unwrap();
        assert!(y.max_abs_diff(&e) < 1e-14);
    }

    #[test]
    fn linear_gradcheck() {
        let mut rng = CounterRng::new(3);
        for (rows, n_in, n_out) in [(3, 4, 2), (1, 3, 3), (6, 2, 5)] {
            let r = rng.uniform_tensor::<f64>(&[rows, n_out], -1.0, 1.0);
            let params = vec![
                ("x".to_string(), rng.uniform_tensor(&[rows, n_in], -1.0, 1.0)),
                ("w".to_string(), rng.uniform_tensor(&[n_out, n_in], -1.0, 1.0)),
                ("b".to_string(), rng.uniform_tensor(&[n_out], -1.0, 1.0)),
            ];
            let rep = grad_check(
                "linear",
                |t, p| p[0].linear(p[1], Some(p[2]))?.mul(t.constant(r.clone())).map(|v| v.sum()),
                &params,
                1e-6,
                1e-4,
            )
            .unwrap();
            assert!(rep.pass, "{rep:?}");
        }
    }
}
