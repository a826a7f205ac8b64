//! Differentiable wrappers over the tensor-core operations.

use super::Var;
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::{BinaryOp, Tensor};

fn unwrap_shape<T: Scalar>(r: Result<Tensor<T>>) -> Tensor<T> {
    r.expect("shape checked in forward")
}

impl<'t, T: Scalar> Var<'t, T> {
    fn binary(self, other: Var<'t, T>, op: BinaryOp) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), other.value());
        let out = a.broadcast_binary(&b, op)?;
        let back: super::BackwardFn<T> = Box::new(move |g, needs| {
            let ga = needs[0].then(|| {
                let local = match op {
                    BinaryOp::Add | BinaryOp::Sub => g.clone(),
                    BinaryOp::Mul => unwrap_shape(g.mul(&b)),
                    BinaryOp::Div => unwrap_shape(g.div(&b)),
                };
                unwrap_shape(local.sum_to_shape(a.shape()))
            });
            let gb = needs[1].then(|| {
                let local = match op {
                    BinaryOp::Add => g.clone(),
                    BinaryOp::Sub => g.scale(-T::one()),
                    BinaryOp::Mul => unwrap_shape(g.mul(&a)),
                    BinaryOp::Div => {
                        // d(a/b)/db = -a / b^2
                        let q = unwrap_shape(a.broadcast_binary(&b, BinaryOp::Div));
                        let q = unwrap_shape(q.broadcast_binary(&b, BinaryOp::Div));
                        unwrap_shape(g.mul(&q)).scale(-T::one())
                    }
                };
                unwrap_shape(local.sum_to_shape(b.shape()))
            });
            vec![ga, gb]
        });
        let name = match op {
            BinaryOp::Add => "add",
            BinaryOp::Sub => "sub",
            BinaryOp::Mul => "mul",
            BinaryOp::Div => "div",
        };
        Ok(self.tape.push(name, out, &[self, other], back))
    }

    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, BinaryOp::Add)
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, BinaryOp::Sub)
    }

    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, BinaryOp::Mul)
    }

    pub fn div(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, BinaryOp::Div)
    }

    pub fn scale(self, c: f64) -> Var<'t, T> {
        let c = T::of(c);
        let out = self.value().scale(c);
        self.tape
            .push("scale", out, &[self], Box::new(move |g, _| vec![Some(g.scale(c))]))
    }

    pub fn add_scalar(self, c: f64) -> Var<'t, T> {
        let c = T::of(c);
        let out = self.value().map(|x| x + c);
        self.tape
            .push("add_scalar", out, &[self], Box::new(|g, _| vec![Some(g.clone())]))
    }

    /// Full reduction to a rank-0 value.
    pub fn sum(self) -> Var<'t, T> {
        let x = self.value();
        let shape = x.shape().to_vec();
        self.tape.push(
            "sum",
            Tensor::scalar(x.sum()),
            &[self],
            Box::new(move |g, _| vec![Some(Tensor::full(&shape, g.item()))]),
        )
    }

    pub fn mean(self) -> Var<'t, T> {
        let n = self.value().numel() as f64;
        self.sum().scale(1.0 / n)
    }

    /// `[..., n] -> [...]`
    pub fn sum_last_axis(self) -> Result<Var<'t, T>> {
        let x = self.value();
        let out = x.sum_last_axis()?;
        let shape = x.shape().to_vec();
        let n = *shape.last().unwrap();
        Ok(self.tape.push(
            "sum_last_axis",
            out,
            &[self],
            Box::new(move |g, _| {
                let data = g.data().iter().flat_map(|&v| std::iter::repeat(v).take(n)).collect();
                vec![Some(Tensor::from_parts(shape.clone(), data))]
            }),
        ))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, T>> {
        let x = self.value();
        let out = x.reshape(shape)?;
        let orig = x.shape().to_vec();
        Ok(self.tape.push(
            "reshape",
            out,
            &[self],
            Box::new(move |g, _| vec![Some(unwrap_shape(g.reshape(&orig)))]),
        ))
    }

    pub fn transpose(self) -> Result<Var<'t, T>> {
        let out = self.value().transpose()?;
        Ok(self.tape.push(
            "transpose",
            out,
            &[self],
            Box::new(|g, _| vec![Some(unwrap_shape(g.transpose()))]),
        ))
    }

    pub fn matmul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), other.value());
        let out = a.matmul(&b)?;
        Ok(self.tape.push(
            "matmul",
            out,
            &[self, other],
            Box::new(move |g, needs| {
                let ga = needs[0].then(|| unwrap_shape(g.matmul(&unwrap_shape(b.transpose()))));
                let gb = needs[1].then(|| unwrap_shape(unwrap_shape(a.transpose()).matmul(g)));
                vec![ga, gb]
            }),
        ))
    }

    pub fn split(self, axis: usize, sizes: &[usize]) -> Result<Vec<Var<'t, T>>> {
        let parts = self.value().split(axis, sizes)?;
        let mut out = Vec::with_capacity(parts.len());
        let full = self.shape();
        let mut offset = 0;
        for part in parts {
            let size = part.shape()[axis];
            let (full, at) = (full.clone(), offset);
            out.push(self.tape.push(
                "split",
                part,
                &[self],
                Box::new(move |g, _| {
                    // scatter into a zero tensor of the source shape
                    let mut pieces = Vec::new();
                    let mut sizes = Vec::new();
                    if at > 0 {
                        let mut s = full.clone();
                        s[axis] = at;
                        pieces.push(Tensor::zeros(&s));
                        sizes.push(at);
                    }
                    pieces.push(g.clone());
                    sizes.push(size);
                    let rest = full[axis] - at - size;
                    if rest > 0 {
                        let mut s = full.clone();
                        s[axis] = rest;
                        pieces.push(Tensor::zeros(&s));
                    }
                    vec![Some(unwrap_shape(Tensor::concat(&pieces, axis)))]
                }),
            ));
            offset += size;
        }
        Ok(out)
    }

    pub fn exp(self) -> Var<'t, T> {
        let out = self.value().map(|x| x.exp());
        let y = out.clone();
        self.tape.push(
            "exp",
            out,
            &[self],
            Box::new(move |g, _| vec![Some(unwrap_shape(g.mul(&y)))]),
        )
    }

    pub fn ln(self) -> Var<'t, T> {
        let x = self.value();
        let out = x.map(|v| v.ln());
        self.tape.push(
            "ln",
            out,
            &[self],
            Box::new(move |g, _| vec![Some(unwrap_shape(g.div(&x)))]),
        )
    }
}

/// Differentiable concatenation along `axis`.
pub fn concat<'t, T: Scalar>(parts: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>> {
    let values: Vec<Tensor<T>> = parts.iter().map(|p| p.value()).collect();
    let out = Tensor::concat(&values, axis)?;
    let sizes: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
    let tape = parts[0].tape();
    Ok(tape.push(
        "concat",
        out,
        parts,
        Box::new(move |g, _| {
            g.split(axis, &sizes)
                .expect("shape checked in forward")
                .into_iter()
                .map(Some)
                .collect()
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, Tape};
    use crate::data::rng::CounterRng;

    fn rand(shape: &[usize], stream: u64) -> Tensor<f64> {
        CounterRng::new(stream).uniform_tensor(shape, -1.0, 1.0)
    }

    #[test]
    fn matmul_sum_matches_finite_differences() {
        let params = vec![("a".to_string(), rand(&[3, 3], 1)), ("b".to_string(), rand(&[3, 3], 2))];
        let r = grad_check(
            "matmul",
            |_t, p| Ok(p[0].matmul(p[1])?.sum()),
            &params,
            1e-6,
            1e-6,
        )
        .unwrap();
        assert!(r.pass, "{r:?}");
    }

    #[test]
    fn broadcast_ops_gradcheck() {
        let params = vec![
            ("a".to_string(), rand(&[2, 3, 4], 3)),
            ("b".to_string(), rand(&[3, 1], 4).map(|x| x + 2.0)),
        ];
        let w = rand(&[2, 3, 4], 5);
        let r = grad_check(
            "broadcast",
            move |t, p| {
                let w = t.constant(w.clone());
                let x = p[0].mul(p[1])?.add(p[1])?.sub(p[0].div(p[1])?)?;
                Ok(x.mul(w)?.sum())
            },
            &params,
            1e-6,
            1e-4,
        )
        .unwrap();
        assert!(r.pass, "{r:?}");
    }

    #[test]
    fn shape_ops_gradcheck() {
        let params = vec![("a".to_string(), rand(&[2, 5], 6)), ("b".to_string(), rand(&[2, 3], 7))];
        let w = rand(&[4, 2], 8);
        let r = grad_check(
            "shape",
            move |t, p| {
                let c = concat(&[p[0], p[1]], 1)?;
                let parts = c.split(1, &[4, 4])?;
                let m = parts[1].add(parts[0].exp())?.transpose()?;
                let lnpart = parts[0].mul(parts[0])?.add_scalar(1.0).ln();
                let s = m.mul(t.constant(w.clone()))?.sum_last_axis()?.sum();
                Ok(s.add(lnpart.mean())?.add(m.reshape(&[8])?.scale(0.5).sum())?)
            },
            &params,
            1e-6,
            1e-4,
        )
        .unwrap();
        assert!(r.pass, "{r:?}");
    }

    #[test]
    fn tape_linearity() {
        let x = rand(&[4], 9);
        let grad_of = |which: u8| {
            let tape = Tape::default();
            let v = tape.param(x.clone());
            let f = v.mul(v).unwrap().sum();
            let g = v.exp().sum();
            let loss = match which {
                0 => f,
                1 => g,
                _ => f.add(g).unwrap(),
            };
            tape.backward(loss).unwrap().wrt(v)
        };
        let sum = grad_of(0).add(&grad_of(1)).unwrap();
        assert!(sum.max_abs_diff(&grad_of(2)) < 1e-14);
    }
}
