//! Same-padded 2-D cross-correlation with dilation and channel groups.

use rayon::prelude::*;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Convolution parameters. `weight` is `[C_out, C_in / groups, k, k]`.
#[derive(Debug, Clone)]
pub struct Conv2d<P> {
    pub weight: P,
    pub bias: Option<P>,
    pub kernel: usize,
    pub dilation: usize,
    pub groups: usize,
}

#[derive(Debug, Clone, Copy)]
struct Geometry {
    c_in: usize,
    c_out: usize,
    h: usize,
    w: usize,
    k: usize,
    dilation: usize,
    groups: usize,
}

impl Geometry {
    fn check<T: Scalar>(
        x: &Tensor<T>,
        weight: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        dilation: usize,
        groups: usize,
    ) -> Result<Self> {
        let (c_in, h, w) = match *x.shape() {
            [c, h, w] => (c, h, w),
            _ => return Err(Error::ShapeMismatch(format!("conv2d input must be [C,H,W], got {:?}", x.shape()))),
        };
        let (c_out, cpg, k) = match *weight.shape() {
            [co, cpg, k1, k2] if k1 == k2 => (co, cpg, k1),
            _ => return Err(Error::ShapeMismatch(format!("conv2d weight must be [Co,Ci/g,k,k], got {:?}", weight.shape()))),
        };
        if k % 2 == 0 {
            return Err(Error::EvenKernel(k));
        }
        if groups == 0 || dilation == 0 || c_in % groups != 0 || c_out % groups != 0 || cpg * groups != c_in {
            return Err(Error::ShapeMismatch(format!(
                "conv2d groups {groups}: input channels {c_in}, weight {:?}",
                weight.shape()
            )));
        }
        if let Some(b) = bias {
            if b.shape() != [c_out] {
                return Err(Error::ShapeMismatch(format!("conv2d bias {:?} for {c_out} outputs", b.shape())));
            }
        }
        Ok(Self {
            c_in,
            c_out,
            h,
            w,
            k,
            dilation,
            groups,
        })
    }

    fn in_per_group(&self) -> usize {
        self.c_in / self.groups
    }

    fn out_per_group(&self) -> usize {
        self.c_out / self.groups
    }

    fn pad(&self) -> isize {
        ((self.k - 1) * self.dilation / 2) as isize
    }

    /// Offset of tap `t` and the output range `[lo, hi)` for which the
    /// shifted input index stays inside `0..extent`.
    fn tap(&self, t: usize, extent: usize) -> (isize, usize, usize) {
        let off = (t * self.dilation) as isize - self.pad();
        let lo = ((-off).max(0) as usize).min(extent);
        let hi = (extent as isize - off).clamp(0, extent as isize) as usize;
        (off, lo, hi.max(lo))
    }
}

/// `out[y][x] += w * inp[y + oy][x + ox]` over the valid window of one tap.
#[inline]
fn accumulate_tap<T: Scalar>(out: &mut [T], inp: &[T], g: &Geometry, ky: usize, kx: usize, w: T) {
    let (oy, y0, y1) = g.tap(ky, g.h);
    let (ox, x0, x1) = g.tap(kx, g.w);
    if x0 == x1 {
        return Default::default();
    }
    let width = g.w;
    for y in y0..y1 {
        let src_row = (y as isize + oy) as usize * width;
        let dst = &mut out[y * width + x0..y * width + x1];
        let src = &inp[(src_row as isize + x0 as isize + ox) as usize..][..x1 - x0];
        for (d, &s) in dst.iter_mut().zip(src) {
            *d += w * s;
        }
    }
}

/// Adjoint of [`accumulate_tap`] with respect to the input.
#[inline]
fn scatter_tap<T: Scalar>(dinp: &mut [T], dout: &[T], g: &Geometry, ky: usize, kx: usize, w: T) {
    let (oy, y0, y1) = g.tap(ky, g.h);
    let (ox, x0, x1) = g.tap(kx, g.w);
    if x0 == x1 {
        return Default::default();
    }
    let width = g.w;
    for y in y0..y1 {
        let dst_row = (y as isize + oy) as usize * width;
        let src = &dout[y * width + x0..y * width + x1];
        let dst = &mut dinp[(dst_row as isize + x0 as isize + ox) as usize..][..x1 - x0];
        for (d, &s) in dst.iter_mut().zip(src) {
            *d += w * s;
        }
    }
}

/// `Σ dout[y][x] * inp[y + oy][x + ox]` over the valid window of one tap.
#[inline]
fn correlate_tap<T: Scalar>(dout: &[T], inp: &[T], g: &Geometry, ky: usize, kx: usize) -> T {
    let (oy, y0, y1) = g.tap(ky, g.h);
    let (ox, x0, x1) = g.tap(kx, g.w);
    if x0 == x1 {
        return Default::default();
    }
    let width = g.w;
    let mut acc = T::zero();
    for y in y0..y1 {
        let src_row = (y as isize + oy) as usize * width;
        let a = &dout[y * width + x0..y * width + x1];
        let b = &inp[(src_row as isize + x0 as isize + ox) as usize..][..x1 - x0];
        let mut row = T::zero();
        for (&p, &q) in a.iter().zip(b) {
            row += p * q;
        }
        acc += row;
    }
    acc
}

pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    dilation: usize,
    groups: usize,
) -> Result<Tensor<T>> {
    let g = Geometry::check(x, weight, bias, dilation, groups)?;
    let plane = g.h * g.w;
    let (xin, wt) = (x.data(), weight.data());
    let (cpg, opg, kk) = (g.in_per_group(), g.out_per_group(), g.k * g.k);
    let mut out = vec![T::zero(); g.c_out * plane];
    out.par_chunks_mut(plane).enumerate().for_each(|(co, dst)| {
        if let Some(b) = bias {
            dst.fill(b.data()[co]);
        }
        let group = co / opg;
        for ci in 0..cpg {
            let src = &xin[(group * cpg + ci) * plane..][..plane];
            let taps = &wt[(co * cpg + ci) * kk..][..kk];
            for ky in 0..g.k {
                for kx in 0..g.k {
                    accumulate_tap(dst, src, &g, ky, kx, taps[ky * g.k + kx]);
                }
            }
        }
    });
    Ok(Tensor::from_parts(vec![g.c_out, g.h, g.w], out))
}

pub fn conv2d_backward_input<T: Scalar>(
    dout: &Tensor<T>,
    x_shape: &[usize],
    weight: &Tensor<T>,
    dilation: usize,
    groups: usize,
) -> Tensor<T> {
    let probe = Tensor::<T>::zeros(x_shape);
    let g = Geometry::check(&probe, weight, None, dilation, groups).expect("checked in forward");
    let plane = g.h * g.w;
    let (dy, wt) = (dout.data(), weight.data());
    let (cpg, opg, kk) = (g.in_per_group(), g.out_per_group(), g.k * g.k);
    let mut dx = vec![T::zero(); g.c_in * plane];
    dx.par_chunks_mut(plane).enumerate().for_each(|(cin, dst)| {
        let group = cin / cpg;
        let ci = cin % cpg;
        for co in group * opg..(group + 1) * opg {
            let src = &dy[co * plane..][..plane];
            let taps = &wt[(co * cpg + ci) * kk..][..kk];
            for ky in 0..g.k {
                for kx in 0..g.k {
                    scatter_tap(dst, src, &g, ky, kx, taps[ky * g.k + kx]);
                }
            }
        }
    });
    Tensor::from_parts(x_shape.to_vec(), dx)
}

pub fn conv2d_backward_weight<T: Scalar>(
    dout: &Tensor<T>,
    x: &Tensor<T>,
    weight_shape: &[usize],
    dilation: usize,
    groups: usize,
) -> Tensor<T> {
    let probe = Tensor::<T>::zeros(weight_shape);
    let g = Geometry::check(x, &probe, None, dilation, groups).expect("checked in forward");
    let plane = g.h * g.w;
    let (dy, xin) = (dout.data(), x.data());
    let (cpg, opg, kk) = (g.in_per_group(), g.out_per_group(), g.k * g.k);
    let mut dw = vec![T::zero(); g.c_out * cpg * kk];
    dw.par_chunks_mut(cpg * kk).enumerate().for_each(|(co, dst)| {
        let group = co / opg;
        let src = &dy[co * plane..][..plane];
        for ci in 0..cpg {
            let inp = &xin[(group * cpg + ci) * plane..][..plane];
            for ky in 0..g.k {
                for kx in 0..g.k {
                    dst[ci * kk + ky * g.k + kx] = correlate_tap(src, inp, &g, ky, kx);
                }
            }
        }
    });
    Tensor::from_parts(weight_shape.to_vec(), dw)
}

fn channel_sums<T: Scalar>(dout: &Tensor<T>) -> Tensor<T> {
    let c = dout.shape()[0];
    let plane = dout.numel() / c;
    let sums = dout.data().chunks_exact(plane).map(|p| p.iter().fold(T::zero(), |a, &b| a + b)).collect();
    Tensor::from_parts(vec![c], sums)
}

impl<'t, T: Scalar> Var<'t, T> {
    /// Same-padded convolution of a `[C_in, H, W]` map.
    pub fn conv2d(
        self,
        weight: Var<'t, T>,
        bias: Option<Var<'t, T>>,
        dilation: usize,
        groups: usize,
    ) -> Result<Var<'t, T>> {
        let (x, w) = (self.value(), weight.value());
        let b = bias.map(|b| b.value());
        let out = conv2d_forward(&x, &w, b.as_ref(), dilation, groups)?;
        let mut parents = vec![self, weight];
        parents.extend(bias);
        Ok(self.tape().push(
            "conv2d",
            out,
            &parents,
            Box::new(move |g, needs| {
                let mut grads = vec![
                    needs[0].then(|| conv2d_backward_input(g, x.shape(), &w, dilation, groups)),
                    needs[1].then(|| conv2d_backward_weight(g, &x, w.shape(), dilation, groups)),
                ];
                if needs.len() > 2 {
                    grads.push(needs[2].then(|| channel_sums(g)));
                }
                grads
            }),
        ))
    }
}

impl<'t, T: Scalar> Conv2d<Var<'t, T>> {
    pub fn forward(&self, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.conv2d(self.weight, self.bias, self.dilation, self.groups)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::data::rng::CounterRng;

    /// Direct quadruple loop with explicit bounds tests.
    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>, d: usize, groups: usize) -> Vec<f64> {
        let (ci_n, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (co_n, cpg, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
        let opg = co_n / groups;
        let pad = ((k - 1) * d / 2) as i64;
        let mut out = vec![0.0; co_n * h * wd];
        for co in 0..co_n {
            for y in 0..h {
                for xx in 0..wd {
                    let mut s = b.map_or(0.0, |b| b.data()[co]);
                    for c in 0..cpg {
                        let cin = (co / opg) * cpg + c;
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = y as i64 + (ky * d) as i64 - pad;
                                let ix = xx as i64 + (kx * d) as i64 - pad;
                                if iy >= 0 && iy < h as i64 && ix >= 0 && ix < wd as i64 {
                                    s += w.data()[((co * cpg + c) * k + ky) * k + kx]
                                        * x.data()[(cin * h + iy as usize) * wd + ix as usize];
                                }
                            }
                        }
                    }
                    out[(co * h + y) * wd + xx] = s;
                }
            }
        }
        let _ = ci_n;
        out
    }

    #[test]
    fn identity_kernel() {
        let x = CounterRng::new(1).uniform_tensor::<f64>(&[1, 4, 5], -1.0, 1.0);
        let w = Tensor::ones(&[1, 1, 1, 1]);
        let b = Tensor::zeros(&[1]);
        let y = conv2d_forward(&x, &w, Some(&b), 1, 1).unwrap();
        assert!(y.bitwise_eq(&x));
    }

    #[test]
    fn all_ones_counts_overlap() {
        let x = Tensor::<f64>::ones(&[1, 3, 3]);
        let y = conv2d_forward(&x, &Tensor::ones(&[1, 1, 3, 3]), None, 1, 1).unwrap();
        assert_eq!(y.data()[4], 9.0);
        assert_eq!(y.data()[0], 4.0);
        assert_eq!(y.data()[1], 6.0);
    }

    #[test]
    fn even_kernel_rejected() {
        let x = Tensor::<f64>::ones(&[1, 3, 3]);
        assert!(matches!(
            conv2d_forward(&x, &Tensor::ones(&[1, 1, 2, 2]), None, 1, 1),
            Err(Error::EvenKernel(2))
        ));
        assert!(matches!(
            conv2d_forward(&x, &Tensor::ones(&[1, 2, 3, 3]), None, 1, 1),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn matches_naive_oracle() {
        let mut rng = CounterRng::new(2);
        for &(ci, co, k, d, groups, h, w) in &[
            (2, 2, 3, 2, 2, 5, 5),
            (3, 4, 3, 1, 1, 6, 4),
            (4, 4, 5, 3, 4, 7, 9),
            (2, 6, 1, 1, 2, 3, 3),
            (1, 2, 7, 1, 1, 4, 4), // kernel wider than the image
        ] {
            let x = rng.uniform_tensor::<f64>(&[ci, h, w], -1.0, 1.0);
            let wt = rng.uniform_tensor::<f64>(&[co, ci / groups, k, k], -1.0, 1.0);
            let b = rng.uniform_tensor::<f64>(&[co], -1.0, 1.0);
            let y = conv2d_forward(&x, &wt, Some(&b), d, groups).unwrap();
            let expect = naive_conv(&x, &wt, Some(&b), d, groups);
            let diff = y.data().iter().zip(&expect).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(diff < 1e-12, "case {:?}: {diff}", (ci, co, k, d, groups));
        }
    }

    #[test]
    fn linear_in_input() {
        let mut rng = CounterRng::new(3);
        let x = rng.uniform_tensor::<f64>(&[2, 6, 6], -1.0, 1.0);
        let z = rng.uniform_tensor::<f64>(&[2, 6, 6], -1.0, 1.0);
        let w = rng.uniform_tensor::<f64>(&[3, 2, 3, 3], -1.0, 1.0);
        let (a, b) = (0.7, -1.3);
        let lhs = conv2d_forward(&x.scale(a).add(&z.scale(b)).unwrap(), &w, None, 2, 1).unwrap();
        let rhs = conv2d_forward(&x, &w, None, 2, 1)
            .unwrap()
            .scale(a)
            .add(&conv2d_forward(&z, &w, None, 2, 1).unwrap().scale(b))
            .unwrap();
        for (p, q) in lhs.data().iter().zip(rhs.data()) {
            assert!((p - q).abs() <= 1e-10 * p.abs().max(1.0));
        }
    }

    #[test]
    fn depthwise_permutation_equivariance() {
        let mut rng = CounterRng::new(4);
        let x = rng.uniform_tensor::<f64>(&[3, 5, 5], -1.0, 1.0);
        let w = rng.uniform_tensor::<f64>(&[3, 1, 3, 3], -1.0, 1.0);
        let y = conv2d_forward(&x, &w, None, 1, 3).unwrap();
        let perm = [2usize, 0, 1];
        let permute = |t: &Tensor<f64>| {
            let parts = t.split(0, &[1, 1, 1]).unwrap();
            Tensor::concat(&perm.map(|i| parts[i].clone()), 0).unwrap()
        };
        let yp = conv2d_forward(&permute(&x), &permute(&w), None, 1, 3).unwrap();
        assert!(yp.bitwise_eq(&permute(&y)));
    }

    #[test]
    fn gradcheck_conv_variants() {
        let mut rng = CounterRng::new(5);
        for &(ci, co, k, d, groups, h, w) in &[(2, 3, 3, 1, 1, 4, 4), (4, 4, 3, 2, 4, 5, 5), (2, 2, 5, 1, 2, 3, 6)] {
            let r = rng.uniform_tensor::<f64>(&[co, h, w], -1.0, 1.0);
            let params = vec![
                ("x".into(), rng.uniform_tensor(&[ci, h, w], -1.0, 1.0)),
                ("w".into(), rng.uniform_tensor(&[co, ci / groups, k, k], -1.0, 1.0)),
                ("b".into(), rng.uniform_tensor(&[co], -1.0, 1.0)),
            ];
            let rep = grad_check(
                "conv2d",
                |t, p| Ok(p[0].conv2d(p[1], Some(p[2]), d, groups)?.mul(t.constant(r.clone()))?.sum()),
                &params,
                1e-6,
                1e-4,
            )
            .unwrap();
            assert!(rep.pass, "{rep:?}");
        }
    }
}
