//! Test-time-training module.
//!
//! The hidden state is the weight matrix `W` of a linear inner model. Each
//! token takes one gradient step on `‖W k − v‖²` and is then read out as
//! `W q` with the updated weights. The scan runs identically at training
//! and inference time; outer gradients flow back through every inner step.

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Linear, Norm, LEAKY_SLOPE};
use crate::params::{conv_template, linear_template, norm_template, scoped, ParamTree};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Token traversal order over the spatial grid. Only row-major is offered.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenOrder {
    #[default]
    Raster,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TttConfig {
    pub eta: f64,
    #[serde(default)]
    pub token_order: TokenOrder,
    /// Inner gradient steps per token. Must be 1.
    #[serde(default = "one")]
    pub inner_steps: usize,
}

fn one() -> usize {
    1
}

impl Default for TttConfig {
    fn default() -> Self {
        Self {
            eta: 0.1,
            token_order: TokenOrder::Raster,
            inner_steps: 1,
        }
    }
}

impl TttConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta.is_finite() && self.eta > 0.0) {
            return Err(Error::BadConfig(format!("ttt.eta must be positive and finite, got {}", self.eta)));
        }
        if self.inner_steps != 1 {
            return Err(Error::BadConfig(format!("ttt.inner_steps must be 1, got {}", self.inner_steps)));
        }
        Ok(())
    }
}

/// `x + leaky_relu(instance_norm(conv3x3(x)))`.
#[derive(Debug, Clone)]
pub struct ResBlock<P> {
    pub conv: Conv2d<P>,
    pub norm: Norm<P>,
}

impl<P> ParamTree<P> for ResBlock<P> {
    type Mapped<Q> = ResBlock<Q>;

    fn map_params<Q>(&self, scope: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> ResBlock<Q> {
        ResBlock {
            conv: self.conv.map_params(&scoped(scope, "conv"), f),
            norm: self.norm.map_params(&scoped(scope, "norm"), f),
        }
    }
}

impl<'t, T: Scalar> ResBlock<Var<'t, T>> {
    pub fn forward(&self, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let h = self.norm.instance(self.conv.forward(x)?)?.leaky_relu(LEAKY_SLOPE);
        x.add(h)
    }
}

#[derive(Debug, Clone)]
pub struct TttParams<P> {
    pub res: Vec<ResBlock<P>>,
    /// Layer norm over channels at each position.
    pub ln: Norm<P>,
    pub theta_k: Linear<P>,
    pub theta_v: Linear<P>,
    pub theta_q: Linear<P>,
    /// Fourth branch, SiLU applied after.
    pub gate: Linear<P>,
    /// Initial inner weights `[C, C]`.
    pub w0: P,
    pub out_proj: Linear<P>,
    /// Inner learning rate (fixed, not learned).
    pub eta: f64,
}

impl<P> ParamTree<P> for TttParams<P> {
    type Mapped<Q> = TttParams<Q>;

    fn map_params<Q>(&self, scope: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> TttParams<Q> {
        TttParams {
            res: self.res.map_params(&scoped(scope, "res"), f),
            ln: self.ln.map_params(&scoped(scope, "ln"), f),
            theta_k: self.theta_k.map_params(&scoped(scope, "theta_k"), f),
            theta_v: self.theta_v.map_params(&scoped(scope, "theta_v"), f),
            theta_q: self.theta_q.map_params(&scoped(scope, "theta_q"), f),
            gate: self.gate.map_params(&scoped(scope, "gate"), f),
            w0: f(&scoped(scope, "w0"), &self.w0),
            out_proj: self.out_proj.map_params(&scoped(scope, "out_proj"), f),
            eta: self.eta,
        }
    }
}

impl<T: Scalar> TttParams<Tensor<T>> {
    pub fn template(c: usize, eta: f64) -> Self {
        let block = || ResBlock {
            conv: conv_template(c, c, 3, 1, 1, false),
            norm: norm_template(c),
        };
        Self {
            res: vec![block(), block()],
            ln: norm_template(c),
            theta_k: linear_template(c, c, false),
            theta_v: linear_template(c, c, false),
            theta_q: linear_template(c, c, false),
            gate: linear_template(c, c, true),
            w0: Tensor::zeros(&[c, c]),
            out_proj: linear_template(c, c, true),
            eta,
        }
    }
}

pub fn ttt_param_count(c: usize) -> usize {
    2 * (9 * c * c + 2 * c) + 2 * c + 3 * c * c + 2 * (c * c + c) + c * c
}

/// Per-token record of one scan.
#[derive(Debug, Clone, PartialEq)]
pub struct TttTrace<T: Scalar> {
    pub keys: Tensor<T>,
    pub values: Tensor<T>,
    pub queries: Tensor<T>,
    /// `ℓ(W_{t−1}; x_t)` before each update.
    pub losses: Vec<T>,
    pub final_w: Tensor<T>,
}

fn matvec<T: Scalar>(w: &[T], x: &[T], out: &mut [T]) {
    let n = x.len();
    for (o, row) in out.iter_mut().zip(w.chunks_exact(n)) {
        *o = row.iter().zip(x).fold(T::zero(), |a, (&p, &q)| a + p * q);
    }
}

/// `out += Wᵀ x`.
fn matvec_t_acc<T: Scalar>(w: &[T], x: &[T], out: &mut [T]) {
    let n = out.len();
    for (&xi, row) in x.iter().zip(w.chunks_exact(n)) {
        for (o, &r) in out.iter_mut().zip(row) {
            *o += xi * r;
        }
    }
}

/// `W += a ⊗ b` scaled by `s`.
fn rank1_acc<T: Scalar>(w: &mut [T], a: &[T], b: &[T], s: T) {
    let n = b.len();
    for (&ai, row) in a.iter().zip(w.chunks_exact_mut(n)) {
        let f = s * ai;
        for (r, &bj) in row.iter_mut().zip(b) {
            *r += f * bj;
        }
    }
}

/// One inner step in buffers: writes `W_next` and returns the loss before
/// the update. `e` receives the residual `W k − v`.
fn step_in_place<T: Scalar>(w_prev: &[T], k: &[T], v: &[T], eta: T, e: &mut [T], w_next: &mut [T]) -> T {
    matvec(w_prev, k, e);
    let mut loss = T::zero();
    for (ei, &vi) in e.iter_mut().zip(v) {
        *ei -= vi;
        loss += *ei * *ei;
    }
    w_next.copy_from_slice(w_prev);
    rank1_acc(w_next, e, k, -(eta + eta));
    loss
}

/// `W_next = W − η·2(W k − v) kᵀ`, returned with `‖W k − v‖²` before the step.
pub fn ttt_step<T: Scalar>(w_prev: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>, eta: f64) -> Result<(Tensor<T>, T)> {
    let c = k.numel();
    if w_prev.shape() != [c, c] || v.numel() != c {
        return Err(Error::ShapeMismatch(format!(
            "ttt_step W {:?}, k {:?}, v {:?}",
            w_prev.shape(),
            k.shape(),
            v.shape()
        )));
    }
    let mut e = vec![T::zero(); c];
    let mut next = vec![T::zero(); c * c];
    let loss = step_in_place(w_prev.data(), k.data(), v.data(), T::of(eta), &mut e, &mut next);
    Ok((Tensor::from_parts(vec![c, c], next), loss))
}

struct Scan<T> {
    z: Vec<T>,
    /// `W_0 .. W_T`, each `C×C`.
    ws: Vec<T>,
    /// Residuals `e_t`.
    es: Vec<T>,
    losses: Vec<T>,
}

fn scan<T: Scalar>(k: &[T], v: &[T], q: &[T], w0: &[T], c: usize, eta: T) -> Scan<T> {
    let t_len = k.len() / c;
    let cc = c * c;
    let mut ws = vec![T::zero(); (t_len + 1) * cc];
    ws[..cc].copy_from_slice(w0);
    let mut es = vec![T::zero(); t_len * c];
    let mut z = vec![T::zero(); t_len * c];
    let mut losses = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let (done, rest) = ws.split_at_mut((t + 1) * cc);
        let (prev, next) = (&done[t * cc..], &mut rest[..cc]);
        let row = t * c..(t + 1) * c;
        losses.push(step_in_place(prev, &k[row.clone()], &v[row.clone()], eta, &mut es[row.clone()], next));
        matvec(next, &q[row.clone()], &mut z[row]);
    }
    Scan { z, ws, es, losses }
}

fn scan_dims<T: Scalar>(k: &Tensor<T>, v: &Tensor<T>, q: &Tensor<T>, w0: &Tensor<T>) -> Result<(usize, usize)> {
    let (t, c) = match *k.shape() {
        [t, c] => (t, c),
        _ => return Err(Error::ShapeMismatch(format!("ttt tokens must be [T,C], got {:?}", k.shape()))),
    };
    if v.shape() != k.shape() || q.shape() != k.shape() || w0.shape() != [c, c] {
        return Err(Error::ShapeMismatch(format!(
            "ttt scan K {:?} V {:?} Q {:?} W0 {:?}",
            k.shape(),
            v.shape(),
            q.shape(),
            w0.shape()
        )));
    }
    Ok((t, c))
}

/// Tensor-level scan over `[T, C]` key/value/query rows.
pub fn ttt_scan_values<T: Scalar>(
    k: &Tensor<T>,
    v: &Tensor<T>,
    q: &Tensor<T>,
    w0: &Tensor<T>,
    eta: f64,
) -> Result<(Tensor<T>, TttTrace<T>)> {
    let (t, c) = scan_dims(k, v, q, w0)?;
    let s = scan(k.data(), v.data(), q.data(), w0.data(), c, T::of(eta));
    let trace = TttTrace {
        keys: k.clone(),
        values: v.clone(),
        queries: q.clone(),
        losses: s.losses,
        final_w: Tensor::from_parts(vec![c, c], s.ws[t * c * c..].to_vec()),
    };
    Ok((Tensor::from_parts(vec![t, c], s.z), trace))
}

impl<'t, T: Scalar> Var<'t, T> {
    /// Differentiable scan; `self` is `K`. Returns `Z` and the trace.
    pub fn ttt_scan(self, v: Var<'t, T>, q: Var<'t, T>, w0: Var<'t, T>, eta: f64) -> Result<(Var<'t, T>, TttTrace<T>)> {
        let (kt, vt, qt, wt) = (self.value(), v.value(), q.value(), w0.value());
        let (t_len, c) = scan_dims(&kt, &vt, &qt, &wt)?;
        let eta_t = T::of(eta);
        let s = scan(kt.data(), vt.data(), qt.data(), wt.data(), c, eta_t);
        let cc = c * c;
        let trace = TttTrace {
            keys: kt.clone(),
            values: vt.clone(),
            queries: qt.clone(),
            losses: s.losses.clone(),
            final_w: Tensor::from_parts(vec![c, c], s.ws[t_len * cc..].to_vec()),
        };
        let z = Tensor::from_parts(vec![t_len, c], s.z);
        let (ws, es) = (s.ws, s.es);
        let out = self.tape().push(
            "ttt_scan",
            z,
            &[self, v, q, w0],
            Box::new(move |g, _| {
                let (k, q) = (kt.data(), qt.data());
                let gz = g.data();
                let mut gw = vec![T::zero(); cc];
                let mut dk = vec![T::zero(); t_len * c];
                let mut dv = vec![T::zero(); t_len * c];
                let mut dq = vec![T::zero(); t_len * c];
                let mut de = vec![T::zero(); c];
                let two_eta = eta_t + eta_t;
                for t in (0..t_len).rev() {
                    let row = t * c..(t + 1) * c;
                    let (w_prev, w_t) = (&ws[t * cc..(t + 1) * cc], &ws[(t + 1) * cc..(t + 2) * cc]);
                    let (kr, qr, er, dz) = (&k[row.clone()], &q[row.clone()], &es[row.clone()], &gz[row.clone()]);
                    // read-out z = W_t q
                    rank1_acc(&mut gw, dz, qr, T::one());
                    matvec_t_acc(w_t, dz, &mut dq[row.clone()]);
                    // update W_t = W_{t-1} - 2η e kᵀ with e = W_{t-1} k - v
                    matvec(&gw, kr, &mut de);
                    de.iter_mut().for_each(|d| *d = -two_eta * *d);
                    let dkr = &mut dk[row.clone()];
                    let mut ge = vec![T::zero(); c];
                    matvec_t_acc(&gw, er, &mut ge);
                    for (d, &x) in dkr.iter_mut().zip(&ge) {
                        *d = -two_eta * x;
                    }
                    matvec_t_acc(w_prev, &de, dkr);
                    for (d, &x) in dv[row.clone()].iter_mut().zip(&de) {
                        *d = -x;
                    }
                    rank1_acc(&mut gw, &de, kr, T::one());
                }
                let shape = vec![t_len, c];
                vec![
                    Some(Tensor::from_parts(shape.clone(), dk)),
                    Some(Tensor::from_parts(shape.clone(), dv)),
                    Some(Tensor::from_parts(shape, dq)),
                    Some(Tensor::from_parts(vec![c, c], gw)),
                ]
            }),
        );
        Ok((out, trace))
    }
}

/// Projects `[T, C]` tokens to keys, values and queries and runs the scan.
pub fn ttt_layer<'t, T: Scalar>(tokens: Var<'t, T>, p: &TttParams<Var<'t, T>>) -> Result<(Var<'t, T>, TttTrace<T>)> {
    let k = p.theta_k.forward(tokens)?;
    let v = p.theta_v.forward(tokens)?;
    let q = p.theta_q.forward(tokens)?;
    k.ttt_scan(v, q, p.w0, p.eta)
}

/// `[C, H, W] → [C, H, W]`: residual blocks, per-position layer norm,
/// gated scan, output projection.
pub fn ttt_module_forward<'t, T: Scalar>(x: Var<'t, T>, p: &TttParams<Var<'t, T>>) -> Result<(Var<'t, T>, TttTrace<T>)> {
    let shape = x.shape();
    let (c, h, w) = match *shape.as_slice() {
        [c, h, w] => (c, h, w),
        _ => return Err(Error::ShapeMismatch(format!("ttt module needs [C,H,W], got {shape:?}"))),
    };
    let mut feat = x;
    for block in &p.res {
        feat = block.forward(feat)?;
    }
    let tokens = p.ln.layer(feat.reshape(&[c, h * w])?.transpose()?)?;
    let gate = p.gate.forward(tokens)?.silu();
    let (z, trace) = ttt_layer(tokens, p)?;
    let y = p.out_proj.forward(z.mul(gate)?)?;
    Ok((y.transpose()?.reshape(&[c, h, w])?, trace))
}
