//! Dynamic multi-scale kernel module.
//!
//! Global channel statistics pick one small and one large depthwise kernel
//! per input. The picked kernels run as a cascade on a half-width
//! projection, and spatial then channel attention fuse the two scales
//! before a residual add.
//!
//! The pick is a hard argmax in every mode. During training the selector
//! logits still receive a gradient: the selected branch is treated as if it
//! had been scaled by its own softmax weight (straight-through), while the
//! branch itself passes its gradient through unchanged.

use serde::{Deserialize, Serialize};

use crate::autodiff::{concat, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, PoolMode};
use crate::params::{conv_template, scoped, ParamTree};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// One bank entry: odd kernel size and dilation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KernelSpec(pub usize, pub usize);

impl KernelSpec {
    pub fn kernel(self) -> usize {
        self.0
    }

    pub fn dilation(self) -> usize {
        self.1
    }

    /// Spatial span `(k − 1)·d + 1`.
    pub fn receptive_field(self) -> usize {
        (self.0 - 1) * self.1 + 1
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BankConfig {
    pub small: Vec<KernelSpec>,
    pub large: Vec<KernelSpec>,
}

impl Default for BankConfig {
    fn default() -> Self {
        Self {
            small: vec![KernelSpec(3, 1), KernelSpec(5, 1)],
            large: vec![KernelSpec(7, 2), KernelSpec(9, 3)],
        }
    }
}

/// Which scales feed the two cascade stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelStrategy {
    /// Both stages draw from the small bank.
    SmallOnly,
    /// Both stages draw from the large bank.
    LargeOnly,
    #[default]
    Both,
}

impl KernelStrategy {
    pub const ALL: [KernelStrategy; 3] = [Self::SmallOnly, Self::LargeOnly, Self::Both];

    pub fn name(self) -> &'static str {
        match self {
            Self::SmallOnly => "small_only",
            Self::LargeOnly => "large_only",
            Self::Both => "both",
        }
    }
}

impl BankConfig {
    /// Banks actually used by the two stages under `strategy`.
    pub fn for_strategy(&self, strategy: KernelStrategy) -> BankConfig {
        match strategy {
            KernelStrategy::Both => self.clone(),
            KernelStrategy::SmallOnly => BankConfig {
                small: self.small.clone(),
                large: self.small.clone(),
            },
            KernelStrategy::LargeOnly => BankConfig {
                small: self.large.clone(),
                large: self.large.clone(),
            },
        }
    }

    /// Non-empty banks of odd kernels with positive dilation. With
    /// `ordered`, every large entry must see farther than every small one.
    pub fn validate(&self, ordered: bool) -> Result<()> {
        for (name, bank) in [("small", &self.small), ("large", &self.large)] {
            if bank.is_empty() {
                return Err(Error::BadConfig(format!("{name} kernel bank is empty")));
            }
            for &spec in bank {
                if spec.kernel() % 2 == 0 {
                    return Err(Error::EvenKernel(spec.kernel()));
                }
                if spec.dilation() == 0 {
                    return Err(Error::BadConfig(format!("{name} bank entry {spec:?} has zero dilation")));
                }
            }
        }
        if ordered {
            let small_max = self.small.iter().map(|s| s.receptive_field()).max().unwrap_or(0);
            let large_min = self.large.iter().map(|s| s.receptive_field()).min().unwrap_or(0);
            if large_min <= small_max {
                return Err(Error::BadConfig(format!(
                    "large bank receptive field {large_min} does not exceed small bank {small_max}"
                )));
            }
        }
        Ok(())
    }
}

/// Learnable part of the module for `C` channels.
#[derive(Debug, Clone)]
pub struct DmskParams<P> {
    /// 1×1, `C → |small bank|`.
    pub select_s: Conv2d<P>,
    /// 1×1, `C → |large bank|`.
    pub select_b: Conv2d<P>,
    /// 1×1, `C → C/2`.
    pub project: Conv2d<P>,
    /// Depthwise convolutions over `C/2` channels.
    pub bank_s: Vec<Conv2d<P>>,
    pub bank_b: Vec<Conv2d<P>>,
    /// 7×7, `2 → 2`: average and max maps in, two fusion maps out.
    pub spatial: Conv2d<P>,
    /// 1×1, `C → C` on the pooled fused features.
    pub channel: Conv2d<P>,
}

impl<P> ParamTree<P> for DmskParams<P> {
    type Mapped<Q> = DmskParams<Q>;

    fn map_params<Q>(&self, scope: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> DmskParams<Q> {
        DmskParams {
            select_s: self.select_s.map_params(&scoped(scope, "select_s"), f),
            select_b: self.select_b.map_params(&scoped(scope, "select_b"), f),
            project: self.project.map_params(&scoped(scope, "project"), f),
            bank_s: self.bank_s.map_params(&scoped(scope, "bank_s"), f),
            bank_b: self.bank_b.map_params(&scoped(scope, "bank_b"), f),
            spatial: self.spatial.map_params(&scoped(scope, "spatial"), f),
            channel: self.channel.map_params(&scoped(scope, "channel"), f),
        }
    }
}

pub const SPATIAL_KERNEL: usize = 7;

impl<T: Scalar> DmskParams<Tensor<T>> {
    /// Zero-filled parameters for `c` channels. Banks are used as given;
    /// call [`BankConfig::validate`] first for the ordering check.
    pub fn template(c: usize, banks: &BankConfig) -> Result<Self> {
        if c % 2 != 0 {
            return Err(Error::OddChannels(c));
        }
        banks.validate(false)?;
        let half = c / 2;
        let bank = |specs: &[KernelSpec]| -> Vec<Conv2d<Tensor<T>>> {
            specs
                .iter()
                .map(|s| conv_template(half, half, s.kernel(), s.dilation(), half, true))
                .collect()
        };
        Ok(Self {
            select_s: conv_template(c, banks.small.len(), 1, 1, 1, true),
            select_b: conv_template(c, banks.large.len(), 1, 1, 1, true),
            project: conv_template(c, half, 1, 1, 1, true),
            bank_s: bank(&banks.small),
            bank_b: bank(&banks.large),
            spatial: conv_template(2, 2, SPATIAL_KERNEL, 1, 1, true),
            channel: conv_template(c, c, 1, 1, 1, true),
        })
    }

    pub fn channels(&self) -> usize {
        self.channel.weight.shape()[0]
    }
}

/// Closed-form parameter count, used to guard against shape drift.
pub fn dmsk_param_count(c: usize, banks: &BankConfig) -> usize {
    let half = c / 2;
    let dw = |s: &KernelSpec| half * s.kernel() * s.kernel() + half;
    (c + 1) * banks.small.len()
        + (c + 1) * banks.large.len()
        + (c + 1) * half
        + banks.small.iter().map(dw).sum::<usize>()
        + banks.large.iter().map(dw).sum::<usize>()
        + 2 * 2 * SPATIAL_KERNEL * SPATIAL_KERNEL
        + 2
        + (c + 1) * c
}

/// Outcome of the kernel pick.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub idx_s: usize,
    pub w_s: Vec<f64>,
    pub idx_b: usize,
    pub w_b: Vec<f64>,
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax<T: Scalar>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn selector_logits<T: Scalar>(x_gap: &Tensor<T>, conv: &Conv2d<Tensor<T>>) -> Result<Tensor<T>> {
    let c = x_gap.numel();
    let col = x_gap.reshape(&[c, 1, 1])?;
    let out = crate::nn::conv2d_forward(&col, &conv.weight, conv.bias.as_ref(), 1, 1)?;
    out.reshape(&[out.numel()])
}

/// Softmax selection weights and argmax picks from the pooled input.
pub fn select_kernels<T: Scalar>(x_gap: &Tensor<T>, p: &DmskParams<Tensor<T>>) -> Result<Selection> {
    let w_s = crate::nn::softmax(&selector_logits(x_gap, &p.select_s)?)?;
    let w_b = crate::nn::softmax(&selector_logits(x_gap, &p.select_b)?)?;
    Ok(Selection {
        idx_s: argmax(w_s.data()),
        w_s: w_s.data().iter().map(|v| v.as_f64()).collect(),
        idx_b: argmax(w_b.data()),
        w_b: w_b.data().iter().map(|v| v.as_f64()).collect(),
    })
}

impl<'t, T: Scalar> Var<'t, T> {
    /// Straight-through gate: the value is `self` unchanged, and in reverse
    /// `weights[idx]` receives `Σ g ⊙ self`, as if the output had been
    /// `weights[idx] · self`. The other weights receive zero.
    pub fn select_gate(self, weights: Var<'t, T>, idx: usize) -> Var<'t, T> {
        let branch = self.value();
        let n = weights.value().numel();
        self.tape().push(
            "select_gate",
            branch.clone(),
            &[self, weights],
            Box::new(move |g, needs| {
                let dw = needs[1].then(|| {
                    let mut d = vec![T::zero(); n];
                    d[idx] = g.data().iter().zip(branch.data()).fold(T::zero(), |a, (&p, &q)| a + p * q);
                    Tensor::from_parts(vec![n], d)
                });
                vec![Some(g.clone()), dw]
            }),
        )
    }
}

fn pooled_column<'t, T: Scalar>(x: Var<'t, T>) -> Result<Var<'t, T>> {
    let c = x.shape()[0];
    x.gap()?.reshape(&[c, 1, 1])
}

fn selector<'t, T: Scalar>(col: Var<'t, T>, conv: &Conv2d<Var<'t, T>>) -> Result<(Var<'t, T>, usize)> {
    let logits = conv.forward(col)?;
    let n = logits.value().numel();
    let w = logits.reshape(&[n])?.softmax()?;
    let idx = argmax(w.value().data());
    col.tape().record_choice(idx as u64);
    Ok((w, idx))
}

/// Full module on a tape. Returns the output and the pick.
pub fn dmsk_forward<'t, T: Scalar>(x_in: Var<'t, T>, p: &DmskParams<Var<'t, T>>) -> Result<(Var<'t, T>, Selection)> {
    let shape = x_in.shape();
    if shape.len() != 3 {
        return Err(Error::ShapeMismatch(format!("dmsk needs [C,H,W], got {shape:?}")));
    }
    if shape[0] % 2 != 0 {
        return Err(Error::OddChannels(shape[0]));
    }
    let col = pooled_column(x_in)?;
    let (w_s, idx_s) = selector(col, &p.select_s)?;
    let (w_b, idx_b) = selector(col, &p.select_b)?;

    let x = p.project.forward(x_in)?;
    let x1 = p.bank_s[idx_s].forward(x)?.select_gate(w_s, idx_s);
    let x2 = p.bank_b[idx_b].forward(x1)?.select_gate(w_b, idx_b);
    let x_sp = concat(&[x1, x2], 0)?;

    let w_a = x_sp.channel_pool(PoolMode::Avg)?;
    let w_m = x_sp.channel_pool(PoolMode::Max)?;
    let attn = p.spatial.forward(concat(&[w_a, w_m], 0)?)?.sigmoid();
    let w = attn.split(0, &[1, 1])?;
    let x_ch = w[0].mul(x_sp)?.add(w[1].mul(x_sp)?)?;

    let w_ch = p.channel.forward(pooled_column(x_ch)?)?.sigmoid();
    let out = w_ch.mul(x_ch)?.add(x_in)?;

    let sel = Selection {
        idx_s,
        w_s: w_s.value().data().iter().map(|v| v.as_f64()).collect(),
        idx_b,
        w_b: w_b.value().data().iter().map(|v| v.as_f64()).collect(),
    };
    Ok((out, sel))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, Tape};
    use crate::data::rng::CounterRng;
    use crate::nn::{channel_pool, conv2d_forward, gap, sigmoid, softmax};
    use crate::params::{bind, initialize, named_tensors, param_count};

    fn random_params(c: usize, banks: &BankConfig, seed: u64) -> DmskParams<Tensor<f64>> {
        let mut p = initialize(&DmskParams::template(c, banks).unwrap(), seed);
        // non-zero biases so every term of the oracle is exercised
        let mut rng = CounterRng::new(seed ^ 0xb1a5);
        p = p.map_params("", &mut |name, t| {
            if name.ends_with("bias") {
                rng.uniform_tensor(t.shape(), -0.3, 0.3)
            } else {
                t.clone()
            }
        });
        p
    }

    fn run(x: &Tensor<f64>, p: &DmskParams<Tensor<f64>>) -> (Tensor<f64>, Selection) {
        let tape = Tape::inference();
        let bound = bind(p, &tape);
        let (y, sel) = dmsk_forward(tape.constant(x.clone()), &bound).unwrap();
        (y.value(), sel)
    }

    /// Step-by-step composition of the tensor-level primitives.
    fn oracle(x: &Tensor<f64>, p: &DmskParams<Tensor<f64>>) -> Tensor<f64> {
        let conv = |x: &Tensor<f64>, c: &Conv2d<Tensor<f64>>| {
            conv2d_forward(x, &c.weight, c.bias.as_ref(), c.dilation, c.groups).unwrap()
        };
        let c = x.shape()[0];
        let g = gap(x).unwrap().reshape(&[c, 1, 1]).unwrap();
        let ws = softmax(&conv(&g, &p.select_s).reshape(&[p.bank_s.len()]).unwrap()).unwrap();
        let wb = softmax(&conv(&g, &p.select_b).reshape(&[p.bank_b.len()]).unwrap()).unwrap();
        let (ks, kb) = (argmax(ws.data()), argmax(wb.data()));
        let proj = conv(x, &p.project);
        let x1 = conv(&proj, &p.bank_s[ks]);
        let x2 = conv(&x1, &p.bank_b[kb]);
        let x_sp = Tensor::concat(&[x1, x2], 0).unwrap();
        let (avg, _) = channel_pool(&x_sp, PoolMode::Avg).unwrap();
        let (max, _) = channel_pool(&x_sp, PoolMode::Max).unwrap();
        let att = conv(&Tensor::concat(&[avg, max], 0).unwrap(), &p.spatial).map(sigmoid);
        let (h, w) = (x.shape()[1], x.shape()[2]);
        let mut x_ch = vec![0.0; c * h * w];
        for ch in 0..c {
            for i in 0..h * w {
                let v = x_sp.data()[ch * h * w + i];
                x_ch[ch * h * w + i] = att.data()[i] * v + att.data()[h * w + i] * v;
            }
        }
        let x_ch = Tensor::new(vec![c, h, w], x_ch).unwrap();
        let wch = conv(&gap(&x_ch).unwrap().reshape(&[c, 1, 1]).unwrap(), &p.channel).map(sigmoid);
        let mut out = x.to_vec();
        for ch in 0..c {
            for i in 0..h * w {
                out[ch * h * w + i] += wch.data()[ch] * x_ch.data()[ch * h * w + i];
            }
        }
        Tensor::new(vec![c, h, w], out).unwrap()
    }

    #[test]
    fn select_gate_passes_branch_and_credits_the_pick() {
        let mut g = CounterRng::new(3);
        let b = g.uniform_tensor::<f64>(&[2, 3, 3], -1.0, 1.0);
        let r = g.uniform_tensor::<f64>(&[2, 3, 3], -1.0, 1.0);
        let w = softmax(&g.uniform_tensor::<f64>(&[3], -1.0, 1.0)).unwrap();
        let tape = Tape::new(crate::autodiff::Mode::Train);
        let (bv, wv) = (tape.param(b.clone()), tape.param(w));
        let y = bv.select_gate(wv, 1);
        assert!(y.value().bitwise_eq(&b));
        let grads = tape.backward(y.mul(tape.constant(r.clone())).unwrap().sum()).unwrap();
        assert!(grads.wrt(bv).bitwise_eq(&r));
        let dw = grads.wrt(wv);
        let expect: f64 = b.data().iter().zip(r.data()).map(|(p, q)| p * q).sum();
        assert_eq!(dw.data()[0], 0.0);
        assert!((dw.data()[1] - expect).abs() < 1e-12);
        assert_eq!(dw.data()[2], 0.0);
    }

    #[test]
    fn zero_parameters_return_input() {
        let banks = BankConfig::default();
        for (c, h, w) in [(2, 3, 5), (4, 8, 8), (6, 1, 1)] {
            let p = DmskParams::<Tensor<f64>>::template(c, &banks).unwrap();
            let x = CounterRng::new(c as u64).uniform_tensor::<f64>(&[c, h, w], -2.0, 2.0);
            let (y, _) = run(&x, &p);
            assert!(y.bitwise_eq(&x));
        }
    }

    #[test]
    fn matches_composed_oracle() {
        let banks = BankConfig::default();
        for seed in 0..4 {
            let p = random_params(4, &banks, seed);
            let x = CounterRng::new(100 + seed).uniform_tensor::<f64>(&[4, 6, 6], -1.0, 1.0);
            let (y, _) = run(&x, &p);
            assert_eq!(y.shape(), &[4, 6, 6]);
            assert!(y.max_abs_diff(&oracle(&x, &p)) < 1e-10);
        }
    }

    #[test]
    fn selection_rules() {
        assert_eq!(argmax(&[0.2, 1.0]), 1);
        assert_eq!(argmax(&[0.5, 0.5, 0.5]), 0);
        let logits = [0.3, -1.2, 0.9, 0.1];
        let base = softmax(&Tensor::vector(&logits)).unwrap();
        for (a, c) in [(1.0, 7.5), (0.25, -3.0), (40.0, 0.0)] {
            let t: Vec<f64> = logits.iter().map(|l| a * l + c).collect();
            let w = softmax(&Tensor::vector(&t)).unwrap();
            assert_eq!(argmax(w.data()), argmax(base.data()));
            assert!((w.sum() - 1.0).abs() < 1e-12);
            if a == 1.0 {
                assert!(w.max_abs_diff(&base) < 1e-12);
            }
        }
    }

    #[test]
    fn select_kernels_agrees_with_forward() {
        let p = random_params(4, &BankConfig::default(), 7);
        let x = CounterRng::new(8).uniform_tensor::<f64>(&[4, 5, 5], -1.0, 1.0);
        let sel = select_kernels(&gap(&x).unwrap(), &p).unwrap();
        let (_, fwd) = run(&x, &p);
        assert_eq!(sel, fwd);
        assert!((sel.w_s.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn unselected_entries_get_zero_gradient() {
        let banks = BankConfig::default();
        let p = random_params(4, &banks, 3);
        let x = CounterRng::new(4).uniform_tensor::<f64>(&[4, 6, 6], -1.0, 1.0);
        let tape = Tape::default();
        let bound = bind(&p, &tape);
        let (y, sel) = dmsk_forward(tape.constant(x), &bound).unwrap();
        let grads = tape.backward(y.mul(y).unwrap().sum()).unwrap();
        for (i, conv) in bound.bank_s.iter().enumerate() {
            let g = grads.wrt(conv.weight);
            assert_eq!(g.data().iter().all(|&v| v == 0.0), i != sel.idx_s);
        }
        for (i, conv) in bound.bank_b.iter().enumerate() {
            let g = grads.wrt(conv.weight);
            assert_eq!(g.data().iter().all(|&v| v == 0.0), i != sel.idx_b);
        }
        // selectors still learn through the straight-through weights
        assert!(grads.wrt(bound.select_s.weight).data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn singleton_banks_gradcheck() {
        let banks = BankConfig {
            small: vec![KernelSpec(3, 1)],
            large: vec![KernelSpec(5, 2)],
        };
        let p = random_params(4, &banks, 11);
        let x = CounterRng::new(12).uniform_tensor::<f64>(&[4, 5, 5], -1.0, 1.0);
        let r = CounterRng::new(13).uniform_tensor::<f64>(&[4, 5, 5], -1.0, 1.0);
        let mut params = vec![("x".to_string(), x)];
        params.extend(named_tensors(&p));
        let template = p.clone();
        let rep = grad_check(
            "dmsk",
            |t, vars| {
                let mut it = vars[1..].iter();
                let bound = template.map_params("", &mut |_, _| *it.next().unwrap());
                let (y, _) = dmsk_forward(vars[0], &bound)?;
                y.mul(t.constant(r.clone()))?.sum().add(y.mul(y)?.mean())
            },
            &params,
            1e-6,
            1e-4,
        )
        .unwrap();
        assert!(rep.pass, "{rep:#?}");
    }

    #[test]
    fn config_rules() {
        assert!(matches!(DmskParams::<Tensor<f64>>::template(3, &BankConfig::default()), Err(Error::OddChannels(3))));
        assert!(BankConfig::default().validate(true).is_ok());
        let bad = BankConfig {
            small: vec![KernelSpec(5, 2)],
            large: vec![KernelSpec(7, 1)],
        };
        assert!(bad.validate(true).is_err());
        assert!(bad.validate(false).is_ok());
        let even = BankConfig {
            small: vec![KernelSpec(4, 1)],
            large: vec![KernelSpec(7, 1)],
        };
        assert!(matches!(even.validate(false), Err(Error::EvenKernel(4))));
        for s in KernelStrategy::ALL {
            let b = BankConfig::default().for_strategy(s);
            let p = DmskParams::<Tensor<f64>>::template(8, &b).unwrap();
            assert_eq!(param_count(&p), dmsk_param_count(8, &b));
        }
    }

    #[test]
    fn deterministic_across_modes() {
        let p = random_params(4, &BankConfig::default(), 21);
        let x = CounterRng::new(22).uniform_tensor::<f64>(&[4, 4, 4], -1.0, 1.0);
        let (a, _) = run(&x, &p);
        let tape = Tape::default();
        let (b, _) = dmsk_forward(tape.constant(x.clone()), &bind(&p, &tape)).unwrap();
        assert!(a.bitwise_eq(&b.value()));
    }
}
