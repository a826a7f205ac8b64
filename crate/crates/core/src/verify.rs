//! Gradient-check suites over every differentiable op and module.
//!
//! Each case builds a random scalar program in f64 and compares its tape
//! gradients with central differences. Inputs to piecewise ops stay away
//! from their kinks; coordinates whose perturbation flips a discrete
//! choice are skipped by the checker itself.

use serde::{Deserialize, Serialize};

use crate::autodiff::{concat, grad_check, GradCheckReport, Tape, Var};
use crate::data::rng::CounterRng;
use crate::data::Mask;
use crate::dmsk::{dmsk_forward, BankConfig, DmskParams, KernelSpec};
use crate::error::Result;
use crate::nn::{PoolMode, LEAKY_SLOPE, NORM_EPS};
use crate::params::{initialize, named_tensors, ParamTree};
use crate::tensor::Tensor;
use crate::train::{seg_loss, LossWeights};
use crate::ttt::{ttt_module_forward, TttConfig, TttParams};
use crate::unet::{dsc_block, unet_forward, DscBlockParams, UNetConfig};

pub const DEFAULT_EPS: f64 = 1e-6;
pub const DEFAULT_TOL: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Ops,
    Dmsk,
    Ttt,
    Unet,
}

impl Suite {
    pub const ALL: [Suite; 4] = [Suite::Ops, Suite::Dmsk, Suite::Ttt, Suite::Unet];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Ops => "ops",
            Suite::Dmsk => "dmsk",
            Suite::Ttt => "ttt",
            Suite::Unet => "unet",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }

    fn cases(self) -> Vec<(&'static str, CaseFn)> {
        match self {
            Suite::Ops => vec![
                ("matmul", matmul),
                ("broadcast_arith", broadcast_arith),
                ("shape_ops", shape_ops),
                ("reductions", reductions),
                ("activations", activations),
                ("conv2d", conv2d),
                ("conv2d_depthwise_dilated", conv2d_depthwise_dilated),
                ("conv2d_grouped_large_kernel", conv2d_grouped),
                ("linear", linear),
                ("norms", norms),
                ("pooling", pooling),
                ("select_gate", select_gate),
                ("ttt_scan", ttt_scan),
                ("seg_loss", seg_loss_case),
            ],
            Suite::Dmsk => vec![("dmsk_singleton_banks", dmsk_module)],
            Suite::Ttt => vec![("ttt_module", ttt_module), ("ttt_module_3x3", ttt_module_3x3)],
            Suite::Unet => vec![("dsc_block", dsc_block_case), ("unet_2level_dsc", unet_2level)],
        }
    }
}

type CaseFn = fn(f64, f64) -> Result<GradCheckReport>;

#[derive(Debug, Clone, Serialize)]
pub struct SuiteReport {
    pub suite: Suite,
    pub eps: f64,
    pub tol: f64,
    pub pass: bool,
    pub max_rel_err: f64,
    pub cases: Vec<GradCheckReport>,
}

pub fn run_suite(suite: Suite, eps: f64, tol: f64) -> Result<SuiteReport> {
    let cases = suite
        .cases()
        .into_iter()
        .map(|(name, f)| {
            let mut r = f(eps, tol)?;
            r.name = name.to_string();
            Ok(r)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SuiteReport {
        suite,
        eps,
        tol,
        pass: cases.iter().all(|c| c.pass),
        max_rel_err: cases.iter().map(|c| c.max_rel_err).fold(0.0, f64::max),
        cases,
    })
}

fn rand(rng: &mut CounterRng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    rng.uniform_tensor(shape, lo, hi)
}

/// Values in `±[lo, hi]` with random signs.
fn off_zero(rng: &mut CounterRng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let mag = rng.uniform_tensor::<f64>(shape, lo, hi);
    let sign = rng.uniform_tensor::<f64>(shape, -1.0, 1.0);
    mag.zip_map(&sign, |m, s| if s < 0.0 { -m } else { m }).unwrap()
}

fn named(items: Vec<(&str, Tensor<f64>)>) -> Vec<(String, Tensor<f64>)> {
    items.into_iter().map(|(n, t)| (n.to_string(), t)).collect()
}

/// Weighted sum `⟨y, r⟩`, which exercises every output coordinate.
fn probe<'t>(y: Var<'t, f64>, r: &Tensor<f64>) -> Result<Var<'t, f64>> {
    Ok(y.mul(y.tape().constant(r.clone()))?.sum())
}

fn matmul(eps: f64, tol: f64) -> Result<GradCheckReport> {
    let mut g = CounterRng::new(1);
    let r = rand(&mut g, &[3, 5], -1.0, 1.0);
    let p = named(vec![("a", rand(&mut g, &[3, 4], -1.0, 1.0)), ("b", rand(&mut g, &[4, 5], -1.0, 1.0))]);
    grad_check("matmul", |_, v| probe(v[0].matmul(v[1])?, &r), &p, eps, tol)
}

fn broadcast_arith(eps: f64, tol: f64) -> Result<GradCheckReport> {
    let mut g = CounterRng::new(2);
    let r = rand(&mut g, &[2, 3, 4], -1.0, 1.0);
    let p = named(vec![
        ("a", rand(&mut g, &[2, 3, 4], -1.0, 1.0)),
        ("b", rand(&mut g, &[3, 1], 1.0, 2.0)),
        ("c", rand(&mut g, &[4], -1.0, 1.0)),
    ]);
    grad_check(
        "broadcast_arith",
        |_, v| probe(v[0].mul(v[1])?.add(v[2])?.sub(v[0].div(v[1])?)?.scale(0.7).add_scalar(0.3), &r),
        &p,
        eps,
        tol,
    )
}

fn shape_ops(eps: f64, tol: f64) -> Result<GradCheckReport> {
    let mut g = CounterRng::new(3);
    let r = rand(&mut g, &[4, 2], -1.0, 1.0);
    let r8 = rand(&mut g, &[8], -1.0, 1.0);
    let p = named(vec![("a", rand(&mut g, &[2, 5], -1.0, 1.0)), ("b", rand(&mut g, &[2, 3], -1.0, 1.0))]);
    grad_check(
        "shape_ops",
        |_, v| {
            let c = concat(&[v[0], v[1]], 1)?;
            let parts = c.split(1, &[4, 4])?;
            let m = parts[1].add(parts[0].exp())?.transpose()?;
            let l = parts[0].mul(parts[0])?.add_scalar(1.0).ln();
            probe(m, &r)?.add(probe(l.reshape(&[8])?, &r8)?)
        },
        &p,
        eps,
        tol,
    )
}

fn reductions(eps: f64, tol: f64) -> Result<GradCheckReport> {
    let mut g = CounterRng::new(4);
    let r = rand(&mut g, &[3], -1.0, 1.0);
    let p = named(vec![("x", rand(&mut g, &[3, 4], -1.0, 1.0))]);
    grad_check(
        "reductions",
        |_, v| {
            let s = probe(v[0].sum_last_axis()?, &r)?;
            s.add(v[0].mul(v[0])?.mean())?.add(v[0].sum().scale(0.25))
        },
        &p,
        eps,
        tol,
    )
}

fn activations(eps: f64, tol: f64) -> Result<GradCheckReport> {
    let mut g = CounterRng::new(5);
    let r = rand(&mut g, &[3, 4], -1.0, 1.0);
    let p = named(vec![("x", off_zero(&mut g, &[3, 4], 0.1, 2.0))]);
    grad_check(
        "activations",
        |_, v| {
            let x = v[0];
            probe(x.relu(), &r)?
                .add(probe(x.leaky_relu(LEAKY_SLOPE), &r)?)?
                .add(probe(x.sigmoid(), &r)?)?
                .add(probe(x.silu(), &r)?)?
                .add(probe(x.softmax()?, &r)?)?
                .add(probe(x.log_softmax_axis0()?, &r)?)
        },
        &p,
        eps,
        tol,
    )
}

fn conv_case(seed: u64, ci: usize, co: usize, k: usize, d: usize, groups: usize, h: usize, w: usize, eps: f64, tol: f64) -> Result<GradCheckReport> {
    let mut g = CounterRng::new(seed);
    let r = rand(&mut g, &[co, h, w], -1.0, 1.0);
    let p = named(vec![
        ("x", rand(&mut g, &[ci, h, w], -1.0, 1.0)),
        ("weight", rand(&mut g, &[co, ci / groups, k, k], -1.0, 1.0)),
        ("bias", rand(&mut g, &[co], -1.0, 1.0)),
    ]);
    grad_check("conv2d", |_, v| probe(v[0].conv2d(v[1], Some(v[2]), d, groups)?, &r), &p, eps, tol)
}

fn conv2d(eps: f64, tol: f64) -> Result<GradCheckReport> {
    conv_case(6, 2, 3, 3, 1, 1, 5, 4, eps, tol)
}

fn conv2d_depthwise_dilated(eps: f64, tol: f64) -> Result<GradCheckReport> {
    conv_case(7, 4, 4, 3, 2, 4, 6, 5, eps, tol)
}

fn conv2d_grouped(eps: f64, tol: f64) -> Result<GradCheckReport> {
    conv_case(8, 4, 2, 7, 1, 2, 4, 4, eps, tol)
}

fn linear(eps: f64, tol: f64) -> Result<GradCheckReport> {
    let mut g = CounterRng::new(9);
    let r = rand(&mut g, &[3, 2], -1.0, 1.0);
    let p = named(vec![
        ("x", rand(&mut g, &[3, 4], -1.0, 1.0)),
        ("weight", rand(&mut g, &[2, 4], -1.0, 1.0)),
        ("bias", rand(&mut g, &[2], -1.0, 1.0)),
    ]);
    grad_check("linear", |_, v| probe(v[0].linear(v[1], Some(v[2]))?, &r), &p, eps, tol)
}

fn norms(eps: f64, tol: f64) -> Result<GradCheckReport> {
    let mut g = CounterRng::new(10);
    let r = rand(&mut g, &[3, 2, 4], -1.0, 1.0);
    let p = named(vec![
        ("x", rand(&mut g, &[3, 2, 4], -2.0, 2.0)),
        ("in_gamma", rand(&mut g, &[3], 0.5, 1.5)),
        ("in_beta", rand(&mut g, &[3], -0.5, 0.5)),
        ("ln_gamma", rand(&mut g, &[4], 0.5, 1.5)),
        ("ln_beta", rand(&mut g, &[4], -0.5, 0.5)),
    ]);
    grad_check(
        "norms",
        |_, v| {
            probe(v[0].instance_norm(v[1], v[2], NORM_EPS)?, &r)?.add(probe(v[0].layer_norm(v[3], v[4], NORM_EPS)?, &r)?)
        },
        &p,
        eps,
        tol,
    )
}

fn pooling(eps: f64, tol: f64) -> Result<GradCheckReport> {
    let mut g = CounterRng::new(11);
    let r_gap = rand(&mut g, &[3], -1.0, 1.0);
    let r_ch = rand(&mut g, &[1, 4, 6], -1.0, 1.0);
    let r_mp = rand(&mut g, &[3, 2, 3], -1.0, 1.0);
    let r_up = rand(&mut g, &[3, 8, 12], -1.0, 1.0);
    let p = named(vec![("x", rand(&mut g, &[3, 4, 6], -1.0, 1.0))]);
    grad_check(
        "pooling",
        |_, v| {
            let x = v[0];
            probe(x.gap()?.reshape(&[3])?, &r_gap)?
                .add(probe(x.channel_pool(PoolMode::Avg)?, &r_ch)?)?
                .add(probe(x.channel_pool(PoolMode::Max)?, &r_ch)?)?
                .add(probe(x.maxpool2()?, &r_mp)?)?
                .add(probe(x.upsample_nearest2()?, &r_up)?)
        },
        &p,
        eps,
        tol,
    )
}

/// Only the branch is checked: the straight-through weight gradient is a
/// surrogate with no finite-difference counterpart.
fn select_gate(eps: f64, tol: f64) -> Result<GradCheckReport> {
    let mut g = CounterRng::new(12);
    let r = rand(&mut g, &[2, 3, 3], -1.0, 1.0);
    let w = crate::nn::softmax(&rand(&mut g, &[3], -1.0, 1.0))?;
    let p = named(vec![("branch", rand(&mut g, &[2, 3, 3], -1.0, 1.0))]);
    grad_check(
        "select_gate",
        |t, v| probe(v[0].select_gate(t.constant(w.clone()), 1), &r),
        &p,
        eps,
        tol,
    )
}

fn ttt_scan(eps: f64, tol: f64) -> Result<GradCheckReport> {
    let mut g = CounterRng::new(13);
    let r = rand(&mut g, &[4, 3], -1.0, 1.0);
    let p = named(vec![
        ("k", rand(&mut g, &[4, 3], -1.0, 1.0)),
        ("v", rand(&mut g, &[4, 3], -1.0, 1.0)),
        ("q", rand(&mut g, &[4, 3], -1.0, 1.0)),
        ("w0", rand(&mut g, &[3, 3], -1.0, 1.0)),
    ]);
    grad_check(
        "ttt_scan",
        |_, v| {
            let (z, _) = v[0].ttt_scan(v[1], v[2], v[3], 0.3)?;
            probe(z, &r)?.add(z.mul(z)?.sum())
        },
        &p,
        eps,
        tol,
    )
}

fn seg_loss_case(eps: f64, tol: f64) -> Result<GradCheckReport> {
    let mut g = CounterRng::new(14);
    let mask = Mask::new(4, 4, (0..16).map(|_| g.below(3) as usize).collect())?;
    let p = named(vec![("logits", rand(&mut g, &[3, 4, 4], -2.0, 2.0))]);
    grad_check("seg_loss", |_, v| seg_loss(v[0], &mask, LossWeights::default()), &p, eps, tol)
}

/// Random non-degenerate values for leaves that initialize to constants.
fn perturbed<M: ParamTree<Tensor<f64>, Mapped<Tensor<f64>> = M>>(tree: &M, seed: u64) -> M {
    let mut g = CounterRng::new(seed);
    tree.map_params("", &mut |name, t| {
        if name.ends_with("bias") || name.ends_with("beta") || name.ends_with("w0") {
            g.uniform_tensor(t.shape(), -0.3, 0.3)
        } else if name.ends_with("gamma") {
            g.uniform_tensor(t.shape(), 0.7, 1.3)
        } else {
            t.clone()
        }
    })
}

/// Checks the map `x ↦ ⟨f(x; θ), r⟩ + mean f²` over `x` and every leaf of `tree`.
fn module_check<M, F>(name: &str, tree: &M, x: Tensor<f64>, out_shape: &[usize], seed: u64, eps: f64, tol: f64, f: F) -> Result<GradCheckReport>
where
    M: ParamTree<Tensor<f64>> + Sync,
    F: for<'t> Fn(Var<'t, f64>, &M::Mapped<Var<'t, f64>>) -> Result<Var<'t, f64>> + Sync,
{
    let r = CounterRng::new(seed).uniform_tensor::<f64>(out_shape, -1.0, 1.0);
    let mut params = vec![("x".to_string(), x)];
    params.extend(named_tensors(tree));
    grad_check(
        name,
        |_: &Tape<f64>, vars| {
            let mut it = vars[1..].iter();
            let bound = tree.map_params("", &mut |_, _| *it.next().unwrap());
            let y = f(vars[0], &bound)?;
            probe(y, &r)?.add(y.mul(y)?.mean())
        },
        &params,
        eps,
        tol,
    )
}

pub fn singleton_banks() -> BankConfig {
    BankConfig {
        small: vec![KernelSpec(3, 1)],
        large: vec![KernelSpec(5, 2)],
    }
}

fn dmsk_module(eps: f64, tol: f64) -> Result<GradCheckReport> {
    let p = perturbed(&initialize(&DmskParams::template(4, &singleton_banks())?, 21), 22);
    let x = CounterRng::new(23).uniform_tensor(&[4, 5, 5], -1.0, 1.0);
    module_check("dmsk", &p, x, &[4, 5, 5], 24, eps, tol, |x, b| Ok(dmsk_forward(x, b)?.0))
}

fn ttt_module(eps: f64, tol: f64) -> Result<GradCheckReport> {
    let p = perturbed(&initialize(&TttParams::template(4, 0.2), 31), 32);
    let x = CounterRng::new(33).uniform_tensor(&[4, 2, 2], -1.0, 1.0);
    module_check("ttt", &p, x, &[4, 2, 2], 34, eps, tol, |x, b| Ok(ttt_module_forward(x, b)?.0))
}

/// Nine tokens of two channels.
fn ttt_module_3x3(eps: f64, tol: f64) -> Result<GradCheckReport> {
    let p = perturbed(&initialize(&TttParams::template(2, 0.2), 35), 36);
    let x = CounterRng::new(37).uniform_tensor(&[2, 3, 3], -1.0, 1.0);
    module_check("ttt", &p, x, &[2, 3, 3], 38, eps, tol, |x, b| Ok(ttt_module_forward(x, b)?.0))
}

fn dsc_block_case(eps: f64, tol: f64) -> Result<GradCheckReport> {
    let block = DscBlockParams {
        dmsk: Some(DmskParams::template(4, &singleton_banks())?),
        ttt: Some(TttParams::template(4, 0.1)),
    };
    let p = perturbed(&initialize(&block, 51), 52);
    let x = CounterRng::new(53).uniform_tensor(&[4, 8, 8], -1.0, 1.0);
    module_check("dsc_block", &p, x, &[4, 8, 8], 54, eps, tol, |x, b| Ok(dsc_block(x, b)?.0))
}

/// The 2-level DSC U-Net used by the gradient suite.
pub fn gradcheck_unet_config() -> UNetConfig {
    UNetConfig {
        channels: vec![4, 8],
        banks: singleton_banks(),
        ttt: TttConfig {
            eta: 0.05,
            ..TttConfig::default()
        },
        ..UNetConfig::default()
    }
}

/// The whole network at the point drawn from `seed`.
///
/// Gate gradients here are small next to the finite-difference noise floor
/// (about 1e-8 absolute at ε = 1e-6), so roughly half of random points hold a
/// coordinate that central differences cannot resolve to 1e-4. The suite uses
/// a fixed point.
fn unet_at(seed: u64, eps: f64, tol: f64) -> Result<GradCheckReport> {
    let cfg = gradcheck_unet_config();
    let p = perturbed(&initialize(&cfg.template::<f64>()?, seed), seed + 1000);
    let x = CounterRng::new(42).uniform_tensor(&[1, 16, 16], 0.0, 1.0);
    module_check("unet", &p, x, &[2, 16, 16], 43, eps, tol, |x, b| Ok(unet_forward(x, b)?.0))
}

fn unet_2level(eps: f64, tol: f64) -> Result<GradCheckReport> {
    unet_at(41, eps, tol)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn op_suite_passes() {
        let r = run_suite(Suite::Ops, DEFAULT_EPS, DEFAULT_TOL).unwrap();
        let failing: Vec<_> = r.cases.iter().filter(|c| !c.pass).collect();
        assert!(r.pass, "{failing:#?}");
        assert!(r.cases.iter().all(|c| c.params.iter().all(|p| p.checked > 0)));
    }

    #[test]
    fn module_suites_pass() {
        for s in [Suite::Dmsk, Suite::Ttt] {
            let r = run_suite(s, DEFAULT_EPS, DEFAULT_TOL).unwrap();
            assert!(r.pass, "{r:#?}");
        }
    }

    #[test]
    fn unet_suite_passes() {
        let r = run_suite(Suite::Unet, DEFAULT_EPS, DEFAULT_TOL).unwrap();
        assert!(r.pass, "{}", r.max_rel_err);
    }

    #[test]
    fn suite_names_round_trip() {
        for s in Suite::ALL {
            assert_eq!(Suite::parse(s.name()), Some(s));
        }
        assert_eq!(Suite::parse("nope"), None);
    }
}
