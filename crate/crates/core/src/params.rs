//! Named parameter bundles.
//!
//! Every bundle is generic over its leaf type `P`: `Tensor<T>` for stored
//! weights, `Var<'t, T>` once bound to a tape. [`ParamTree::map_params`]
//! walks the leaves with their dotted names, which is all binding,
//! initialization, optimizer updates and checkpoint I/O need.

use std::collections::{BTreeMap, BTreeSet};

use crate::autodiff::{Grads, Tape, Var};
use crate::data::rng::{fnv1a, CounterRng};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Linear, Norm};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub trait ParamTree<P> {
    type Mapped<Q>;

    fn map_params<Q>(&self, scope: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> Self::Mapped<Q>;
}

pub fn scoped(scope: &str, name: &str) -> String {
    if scope.is_empty() {
        name.to_string()
    } else {
        format!("{scope}.{name}")
    }
}

impl<P> ParamTree<P> for Conv2d<P> {
    type Mapped<Q> = Conv2d<Q>;

    fn map_params<Q>(&self, scope: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> Conv2d<Q> {
        Conv2d {
            weight: f(&scoped(scope, "weight"), &self.weight),
            bias: self.bias.as_ref().map(|b| f(&scoped(scope, "bias"), b)),
            kernel: self.kernel,
            dilation: self.dilation,
            groups: self.groups,
        }
    }
}

impl<P> ParamTree<P> for Linear<P> {
    type Mapped<Q> = Linear<Q>;

    fn map_params<Q>(&self, scope: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> Linear<Q> {
        Linear {
            weight: f(&scoped(scope, "weight"), &self.weight),
            bias: self.bias.as_ref().map(|b| f(&scoped(scope, "bias"), b)),
        }
    }
}

impl<P> ParamTree<P> for Norm<P> {
    type Mapped<Q> = Norm<Q>;

    fn map_params<Q>(&self, scope: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> Norm<Q> {
        Norm {
            gamma: f(&scoped(scope, "gamma"), &self.gamma),
            beta: f(&scoped(scope, "beta"), &self.beta),
            eps: self.eps,
        }
    }
}

impl<P, M: ParamTree<P>> ParamTree<P> for Vec<M> {
    type Mapped<Q> = Vec<M::Mapped<Q>>;

    fn map_params<Q>(&self, scope: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> Self::Mapped<Q> {
        self.iter()
            .enumerate()
            .map(|(i, m)| m.map_params(&scoped(scope, &i.to_string()), f))
            .collect()
    }
}

impl<P, M: ParamTree<P>> ParamTree<P> for Option<M> {
    type Mapped<Q> = Option<M::Mapped<Q>>;

    fn map_params<Q>(&self, scope: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> Self::Mapped<Q> {
        self.as_ref().map(|m| m.map_params(scope, f))
    }
}

pub fn named_tensors<T: Scalar, M: ParamTree<Tensor<T>>>(tree: &M) -> Vec<(String, Tensor<T>)> {
    let mut out = Vec::new();
    tree.map_params("", &mut |name, t| out.push((name.to_string(), t.clone())));
    out
}

pub fn param_count<T: Scalar, M: ParamTree<Tensor<T>>>(tree: &M) -> usize {
    let mut n = 0;
    tree.map_params("", &mut |_, t| n += t.numel());
    n
}

/// Registers every leaf on `tape` as a named differentiable parameter.
pub fn bind<'t, T: Scalar, M: ParamTree<Tensor<T>>>(tree: &M, tape: &'t Tape<T>) -> M::Mapped<Var<'t, T>> {
    tree.map_params("", &mut |name, t| tape.param_named(name, t.clone()))
}

/// Gradient of every leaf of a bound tree, zero for leaves off the loss path.
pub fn collect_grads<'t, T: Scalar, M: ParamTree<Var<'t, T>>>(bound: &M, grads: &Grads<T>) -> BTreeMap<String, Tensor<T>> {
    let mut out = BTreeMap::new();
    bound.map_params("", &mut |name, v| {
        out.insert(name.to_string(), grads.wrt(*v));
    });
    out
}

pub fn zeroed<T: Scalar, M: ParamTree<Tensor<T>, Mapped<Tensor<T>> = M>>(tree: &M) -> M {
    tree.map_params("", &mut |_, t| t.zeros_like())
}

/// Rebuilds `template` from name-addressed tensors. Every name must be
/// present with the template's shape, and no extra names are allowed.
pub fn from_named<T: Scalar, M: ParamTree<Tensor<T>, Mapped<Tensor<T>> = M>>(
    template: &M,
    named: &BTreeMap<String, Tensor<T>>,
) -> Result<M> {
    let mut problems = Vec::new();
    let mut seen = BTreeSet::new();
    let rebuilt = template.map_params("", &mut |name, t| {
        seen.insert(name.to_string());
        match named.get(name) {
            Some(v) if v.shape() == t.shape() => v.clone(),
            Some(v) => {
                problems.push(format!("{name}: shape {:?}, expected {:?}", v.shape(), t.shape()));
                t.clone()
            }
            None => {
                problems.push(format!("{name}: missing"));
                t.clone()
            }
        }
    });
    problems.extend(named.keys().filter(|k| !seen.contains(*k)).map(|k| format!("{k}: unknown")));
    if problems.is_empty() {
        Ok(rebuilt)
    } else {
        Err(Error::ManifestMismatch(problems.join("; ")))
    }
}

/// How a freshly built leaf should be filled.
fn init_rule(name: &str) -> InitRule {
    let leaf = name.rsplit('.').next().unwrap_or(name);
    match leaf {
        "gamma" => InitRule::Ones,
        "weight" => InitRule::FanIn,
        _ => InitRule::Zeros,
    }
}

enum InitRule {
    Zeros,
    Ones,
    FanIn,
}

/// Deterministic initialization keyed by `(seed, parameter name)`:
/// weights ~ U(−1/√fan_in, 1/√fan_in), norm scales 1, everything else
/// (biases, norm shifts, the inner-model start state) 0.
pub fn initialize<T: Scalar, M: ParamTree<Tensor<T>, Mapped<Tensor<T>> = M>>(tree: &M, seed: u64) -> M {
    let root = CounterRng::new(seed);
    tree.map_params("", &mut |name, t| match init_rule(name) {
        InitRule::Zeros => t.zeros_like(),
        InitRule::Ones => t.ones_like(),
        InitRule::FanIn => {
            let fan_in = (t.numel() / t.shape()[0]).max(1);
            let bound = 1.0 / (fan_in as f64).sqrt();
            root.fork(fnv1a(name.as_bytes())).uniform_tensor(t.shape(), -bound, bound)
        }
    })
}

pub fn conv_template<T: Scalar>(c_in: usize, c_out: usize, kernel: usize, dilation: usize, groups: usize, bias: bool) -> Conv2d<Tensor<T>> {
    Conv2d {
        weight: Tensor::zeros(&[c_out, c_in / groups, kernel, kernel]),
        bias: bias.then(|| Tensor::zeros(&[c_out])),
        kernel,
        dilation,
        groups,
    }
}

pub fn linear_template<T: Scalar>(n_in: usize, n_out: usize, bias: bool) -> Linear<Tensor<T>> {
    Linear {
        weight: Tensor::zeros(&[n_out, n_in]),
        bias: bias.then(|| Tensor::zeros(&[n_out])),
    }
}

pub fn norm_template<T: Scalar>(c: usize) -> Norm<Tensor<T>> {
    Norm {
        gamma: Tensor::ones(&[c]),
        beta: Tensor::zeros(&[c]),
        eps: crate::nn::NORM_EPS,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_and_round_trip() {
        let tree = vec![conv_template::<f64>(2, 4, 3, 1, 1, true), conv_template(4, 4, 1, 1, 1, false)];
        let names: Vec<String> = named_tensors(&tree).into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, ["0.weight", "0.bias", "1.weight"]);
        let init = initialize(&tree, 9);
        assert_eq!(param_count(&init), 4 * 2 * 9 + 4 + 16);
        let map: BTreeMap<_, _> = named_tensors(&init).into_iter().collect();
        let back = from_named(&tree, &map).unwrap();
        for ((_, a), (_, b)) in named_tensors(&back).iter().zip(named_tensors(&init).iter()) {
            assert!(a.bitwise_eq(b));
        }
    }

    #[test]
    fn init_is_keyed_by_name() {
        let a = initialize(&vec![conv_template::<f64>(2, 2, 3, 1, 1, true)], 5);
        let b = initialize(&vec![conv_template::<f64>(2, 2, 3, 1, 1, true)], 5);
        assert!(a[0].weight.bitwise_eq(&b[0].weight));
        assert!(a[0].bias.as_ref().unwrap().data().iter().all(|&v| v == 0.0));
        let bound = 1.0 / 18f64.sqrt();
        assert!(a[0].weight.data().iter().all(|v| v.abs() <= bound));
        let c = initialize(&vec![conv_template::<f64>(2, 2, 3, 1, 1, true)], 6);
        assert!(!a[0].weight.bitwise_eq(&c[0].weight));
    }

    #[test]
    fn mismatches_reported() {
        let tree = vec![linear_template::<f64>(3, 2, true)];
        let mut map: BTreeMap<_, _> = named_tensors(&tree).into_iter().collect();
        map.insert("0.weight".into(), Tensor::zeros(&[2, 4]));
        map.insert("extra".into(), Tensor::zeros(&[1]));
        map.remove("0.bias");
        match from_named(&tree, &map) {
            Err(Error::ManifestMismatch(msg)) => {
                assert!(msg.contains("0.weight: shape"));
                assert!(msg.contains("0.bias: missing"));
                assert!(msg.contains("extra: unknown"));
            }
            other => panic!("{:?}", other.err()),
        }
    }
}
