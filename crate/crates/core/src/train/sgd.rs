//! Heavy-ball SGD: `v ← μ·v + g`, `θ ← θ − lr·v`.

use std::collections::BTreeMap;

use crate::params::ParamTree;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub type Velocity<T> = BTreeMap<String, Tensor<T>>;

/// One update of every leaf of `params`. Leaves without an entry in
/// `grads` are treated as having zero gradient.
pub fn sgd_step<T: Scalar, M: ParamTree<Tensor<T>, Mapped<Tensor<T>> = M>>(
    params: &M,
    grads: &BTreeMap<String, Tensor<T>>,
    velocity: &mut Velocity<T>,
    lr: f64,
    momentum: f64,
) -> M {
    let (lr, mu) = (T::of(lr), T::of(momentum));
    params.map_params("", &mut |name, theta| {
        let v = velocity.entry(name.to_string()).or_insert_with(|| theta.zeros_like());
        let next: Vec<T> = match grads.get(name) {
            Some(g) => v.data().iter().zip(g.data()).map(|(&v, &g)| mu * v + g).collect(),
            None => v.data().iter().map(|&v| mu * v).collect(),
        };
        *v = Tensor::from_parts(theta.shape().to_vec(), next);
        let out = theta.data().iter().zip(v.data()).map(|(&t, &v)| t - lr * v).collect();
        Tensor::from_parts(theta.shape().to_vec(), out)
    })
}
