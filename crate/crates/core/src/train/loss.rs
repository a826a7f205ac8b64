//! Cross-entropy plus soft Dice.

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::data::Mask;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Smoothing added to both sides of every soft Dice ratio.
pub const DICE_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub ce: f64,
    pub dice: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { ce: 1.0, dice: 1.0 }
    }
}

/// `[K, H, W]` indicator of `mask`.
pub fn one_hot<T: Scalar>(mask: &Mask, k: usize) -> Result<Tensor<T>> {
    mask.check_classes(k)?;
    let n = mask.h * mask.w;
    let mut out = vec![T::zero(); k * n];
    for (p, &c) in mask.ids.iter().enumerate() {
        out[c * n + p] = T::one();
    }
    Tensor::new(vec![k, mask.h, mask.w], out)
}

/// `λ_ce · mean pixel CE + λ_dice · (1 − mean over classes of soft Dice)`.
pub fn seg_loss<'t, T: Scalar>(logits: Var<'t, T>, mask: &Mask, w: LossWeights) -> Result<Var<'t, T>> {
    let shape = logits.shape();
    let k = match *shape.as_slice() {
        [k, h, ww] if h == mask.h && ww == mask.w => k,
        _ => {
            return Err(Error::ShapeMismatch(format!(
                "logits {shape:?} for a {}x{} mask",
                mask.h, mask.w
            )))
        }
    };
    let n = mask.h * mask.w;
    let tape = logits.tape();
    let y = one_hot::<T>(mask, k)?;
    let y_sum = tape.constant(y.reshape(&[k, n])?.sum_last_axis()?);
    let y = tape.constant(y);

    let log_p = logits.log_softmax_axis0()?;
    let ce = log_p.mul(y)?.sum().scale(-1.0 / n as f64);

    let p = log_p.exp();
    let inter = p.mul(y)?.reshape(&[k, n])?.sum_last_axis()?;
    let p_sum = p.reshape(&[k, n])?.sum_last_axis()?;
    let dice = inter
        .scale(2.0)
        .add_scalar(DICE_EPS)
        .div(p_sum.add(y_sum)?.add_scalar(DICE_EPS))?;
    let dice_loss = dice.mean().scale(-1.0).add_scalar(1.0);
    ce.scale(w.ce).add(dice_loss.scale(w.dice))
}
