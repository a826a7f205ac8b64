//! Central-difference gradient checking.

use rayon::prelude::*;
use serde::Serialize;

use super::{Mode, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
    /// Coordinates whose ±eps perturbation flipped a discrete choice.
    pub skipped: usize,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub name: String,
    pub eps: f64,
    pub tol: f64,
    pub max_rel_err: f64,
    pub params: Vec<ParamCheck>,
    pub pass: bool,
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1e-8f64.max(analytic.abs()).max(numeric.abs())
}

fn eval<F>(f: &F, params: &[Tensor<f64>]) -> Result<(f64, u64)>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let tape = Tape::new(Mode::Infer);
    let vars: Vec<_> = params.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&tape, &vars)?;
    let v = out.value();
    if v.rank() != 0 {
        return Err(Error::NotScalarLoss(v.shape().to_vec()));
    }
    Ok((v.item(), tape.choice_digest()))
}

/// Compares tape gradients of the scalar program `f` against
/// `(f(θ+ε) − f(θ−ε)) / 2ε` for every coordinate of every parameter.
pub fn grad_check<F>(
    name: &str,
    f: F,
    params: &[(String, Tensor<f64>)],
    eps: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>> + Sync,
{
    let values: Vec<Tensor<f64>> = params.iter().map(|(_, t)| t.clone()).collect();

    let tape = Tape::new(Mode::Train);
    let vars: Vec<_> = params
        .iter()
        .map(|(n, t)| tape.param_named(n, t.clone()))
        .collect();
    let loss = f(&tape, &vars)?;
    let base = loss.value();
    if base.rank() != 0 {
        return Err(Error::NotScalarLoss(base.shape().to_vec()));
    }
    let base_digest = tape.choice_digest();
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| grads.wrt(v)).collect();

    let (again, again_digest) = eval(&f, &values)?;
    if again.to_bits() != base.item().to_bits() || again_digest != base_digest {
        return Err(Error::NonDeterministicFn(base.item(), again));
    }

    let mut checks = Vec::with_capacity(params.len());
    for (pi, (pname, _)) in params.iter().enumerate() {
        let coords: Vec<Result<Option<f64>>> = (0..values[pi].numel())
            .into_par_iter()
            .map(|c| {
                let mut shifted = values.clone();
                let x0 = values[pi].data()[c];
                shifted[pi].data_mut()[c] = x0 + eps;
                let (fp, dp) = eval(&f, &shifted)?;
                shifted[pi].data_mut()[c] = x0 - eps;
                let (fm, dm) = eval(&f, &shifted)?;
                if dp != base_digest || dm != base_digest {
                    return Ok(None);
                }
                let numeric = (fp - fm) / (2.0 * eps);
                Ok(Some(rel_err(analytic[pi].data()[c], numeric)))
            })
            .collect();
        let mut max_rel_err = 0.0f64;
        let (mut checked, mut skipped) = (0, 0);
        for r in coords {
            match r? {
                Some(e) => {
                    checked += 1;
                    max_rel_err = max_rel_err.max(e);
                }
                None => skipped += 1,
            }
        }
        checks.push(ParamCheck {
            name: pname.clone(),
            max_rel_err,
            checked,
            skipped,
            pass: max_rel_err < tol,
        });
    }
    let max_rel_err = checks.iter().map(|c| c.max_rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport {
        name: name.to_string(),
        eps,
        tol,
        max_rel_err,
        pass: checks.iter().all(|c| c.pass),
        params: checks,
    })
}
