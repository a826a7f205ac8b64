//! Loss, metrics, optimizer and the training/evaluation loops.
//!
//! Batch members run forward and backward in parallel on their own tapes.
//! Their losses and gradients are then summed in batch order, so results
//! do not depend on the thread count.

pub mod loss;
pub mod metrics;
pub mod sgd;

use std::collections::BTreeMap;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Mode, Tape};
use crate::data::rng::CounterRng;
use crate::data::SegSample;
use crate::error::{Error, Result};
use crate::params::{bind, collect_grads, initialize};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::unet::{unet_forward, UNetConfig, UNetParams};

pub use loss::{one_hot, seg_loss, LossWeights, DICE_EPS};
pub use metrics::{dice_metric, iou_metric, nsd_metric, predict, score, ClassScores, Scores, DEFAULT_TAU};
pub use sgd::{sgd_step, Velocity};

fn default_lr() -> f64 {
    1e-2
}

fn default_momentum() -> f64 {
    0.99
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default = "one")]
    pub lambda_ce: f64,
    #[serde(default = "one")]
    pub lambda_dice: f64,
    /// Steps between training-set evaluations; 0 evaluates only at the
    /// start and the end.
    #[serde(default)]
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: default_lr(),
            momentum: default_momentum(),
            steps: 500,
            batch_size: 1,
            seed: 0,
            lambda_ce: 1.0,
            lambda_dice: 1.0,
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    /// `lr = 0` is allowed and leaves the parameters untouched.
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::BadConfig(format!("train.lr must be a finite non-negative number, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::BadConfig(format!("train.momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if self.batch_size == 0 {
            return Err(Error::BadConfig("train.batch_size must be at least 1".into()));
        }
        if self.lambda_ce < 0.0 || self.lambda_dice < 0.0 {
            return Err(Error::BadConfig("train.lambda_ce and train.lambda_dice must be non-negative".into()));
        }
        Ok(())
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            ce: self.lambda_ce,
            dice: self.lambda_dice,
        }
    }
}

/// Scores and mean loss of a parameter set on a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(flatten)]
    pub scores: Scores,
    pub tau: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    /// Mean loss of the batch consumed at this step, before the update.
    pub loss: f64,
    /// Training-set Dice, at evaluation steps only.
    pub dice: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Training-set evaluation after the last step.
    #[serde(rename = "final")]
    pub final_eval: EvalReport,
    /// Training-set mean loss before the first step.
    pub initial_loss: f64,
    pub steps: usize,
    pub loss_curve: Vec<CurvePoint>,
    pub wall_time_s: f64,
}

impl MetricsReport {
    /// Relative drop of the training-set loss over the run.
    pub fn loss_reduction(&self) -> f64 {
        1.0 - self.final_eval.loss / self.initial_loss
    }
}

/// `step,loss,dice` rows; `dice` is blank between evaluations.
pub fn curve_csv(curve: &[CurvePoint]) -> String {
    let mut out = String::from("step,loss,dice\n");
    for p in curve {
        let dice = p.dice.map(|d| d.to_string()).unwrap_or_default();
        out.push_str(&format!("{},{},{}\n", p.step, p.loss, dice));
    }
    out
}

pub struct TrainOutcome<T: Scalar> {
    pub params: UNetParams<Tensor<T>>,
    pub report: MetricsReport,
}

fn check_data<T: Scalar>(model: &UNetConfig, data: &[SegSample<T>]) -> Result<()> {
    if data.is_empty() {
        return Err(Error::BadConfig("dataset is empty".into()));
    }
    for s in data {
        model.check_input(s.image.shape())?;
        s.mask.check_classes(model.classes)?;
    }
    Ok(())
}

/// Logits of one sample under an inference tape.
pub fn infer<T: Scalar>(params: &UNetParams<Tensor<T>>, image: &Tensor<T>) -> Result<Tensor<T>> {
    let tape = Tape::inference();
    let p = bind(params, &tape);
    let (logits, _) = unet_forward(tape.constant(image.clone()), &p)?;
    Ok(logits.value())
}

pub fn evaluate<T: Scalar>(
    model: &UNetConfig,
    params: &UNetParams<Tensor<T>>,
    data: &[SegSample<T>],
    weights: LossWeights,
    tau: usize,
) -> Result<EvalReport> {
    model.validate()?;
    check_data(model, data)?;
    let per_sample: Vec<(f64, crate::data::Mask)> = data
        .par_iter()
        .map(|s| {
            let tape = Tape::inference();
            let p = bind(params, &tape);
            let (logits, _) = unet_forward(tape.constant(s.image.clone()), &p)?;
            let loss = seg_loss(logits, &s.mask, weights)?.value().item().as_f64();
            Ok((loss, predict(&logits.value())?))
        })
        .collect::<Result<_>>()?;
    let loss = per_sample.iter().map(|(l, _)| l).sum::<f64>() / data.len() as f64;
    let preds: Vec<_> = per_sample.into_iter().map(|(_, m)| m).collect();
    let gts: Vec<_> = data.iter().map(|s| s.mask.clone()).collect();
    Ok(EvalReport {
        scores: score(&preds, &gts, model.classes, tau)?,
        tau,
        loss,
    })
}

/// Sample order for step `step`: consecutive epochs walk fresh
/// permutations drawn from the run seed.
pub fn batch_indices(seed: u64, n: usize, batch: usize, step: usize) -> Vec<usize> {
    let shuffle = CounterRng::new(seed).fork(0x5348_5546);
    let mut cached: Option<(usize, Vec<usize>)> = None;
    (0..batch)
        .map(|j| {
            let pos = step * batch + j;
            let epoch = pos / n;
            if cached.as_ref().map(|(e, _)| *e) != Some(epoch) {
                cached = Some((epoch, shuffle.fork(epoch as u64).permutation(n)));
            }
            cached.as_ref().unwrap().1[pos % n]
        })
        .collect()
}

fn sample_grads<T: Scalar>(
    params: &UNetParams<Tensor<T>>,
    s: &SegSample<T>,
    weights: LossWeights,
) -> Result<(f64, BTreeMap<String, Tensor<T>>)> {
    let tape = Tape::new(Mode::Train);
    let p = bind(params, &tape);
    let (logits, _) = unet_forward(tape.constant(s.image.clone()), &p)?;
    let loss = seg_loss(logits, &s.mask, weights)?;
    let value = loss.value().item().as_f64();
    if !value.is_finite() {
        return Ok((value, BTreeMap::new()));
    }
    let grads = tape.backward(loss)?;
    Ok((value, collect_grads(&p, &grads)))
}

/// Trains from the initialization keyed by `cfg.seed`.
pub fn train<T: Scalar>(
    model: &UNetConfig,
    cfg: &TrainConfig,
    data: &[SegSample<T>],
    tau: usize,
) -> Result<TrainOutcome<T>> {
    let init = initialize(&model.template::<T>()?, cfg.seed);
    train_from(model, cfg, data, tau, init)
}

pub fn train_from<T: Scalar>(
    model: &UNetConfig,
    cfg: &TrainConfig,
    data: &[SegSample<T>],
    tau: usize,
    mut params: UNetParams<Tensor<T>>,
) -> Result<TrainOutcome<T>> {
    let started = Instant::now();
    model.validate()?;
    cfg.validate()?;
    check_data(model, data)?;
    let weights = cfg.weights();
    let initial = evaluate(model, &params, data, weights, tau)?;
    let mut velocity = Velocity::new();
    let mut curve = Vec::with_capacity(cfg.steps);
    let scale = T::of(1.0 / cfg.batch_size as f64);
    for step in 0..cfg.steps {
        let idx = batch_indices(cfg.seed, data.len(), cfg.batch_size, step);
        let results: Vec<_> = idx
            .par_iter()
            .map(|&i| sample_grads(&params, &data[i], weights))
            .collect::<Result<_>>()?;
        let loss = results.iter().map(|(l, _)| l).sum::<f64>() / cfg.batch_size as f64;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                loss,
                samples: idx,
            });
        }
        let mut grads: BTreeMap<String, Tensor<T>> = BTreeMap::new();
        for (_, g) in results {
            for (name, t) in g {
                match grads.get_mut(&name) {
                    Some(acc) => *acc = acc.add(&t)?,
                    None => {
                        grads.insert(name, t);
                    }
                }
            }
        }
        for g in grads.values_mut() {
            *g = g.scale(scale);
        }
        let dice = if step == 0 {
            Some(initial.scores.dice)
        } else if cfg.eval_every > 0 && step % cfg.eval_every == 0 {
            Some(evaluate(model, &params, data, weights, tau)?.scores.dice)
        } else {
            None
        };
        curve.push(CurvePoint { step, loss, dice });
        params = sgd_step(&params, &grads, &mut velocity, cfg.lr, cfg.momentum);
    }
    let final_eval = evaluate(model, &params, data, weights, tau)?;
    Ok(TrainOutcome {
        params,
        report: MetricsReport {
            final_eval,
            initial_loss: initial.loss,
            steps: cfg.steps,
            loss_curve: curve,
            wall_time_s: started.elapsed().as_secs_f64(),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_dataset, SynthConfig};
    use crate::dmsk::{BankConfig, KernelSpec};
    use crate::params::named_tensors;
    use crate::ttt::TttConfig;

    fn tiny() -> (UNetConfig, Vec<SegSample<f64>>) {
        let model = UNetConfig {
            channels: vec![4, 8],
            banks: BankConfig {
                small: vec![KernelSpec(3, 1)],
                large: vec![KernelSpec(5, 2)],
            },
            ttt: TttConfig {
                eta: 0.05,
                ..TttConfig::default()
            },
            ..UNetConfig::default()
        };
        let data = synth_dataset(&SynthConfig {
            seed: 1,
            n: 3,
            h: 16,
            w: 16,
            k: 2,
            scale_mix: 0.5,
        })
        .unwrap();
        (model, data)
    }

    fn cfg(steps: usize, lr: f64) -> TrainConfig {
        TrainConfig {
            lr,
            momentum: 0.9,
            steps,
            batch_size: 2,
            seed: 7,
            eval_every: 2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn same_seed_same_run() {
        let (model, data) = tiny();
        let a = train(&model, &cfg(4, 1e-2), &data, 2).unwrap();
        let b = train(&model, &cfg(4, 1e-2), &data, 2).unwrap();
        let bits = |c: &[CurvePoint]| c.iter().map(|p| p.loss.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.report.loss_curve), bits(&b.report.loss_curve));
        for ((_, x), (_, y)) in named_tensors(&a.params).iter().zip(&named_tensors(&b.params)) {
            assert!(x.bitwise_eq(y));
        }
        assert_eq!(a.report.final_eval, b.report.final_eval);
        assert!(a.report.loss_curve.iter().skip(1).any(|p| p.loss != a.report.loss_curve[0].loss));
    }

    #[test]
    fn zero_lr_is_a_no_op() {
        let (model, data) = tiny();
        let init = initialize(&model.template::<f64>().unwrap(), 7);
        let out = train(&model, &cfg(3, 0.0), &data, 2).unwrap();
        for ((_, x), (_, y)) in named_tensors(&out.params).iter().zip(&named_tensors(&init)) {
            assert!(x.bitwise_eq(y));
        }
        assert_eq!(out.report.final_eval.loss, out.report.initial_loss);
    }

    #[test]
    fn evaluate_reproduces_final_metrics() {
        let (model, data) = tiny();
        let out = train(&model, &cfg(2, 1e-2), &data, 2).unwrap();
        let again = evaluate(&model, &out.params, &data, LossWeights::default(), 2).unwrap();
        assert_eq!(again, out.report.final_eval);
    }

    #[test]
    fn batches_cover_each_epoch() {
        let mut seen: Vec<usize> = (0..5).flat_map(|s| batch_indices(3, 10, 2, s)).collect();
        seen.sort();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        assert_ne!(batch_indices(3, 10, 2, 5), batch_indices(3, 10, 2, 0));
    }

    #[test]
    fn divergence_is_reported() {
        let (model, data) = tiny();
        let r = train(&model, &cfg(40, 1e6), &data, 2);
        assert!(matches!(r, Err(Error::NonFiniteLoss { .. })), "{:?}", r.err());
    }

    #[test]
    fn invalid_configs() {
        let (model, data) = tiny();
        for bad in [
            TrainConfig { lr: -1.0, ..cfg(1, 0.1) },
            TrainConfig { batch_size: 0, ..cfg(1, 0.1) },
            TrainConfig { momentum: 1.0, ..cfg(1, 0.1) },
        ] {
            assert!(matches!(train(&model, &bad, &data, 2), Err(Error::BadConfig(_))));
        }
        assert!(matches!(train(&model, &cfg(1, 0.1), &data[..0], 2), Err(Error::BadConfig(_))));
    }

    #[test]
    fn curve_csv_layout() {
        let csv = curve_csv(&[
            CurvePoint { step: 0, loss: 1.5, dice: Some(0.25) },
            CurvePoint { step: 1, loss: 1.0, dice: None },
        ]);
        assert_eq!(csv, "step,loss,dice\n0,1.5,0.25\n1,1,\n");
    }
}
