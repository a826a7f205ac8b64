//! U-like encoder–decoder with dynamic skip connections.
//!
//! Level `l` of the encoder produces `x_in^l`. Every level except the
//! deepest hands its features to the decoder through a skip path, which is
//! either the identity or a DSC block (DMSK, then TTT, or just one of them
//! for ablations). The decoder upsamples, concatenates the skip output and
//! refines with a conv block.

use serde::{Deserialize, Serialize};

use crate::autodiff::{concat, Var};
use crate::dmsk::{dmsk_forward, dmsk_param_count, BankConfig, DmskParams, KernelStrategy, Selection};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Norm, LEAKY_SLOPE};
use crate::params::{conv_template, norm_template, scoped, ParamTree};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::ttt::{ttt_module_forward, ttt_param_count, TttConfig, TttParams};

/// What runs on each skip path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipMode {
    Plain,
    Dmsk,
    Ttt,
    /// DMSK followed by TTT.
    Dsc,
}

impl SkipMode {
    pub const ALL: [SkipMode; 4] = [Self::Plain, Self::Dmsk, Self::Ttt, Self::Dsc];

    pub fn name(self) -> &'static str {
        match self {
            Self::Plain => "plain",
            Self::Dmsk => "dmsk",
            Self::Ttt => "ttt",
            Self::Dsc => "dsc",
        }
    }

    fn has_dmsk(self) -> bool {
        matches!(self, Self::Dmsk | Self::Dsc)
    }

    fn has_ttt(self) -> bool {
        matches!(self, Self::Ttt | Self::Dsc)
    }
}

/// Which skip levels carry a block when the mode is not `plain`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    #[default]
    All,
    /// Only the skip just above the bottleneck.
    Deepest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub classes: usize,
    /// Per-level widths, strictly increasing. The length is the level count.
    pub channels: Vec<usize>,
    pub skip: SkipMode,
    pub placement: Placement,
    pub banks: BankConfig,
    pub strategy: KernelStrategy,
    pub ttt: TttConfig,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            classes: 2,
            channels: vec![16, 32, 64, 128],
            skip: SkipMode::Dsc,
            placement: Placement::All,
            banks: BankConfig::default(),
            strategy: KernelStrategy::Both,
            ttt: TttConfig::default(),
        }
    }
}

impl UNetConfig {
    pub fn levels(&self) -> usize {
        self.channels.len()
    }

    /// Banks of the DMSK blocks after applying the kernel strategy.
    pub fn effective_banks(&self) -> BankConfig {
        self.banks.for_strategy(self.strategy)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() {
            return Err(Error::BadConfig("model.channels is empty".into()));
        }
        if self.channels.windows(2).any(|w| w[0] >= w[1]) || self.channels[0] == 0 {
            return Err(Error::BadConfig(format!(
                "model.channels must be strictly increasing and positive, got {:?}",
                self.channels
            )));
        }
        if self.in_channels == 0 {
            return Err(Error::BadConfig("model.in_channels must be positive".into()));
        }
        if self.classes < 2 {
            return Err(Error::BadConfig(format!("model.classes must be at least 2, got {}", self.classes)));
        }
        self.banks.validate(self.strategy == KernelStrategy::Both)?;
        self.ttt.validate()?;
        if self.skip.has_dmsk() {
            for l in self.block_levels() {
                if self.channels[l] % 2 != 0 {
                    return Err(Error::OddChannels(self.channels[l]));
                }
            }
        }
        Ok(())
    }

    /// Skip levels that carry a block.
    pub fn block_levels(&self) -> Vec<usize> {
        let skips = self.levels() - 1;
        match (self.skip, self.placement) {
            (SkipMode::Plain, _) => vec![],
            (_, Placement::All) => (0..skips).collect(),
            (_, Placement::Deepest) => skips.checked_sub(1).into_iter().collect(),
        }
    }

    /// Smallest input extent multiple the pooling chain accepts.
    pub fn size_multiple(&self) -> usize {
        1 << (self.levels() - 1)
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let m = self.size_multiple();
        match *shape {
            [c, h, w] if c == self.in_channels && h % m == 0 && w % m == 0 => Ok(()),
            _ => Err(Error::BadInputSize(format!(
                "expected [{}, H, W] with H, W divisible by {m}, got {shape:?}",
                self.in_channels
            ))),
        }
    }

    pub fn template<T: Scalar>(&self) -> Result<UNetParams<Tensor<T>>> {
        self.validate()?;
        let c = &self.channels;
        let n = self.levels();
        let enc = (0..n)
            .map(|l| ConvBlock::template(if l == 0 { self.in_channels } else { c[l - 1] }, c[l]))
            .collect();
        let banks = self.effective_banks();
        let levels = self.block_levels();
        let mut skips = Vec::with_capacity(n - 1);
        for l in 0..n - 1 {
            skips.push(if levels.contains(&l) {
                Some(DscBlockParams {
                    dmsk: self.skip.has_dmsk().then(|| DmskParams::template(c[l], &banks)).transpose()?,
                    ttt: self.skip.has_ttt().then(|| TttParams::template(c[l], self.ttt.eta)),
                })
            } else {
                None
            });
        }
        let dec = (0..n - 1).map(|l| ConvBlock::template(c[l + 1] + c[l], c[l])).collect();
        Ok(UNetParams {
            enc,
            skips,
            dec,
            head: conv_template(c[0], self.classes, 1, 1, 1, true),
        })
    }

    /// Parameter count from the configuration alone.
    pub fn param_count(&self) -> usize {
        let c = &self.channels;
        let n = self.levels();
        let block = |i: usize, o: usize| 9 * i * o + 2 * o + 9 * o * o + 2 * o;
        let mut total = 0;
        for l in 0..n {
            total += block(if l == 0 { self.in_channels } else { c[l - 1] }, c[l]);
        }
        for l in 0..n - 1 {
            total += block(c[l + 1] + c[l], c[l]);
        }
        let banks = self.effective_banks();
        for l in self.block_levels() {
            if self.skip.has_dmsk() {
                total += dmsk_param_count(c[l], &banks);
            }
            if self.skip.has_ttt() {
                total += ttt_param_count(c[l]);
            }
        }
        total + c[0] * self.classes + self.classes
    }
}

/// Two `conv3×3 → instance norm → leaky ReLU` stages.
#[derive(Debug, Clone)]
pub struct ConvBlock<P> {
    pub conv1: Conv2d<P>,
    pub norm1: Norm<P>,
    pub conv2: Conv2d<P>,
    pub norm2: Norm<P>,
}

impl<T: Scalar> ConvBlock<Tensor<T>> {
    fn template(c_in: usize, c_out: usize) -> Self {
        Self {
            conv1: conv_template(c_in, c_out, 3, 1, 1, false),
            norm1: norm_template(c_out),
            conv2: conv_template(c_out, c_out, 3, 1, 1, false),
            norm2: norm_template(c_out),
        }
    }
}

impl<P> ParamTree<P> for ConvBlock<P> {
    type Mapped<Q> = ConvBlock<Q>;

    fn map_params<Q>(&self, scope: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> ConvBlock<Q> {
        ConvBlock {
            conv1: self.conv1.map_params(&scoped(scope, "conv1"), f),
            norm1: self.norm1.map_params(&scoped(scope, "norm1"), f),
            conv2: self.conv2.map_params(&scoped(scope, "conv2"), f),
            norm2: self.norm2.map_params(&scoped(scope, "norm2"), f),
        }
    }
}

impl<'t, T: Scalar> ConvBlock<Var<'t, T>> {
    pub fn forward(&self, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let h = self.norm1.instance(self.conv1.forward(x)?)?.leaky_relu(LEAKY_SLOPE);
        Ok(self.norm2.instance(self.conv2.forward(h)?)?.leaky_relu(LEAKY_SLOPE))
    }
}

/// A skip-path block. The full DSC block has both halves.
#[derive(Debug, Clone)]
pub struct DscBlockParams<P> {
    pub dmsk: Option<DmskParams<P>>,
    pub ttt: Option<TttParams<P>>,
}

impl<P> ParamTree<P> for DscBlockParams<P> {
    type Mapped<Q> = DscBlockParams<Q>;

    fn map_params<Q>(&self, scope: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> DscBlockParams<Q> {
        DscBlockParams {
            dmsk: self.dmsk.map_params(&scoped(scope, "dmsk"), f),
            ttt: self.ttt.map_params(&scoped(scope, "ttt"), f),
        }
    }
}

/// `ttt(dmsk(x))`, skipping whichever half is absent.
pub fn dsc_block<'t, T: Scalar>(x: Var<'t, T>, p: &DscBlockParams<Var<'t, T>>) -> Result<(Var<'t, T>, Option<Selection>)> {
    let (mut y, mut sel) = (x, None);
    if let Some(d) = &p.dmsk {
        let (out, s) = dmsk_forward(y, d)?;
        y = out;
        sel = Some(s);
    }
    if let Some(t) = &p.ttt {
        y = ttt_module_forward(y, t)?.0;
    }
    Ok((y, sel))
}

#[derive(Debug, Clone)]
pub struct UNetParams<P> {
    pub enc: Vec<ConvBlock<P>>,
    /// One entry per skip level, `None` for an identity skip.
    pub skips: Vec<Option<DscBlockParams<P>>>,
    /// `dec[l]` produces level `l` from level `l + 1` and skip `l`.
    pub dec: Vec<ConvBlock<P>>,
    /// 1×1, `C_0 → K`.
    pub head: Conv2d<P>,
}

impl<P> ParamTree<P> for UNetParams<P> {
    type Mapped<Q> = UNetParams<Q>;

    fn map_params<Q>(&self, scope: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> UNetParams<Q> {
        UNetParams {
            enc: self.enc.map_params(&scoped(scope, "enc"), f),
            skips: self
                .skips
                .iter()
                .enumerate()
                .map(|(i, s)| s.map_params(&scoped(&scoped(scope, "skip"), &i.to_string()), f))
                .collect(),
            dec: self.dec.map_params(&scoped(scope, "dec"), f),
            head: self.head.map_params(&scoped(scope, "head"), f),
        }
    }
}

/// Per-pixel class logits `[K, H, W]` plus the kernel picks of every DMSK.
pub fn unet_forward<'t, T: Scalar>(
    x: Var<'t, T>,
    p: &UNetParams<Var<'t, T>>,
) -> Result<(Var<'t, T>, Vec<Option<Selection>>)> {
    let n = p.enc.len();
    let m = 1usize << (n - 1);
    let shape = x.shape();
    let in_c = p.enc[0].conv1.weight.shape()[1];
    match *shape.as_slice() {
        [c, h, w] if c == in_c && h % m == 0 && w % m == 0 => {}
        _ => {
            return Err(Error::BadInputSize(format!(
                "expected [{in_c}, H, W] with H, W divisible by {m}, got {shape:?}"
            )))
        }
    }
    let mut skips = Vec::with_capacity(n - 1);
    let mut picks = Vec::with_capacity(n - 1);
    let mut h = x;
    for l in 0..n {
        if l > 0 {
            h = h.maxpool2()?;
        }
        h = p.enc[l].forward(h)?;
        if l < n - 1 {
            match &p.skips[l] {
                Some(block) => {
                    let (y, sel) = dsc_block(h, block)?;
                    skips.push(y);
                    picks.push(sel);
                }
                None => {
                    skips.push(h);
                    picks.push(None);
                }
            }
        }
    }
    for l in (0..n - 1).rev() {
        let up = h.upsample_nearest2()?;
        h = p.dec[l].forward(concat(&[up, skips[l]], 0)?)?;
    }
    Ok((p.head.forward(h)?, picks))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, Tape};
    use crate::data::rng::CounterRng;
    use crate::dmsk::KernelSpec;
    use crate::params::{bind, initialize, named_tensors, param_count};
    use crate::ttt::ttt_module_forward;

    fn small(skip: SkipMode) -> UNetConfig {
        UNetConfig {
            channels: vec![4, 8],
            skip,
            ..UNetConfig::default()
        }
    }

    fn logits(cfg: &UNetConfig, p: &UNetParams<Tensor<f64>>, x: &Tensor<f64>, mode: crate::Mode) -> Tensor<f64> {
        let tape = Tape::new(mode);
        let (y, _) = unet_forward(tape.constant(x.clone()), &bind(p, &tape)).unwrap();
        assert_eq!(y.shape(), [cfg.classes, x.shape()[1], x.shape()[2]]);
        y.value()
    }

    #[test]
    fn full_resolution_logits() {
        for (channels, size) in [(vec![4, 8], 8), (vec![4, 8, 16], 16), (vec![2, 4, 6, 8], 24)] {
            let cfg = UNetConfig {
                channels,
                classes: 3,
                ..UNetConfig::default()
            };
            let p = initialize(&cfg.template::<f64>().unwrap(), 1);
            let x = CounterRng::new(2).uniform_tensor::<f64>(&[1, size, size], 0.0, 1.0);
            logits(&cfg, &p, &x, crate::Mode::Infer);
        }
    }

    #[test]
    fn bad_input_size() {
        let cfg = UNetConfig {
            channels: vec![4, 8, 16],
            ..UNetConfig::default()
        };
        let p = cfg.template::<f64>().unwrap();
        let tape = Tape::inference();
        let x = tape.constant(Tensor::zeros(&[1, 12, 10]));
        assert!(matches!(unet_forward(x, &bind(&p, &tape)), Err(Error::BadInputSize(_))));
        assert!(cfg.check_input(&[1, 12, 12]).is_ok());
        assert!(cfg.check_input(&[2, 12, 12]).is_err());
    }

    #[test]
    fn param_count_matches_closed_form() {
        for skip in SkipMode::ALL {
            for placement in [Placement::All, Placement::Deepest] {
                for strategy in KernelStrategy::ALL {
                    let cfg = UNetConfig {
                        channels: vec![4, 8, 16],
                        skip,
                        placement,
                        strategy,
                        ..UNetConfig::default()
                    };
                    let p = cfg.template::<f32>().unwrap();
                    assert_eq!(param_count(&p), cfg.param_count(), "{skip:?} {placement:?} {strategy:?}");
                }
            }
        }
    }

    #[test]
    fn parameter_names() {
        let cfg = UNetConfig {
            channels: vec![4, 8, 16],
            placement: Placement::Deepest,
            ..UNetConfig::default()
        };
        let names: Vec<String> = named_tensors(&cfg.template::<f32>().unwrap()).into_iter().map(|(n, _)| n).collect();
        assert!(names.contains(&"enc.0.conv1.weight".to_string()));
        assert!(names.contains(&"skip.1.dmsk.bank_b.1.weight".to_string()));
        assert!(names.contains(&"skip.1.ttt.w0".to_string()));
        assert!(!names.iter().any(|n| n.starts_with("skip.0")));
        assert!(names.contains(&"head.bias".to_string()));
    }

    #[test]
    fn validation() {
        let mut cfg = small(SkipMode::Dsc);
        cfg.channels = vec![8, 8];
        assert!(matches!(cfg.validate(), Err(Error::BadConfig(_))));
        cfg.channels = vec![3, 8];
        assert!(matches!(cfg.validate(), Err(Error::OddChannels(3))));
        cfg.skip = SkipMode::Ttt;
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn train_and_infer_forward_agree_bitwise() {
        let cfg = small(SkipMode::Dsc);
        let p = initialize(&cfg.template::<f64>().unwrap(), 3);
        let x = CounterRng::new(4).uniform_tensor::<f64>(&[1, 16, 16], 0.0, 1.0);
        let a = logits(&cfg, &p, &x, crate::Mode::Train);
        let b = logits(&cfg, &p, &x, crate::Mode::Infer);
        assert!(a.bitwise_eq(&b));
    }

    #[test]
    fn dsc_block_composition() {
        let cfg = small(SkipMode::Dsc);
        let mut rng = CounterRng::new(5);
        let p = initialize(&cfg.template::<f64>().unwrap(), 5).map_params("", &mut |name, t| {
            if name.ends_with("bias") || name.ends_with("w0") {
                rng.uniform_tensor(t.shape(), -0.2, 0.2)
            } else {
                t.clone()
            }
        });
        let block = p.skips[0].as_ref().unwrap();
        let x = CounterRng::new(6).uniform_tensor::<f64>(&[4, 8, 8], -1.0, 1.0);
        let tape = Tape::inference();
        let bound = block.map_params("", &mut |_, t| tape.constant(t.clone()));
        let (y, _) = dsc_block(tape.constant(x.clone()), &bound).unwrap();
        let (d, _) = dmsk_forward(tape.constant(x.clone()), bound.dmsk.as_ref().unwrap()).unwrap();
        let (e, _) = ttt_module_forward(d, bound.ttt.as_ref().unwrap()).unwrap();
        assert!(y.value().bitwise_eq(&e.value()));
        assert_eq!(y.shape(), [4, 8, 8]);

        let zero = block.map_params("", &mut |_, t| tape.constant(t.zeros_like()));
        let (z, _) = dsc_block(tape.constant(x), &zero).unwrap();
        assert!(z.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_dsc_differs_from_plain_skip() {
        let dsc = small(SkipMode::Dsc);
        let plain = small(SkipMode::Plain);
        let base = initialize(&plain.template::<f64>().unwrap(), 7);
        let mut with_dsc = initialize(&dsc.template::<f64>().unwrap(), 7);
        // same encoder, decoder and head; zero DSC blocks
        with_dsc.enc = base.enc.clone();
        with_dsc.dec = base.dec.clone();
        with_dsc.head = base.head.clone();
        with_dsc.skips = with_dsc
            .skips
            .iter()
            .map(|s| s.as_ref().map(|b| b.map_params("", &mut |_, t| t.zeros_like())))
            .collect();
        let x = CounterRng::new(8).uniform_tensor::<f64>(&[1, 16, 16], 0.0, 1.0);
        let a = logits(&plain, &base, &x, crate::Mode::Infer);
        let b = logits(&dsc, &with_dsc, &x, crate::Mode::Infer);
        assert!(a.max_abs_diff(&b) > 1e-3);
    }

    #[test]
    fn unet_gradcheck() {
        let cfg = UNetConfig {
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
        let p = initialize(&cfg.template::<f64>().unwrap(), 9);
        let x = CounterRng::new(10).uniform_tensor::<f64>(&[1, 16, 16], 0.0, 1.0);
        let r = CounterRng::new(11).uniform_tensor::<f64>(&[2, 16, 16], -1.0, 1.0);
        let mut params = vec![("x".to_string(), x)];
        params.extend(named_tensors(&p));
        let rep = grad_check(
            "unet",
            |t, vars| {
                let mut it = vars[1..].iter();
                let bound = p.map_params("", &mut |_, _| *it.next().unwrap());
                let (y, _) = unet_forward(vars[0], &bound)?;
                Ok(y.mul(t.constant(r.clone()))?.mean())
            },
            &params,
            1e-6,
            1e-4,
        )
        .unwrap();
        let failing: Vec<_> = rep.params.iter().filter(|pc| !pc.pass).collect();
        assert!(rep.pass, "{failing:#?}");
    }
}
