use std::collections::BTreeMap;

use dscnet::data::rng::CounterRng;
use dscnet::data::{decode_checkpoint, encode_checkpoint, synth_sample, CheckpointMeta, SynthConfig};
use dscnet::dmsk::{select_kernels, BankConfig, DmskParams};
use dscnet::params::initialize;
use dscnet::train::{dice_metric, predict};
use dscnet::ttt::ttt_step;
use dscnet::Tensor64;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// With η below 1/‖k‖² one inner step never raises the token's loss.
    #[test]
    fn inner_step_descends(seed in any::<u64>(), c in 1usize..6, frac in 0.01f64..0.99) {
        let mut g = CounterRng::new(seed);
        let w = g.uniform_tensor::<f64>(&[c, c], -1.0, 1.0);
        let k = g.uniform_tensor::<f64>(&[c], -1.0, 1.0);
        let v = g.uniform_tensor::<f64>(&[c], -1.0, 1.0);
        let kk: f64 = k.data().iter().map(|x| x * x).sum();
        prop_assume!(kk > 1e-12);
        let eta = frac / kk;
        let (next, before) = ttt_step(&w, &k, &v, eta).unwrap();
        let (_, after) = ttt_step(&next, &k, &v, 0.0).unwrap();
        prop_assert!(after <= before, "{after} > {before}");
    }

    #[test]
    fn selection_ignores_shift_and_scale(seed in any::<u64>(), shift in -5.0f64..5.0, scale in 0.1f64..10.0) {
        let banks = BankConfig::default();
        let mut p = initialize(&DmskParams::<Tensor64>::template(4, &banks).unwrap(), seed);
        let mut g = CounterRng::new(seed ^ 1);
        let x = g.uniform_tensor::<f64>(&[4, 1, 1], -1.0, 1.0);
        let a = select_kernels(&x, &p).unwrap();
        prop_assert!((a.w_s.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!((a.w_b.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        // shifting selector biases uniformly shifts every logit
        p.select_s.bias = p.select_s.bias.as_ref().map(|b| b.map(|v| v * scale + shift));
        p.select_s.weight = p.select_s.weight.map(|v| v * scale);
        let b = select_kernels(&x, &p).unwrap();
        prop_assume!(a.w_s.iter().filter(|&&w| (w - a.w_s[a.idx_s]).abs() < 1e-9).count() == 1);
        prop_assert_eq!(a.idx_s, b.idx_s);
    }

    #[test]
    fn checkpoint_round_trip(seed in any::<u64>(), n in 1usize..5) {
        let mut g = CounterRng::new(seed);
        let params: Vec<(String, Tensor64)> = (0..n)
            .map(|i| {
                let shape: Vec<usize> = (0..1 + i % 3).map(|_| 1 + g.below(4) as usize).collect();
                (format!("p{i}.weight"), g.normal_tensor(&shape, 1.0))
            })
            .collect();
        let meta = CheckpointMeta { config_hash: "00".into(), seed, step: n as u64 };
        let bytes = encode_checkpoint(&params, &meta).unwrap();
        let (back, m): (BTreeMap<String, Tensor64>, _) = decode_checkpoint(&bytes).unwrap();
        prop_assert_eq!(m, meta);
        for (name, t) in &params {
            prop_assert!(back[name].bitwise_eq(t));
        }
    }

    #[test]
    fn synth_is_a_pure_function_of_seed(seed in any::<u64>(), idx in 0usize..100) {
        let cfg = SynthConfig { seed, n: 100, h: 32, w: 16, k: 4, scale_mix: 0.5 };
        let a = synth_sample::<f32>(&cfg, idx);
        let b = synth_sample::<f32>(&cfg, idx);
        prop_assert!(a.image.bitwise_eq(&b.image));
        prop_assert_eq!(&a.mask, &b.mask);
        prop_assert_eq!(a.mask.histogram(4).iter().sum::<usize>(), 32 * 16);
    }

    /// Logits equal to the one-hot mask predict the mask exactly.
    #[test]
    fn one_hot_logits_predict_their_mask(seed in any::<u64>()) {
        let cfg = SynthConfig { seed, n: 1, h: 16, w: 16, k: 3, scale_mix: 0.5 };
        let s = synth_sample::<f64>(&cfg, 0);
        let onehot = dscnet::train::one_hot::<f64>(&s.mask, 3).unwrap();
        let pred = predict(&onehot).unwrap();
        prop_assert_eq!(&pred, &s.mask);
        for k in 1..3 {
            prop_assert_eq!(dice_metric(&pred, &s.mask, k).unwrap(), 1.0);
        }
    }
}
