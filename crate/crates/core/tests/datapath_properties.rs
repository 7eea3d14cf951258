use lns_core::datapath::{
    pass_tally, tally, Conversion, Dataflow, HybridSplit, LnsSlice, MacConfig, MacUnit, OperationTally,
};
use lns_core::format::{decode, log_quantize};
use lns_core::{LnsFormat, LnsScalar, Rounder, Sign};
use proptest::prelude::*;

fn f88() -> LnsFormat {
    LnsFormat::new(8, 8).unwrap()
}

fn lane() -> impl Strategy<Value = LnsScalar> {
    prop_oneof![
        1 => Just(LnsScalar::ZERO),
        9 => (any::<bool>(), 0u32..=127).prop_map(|(neg, e)| {
            LnsScalar::new(if neg { Sign::Negative } else { Sign::Positive }, e)
        }),
    ]
}

fn operands(max: usize) -> impl Strategy<Value = (Vec<LnsScalar>, Vec<LnsScalar>)> {
    (1..=max).prop_flat_map(|n| (prop::collection::vec(lane(), n), prop::collection::vec(lane(), n)))
}

fn conversion() -> impl Strategy<Value = Conversion> {
    prop_oneof![
        Just(Conversion::Exact),
        (0u32..=3).prop_map(|b| Conversion::Hybrid(HybridSplit::new(&f88(), b).unwrap())),
    ]
}

fn unit(bits: u32, conversion: Conversion) -> MacUnit {
    MacUnit::new(MacConfig { accumulator_bits: bits, ..MacConfig::default() }, conversion).unwrap()
}

proptest! {
    #[test]
    fn dot_is_commutative((a, b) in operands(32), conv in conversion()) {
        let u = unit(32, conv);
        let fmt = f88();
        let ab = u.dot(LnsSlice::new(fmt, &a), LnsSlice::new(fmt, &b)).unwrap();
        let ba = u.dot(LnsSlice::new(fmt, &b), LnsSlice::new(fmt, &a)).unwrap();
        prop_assert_eq!(ab, ba);
    }

    #[test]
    fn dot_ignores_lane_order((a, b) in operands(32), rot in 0usize..32, conv in conversion()) {
        let u = unit(32, conv);
        let fmt = f88();
        let k = rot % a.len();
        let (mut ra, mut rb) = (a.clone(), b.clone());
        ra.rotate_left(k);
        rb.rotate_left(k);
        let x = u.dot(LnsSlice::new(fmt, &a), LnsSlice::new(fmt, &b)).unwrap();
        let y = u.dot(LnsSlice::new(fmt, &ra), LnsSlice::new(fmt, &rb)).unwrap();
        prop_assert_eq!(x, y);
    }

    #[test]
    fn negating_one_operand_negates_exact_sum((a, b) in operands(32)) {
        let u = unit(32, Conversion::Exact);
        let fmt = f88();
        let neg: Vec<_> = a.iter().map(|e| LnsScalar { sign: e.sign.xor(Sign::Negative), ..*e }).collect();
        let x = u.dot(LnsSlice::new(fmt, &a), LnsSlice::new(fmt, &b)).unwrap();
        let y = u.dot(LnsSlice::new(fmt, &neg), LnsSlice::new(fmt, &b)).unwrap();
        prop_assert_eq!(x.value, -y.value);
    }

    #[test]
    fn saturation_is_monotone_in_width(n in 1usize..=32, e in 0u32..8, narrow in 24u32..32) {
        // all lanes positive, so partial sums only grow and clamping is final
        let fmt = f88();
        let a = vec![LnsScalar::new(Sign::Positive, e); n];
        let b = vec![LnsScalar::new(Sign::Positive, 0); n];
        let wide = unit(narrow + 1, Conversion::Exact).dot(LnsSlice::new(fmt, &a), LnsSlice::new(fmt, &b)).unwrap();
        let tight = unit(narrow, Conversion::Exact).dot(LnsSlice::new(fmt, &a), LnsSlice::new(fmt, &b)).unwrap();
        prop_assert!(tight.value <= wide.value);
        prop_assert!(!wide.saturated || tight.saturated);
        if !tight.saturated {
            prop_assert_eq!(tight.value, wide.value);
        } else {
            prop_assert_eq!(tight.value, tight.limit());
        }
    }

    #[test]
    fn tally_follows_counting_rule((a, b) in operands(32), conv in conversion()) {
        let u = unit(32, conv);
        let fmt = f88();
        let mut t = OperationTally::default();
        u.dot_tallied(LnsSlice::new(fmt, &a), LnsSlice::new(fmt, &b), &mut t).unwrap();
        prop_assert_eq!(t, tally(1, a.len() as u64, &fmt, conv));
        let mut again = OperationTally::default();
        u.dot_tallied(LnsSlice::new(fmt, &a), LnsSlice::new(fmt, &b), &mut again).unwrap();
        prop_assert_eq!(t, again);
    }

    #[test]
    fn long_dot_tally_matches_pass_tally(n in 1usize..200, conv in conversion()) {
        let u = unit(32, conv);
        let fmt = f88();
        let a = vec![LnsScalar::new(Sign::Positive, 40); n];
        let mut t = OperationTally::default();
        u.dot_long(LnsSlice::new(fmt, &a), LnsSlice::new(fmt, &a), &mut t).unwrap();
        prop_assert_eq!(t, pass_tally(Dataflow::Forward, 1, n, 1, 32, &fmt, conv));
    }

    #[test]
    fn nearest_quantization_gap_is_half_step(log_mag in -15.8f64..0.0, neg in any::<bool>(), scale_log in -20.0f64..20.0) {
        let fmt = f88();
        let scale = scale_log.exp2();
        let x = if neg { -1.0 } else { 1.0 } * scale * log_mag.exp2();
        let q = log_quantize(x, &fmt, scale, &mut Rounder::nearest());
        let back = decode(&q, &fmt, scale);
        prop_assert_eq!(back.signum(), x.signum());
        prop_assert!((back / x).log2().abs() <= 1.0 / 16.0 + 1e-12);
    }
}
