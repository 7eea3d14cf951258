//! Datapath outputs checked against real-valued and independently generated references.

use lns_core::datapath::{
    exact_convert, hybrid_max_relative_error, parse_golden, run_conformance, HybridSplit, LnsSlice, MacConfig, MacUnit,
    ProductTerm, RemainderLut,
};
use lns_core::format::magnitude;
use lns_core::{LnsFormat, LnsScalar, Sign};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const F: u32 = 23;

fn f88() -> LnsFormat {
    LnsFormat::new(8, 8).unwrap()
}

fn random_lane(rng: &mut ChaCha8Rng, fmt: &LnsFormat) -> LnsScalar {
    if rng.random::<f64>() < 0.05 {
        return LnsScalar::ZERO;
    }
    let sign = if rng.random() { Sign::Negative } else { Sign::Positive };
    LnsScalar::new(sign, rng.random_range(0..=fmt.max_exponent()))
}

fn real_value(v: &LnsScalar, fmt: &LnsFormat) -> f64 {
    if v.is_zero {
        0.0
    } else {
        v.sign.to_f64() * magnitude(v.exponent, fmt.gamma())
    }
}

#[test]
fn exact_convert_exhaustive_pairs_within_one_ulp() {
    let fmt = f88();
    let lut = RemainderLut::build(&fmt, F).unwrap();
    let one = (1u64 << F) as f64;
    let mut worst = 0.0f64;
    for ea in 0..=fmt.max_exponent() {
        for eb in 0..=fmt.max_exponent() {
            for sign in [Sign::Positive, Sign::Negative] {
                let term = ProductTerm { sign, exponent_sum: (ea + eb) as u64, is_zero: false };
                let got = exact_convert(&term, &fmt, &lut) as f64;
                let want = sign.to_f64() * one * (-((ea + eb) as f64) / 8.0).exp2();
                worst = worst.max((got - want).abs());
            }
        }
    }
    assert!(worst <= 1.0, "worst deviation {worst} ULP");
}

#[test]
fn random_dot_products_match_real_arithmetic() {
    let fmt = f88();
    let unit = MacUnit::new(MacConfig::default(), Default::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let tol = 32.0 * 2f64.powi(-(F as i32));
    let mut worst = 0.0f64;
    for _ in 0..10_000 {
        let a: Vec<_> = (0..32).map(|_| random_lane(&mut rng, &fmt)).collect();
        let b: Vec<_> = (0..32).map(|_| random_lane(&mut rng, &fmt)).collect();
        let ps = unit.dot(LnsSlice::new(fmt, &a), LnsSlice::new(fmt, &b)).unwrap();
        assert!(!ps.saturated);
        let want: f64 = a.iter().zip(&b).map(|(x, y)| real_value(x, &fmt) * real_value(y, &fmt)).sum();
        worst = worst.max((ps.to_f64() - want).abs());
    }
    assert!(worst <= tol, "worst error {worst:e} exceeds {tol:e}");
}

#[test]
fn all_unit_lanes_stay_within_tolerance() {
    let fmt = f88();
    let unit = MacUnit::new(MacConfig::default(), Default::default()).unwrap();
    for e in 0..8 {
        let a = vec![LnsScalar::new(Sign::Positive, e); 32];
        let b = vec![LnsScalar::new(Sign::Positive, 0); 32];
        let ps = unit.dot(LnsSlice::new(fmt, &a), LnsSlice::new(fmt, &b)).unwrap();
        let want = 32.0 * magnitude(e, 8);
        assert!((ps.to_f64() - want).abs() <= 32.0 * 2f64.powi(-23), "e={e}");
    }
}

/// Max relative error per `lut_bits` (0..=3) at γ = 8, F = 23, from `gen_golden.py --hybrid-table`.
const HYBRID_ERROR_TABLE: [f64; 4] = [0.06066010052528457, 0.0536821689749342, 0.02235106140654223, 0.0];

#[test]
fn hybrid_error_table_matches_oracle() {
    let fmt = f88();
    let measured: Vec<f64> =
        (0..=3).map(|b| hybrid_max_relative_error(&fmt, &HybridSplit::new(&fmt, b).unwrap(), F).unwrap()).collect();
    for (b, (m, want)) in measured.iter().zip(HYBRID_ERROR_TABLE).enumerate() {
        assert!((m - want).abs() <= 1e-12, "lut_bits={b}: {m} vs {want}");
    }
    assert!(measured.windows(2).all(|w| w[1] < w[0]));
    assert_eq!(measured[3], 0.0);
}

#[test]
fn golden_file_conforms() {
    let text = include_str!("data/golden.txt");
    let vectors = parse_golden(text).unwrap();
    assert_eq!(vectors.len(), 206);
    let report = run_conformance(&vectors);
    assert!(report.ok(), "{:#?}", report.mismatches.first());
    assert_eq!(report.passed, vectors.len());
    assert!(report.warnings.is_empty());
}

#[test]
fn golden_file_exercises_saturation() {
    let vectors = parse_golden(include_str!("data/golden.txt")).unwrap();
    let limit = (1i64 << 23) - 1;
    let saturated = vectors.iter().filter(|v| v.config.accumulator_bits == 24 && v.expected.abs() == limit).count();
    assert!(saturated > 0);
}

#[test]
fn corrupted_golden_vector_reports_lane_diffs() {
    let text = include_str!("data/golden.txt");
    let mut vectors = parse_golden(text).unwrap();
    vectors[3].expected += 1;
    let report = run_conformance(&vectors);
    assert_eq!(report.mismatches.len(), 1);
    let m = &report.mismatches[0];
    assert_eq!(m.line, vectors[3].line);
    assert_eq!(m.lanes.len(), vectors[3].a.len());
}
