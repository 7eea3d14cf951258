//! LNS dot-product arithmetic and a bit-accurate model of the vector MAC unit.
//!
//! Products are formed by adding exponents and XOR-ing signs. A product
//! exponent `p` splits into a quotient `q = p >> b` and a remainder
//! `r = p & (γ − 1)`; its fixed-point value is the remainder constant
//! `round(2^F · 2^(−r/γ))` shifted right by `q`. Because exponents are stored
//! negated, the shift is to the right and values with `q ≥ F` flush to zero.

mod golden;
mod mac;
mod tally;

pub use golden::{parse_golden, run_conformance, ConformanceReport, GoldenVector, LaneDiff, Mismatch};
pub use mac::{
    accumulate, mac_dot_product, requantize, Dataflow, LnsSlice, MacConfig, MacUnit, PartialSum, Requantized,
    TensorRole,
};
pub use tally::{pass_tally, tally, OperationTally};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format::{LnsFormat, LnsScalar, Sign};

/// Largest supported number of fractional bits.
pub const MAX_FRAC_BITS: u32 = 30;

/// Product of two LNS values before conversion to fixed point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ProductTerm {
    pub sign: Sign,
    pub exponent_sum: u64,
    pub is_zero: bool,
}

impl ProductTerm {
    pub const ZERO: ProductTerm = ProductTerm { sign: Sign::Positive, exponent_sum: 0, is_zero: true };
}

/// Exponent add plus sign XOR. Either operand being zero yields a zero term.
pub fn lns_multiply(a: &LnsScalar, b: &LnsScalar) -> ProductTerm {
    if a.is_zero || b.is_zero {
        return ProductTerm::ZERO;
    }
    ProductTerm { sign: a.sign.xor(b.sign), exponent_sum: a.exponent as u64 + b.exponent as u64, is_zero: false }
}

/// Split of the `b` remainder bits into `lut_bits` MSBs resolved by table
/// lookup and `mitchell_bits` LSBs resolved by linear approximation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct HybridSplit {
    pub lut_bits: u32,
    pub mitchell_bits: u32,
}

impl HybridSplit {
    pub fn new(fmt: &LnsFormat, lut_bits: u32) -> Result<Self> {
        let b = fmt.log2_gamma();
        if lut_bits > b {
            return Err(Error::Config(format!("lut bits {lut_bits} exceed remainder bits {b}")));
        }
        Ok(HybridSplit { lut_bits, mitchell_bits: b - lut_bits })
    }

    pub fn validate(&self, fmt: &LnsFormat) -> Result<()> {
        if self.lut_bits + self.mitchell_bits != fmt.log2_gamma() {
            return Err(Error::Config(format!(
                "split {}+{} does not cover {} remainder bits",
                self.lut_bits,
                self.mitchell_bits,
                fmt.log2_gamma()
            )));
        }
        Ok(())
    }

    pub fn lut_size(&self) -> usize {
        1 << self.lut_bits
    }
}

/// LNS→fixed-point conversion scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Conversion {
    #[default]
    Exact,
    Hybrid(HybridSplit),
}

impl Conversion {
    /// Number of remainder bins (adder trees, LUT constants) per dot product.
    pub fn bins(&self, fmt: &LnsFormat) -> usize {
        match self {
            Conversion::Exact => fmt.gamma() as usize,
            Conversion::Hybrid(split) => split.lut_size(),
        }
    }
}

/// Fixed-point remainder constants `round(2^F · 2^(−i·step/γ))`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RemainderLut {
    frac_bits: u32,
    entries: Vec<i64>,
}

impl RemainderLut {
    /// The full table: one constant per remainder `r = 0..γ`.
    pub fn build(fmt: &LnsFormat, frac_bits: u32) -> Result<Self> {
        Self::with_stride(fmt.gamma(), 1, fmt.gamma() as usize, frac_bits)
    }

    /// The reduced table for a hybrid split: one constant per MSB pattern.
    pub fn for_split(fmt: &LnsFormat, split: &HybridSplit, frac_bits: u32) -> Result<Self> {
        split.validate(fmt)?;
        Self::with_stride(fmt.gamma(), 1 << split.mitchell_bits, split.lut_size(), frac_bits)
    }

    fn with_stride(gamma: u32, stride: u32, len: usize, frac_bits: u32) -> Result<Self> {
        if frac_bits > MAX_FRAC_BITS {
            return Err(Error::Config(format!("fractional bits {frac_bits} exceed {MAX_FRAC_BITS}")));
        }
        let one = (1u64 << frac_bits) as f64;
        let entries =
            (0..len as u32).map(|i| (one * (-((i * stride) as f64) / gamma as f64).exp2()).round() as i64).collect();
        Ok(RemainderLut { frac_bits, entries })
    }

    pub fn frac_bits(&self) -> u32 {
        self.frac_bits
    }

    pub fn entries(&self) -> &[i64] {
        &self.entries
    }

    pub fn get(&self, i: usize) -> i64 {
        self.entries[i]
    }
}

/// Conversion unit: LUT plus the routing of a product term to its bin.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Converter {
    format: LnsFormat,
    conversion: Conversion,
    lut: RemainderLut,
}

impl Converter {
    pub fn new(format: LnsFormat, conversion: Conversion, frac_bits: u32) -> Result<Self> {
        let lut = match conversion {
            Conversion::Exact => RemainderLut::build(&format, frac_bits)?,
            Conversion::Hybrid(split) => {
                if split.mitchell_bits > 0 && frac_bits < format.log2_gamma() + 1 {
                    return Err(Error::Config(format!(
                        "hybrid conversion needs at least {} fractional bits",
                        format.log2_gamma() + 1
                    )));
                }
                RemainderLut::for_split(&format, &split, frac_bits)?
            }
        };
        Ok(Converter { format, conversion, lut })
    }

    pub fn format(&self) -> &LnsFormat {
        &self.format
    }

    pub fn conversion(&self) -> Conversion {
        self.conversion
    }

    pub fn lut(&self) -> &RemainderLut {
        &self.lut
    }

    pub fn bins(&self) -> usize {
        self.lut.entries.len()
    }

    /// Stage 2 of the pipeline: the signed lane value before the bin multiply,
    /// and the bin it is routed to.
    ///
    /// Exact: `2^F >> q`. Hybrid: the Mitchell factor for the low remainder
    /// bits, `2^F − r_L·2^(F−b−1)` (i.e. `2^(−f) ≈ 1 − f/2`), shifted by `q`.
    pub fn lane(&self, term: &ProductTerm) -> (usize, i64) {
        if term.is_zero {
            return (0, 0);
        }
        let b = self.format.log2_gamma();
        let f = self.lut.frac_bits;
        let q = term.exponent_sum >> b;
        let r = (term.exponent_sum & (self.format.gamma() as u64 - 1)) as u32;
        let (bin, unit) = match self.conversion {
            Conversion::Exact => (r as usize, 1i64 << f),
            Conversion::Hybrid(split) => {
                let r_m = r >> split.mitchell_bits;
                let r_l = r & ((1 << split.mitchell_bits) - 1);
                let unit = if r_l == 0 { 1i64 << f } else { (1i64 << f) - ((r_l as i64) << (f - b - 1)) };
                (r_m as usize, unit)
            }
        };
        if q >= f as u64 {
            return (bin, 0);
        }
        (bin, term.sign.to_i64() * (unit >> q))
    }

    /// Stage 3: bin sum times its remainder constant, truncated toward zero.
    pub fn bin_product(&self, bin: usize, sum: i64) -> i64 {
        let prod = sum as i128 * self.lut.get(bin) as i128;
        let f = self.lut.frac_bits;
        let mag = prod.unsigned_abs() >> f;
        let v = mag as i64;
        if prod < 0 {
            -v
        } else {
            v
        }
    }

    /// Converts one product term on its own.
    pub fn convert(&self, term: &ProductTerm) -> i64 {
        match self.conversion {
            Conversion::Exact => exact_convert(term, &self.format, &self.lut),
            Conversion::Hybrid(split) => hybrid_convert(term, &self.format, &split, &self.lut),
        }
    }
}

/// `sign · (lut[r] >> q)`, zero when `q ≥ F`.
pub fn exact_convert(term: &ProductTerm, fmt: &LnsFormat, lut: &RemainderLut) -> i64 {
    if term.is_zero {
        return 0;
    }
    let q = term.exponent_sum >> fmt.log2_gamma();
    let r = (term.exponent_sum & (fmt.gamma() as u64 - 1)) as usize;
    if q >= lut.frac_bits as u64 {
        return 0;
    }
    term.sign.to_i64() * (lut.get(r) >> q)
}

/// `sign · (((2^F − r_L·2^(F−b−1)) · lut_M[r_M]) >> F) >> q`, zero when `q ≥ F`.
///
/// `lut` must be the reduced table built by [`RemainderLut::for_split`].
pub fn hybrid_convert(term: &ProductTerm, fmt: &LnsFormat, split: &HybridSplit, lut: &RemainderLut) -> i64 {
    if term.is_zero {
        return 0;
    }
    let b = fmt.log2_gamma();
    let f = lut.frac_bits;
    let q = term.exponent_sum >> b;
    if q >= f as u64 {
        return 0;
    }
    let r = (term.exponent_sum & (fmt.gamma() as u64 - 1)) as u32;
    let r_m = (r >> split.mitchell_bits) as usize;
    let r_l = r & ((1 << split.mitchell_bits) - 1);
    let mitchell = if r_l == 0 { 1i64 << f } else { (1i64 << f) - ((r_l as i64) << (f - b - 1)) };
    let v = ((mitchell as i128 * lut.get(r_m) as i128) >> f) as i64;
    term.sign.to_i64() * (v >> q)
}

/// Largest relative deviation of hybrid from exact conversion over every
/// remainder of `fmt`, measured at quotient zero.
pub fn hybrid_max_relative_error(fmt: &LnsFormat, split: &HybridSplit, frac_bits: u32) -> Result<f64> {
    let exact = RemainderLut::build(fmt, frac_bits)?;
    let reduced = RemainderLut::for_split(fmt, split, frac_bits)?;
    Converter::new(*fmt, Conversion::Hybrid(*split), frac_bits)?;
    let worst = (0..fmt.gamma() as u64)
        .map(|r| {
            let t = ProductTerm { sign: Sign::Positive, exponent_sum: r, is_zero: false };
            let want = exact_convert(&t, fmt, &exact);
            (hybrid_convert(&t, fmt, split, &reduced) - want).abs() as f64 / want as f64
        })
        .fold(0.0, f64::max);
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn f88() -> LnsFormat {
        LnsFormat::new(8, 8).unwrap()
    }

    fn term(sign: Sign, p: u64) -> ProductTerm {
        ProductTerm { sign, exponent_sum: p, is_zero: false }
    }

    #[test]
    fn multiply_examples() {
        let one = LnsScalar::new(Sign::Positive, 0);
        assert_eq!(lns_multiply(&one, &one), term(Sign::Positive, 0));
        let p = lns_multiply(&LnsScalar::new(Sign::Positive, 8), &LnsScalar::new(Sign::Negative, 5));
        assert_eq!(p, term(Sign::Negative, 13));
        assert!(lns_multiply(&LnsScalar::ZERO, &one).is_zero);
        assert!(lns_multiply(&one, &LnsScalar::ZERO).is_zero);
        let top = LnsScalar::new(Sign::Negative, 127);
        assert_eq!(lns_multiply(&top, &top).exponent_sum, 254);
    }

    #[test]
    fn lut_examples() {
        let lut = RemainderLut::build(&f88(), 23).unwrap();
        // mpmath: round(2^23 · 2^(−r/8)), r = 0..8
        assert_eq!(lut.entries(), &[8388608, 7692387, 7053950, 6468501, 5931642, 5439339, 4987896, 4573921]);
        assert!(lut.entries().windows(2).all(|w| w[0] > w[1]));
        assert_eq!(RemainderLut::build(&LnsFormat::new(8, 1).unwrap(), 23).unwrap().entries(), &[1 << 23]);
        assert!(RemainderLut::build(&f88(), 31).is_err());
    }

    #[test]
    fn exact_convert_examples() {
        let fmt = f88();
        let lut = RemainderLut::build(&fmt, 23).unwrap();
        assert_eq!(exact_convert(&term(Sign::Positive, 13), &fmt, &lut), 2719669);
        assert_eq!(exact_convert(&term(Sign::Negative, 13), &fmt, &lut), -2719669);
        assert_eq!(exact_convert(&term(Sign::Positive, 0), &fmt, &lut), 1 << 23);
        assert_eq!(exact_convert(&term(Sign::Positive, 184), &fmt, &lut), 0);
        assert_eq!(exact_convert(&term(Sign::Positive, 183), &fmt, &lut), 4573921 >> 22);
        assert_eq!(exact_convert(&ProductTerm::ZERO, &fmt, &lut), 0);
    }

    #[test]
    fn hybrid_full_lut_matches_exact() {
        let fmt = f88();
        let split = HybridSplit::new(&fmt, 3).unwrap();
        let exact = RemainderLut::build(&fmt, 23).unwrap();
        let reduced = RemainderLut::for_split(&fmt, &split, 23).unwrap();
        assert_eq!(exact, reduced);
        for p in 0..=254u64 {
            for sign in [Sign::Positive, Sign::Negative] {
                let t = term(sign, p);
                assert_eq!(hybrid_convert(&t, &fmt, &split, &reduced), exact_convert(&t, &fmt, &exact));
            }
        }
    }

    #[test]
    fn pure_mitchell_values() {
        let fmt = f88();
        let split = HybridSplit::new(&fmt, 0).unwrap();
        let lut = RemainderLut::for_split(&fmt, &split, 23).unwrap();
        assert_eq!(lut.entries(), &[1 << 23]);
        // 2^(−5/8) ≈ 1 − 5/16
        assert_eq!(hybrid_convert(&term(Sign::Positive, 5), &fmt, &split, &lut), (1 << 23) - 5 * (1 << 19));
    }

    #[test]
    fn split_validation() {
        let fmt = f88();
        assert!(HybridSplit::new(&fmt, 4).is_err());
        let bad = HybridSplit { lut_bits: 1, mitchell_bits: 1 };
        assert!(RemainderLut::for_split(&fmt, &bad, 23).is_err());
        assert!(Converter::new(fmt, Conversion::Hybrid(HybridSplit::new(&fmt, 1).unwrap()), 3).is_err());
        assert!(Converter::new(fmt, Conversion::Hybrid(HybridSplit::new(&fmt, 3).unwrap()), 3).is_ok());
    }

    #[test]
    fn converter_matches_free_functions() {
        let fmt = f88();
        for conv in [
            Conversion::Exact,
            Conversion::Hybrid(HybridSplit::new(&fmt, 0).unwrap()),
            Conversion::Hybrid(HybridSplit::new(&fmt, 2).unwrap()),
        ] {
            let c = Converter::new(fmt, conv, 23).unwrap();
            for p in 0..=254u64 {
                let t = term(Sign::Negative, p);
                let (bin, unit) = c.lane(&t);
                // single-lane pipeline equals standalone conversion up to the bin-multiply truncation
                let piped = c.bin_product(bin, unit);
                assert!((piped - c.convert(&t)).abs() <= 1, "p={p} {piped} vs {}", c.convert(&t));
            }
        }
    }
}
