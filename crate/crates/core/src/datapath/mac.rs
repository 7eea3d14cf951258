use serde::{Deserialize, Serialize};

use super::{lns_multiply, Conversion, Converter, OperationTally, MAX_FRAC_BITS};
use crate::error::{Error, Result};
use crate::format::{log_quantize, LnsFormat, LnsScalar, Rounder};

/// Parameters of one vector MAC unit.
///
/// `accumulator_bits` is the full signed width of the partial-sum register;
/// with `frac_bits` fractional bits it holds magnitudes below
/// `2^(accumulator_bits − 1 − frac_bits)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MacConfig {
    pub vector_size: usize,
    pub input_bitwidth: u32,
    pub format: LnsFormat,
    pub accumulator_bits: u32,
    pub frac_bits: u32,
    pub remainder_bins: usize,
}

impl Default for MacConfig {
    /// 32 lanes of 8-bit `γ = 8` inputs, 23 fractional bits, 8 remainder bins.
    /// The register carries 5 integer bits above the 24-bit datapath window so
    /// that a full 32-lane sum of unit products fits.
    fn default() -> Self {
        MacConfig {
            vector_size: 32,
            input_bitwidth: 8,
            format: LnsFormat::new(8, 8).expect("valid format"),
            accumulator_bits: 32,
            frac_bits: 23,
            remainder_bins: 8,
        }
    }
}

impl MacConfig {
    /// Defaults with a different input format (bins follow `γ`).
    pub fn for_format(format: LnsFormat) -> Self {
        MacConfig {
            input_bitwidth: format.bitwidth(),
            format,
            remainder_bins: format.gamma() as usize,
            ..MacConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vector_size == 0 {
            return Err(Error::Config("vector size must be positive".into()));
        }
        if self.input_bitwidth != self.format.bitwidth() {
            return Err(Error::Config(format!(
                "input bitwidth {} does not match format bitwidth {}",
                self.input_bitwidth,
                self.format.bitwidth()
            )));
        }
        if self.remainder_bins != self.format.gamma() as usize {
            return Err(Error::Config(format!(
                "remainder bins {} must equal base factor {}",
                self.remainder_bins,
                self.format.gamma()
            )));
        }
        if self.frac_bits > MAX_FRAC_BITS {
            return Err(Error::Config(format!("fractional bits {} exceed {MAX_FRAC_BITS}", self.frac_bits)));
        }
        if self.accumulator_bits < self.frac_bits + 1 || self.accumulator_bits > 62 {
            return Err(Error::Config(format!(
                "accumulator width {} must lie in [{}, 62]",
                self.accumulator_bits,
                self.frac_bits + 1
            )));
        }
        Ok(())
    }

    /// Largest magnitude the accumulator holds, `2^(bits−1) − 1`.
    pub fn accumulator_limit(&self) -> i64 {
        (1i64 << (self.accumulator_bits - 1)) - 1
    }
}

/// Signed fixed-point accumulator contents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PartialSum {
    pub value: i64,
    pub saturated: bool,
    pub bits: u32,
    pub frac_bits: u32,
}

impl PartialSum {
    pub fn zero(bits: u32, frac_bits: u32) -> Self {
        PartialSum { value: 0, saturated: false, bits, frac_bits }
    }

    /// Loads a raw value, saturating (and flagging) if it does not fit.
    pub fn from_raw(value: i64, bits: u32, frac_bits: u32) -> Self {
        let limit = (1i64 << (bits - 1)) - 1;
        let clamped = value.clamp(-limit, limit);
        PartialSum { value: clamped, saturated: clamped != value, bits, frac_bits }
    }

    pub fn limit(&self) -> i64 {
        (1i64 << (self.bits - 1)) - 1
    }

    pub fn to_f64(&self) -> f64 {
        self.value as f64 / (1u64 << self.frac_bits) as f64
    }

    fn add_raw(self, addend: i64) -> Self {
        let limit = self.limit();
        let sum = self.value as i128 + addend as i128;
        let clamped = sum.clamp(-(limit as i128), limit as i128);
        PartialSum {
            value: clamped as i64,
            saturated: self.saturated || clamped != sum,
            bits: self.bits,
            frac_bits: self.frac_bits,
        }
    }
}

/// Saturating signed add. The saturation flag is sticky.
pub fn accumulate(ps: PartialSum, addend: PartialSum) -> Result<PartialSum> {
    if ps.bits != addend.bits || ps.frac_bits != addend.frac_bits {
        return Err(Error::Config(format!(
            "cannot add {}-bit/F{} and {}-bit/F{} partial sums",
            ps.bits, ps.frac_bits, addend.bits, addend.frac_bits
        )));
    }
    let mut out = ps.add_raw(addend.value);
    out.saturated |= addend.saturated;
    Ok(out)
}

/// A run of LNS elements sharing one format (one operand buffer's lanes).
#[derive(Debug, Clone, Copy)]
pub struct LnsSlice<'a> {
    pub format: LnsFormat,
    pub elements: &'a [LnsScalar],
}

impl<'a> LnsSlice<'a> {
    pub fn new(format: LnsFormat, elements: &'a [LnsScalar]) -> Self {
        LnsSlice { format, elements }
    }
}

/// A MAC unit with its conversion LUT built once.
#[derive(Debug, Clone)]
pub struct MacUnit {
    config: MacConfig,
    converter: Converter,
}

impl MacUnit {
    pub fn new(config: MacConfig, conversion: Conversion) -> Result<Self> {
        config.validate()?;
        let converter = Converter::new(config.format, conversion, config.frac_bits)?;
        Ok(MacUnit { config, converter })
    }

    pub fn config(&self) -> &MacConfig {
        &self.config
    }

    pub fn converter(&self) -> &Converter {
        &self.converter
    }

    /// One vector dot product.
    ///
    /// 1. per lane: exponent add and sign XOR;
    /// 2. per lane: unit value shifted right by the quotient, signed, routed to
    ///    the adder tree of its remainder bin (trees grow losslessly);
    /// 3. bins in ascending order: tree sum times LUT constant, truncated
    ///    toward zero after the `F`-bit shift, accumulated with saturation.
    pub fn dot(&self, a: LnsSlice<'_>, b: LnsSlice<'_>) -> Result<PartialSum> {
        self.dot_tallied(a, b, &mut OperationTally::default())
    }

    pub fn dot_tallied(&self, a: LnsSlice<'_>, b: LnsSlice<'_>, tally: &mut OperationTally) -> Result<PartialSum> {
        self.check_operands(&a, &b)?;
        let bins = self.converter.bins();
        let mut trees = vec![0i64; bins];
        for (x, y) in a.elements.iter().zip(b.elements) {
            let term = lns_multiply(x, y);
            let (bin, v) = self.converter.lane(&term);
            trees[bin] += v;
        }
        let lanes = a.elements.len() as u64;
        tally.exponent_adds += lanes;
        tally.xor_ops += lanes;
        tally.shifts += lanes;
        tally.tree_adds += lanes;
        tally.lut_multiplies += bins as u64;
        tally.accumulator_adds += bins as u64;

        let mut ps = PartialSum::zero(self.config.accumulator_bits, self.config.frac_bits);
        for (bin, sum) in trees.into_iter().enumerate() {
            ps = ps.add_raw(self.converter.bin_product(bin, sum));
        }
        Ok(ps)
    }

    /// Dot product of arbitrary length: split into `vector_size` chunks whose
    /// partial sums are accumulated in order.
    pub fn dot_long(&self, a: LnsSlice<'_>, b: LnsSlice<'_>, tally: &mut OperationTally) -> Result<PartialSum> {
        if a.elements.len() != b.elements.len() {
            return Err(Error::Config(format!("operand lengths differ: {} vs {}", a.elements.len(), b.elements.len())));
        }
        let vs = self.config.vector_size;
        let mut acc = PartialSum::zero(self.config.accumulator_bits, self.config.frac_bits);
        for (ca, cb) in a.elements.chunks(vs).zip(b.elements.chunks(vs)) {
            let ps = self.dot_tallied(LnsSlice::new(a.format, ca), LnsSlice::new(b.format, cb), tally)?;
            acc = accumulate(acc, ps)?;
        }
        Ok(acc)
    }

    fn check_operands(&self, a: &LnsSlice<'_>, b: &LnsSlice<'_>) -> Result<()> {
        let fmt = self.config.format;
        if a.format != fmt || b.format != fmt {
            return Err(Error::Config(format!(
                "operand formats {:?}/{:?} do not match the MAC format {:?}",
                a.format, b.format, fmt
            )));
        }
        if a.elements.len() != b.elements.len() {
            return Err(Error::Config(format!("operand lengths differ: {} vs {}", a.elements.len(), b.elements.len())));
        }
        if a.elements.len() > self.config.vector_size {
            return Err(Error::Config(format!(
                "{} lanes exceed vector size {}",
                a.elements.len(),
                self.config.vector_size
            )));
        }
        if let Some(e) = a.elements.iter().chain(b.elements).find(|e| !e.is_valid_for(&fmt)) {
            return Err(Error::Config(format!("exponent {} outside format range", e.exponent)));
        }
        Ok(())
    }
}

/// One-shot dot product through a freshly built MAC unit.
pub fn mac_dot_product(
    a: LnsSlice<'_>,
    b: LnsSlice<'_>,
    config: &MacConfig,
    conversion: Conversion,
) -> Result<PartialSum> {
    MacUnit::new(*config, conversion)?.dot(a, b)
}

/// Result of converting a partial sum back into the log domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Requantized {
    pub value: LnsScalar,
    pub saturated: bool,
}

/// Fixed point → real (times the operand scales `s_a · s_b`) → log-quantized
/// into `out_format` against `out_scale`.
pub fn requantize(
    ps: &PartialSum,
    input_scale: f64,
    out_format: &LnsFormat,
    out_scale: f64,
    rounder: &mut Rounder,
) -> Requantized {
    let real = ps.to_f64() * input_scale;
    Requantized { value: log_quantize(real, out_format, out_scale, rounder), saturated: ps.saturated }
}

/// Operand roles of the two PE buffers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TensorRole {
    Weight,
    InputActivation,
    OutputGradient,
}

/// Computation pass; selects which tensors feed buffer A and buffer B.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Dataflow {
    Forward,
    BackwardInput,
    BackwardWeight,
}

impl Dataflow {
    pub const ALL: [Dataflow; 3] = [Dataflow::Forward, Dataflow::BackwardInput, Dataflow::BackwardWeight];

    pub fn buffer_a(self) -> TensorRole {
        match self {
            Dataflow::Forward | Dataflow::BackwardInput => TensorRole::Weight,
            Dataflow::BackwardWeight => TensorRole::InputActivation,
        }
    }

    pub fn buffer_b(self) -> TensorRole {
        match self {
            Dataflow::Forward => TensorRole::InputActivation,
            Dataflow::BackwardInput | Dataflow::BackwardWeight => TensorRole::OutputGradient,
        }
    }

    /// `(outputs, reduction length)` of the pass for an affine layer with
    /// `inputs → outputs` over a batch.
    pub fn shape(self, batch: usize, inputs: usize, outputs: usize) -> (usize, usize) {
        match self {
            Dataflow::Forward => (batch * outputs, inputs),
            Dataflow::BackwardInput => (batch * inputs, outputs),
            Dataflow::BackwardWeight => (outputs * inputs, batch),
        }
    }
}
