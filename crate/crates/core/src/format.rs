//! Multi-base logarithmic number format.
//!
//! A value is stored as a sign, a zero flag and a non-negative integer
//! exponent magnitude `e`. With a group scale `s` and base factor `γ = 2^b`
//! the encoded value is
//!
//! ```text
//! x = sign · s · 2^(−e/γ),      e ∈ [0, 2^(B−1) − 1]
//! ```
//!
//! The exponent is stored negated so that the group maximum (the scale)
//! sits at `e = 0` and every other member of the group has `e > 0`.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Bitwidth and base factor of a multi-base LNS encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawFormat", into = "RawFormat")]
pub struct LnsFormat {
    bitwidth: u32,
    gamma: u32,
    log2_gamma: u32,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFormat {
    bitwidth: u32,
    gamma: u32,
}

impl TryFrom<RawFormat> for LnsFormat {
    type Error = Error;

    fn try_from(raw: RawFormat) -> Result<Self> {
        LnsFormat::new(raw.bitwidth, raw.gamma)
    }
}

impl From<LnsFormat> for RawFormat {
    fn from(fmt: LnsFormat) -> Self {
        RawFormat { bitwidth: fmt.bitwidth, gamma: fmt.gamma }
    }
}

impl LnsFormat {
    pub const MIN_BITWIDTH: u32 = 2;
    pub const MAX_BITWIDTH: u32 = 32;

    /// Builds a format with `bitwidth` total bits (sign included) and base factor `gamma`.
    pub fn new(bitwidth: u32, gamma: u32) -> Result<Self> {
        if !(Self::MIN_BITWIDTH..=Self::MAX_BITWIDTH).contains(&bitwidth) {
            return Err(Error::Format(format!(
                "bitwidth {bitwidth} outside [{}, {}]",
                Self::MIN_BITWIDTH,
                Self::MAX_BITWIDTH
            )));
        }
        if gamma == 0 || !gamma.is_power_of_two() {
            return Err(Error::Format(format!("base factor {gamma} is not a power of two")));
        }
        Ok(LnsFormat { bitwidth, gamma, log2_gamma: gamma.trailing_zeros() })
    }

    pub fn bitwidth(&self) -> u32 {
        self.bitwidth
    }

    pub fn gamma(&self) -> u32 {
        self.gamma
    }

    /// `b = log2(γ)`: number of remainder bits in an exponent.
    pub fn log2_gamma(&self) -> u32 {
        self.log2_gamma
    }

    pub fn exponent_bits(&self) -> u32 {
        self.bitwidth - 1
    }

    /// Largest storable exponent magnitude, `2^(B−1) − 1`.
    pub fn max_exponent(&self) -> u32 {
        ((1u64 << self.exponent_bits()) - 1) as u32
    }

    /// Width of the representable range in octaves, `(2^(B−1) − 1)/γ`.
    pub fn dynamic_range(&self) -> f64 {
        self.max_exponent() as f64 / self.gamma as f64
    }

    /// Smallest non-zero magnitude relative to the scale.
    pub fn min_magnitude(&self) -> f64 {
        (-self.dynamic_range()).exp2()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Sign {
    Positive,
    Negative,
}

impl Sign {
    pub fn of(x: f64) -> Sign {
        if x.is_sign_negative() {
            Sign::Negative
        } else {
            Sign::Positive
        }
    }

    pub fn is_negative(self) -> bool {
        self == Sign::Negative
    }

    /// Sign of a product: XOR of the operand sign bits.
    pub fn xor(self, other: Sign) -> Sign {
        if self.is_negative() ^ other.is_negative() {
            Sign::Negative
        } else {
            Sign::Positive
        }
    }

    pub fn to_f64(self) -> f64 {
        match self {
            Sign::Positive => 1.0,
            Sign::Negative => -1.0,
        }
    }

    pub fn to_i64(self) -> i64 {
        match self {
            Sign::Positive => 1,
            Sign::Negative => -1,
        }
    }
}

/// One LNS-encoded value. The scale lives with the owning tensor group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LnsScalar {
    pub sign: Sign,
    pub exponent: u32,
    pub is_zero: bool,
}

impl LnsScalar {
    pub const ZERO: LnsScalar = LnsScalar { sign: Sign::Positive, exponent: 0, is_zero: true };

    pub fn new(sign: Sign, exponent: u32) -> Self {
        LnsScalar { sign, exponent, is_zero: false }
    }

    pub fn is_valid_for(&self, fmt: &LnsFormat) -> bool {
        self.is_zero || self.exponent <= fmt.max_exponent()
    }
}

/// Which slice of a tensor shares one scale factor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Granularity {
    /// One scale for the whole tensor.
    PerTensor,
    /// One scale per index of the leading axis (output rows of a weight matrix).
    PerChannel,
    /// One scale per index of the trailing axis.
    PerFeature,
}

/// The group a scale factor belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScaleGroup {
    Tensor,
    Channel(usize),
    Feature(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaleFactor {
    pub value: f64,
    pub group: ScaleGroup,
}

/// Rounding applied to the scaled log-magnitude before clamping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum RoundingMode {
    /// Round half to even.
    #[default]
    NearestEven,
    /// Unbiased stochastic rounding driven by a seeded stream.
    Stochastic { seed: u64 },
}

/// Stateful rounding engine. Owns the random stream in stochastic mode.
#[derive(Debug, Clone)]
pub struct Rounder {
    rng: Option<ChaCha8Rng>,
}

impl Rounder {
    pub fn new(mode: RoundingMode) -> Self {
        match mode {
            RoundingMode::NearestEven => Rounder { rng: None },
            RoundingMode::Stochastic { seed } => Rounder { rng: Some(ChaCha8Rng::seed_from_u64(seed)) },
        }
    }

    pub fn nearest() -> Self {
        Rounder { rng: None }
    }

    pub fn is_stochastic(&self) -> bool {
        self.rng.is_some()
    }

    /// Rounds to an integral `f64` so that callers can clamp before casting.
    pub fn round(&mut self, x: f64) -> f64 {
        match self.rng.as_mut() {
            None => x.round_ties_even(),
            Some(rng) => stochastic_round_f64(x, rng),
        }
    }
}

fn stochastic_round_f64<R: Rng + ?Sized>(x: f64, rng: &mut R) -> f64 {
    let floor = x.floor();
    let frac = x - floor;
    if frac > 0.0 && rng.random::<f64>() < frac {
        floor + 1.0
    } else {
        floor
    }
}

/// `⌊x⌋ + 1` with probability `x − ⌊x⌋`, otherwise `⌊x⌋`.
pub fn stochastic_round<R: Rng + ?Sized>(x: f64, rng: &mut R) -> i64 {
    stochastic_round_f64(x, rng) as i64
}

/// Logarithmic quantization of one value against group scale `scale`.
///
/// Zero maps to the zero flag. Magnitudes at or above the scale saturate to
/// exponent 0; magnitudes below the representable range flush to the
/// smallest representable magnitude.
pub fn log_quantize(x: f64, fmt: &LnsFormat, scale: f64, rounder: &mut Rounder) -> LnsScalar {
    debug_assert!(scale > 0.0 && x.is_finite());
    if x == 0.0 {
        return LnsScalar::ZERO;
    }
    let sign = Sign::of(x);
    let ratio = x.abs() / scale;
    if ratio >= 1.0 {
        return LnsScalar::new(sign, 0);
    }
    let max = fmt.max_exponent() as f64;
    let scaled = -ratio.log2() * fmt.gamma() as f64;
    let exponent = if scaled >= max { max } else { rounder.round(scaled).clamp(0.0, max) };
    LnsScalar::new(sign, exponent as u32)
}

/// `sign · s · 2^(−e/γ)`, or 0 for the zero flag.
pub fn decode(v: &LnsScalar, fmt: &LnsFormat, scale: f64) -> f64 {
    if v.is_zero {
        return 0.0;
    }
    v.sign.to_f64() * scale * magnitude(v.exponent, fmt.gamma())
}

/// `2^(−e/γ)`.
pub fn magnitude(exponent: u32, gamma: u32) -> f64 {
    (-(exponent as f64) / gamma as f64).exp2()
}
