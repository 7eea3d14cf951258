//! Golden-vector conformance files.
//!
//! One vector per line:
//!
//! ```text
//! exponents_a | signs_a | exponents_b | signs_b | expected_partial_sum_hex
//! 0,8 | ++ | 0,0 | ++ | 0xC00000
//! ```
//!
//! Exponents are comma-separated decimals, `z` marks a zero lane. Signs are
//! one `+`/`-` character per lane. The expected value is the signed partial
//! sum in hex (`-0x…` for negatives). Blank lines and `#` comments are
//! ignored. A line starting with `@` sets `key=value` options for the
//! vectors that follow: `bitwidth`, `gamma`, `frac_bits`, `accumulator_bits`,
//! `vector_size`, `conversion` (`exact` or `hybrid:<lut_bits>`).

use serde::Serialize;

use super::{lns_multiply, Conversion, HybridSplit, LnsSlice, MacConfig, MacUnit};
use crate::error::{Error, Result};
use crate::format::{LnsFormat, LnsScalar, Sign};

#[derive(Debug, Clone, PartialEq)]
pub struct GoldenVector {
    pub line: usize,
    pub config: MacConfig,
    pub conversion: Conversion,
    pub a: Vec<LnsScalar>,
    pub b: Vec<LnsScalar>,
    pub expected: i64,
}

impl GoldenVector {
    /// Renders the vector as one golden-file line (without options).
    pub fn to_line(&self) -> String {
        let exps = |v: &[LnsScalar]| {
            v.iter()
                .map(|e| if e.is_zero { "z".to_string() } else { e.exponent.to_string() })
                .collect::<Vec<_>>()
                .join(",")
        };
        let signs =
            |v: &[LnsScalar]| v.iter().map(|e| if e.sign.is_negative() { '-' } else { '+' }).collect::<String>();
        format!(
            "{} | {} | {} | {} | {}",
            exps(&self.a),
            signs(&self.a),
            exps(&self.b),
            signs(&self.b),
            format_hex(self.expected)
        )
    }
}

pub fn format_hex(v: i64) -> String {
    if v < 0 {
        format!("-0x{:X}", v.unsigned_abs())
    } else {
        format!("0x{v:X}")
    }
}

fn parse_hex(s: &str) -> Option<i64> {
    let (neg, body) = match s.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, s),
    };
    let digits = body.strip_prefix("0x").or_else(|| body.strip_prefix("0X"))?;
    let mag = i64::from_str_radix(digits, 16).ok()?;
    Some(if neg { -mag } else { mag })
}

fn parse_lanes(exps: &str, signs: &str, line: usize) -> Result<Vec<LnsScalar>> {
    let err = |message: String| Error::Parse { line, message };
    let exps: Vec<&str> = if exps.trim().is_empty() { vec![] } else { exps.split(',').map(str::trim).collect() };
    let signs: Vec<char> = signs.trim().chars().collect();
    if exps.len() != signs.len() {
        return Err(err(format!("{} exponents but {} signs", exps.len(), signs.len())));
    }
    exps.iter()
        .zip(&signs)
        .map(|(e, s)| {
            let sign = match s {
                '+' => Sign::Positive,
                '-' => Sign::Negative,
                other => return Err(err(format!("bad sign character {other:?}"))),
            };
            if *e == "z" {
                return Ok(LnsScalar::ZERO);
            }
            let exponent = e.parse::<u32>().map_err(|_| err(format!("bad exponent {e:?}")))?;
            Ok(LnsScalar::new(sign, exponent))
        })
        .collect()
}

fn apply_option(
    config: &mut MacConfig,
    conversion: &mut Conversion,
    key: &str,
    value: &str,
    line: usize,
) -> Result<()> {
    let err = |message: String| Error::Parse { line, message };
    let num = || value.parse::<u32>().map_err(|_| err(format!("bad value {value:?} for {key}")));
    match key {
        "bitwidth" => {
            let f = LnsFormat::new(num()?, config.format.gamma()).map_err(|e| err(e.to_string()))?;
            config.format = f;
            config.input_bitwidth = f.bitwidth();
        }
        "gamma" => {
            let f = LnsFormat::new(config.format.bitwidth(), num()?).map_err(|e| err(e.to_string()))?;
            config.format = f;
            config.remainder_bins = f.gamma() as usize;
        }
        "frac_bits" => config.frac_bits = num()?,
        "accumulator_bits" => config.accumulator_bits = num()?,
        "vector_size" => config.vector_size = num()? as usize,
        "conversion" => {
            *conversion = match value.split_once(':') {
                None if value == "exact" => Conversion::Exact,
                Some(("hybrid", bits)) => {
                    let bits = bits.parse::<u32>().map_err(|_| err(format!("bad lut bits {bits:?}")))?;
                    Conversion::Hybrid(HybridSplit::new(&config.format, bits).map_err(|e| err(e.to_string()))?)
                }
                _ => return Err(err(format!("unknown conversion {value:?}"))),
            }
        }
        other => return Err(err(format!("unknown option {other:?}"))),
    }
    Ok(())
}

/// Parses a golden file. Errors carry 1-based line numbers.
pub fn parse_golden(text: &str) -> Result<Vec<GoldenVector>> {
    let mut config = MacConfig::default();
    let mut conversion = Conversion::Exact;
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        if let Some(opts) = content.strip_prefix('@') {
            for kv in opts.split_whitespace() {
                let (k, v) = kv
                    .split_once('=')
                    .ok_or_else(|| Error::Parse { line, message: format!("expected key=value, got {kv:?}") })?;
                apply_option(&mut config, &mut conversion, k, v, line)?;
            }
            if let Conversion::Hybrid(split) = conversion {
                split.validate(&config.format).map_err(|e| Error::Parse { line, message: e.to_string() })?;
            }
            config.validate().map_err(|e| Error::Parse { line, message: e.to_string() })?;
            continue;
        }
        let fields: Vec<&str> = content.split('|').map(str::trim).collect();
        if fields.len() != 5 {
            return Err(Error::Parse {
                line,
                message: format!("expected 5 '|'-separated fields, got {}", fields.len()),
            });
        }
        let a = parse_lanes(fields[0], fields[1], line)?;
        let b = parse_lanes(fields[2], fields[3], line)?;
        if a.len() != b.len() {
            return Err(Error::Parse { line, message: format!("operand lengths differ: {} vs {}", a.len(), b.len()) });
        }
        let expected = parse_hex(fields[4])
            .ok_or_else(|| Error::Parse { line, message: format!("bad hex value {:?}", fields[4]) })?;
        out.push(GoldenVector { line, config, conversion, a, b, expected });
    }
    Ok(out)
}

/// Per-lane view of a mismatching vector.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LaneDiff {
    pub lane: usize,
    pub exponent_sum: Option<u64>,
    pub negative: bool,
    pub bin: usize,
    pub lane_value: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Mismatch {
    pub line: usize,
    pub expected: String,
    pub actual: String,
    pub saturated: bool,
    pub lanes: Vec<LaneDiff>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConformanceReport {
    pub vectors: usize,
    pub passed: usize,
    pub mismatches: Vec<Mismatch>,
    pub warnings: Vec<String>,
}

impl ConformanceReport {
    pub fn ok(&self) -> bool {
        self.mismatches.is_empty()
    }
}

/// Runs every vector through the MAC simulator and compares bit-for-bit.
pub fn run_conformance(vectors: &[GoldenVector]) -> ConformanceReport {
    let mut report = ConformanceReport { vectors: vectors.len(), passed: 0, mismatches: vec![], warnings: vec![] };
    if vectors.is_empty() {
        report.warnings.push("no golden vectors found; conformance is vacuous".into());
    }
    for v in vectors {
        let outcome = MacUnit::new(v.config, v.conversion).and_then(|unit| {
            let ps = unit.dot(LnsSlice::new(v.config.format, &v.a), LnsSlice::new(v.config.format, &v.b))?;
            Ok((unit, ps))
        });
        match outcome {
            Ok((_, ps)) if ps.value == v.expected => report.passed += 1,
            Ok((unit, ps)) => {
                let lanes =
                    v.a.iter()
                        .zip(&v.b)
                        .enumerate()
                        .map(|(lane, (x, y))| {
                            let term = lns_multiply(x, y);
                            let (bin, lane_value) = unit.converter().lane(&term);
                            LaneDiff {
                                lane,
                                exponent_sum: (!term.is_zero).then_some(term.exponent_sum),
                                negative: term.sign.is_negative(),
                                bin,
                                lane_value,
                            }
                        })
                        .collect();
                report.mismatches.push(Mismatch {
                    line: v.line,
                    expected: format_hex(v.expected),
                    actual: format_hex(ps.value),
                    saturated: ps.saturated,
                    lanes,
                    error: None,
                });
            }
            Err(e) => report.mismatches.push(Mismatch {
                line: v.line,
                expected: format_hex(v.expected),
                actual: String::new(),
                saturated: false,
                lanes: vec![],
                error: Some(e.to_string()),
            }),
        }
    }
    report
}
