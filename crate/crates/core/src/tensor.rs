//! LNS tensor container, group scaling and the packed binary layout.
//!
//! # Binary layout (little-endian, version 1)
//!
//! | offset | size        | field                                            |
//! |--------|-------------|--------------------------------------------------|
//! | 0      | 4           | magic `b"LNST"`                                  |
//! | 4      | 1           | version = 1                                      |
//! | 5      | 1           | bitwidth `B`                                     |
//! | 6      | 1           | granularity: 0 tensor, 1 channel, 2 feature      |
//! | 7      | 1           | reserved, 0                                      |
//! | 8      | 4           | base factor `γ` (u32)                            |
//! | 12     | 4           | rank `n` (u32)                                   |
//! | 16     | 8·n         | dimensions (u64 each)                            |
//! | ..     | ⌈N(B+1)/8⌉  | element records, bit-packed LSB first            |
//! | ..     | 4           | group count `G` (u32)                            |
//! | ..     | 8·G         | group scales (f64 each)                          |
//!
//! Each element record is `B + 1` bits wide: bit 0 is the sign (1 = negative),
//! bits `1..B` hold the `B − 1` exponent bits least significant first, and
//! bit `B` is the zero flag. Zero elements store sign and exponent as 0.
//! Record `k` starts at bit `k·(B+1)` of the record area; unused bits of the
//! final byte are 0.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format::{decode, log_quantize, Granularity, LnsFormat, LnsScalar, Rounder, ScaleFactor, ScaleGroup, Sign};

const MAGIC: &[u8; 4] = b"LNST";
const VERSION: u8 = 1;

/// Number of scale groups and the group of each flat index for a shape.
#[derive(Debug, Clone, Copy)]
struct GroupLayout {
    granularity: Granularity,
    leading: usize,
    inner: usize,
    trailing: usize,
}

impl GroupLayout {
    fn new(shape: &[usize], granularity: Granularity) -> Self {
        let count: usize = shape.iter().product();
        let leading = shape.first().copied().unwrap_or(1).max(1);
        let trailing = shape.last().copied().unwrap_or(1).max(1);
        GroupLayout { granularity, leading, inner: (count / leading).max(1), trailing }
    }

    fn groups(&self) -> usize {
        match self.granularity {
            Granularity::PerTensor => 1,
            Granularity::PerChannel => self.leading,
            Granularity::PerFeature => self.trailing,
        }
    }

    fn group_of(&self, index: usize) -> usize {
        match self.granularity {
            Granularity::PerTensor => 0,
            Granularity::PerChannel => index / self.inner,
            Granularity::PerFeature => index % self.trailing,
        }
    }

    fn descriptor(&self, group: usize) -> ScaleGroup {
        match self.granularity {
            Granularity::PerTensor => ScaleGroup::Tensor,
            Granularity::PerChannel => ScaleGroup::Channel(group),
            Granularity::PerFeature => ScaleGroup::Feature(group),
        }
    }
}

fn check_shape(len: usize, shape: &[usize]) -> Result<()> {
    let count: usize = shape.iter().product();
    if count != len {
        return Err(Error::Data(format!("shape {shape:?} holds {count} elements but {len} were given")));
    }
    Ok(())
}

/// One scale per group, `s = max |x|` over the group. All-zero groups get `s = 1`.
pub fn compute_scales(values: &[f64], shape: &[usize], granularity: Granularity) -> Result<Vec<ScaleFactor>> {
    if values.is_empty() {
        return Err(Error::Data("cannot scale an empty tensor".into()));
    }
    check_shape(values.len(), shape)?;
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::Data(format!("non-finite value {} at index {i}", values[i])));
    }
    let layout = GroupLayout::new(shape, granularity);
    let mut max = vec![0.0f64; layout.groups()];
    for (i, v) in values.iter().enumerate() {
        let g = layout.group_of(i);
        max[g] = max[g].max(v.abs());
    }
    Ok(max
        .into_iter()
        .enumerate()
        .map(|(g, m)| ScaleFactor { value: if m > 0.0 { m } else { 1.0 }, group: layout.descriptor(g) })
        .collect())
}

/// A quantized tensor: packed sign/exponent elements plus per-group scales.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LnsTensor {
    shape: Vec<usize>,
    format: LnsFormat,
    granularity: Granularity,
    elements: Vec<LnsScalar>,
    scales: Vec<ScaleFactor>,
}

impl LnsTensor {
    /// Assembles a tensor from already encoded parts, validating every invariant.
    pub fn from_parts(
        shape: Vec<usize>,
        format: LnsFormat,
        granularity: Granularity,
        elements: Vec<LnsScalar>,
        scales: Vec<ScaleFactor>,
    ) -> Result<Self> {
        check_shape(elements.len(), &shape)?;
        let layout = GroupLayout::new(&shape, granularity);
        if scales.len() != layout.groups() {
            return Err(Error::Data(format!("expected {} scale groups, got {}", layout.groups(), scales.len())));
        }
        if let Some(s) = scales.iter().find(|s| !(s.value > 0.0 && s.value.is_finite())) {
            return Err(Error::Data(format!("scale {} is not positive and finite", s.value)));
        }
        if let Some(i) = elements.iter().position(|e| !e.is_valid_for(&format)) {
            return Err(Error::Data(format!(
                "element {i} exponent {} exceeds format maximum {}",
                elements[i].exponent,
                format.max_exponent()
            )));
        }
        Ok(LnsTensor { shape, format, granularity, elements, scales })
    }

    /// Computes group scales from the data, then quantizes every element.
    pub fn quantize(
        values: &[f64],
        shape: &[usize],
        format: LnsFormat,
        granularity: Granularity,
        rounder: &mut Rounder,
    ) -> Result<Self> {
        let scales = compute_scales(values, shape, granularity)?;
        Self::quantize_with_scales(values, shape, format, granularity, scales, rounder)
    }

    /// Quantizes against caller-provided scales (e.g. scales frozen at initialization).
    pub fn quantize_with_scales(
        values: &[f64],
        shape: &[usize],
        format: LnsFormat,
        granularity: Granularity,
        scales: Vec<ScaleFactor>,
        rounder: &mut Rounder,
    ) -> Result<Self> {
        check_shape(values.len(), shape)?;
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite value {} at index {i}", values[i])));
        }
        let layout = GroupLayout::new(shape, granularity);
        if scales.len() != layout.groups() {
            return Err(Error::Data(format!("expected {} scale groups, got {}", layout.groups(), scales.len())));
        }
        let elements = values
            .iter()
            .enumerate()
            .map(|(i, &x)| log_quantize(x, &format, scales[layout.group_of(i)].value, rounder))
            .collect();
        Self::from_parts(shape.to_vec(), format, granularity, elements, scales)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn format(&self) -> &LnsFormat {
        &self.format
    }

    pub fn granularity(&self) -> Granularity {
        self.granularity
    }

    pub fn elements(&self) -> &[LnsScalar] {
        &self.elements
    }

    pub fn elements_mut(&mut self) -> &mut [LnsScalar] {
        &mut self.elements
    }

    pub fn scales(&self) -> &[ScaleFactor] {
        &self.scales
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    /// Index of the scale group that element `index` belongs to.
    pub fn group_of(&self, index: usize) -> usize {
        GroupLayout::new(&self.shape, self.granularity).group_of(index)
    }

    pub fn scale_of(&self, index: usize) -> f64 {
        self.scales[self.group_of(index)].value
    }

    pub fn decode_at(&self, index: usize) -> f64 {
        decode(&self.elements[index], &self.format, self.scale_of(index))
    }

    pub fn decode(&self) -> Vec<f64> {
        let layout = GroupLayout::new(&self.shape, self.granularity);
        self.elements
            .iter()
            .enumerate()
            .map(|(i, e)| decode(e, &self.format, self.scales[layout.group_of(i)].value))
            .collect()
    }

    /// Re-encodes into a narrower format with `γ_out = γ / 2^k` by dropping the
    /// `k` least significant exponent bits (truncation). Scales are kept.
    pub fn narrow(&self, target: LnsFormat) -> Result<Self> {
        if target.gamma() > self.format.gamma() {
            return Err(Error::Format(format!(
                "cannot narrow base factor {} to {}",
                self.format.gamma(),
                target.gamma()
            )));
        }
        let shift = self.format.log2_gamma() - target.log2_gamma();
        let max = target.max_exponent();
        let elements = self
            .elements
            .iter()
            .map(|e| if e.is_zero { LnsScalar::ZERO } else { LnsScalar::new(e.sign, (e.exponent >> shift).min(max)) })
            .collect();
        Self::from_parts(self.shape.clone(), target, self.granularity, elements, self.scales.clone())
    }

    /// Serializes to the packed binary layout documented at module level.
    pub fn to_bytes(&self) -> Vec<u8> {
        let b = self.format.bitwidth();
        let mut out = Vec::with_capacity(16 + 8 * self.shape.len() + self.len() * 5 + 4 + 8 * self.scales.len());
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.push(b as u8);
        out.push(granularity_code(self.granularity));
        out.push(0);
        out.extend_from_slice(&self.format.gamma().to_le_bytes());
        out.extend_from_slice(&(self.shape.len() as u32).to_le_bytes());
        for d in &self.shape {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        let mut writer = BitWriter::default();
        for e in &self.elements {
            let record: u64 =
                if e.is_zero { 1u64 << b } else { (e.sign.is_negative() as u64) | ((e.exponent as u64) << 1) };
            writer.push(record, b + 1);
        }
        out.extend_from_slice(&writer.finish());
        out.extend_from_slice(&(self.scales.len() as u32).to_le_bytes());
        for s in &self.scales {
            out.extend_from_slice(&s.value.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Encoding("bad magic".into()));
        }
        let version = r.u8()?;
        if version != VERSION {
            return Err(Error::Encoding(format!("unsupported version {version}")));
        }
        let bitwidth = r.u8()? as u32;
        let granularity = match r.u8()? {
            0 => Granularity::PerTensor,
            1 => Granularity::PerChannel,
            2 => Granularity::PerFeature,
            other => return Err(Error::Encoding(format!("unknown granularity code {other}"))),
        };
        r.u8()?;
        let gamma = r.u32()?;
        let format = LnsFormat::new(bitwidth, gamma)?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            shape.push(usize::try_from(r.u64()?).map_err(|_| Error::Encoding("dimension overflow".into()))?);
        }
        let count = shape
            .iter()
            .try_fold(1usize, |acc, d| acc.checked_mul(*d))
            .ok_or_else(|| Error::Encoding("element count overflow".into()))?;
        let record_bits = bitwidth as usize + 1;
        let record_bytes = count
            .checked_mul(record_bits)
            .map(|bits| bits.div_ceil(8))
            .ok_or_else(|| Error::Encoding("element count overflow".into()))?;
        let mut reader = BitReader::new(r.take(record_bytes)?);
        let exp_mask = (1u64 << (bitwidth - 1)) - 1;
        let mut elements = Vec::with_capacity(count);
        for _ in 0..count {
            let rec = reader.pull(bitwidth + 1);
            if rec >> bitwidth & 1 == 1 {
                elements.push(LnsScalar::ZERO);
            } else {
                let sign = if rec & 1 == 1 { Sign::Negative } else { Sign::Positive };
                elements.push(LnsScalar::new(sign, ((rec >> 1) & exp_mask) as u32));
            }
        }
        let groups = r.u32()? as usize;
        let layout = GroupLayout::new(&shape, granularity);
        if groups != layout.groups() {
            return Err(Error::Encoding(format!("header implies {} scale groups, found {groups}", layout.groups())));
        }
        let mut scales = Vec::with_capacity(groups);
        for g in 0..groups {
            scales.push(ScaleFactor { value: f64::from_le_bytes(r.array()?), group: layout.descriptor(g) });
        }
        if r.pos != bytes.len() {
            return Err(Error::Encoding(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Self::from_parts(shape, format, granularity, elements, scales).map_err(|e| Error::Encoding(e.to_string()))
    }

    /// Human-readable dump including decoded values.
    pub fn to_debug_json(&self) -> serde_json::Value {
        serde_json::json!({
            "format": self.format,
            "shape": self.shape,
            "granularity": self.granularity,
            "scales": self.scales,
            "elements": self.elements,
            "decoded": self.decode(),
        })
    }
}

fn granularity_code(g: Granularity) -> u8 {
    match g {
        Granularity::PerTensor => 0,
        Granularity::PerChannel => 1,
        Granularity::PerFeature => 2,
    }
}

#[derive(Default)]
struct BitWriter {
    bytes: Vec<u8>,
    acc: u64,
    bits: u32,
}

impl BitWriter {
    fn push(&mut self, value: u64, width: u32) {
        // width ≤ 33, so at most 7 pending bits plus the record fit in the accumulator
        self.acc |= value << self.bits;
        self.bits += width;
        while self.bits >= 8 {
            self.bytes.push(self.acc as u8);
            self.acc >>= 8;
            self.bits -= 8;
        }
    }

    fn finish(mut self) -> Vec<u8> {
        if self.bits > 0 {
            self.bytes.push(self.acc as u8);
        }
        self.bytes
    }
}

struct BitReader<'a> {
    bytes: &'a [u8],
    next: usize,
    acc: u64,
    bits: u32,
}

impl<'a> BitReader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        BitReader { bytes, next: 0, acc: 0, bits: 0 }
    }

    fn pull(&mut self, width: u32) -> u64 {
        while self.bits < width {
            let byte = self.bytes.get(self.next).copied().unwrap_or(0);
            self.acc |= (byte as u64) << self.bits;
            self.next += 1;
            self.bits += 8;
        }
        let v = self.acc & ((1u64 << width) - 1);
        self.acc >>= width;
        self.bits -= width;
        v
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Encoding(format!("truncated at byte {} (wanted {n} more)", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn f88() -> LnsFormat {
        LnsFormat::new(8, 8).unwrap()
    }

    #[test]
    fn scale_examples() {
        let s = compute_scales(&[1.0, -4.0, 2.0], &[3], Granularity::PerTensor).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].value, 4.0);
        assert_eq!(s[0].group, ScaleGroup::Tensor);

        let s = compute_scales(&[1.0, 2.0, 8.0, 0.5], &[2, 2], Granularity::PerChannel).unwrap();
        assert_eq!(s.iter().map(|s| s.value).collect::<Vec<_>>(), vec![2.0, 8.0]);
        assert_eq!(s[1].group, ScaleGroup::Channel(1));

        let s = compute_scales(&[1.0, 2.0, 8.0, 0.5], &[2, 2], Granularity::PerFeature).unwrap();
        assert_eq!(s.iter().map(|s| s.value).collect::<Vec<_>>(), vec![8.0, 2.0]);

        let s = compute_scales(&[0.0, 0.0, 0.0], &[3], Granularity::PerTensor).unwrap();
        assert_eq!(s[0].value, 1.0);
    }

    #[test]
    fn scale_errors() {
        assert!(matches!(compute_scales(&[], &[0], Granularity::PerTensor), Err(Error::Data(_))));
        assert!(matches!(compute_scales(&[1.0, f64::NAN], &[2], Granularity::PerTensor), Err(Error::Data(_))));
        assert!(matches!(compute_scales(&[f64::INFINITY], &[1], Granularity::PerTensor), Err(Error::Data(_))));
        assert!(matches!(compute_scales(&[1.0, 2.0], &[3], Granularity::PerTensor), Err(Error::Data(_))));
    }

    #[test]
    fn quantize_tensor_examples() {
        let mut r = Rounder::nearest();
        let t = LnsTensor::quantize(&[3.0, 4.0], &[2], f88(), Granularity::PerTensor, &mut r).unwrap();
        let d = t.decode();
        assert!((d[0] - 3.084_421_650_815_882).abs() < 1e-14);
        assert_eq!(d[1], 4.0);

        let xs = [2.5, -2.5, 0.0, 0.0, 2.5];
        let t = LnsTensor::quantize(&xs, &[5], f88(), Granularity::PerTensor, &mut r).unwrap();
        assert_eq!(t.decode(), xs.to_vec());

        let t = LnsTensor::quantize(&[0.0; 4], &[2, 2], f88(), Granularity::PerChannel, &mut r).unwrap();
        assert!(t.elements().iter().all(|e| e.is_zero));
        assert_eq!(t.decode(), vec![0.0; 4]);
    }

    #[test]
    fn narrow_drops_low_bits() {
        let wide = LnsFormat::new(16, 2048).unwrap();
        let mut r = Rounder::nearest();
        let xs: Vec<f64> = (1..=64).map(|i| (i as f64 * 0.731).sin()).collect();
        let t = LnsTensor::quantize(&xs, &[8, 8], wide, Granularity::PerChannel, &mut r).unwrap();
        let n = t.narrow(f88()).unwrap();
        for (a, b) in t.elements().iter().zip(n.elements()) {
            assert_eq!(b.exponent, a.exponent >> 8);
            assert_eq!(a.sign, b.sign);
        }
        assert!(t.narrow(LnsFormat::new(16, 4096).unwrap()).is_err());
    }

    #[test]
    fn binary_layout_is_pinned() {
        let elements = vec![LnsScalar::new(Sign::Negative, 3), LnsScalar::ZERO, LnsScalar::new(Sign::Positive, 1)];
        let scales = vec![ScaleFactor { value: 2.0, group: ScaleGroup::Tensor }];
        let t = LnsTensor::from_parts(vec![3], LnsFormat::new(4, 2).unwrap(), Granularity::PerTensor, elements, scales)
            .unwrap();
        let bytes = t.to_bytes();
        // records of 5 bits: 0b00111, 0b10000, 0b00010, packed LSB first into 15 bits
        let mut expected = b"LNST".to_vec();
        expected.extend_from_slice(&[1, 4, 0, 0]);
        expected.extend_from_slice(&2u32.to_le_bytes());
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&3u64.to_le_bytes());
        expected.extend_from_slice(&[0b0000_0111, 0b0000_1010]);
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&2.0f64.to_le_bytes());
        assert_eq!(bytes, expected);
        assert_eq!(LnsTensor::from_bytes(&bytes).unwrap(), t);
    }

    #[test]
    fn from_bytes_rejects_garbage() {
        let mut r = Rounder::nearest();
        let t = LnsTensor::quantize(&[1.0, -0.25], &[2], f88(), Granularity::PerTensor, &mut r).unwrap();
        let bytes = t.to_bytes();
        assert!(LnsTensor::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(LnsTensor::from_bytes(&bad).is_err());
        let mut bad = bytes.clone();
        bad.push(0);
        assert!(LnsTensor::from_bytes(&bad).is_err());
        let mut bad = bytes;
        bad[8] = 3;
        assert!(matches!(LnsTensor::from_bytes(&bad), Err(Error::Format(_))));
    }

    #[test]
    fn debug_json_has_decoded_values() {
        let mut r = Rounder::nearest();
        let t = LnsTensor::quantize(&[1.0, -0.5], &[2], f88(), Granularity::PerTensor, &mut r).unwrap();
        let j = t.to_debug_json();
        assert_eq!(j["decoded"], serde_json::json!([1.0, -0.5]));
        assert_eq!(j["format"]["gamma"], 8);
    }

    proptest! {
        #[test]
        fn binary_round_trip(
            b in 2u32..=32,
            log_g in 0u32..6,
            rows in 1usize..5,
            cols in 1usize..7,
            gran in 0u8..3,
            seed in any::<u64>(),
        ) {
            let fmt = LnsFormat::new(b, 1 << log_g).unwrap();
            let granularity = [Granularity::PerTensor, Granularity::PerChannel, Granularity::PerFeature][gran as usize];
            let mut state = seed | 1;
            let xs: Vec<f64> = (0..rows * cols).map(|_| {
                state ^= state << 13; state ^= state >> 7; state ^= state << 17;
                if state % 5 == 0 { 0.0 } else { (state % 10_000) as f64 / 777.0 - 6.0 }
            }).collect();
            let mut r = Rounder::nearest();
            let t = LnsTensor::quantize(&xs, &[rows, cols], fmt, granularity, &mut r).unwrap();
            prop_assert_eq!(LnsTensor::from_bytes(&t.to_bytes()).unwrap(), t);
        }

        #[test]
        fn group_max_decodes_exactly(xs in prop::collection::vec(-1e6f64..1e6, 1..40)) {
            let mut r = Rounder::nearest();
            let t = LnsTensor::quantize(&xs, &[xs.len()], f88(), Granularity::PerTensor, &mut r).unwrap();
            let s = t.scales()[0].value;
            let dec = t.decode();
            for (x, d) in xs.iter().zip(&dec) {
                if x.abs() == s && s > 0.0 {
                    prop_assert_eq!(*d, *x);
                }
            }
        }

        #[test]
        fn nearest_is_monotone(a in 1e-8f64..1.0, b in 1e-8f64..1.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let mut r = Rounder::nearest();
            let f = f88();
            let elo = log_quantize(lo, &f, 1.0, &mut r).exponent;
            let ehi = log_quantize(hi, &f, 1.0, &mut r).exponent;
            prop_assert!(elo >= ehi);
        }

        #[test]
        fn stochastic_quantize_is_deterministic_per_seed(seed in any::<u64>(), xs in prop::collection::vec(-10.0f64..10.0, 1..30)) {
            let mode = crate::format::RoundingMode::Stochastic { seed };
            let a = LnsTensor::quantize(&xs, &[xs.len()], f88(), Granularity::PerTensor, &mut Rounder::new(mode)).unwrap();
            let b = LnsTensor::quantize(&xs, &[xs.len()], f88(), Granularity::PerTensor, &mut Rounder::new(mode)).unwrap();
            prop_assert_eq!(a.to_bytes(), b.to_bytes());
        }
    }
}
