//! Quantizer configuration shared by the forward/backward pass and the optimizer.

use serde::{Deserialize, Serialize};

use crate::datapath::HybridSplit;
use crate::error::Result;
use crate::format::{Granularity, LnsFormat, Rounder, RoundingMode};
use crate::tensor::LnsTensor;

/// Which tensor class a quantizer is attached to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    /// Weights in the forward pass.
    Weight,
    /// Activations in the forward pass.
    Activation,
    /// Activation gradients in the backward pass.
    Error,
    /// Weight gradients in the backward pass.
    Gradient,
    /// Weight updates (consumed by the optimizer only).
    Update,
    /// Bypass: values stay full precision.
    None,
}

/// How the affine map of a layer is evaluated in the forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ConversionMode {
    /// f64 arithmetic on decoded values.
    #[default]
    RealReference,
    /// The bit-accurate MAC simulator with exact LUT conversion.
    ExactDatapath,
    /// The MAC simulator with hybrid LUT/Mitchell conversion.
    Hybrid(HybridSplit),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantizerConfig {
    pub role: Role,
    pub format: LnsFormat,
    pub rounding: RoundingMode,
    pub granularity: Granularity,
    pub conversion: ConversionMode,
}

impl QuantizerConfig {
    pub fn new(role: Role, format: LnsFormat, granularity: Granularity) -> Self {
        QuantizerConfig {
            role,
            format,
            rounding: RoundingMode::NearestEven,
            granularity,
            conversion: ConversionMode::RealReference,
        }
    }

    /// A full-precision bypass.
    pub fn bypass() -> Self {
        QuantizerConfig::new(Role::None, LnsFormat::new(8, 8).expect("valid"), Granularity::PerTensor)
    }

    pub fn is_bypass(&self) -> bool {
        self.role == Role::None
    }

    pub fn with_rounding(mut self, rounding: RoundingMode) -> Self {
        self.rounding = rounding;
        self
    }

    pub fn with_conversion(mut self, conversion: ConversionMode) -> Self {
        self.conversion = conversion;
        self
    }
}

/// A configured quantizer together with its rounding stream.
#[derive(Debug, Clone)]
pub struct Quantizer {
    config: QuantizerConfig,
    rounder: Rounder,
}

impl Quantizer {
    pub fn new(config: QuantizerConfig) -> Self {
        Quantizer { rounder: Rounder::new(config.rounding), config }
    }

    pub fn config(&self) -> &QuantizerConfig {
        &self.config
    }

    pub fn is_bypass(&self) -> bool {
        self.config.is_bypass()
    }

    /// Scales per the configured granularity, then log-quantizes every element.
    pub fn quantize_tensor(&mut self, values: &[f64], shape: &[usize]) -> Result<LnsTensor> {
        LnsTensor::quantize(values, shape, self.config.format, self.config.granularity, &mut self.rounder)
    }

    /// Quantize-dequantize. Bypass quantizers return the input unchanged.
    pub fn fake_quantize(&mut self, values: &[f64], shape: &[usize]) -> Result<Vec<f64>> {
        if self.is_bypass() {
            return Ok(values.to_vec());
        }
        Ok(self.quantize_tensor(values, shape)?.decode())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bypass_is_identity() {
        let mut q = Quantizer::new(QuantizerConfig::bypass());
        let xs = [0.1, -3.3, 1e-30];
        assert_eq!(q.fake_quantize(&xs, &[3]).unwrap(), xs.to_vec());
    }

    #[test]
    fn fake_quantize_is_idempotent() {
        let cfg = QuantizerConfig::new(Role::Activation, LnsFormat::new(8, 8).unwrap(), Granularity::PerTensor);
        let mut q = Quantizer::new(cfg);
        let xs: Vec<f64> = (0..50).map(|i| ((i * 37 % 23) as f64 - 11.0) * 0.173).collect();
        let once = q.fake_quantize(&xs, &[50]).unwrap();
        let twice = q.fake_quantize(&once, &[50]).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn config_serde_round_trip() {
        let cfg = QuantizerConfig::new(Role::Gradient, LnsFormat::new(8, 8).unwrap(), Granularity::PerChannel)
            .with_rounding(RoundingMode::Stochastic { seed: 5 })
            .with_conversion(ConversionMode::Hybrid(HybridSplit { lut_bits: 1, mitchell_bits: 2 }));
        let s = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<QuantizerConfig>(&s).unwrap(), cfg);
    }
}
