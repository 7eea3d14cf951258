//! Multi-base logarithmic number system (LNS) arithmetic, a bit-accurate LNS
//! MAC datapath simulator, and low-precision training with multiplicative
//! weight updates.

pub mod analysis;
pub mod data;
pub mod datapath;
pub mod error;
pub mod format;
pub mod nn;
pub mod optim;
pub mod quant;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use format::{Granularity, LnsFormat, LnsScalar, Rounder, RoundingMode, ScaleFactor, Sign};
pub use tensor::LnsTensor;
