use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};

use super::{Conversion, Dataflow};
use crate::format::LnsFormat;

/// Operation counts of the MAC datapath, used as an energy proxy.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct OperationTally {
    pub exponent_adds: u64,
    pub xor_ops: u64,
    pub shifts: u64,
    pub tree_adds: u64,
    pub lut_multiplies: u64,
    pub accumulator_adds: u64,
}

impl OperationTally {
    pub fn total(&self) -> u64 {
        self.exponent_adds + self.xor_ops + self.shifts + self.tree_adds + self.lut_multiplies + self.accumulator_adds
    }
}

impl Add for OperationTally {
    type Output = OperationTally;

    fn add(mut self, rhs: OperationTally) -> OperationTally {
        self += rhs;
        self
    }
}

impl AddAssign for OperationTally {
    fn add_assign(&mut self, rhs: OperationTally) {
        self.exponent_adds += rhs.exponent_adds;
        self.xor_ops += rhs.xor_ops;
        self.shifts += rhs.shifts;
        self.tree_adds += rhs.tree_adds;
        self.lut_multiplies += rhs.lut_multiplies;
        self.accumulator_adds += rhs.accumulator_adds;
    }
}

/// Closed-form counts for `dot_products` vector operations of `lanes` lanes each.
///
/// Every lane costs one exponent add, one sign XOR, one shift and one tree
/// add; every vector operation costs one LUT multiply and one accumulator add
/// per remainder bin (`γ` exact, `2^lut_bits` hybrid).
pub fn tally(dot_products: u64, lanes: u64, fmt: &LnsFormat, conversion: Conversion) -> OperationTally {
    let lane_ops = dot_products * lanes;
    let bin_ops = dot_products * conversion.bins(fmt) as u64;
    OperationTally {
        exponent_adds: lane_ops,
        xor_ops: lane_ops,
        shifts: lane_ops,
        tree_adds: lane_ops,
        lut_multiplies: bin_ops,
        accumulator_adds: bin_ops,
    }
}

/// Closed-form counts for one pass of a `inputs → outputs` affine layer over
/// `batch` samples, with reductions split into `vector_size`-lane chunks.
pub fn pass_tally(
    dataflow: Dataflow,
    batch: usize,
    inputs: usize,
    outputs: usize,
    vector_size: usize,
    fmt: &LnsFormat,
    conversion: Conversion,
) -> OperationTally {
    let (dots, reduction) = dataflow.shape(batch, inputs, outputs);
    let (full, rest) = (reduction / vector_size, reduction % vector_size);
    let mut t = tally((dots * full) as u64, vector_size as u64, fmt, conversion);
    if rest > 0 {
        t += tally(dots as u64, rest as u64, fmt, conversion);
    }
    t
}
