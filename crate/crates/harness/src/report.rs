//! Run reports: a versioned JSON envelope around each command's results.

use lns_core::analysis::{ErrorRecord, SrBoundCheck};
use lns_core::datapath::{ConformanceReport, OperationTally};
use lns_core::optim::Algorithm;
use lns_core::trainer::TrainReport;
use serde::Serialize;

use crate::config::{ExperimentConfig, Task};

pub const SCHEMA_VERSION: &str = "lns-madam.run-report/1";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub schema: &'static str,
    pub task: Task,
    pub passed: bool,
    pub failures: Vec<String>,
    pub config: ExperimentConfig,
    pub result: CommandResult,
}

impl RunReport {
    pub fn new(config: ExperimentConfig, result: CommandResult) -> Self {
        let failures = result.failures();
        RunReport { schema: SCHEMA_VERSION, task: config.task, passed: failures.is_empty(), failures, config, result }
    }

    pub fn to_json(&self) -> serde_json::Result<String> {
        serde_json::to_string_pretty(self)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum CommandResult {
    Train(TrainReport),
    BaseFactorSweep(BaseFactorReport),
    QuBitwidthSweep(QuSweepReport),
    TheoremCheck(TheoremReport),
    DatapathConformance(ConformanceReport),
    TallyReport(TallyReport),
}

impl CommandResult {
    fn failures(&self) -> Vec<String> {
        match self {
            CommandResult::Train(r) => {
                let m = &r.final_metrics;
                if m.test_loss.is_finite() {
                    vec![]
                } else {
                    vec![format!("final test loss is {}", m.test_loss)]
                }
            }
            CommandResult::TheoremCheck(r) => r.failures.clone(),
            CommandResult::DatapathConformance(r) => r
                .mismatches
                .iter()
                .map(|m| format!("line {}: expected {}, got {}", m.line, m.expected, m.actual))
                .collect(),
            CommandResult::BaseFactorSweep(_) | CommandResult::QuBitwidthSweep(_) | CommandResult::TallyReport(_) => {
                vec![]
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BaseFactorRow {
    pub gamma: u32,
    pub test_accuracies: Vec<f64>,
    pub median_test_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BaseFactorReport {
    pub bitwidth: u32,
    pub steps: usize,
    pub rows: Vec<BaseFactorRow>,
    pub selected_gamma: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuCell {
    pub algorithm: Algorithm,
    pub eta: f64,
    pub bitwidth: u32,
    pub test_accuracies: Vec<f64>,
    pub median_test_accuracy: f64,
    pub zeroed_fraction: f64,
    /// Median accuracy at the reference bitwidth minus this cell's.
    pub drop: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuSweepReport {
    pub reference_bitwidth: u32,
    /// Every candidate learning rate at the reference bitwidth.
    pub tuning: Vec<QuCell>,
    pub cells: Vec<QuCell>,
}

impl QuSweepReport {
    pub fn cell(&self, algorithm: Algorithm, bitwidth: u32) -> Option<&QuCell> {
        self.cells.iter().find(|c| c.algorithm == algorithm && c.bitwidth == bitwidth)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Slope {
    pub algorithm: Algorithm,
    pub axis: &'static str,
    pub slope: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TheoremReport {
    pub records: Vec<ErrorRecord>,
    pub sr_checks: Vec<SrBoundCheck>,
    /// Largest `|empirical − analytic| / analytic` over the SR checks.
    pub sr_max_analytic_deviation: f64,
    pub mul_slopes: Vec<Slope>,
    pub gd_exceeds_mul: bool,
    pub failures: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TallyRow {
    pub mode: String,
    pub bins: usize,
    pub forward: OperationTally,
    pub backward: OperationTally,
    pub total: OperationTally,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TallyReport {
    pub layer_sizes: Vec<usize>,
    pub batch: usize,
    pub vector_size: usize,
    pub rows: Vec<TallyRow>,
    /// Smaller LUTs never need more LUT multiplies.
    pub lut_multiplies_monotone: bool,
}
