//! Writes a report as `report.json` plus one CSV table per task.

use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::error::{io_err, Result};
use crate::report::{CommandResult, RunReport};

#[derive(Serialize)]
struct TheoremRow<'a> {
    algorithm: &'a str,
    eta: f64,
    gamma: u64,
    d: usize,
    trials: usize,
    mean_r: f64,
    bound: f64,
    pass: bool,
}

#[derive(Serialize)]
struct AccuracyRow<'a> {
    algorithm: &'a str,
    eta: f64,
    bitwidth: u32,
    median_test_accuracy: f64,
    drop: f64,
    zeroed_fraction: f64,
}

#[derive(Serialize)]
struct GammaRow {
    gamma: u32,
    median_test_accuracy: f64,
}

#[derive(Serialize)]
struct MismatchRow<'a> {
    line: usize,
    expected: &'a str,
    actual: &'a str,
    saturated: bool,
}

#[derive(Serialize)]
struct TallyCsvRow<'a> {
    mode: &'a str,
    bins: usize,
    exponent_adds: u64,
    xor_ops: u64,
    shifts: u64,
    tree_adds: u64,
    lut_multiplies: u64,
    accumulator_adds: u64,
}

fn write_csv<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

/// Writes the report's main table as CSV.
pub fn write_table(report: &RunReport, path: &Path) -> Result<()> {
    match &report.result {
        CommandResult::Train(r) => write_csv(path, &r.history),
        CommandResult::BaseFactorSweep(r) => write_csv(
            path,
            r.rows.iter().map(|row| GammaRow { gamma: row.gamma, median_test_accuracy: row.median_test_accuracy }),
        ),
        CommandResult::QuBitwidthSweep(r) => write_csv(
            path,
            r.cells.iter().map(|c| AccuracyRow {
                algorithm: c.algorithm.name(),
                eta: c.eta,
                bitwidth: c.bitwidth,
                median_test_accuracy: c.median_test_accuracy,
                drop: c.drop,
                zeroed_fraction: c.zeroed_fraction,
            }),
        ),
        CommandResult::TheoremCheck(r) => write_csv(
            path,
            r.records.iter().map(|e| TheoremRow {
                algorithm: e.algorithm.name(),
                eta: e.eta,
                gamma: e.gamma,
                d: e.d,
                trials: e.trials,
                mean_r: e.mean_r,
                bound: e.bound,
                pass: e.pass,
            }),
        ),
        CommandResult::DatapathConformance(r) => write_csv(
            path,
            r.mismatches.iter().map(|m| MismatchRow {
                line: m.line,
                expected: &m.expected,
                actual: &m.actual,
                saturated: m.saturated,
            }),
        ),
        CommandResult::TallyReport(r) => write_csv(
            path,
            r.rows.iter().map(|row| TallyCsvRow {
                mode: &row.mode,
                bins: row.bins,
                exponent_adds: row.total.exponent_adds,
                xor_ops: row.total.xor_ops,
                shifts: row.total.shifts,
                tree_adds: row.total.tree_adds,
                lut_multiplies: row.total.lut_multiplies,
                accumulator_adds: row.total.accumulator_adds,
            }),
        ),
    }
}

/// Creates `dir` and writes `report.json` and `<task>.csv` into it.
pub fn write_outputs(report: &RunReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let json = dir.join("report.json");
    fs::write(&json, report.to_json()?).map_err(io_err(&json))?;
    write_table(report, &dir.join(format!("{}.csv", report.task.name())))
}
