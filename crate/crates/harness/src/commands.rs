//! One function per subcommand. Sweeps fan out over rayon; results are
//! collected in grid order so reports do not depend on scheduling.

use std::path::Path;

use lns_core::analysis::{check_sr_bound, loglog_slope, run_sweep, ErrorRecord};
use lns_core::datapath::{
    parse_golden, pass_tally, run_conformance, ConformanceReport, Conversion, Dataflow, HybridSplit,
};
use lns_core::optim::{Algorithm, OptimizerConfig, StorageMode, UpdateQuantConfig};
use lns_core::quant::QuantizerConfig;
use lns_core::trainer::{train, TrainConfig, TrainReport};
use lns_core::LnsFormat;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::{BaseFactorSweep, ExperimentConfig, QuBitwidthSweep, TallyWorkload, Task, TheoremCheck};
use crate::error::{io_err, HarnessError, Result};
use crate::report::{
    BaseFactorReport, BaseFactorRow, CommandResult, QuCell, QuSweepReport, RunReport, Slope, TallyReport, TallyRow,
    TheoremReport,
};

/// Runs the configured task. `golden` overrides the config's golden file.
pub fn run(config: &ExperimentConfig, golden: Option<&Path>) -> Result<RunReport> {
    config.validate()?;
    let cfg = config.resolved();
    let result = match cfg.task {
        Task::Train => CommandResult::Train(cmd_train(&cfg.train)?),
        Task::BaseFactorSweep => CommandResult::BaseFactorSweep(cmd_base_factor_sweep(&cfg.train, &cfg.base_factor)?),
        Task::QuBitwidthSweep => CommandResult::QuBitwidthSweep(cmd_qu_bitwidth_sweep(&cfg.train, &cfg.qu_sweep)?),
        Task::TheoremCheck => {
            CommandResult::TheoremCheck(cmd_theorem_check(&cfg.theorem, cfg.seed.unwrap_or(cfg.train.seed))?)
        }
        Task::DatapathConformance => {
            let path = golden
                .or(cfg.conformance.golden.as_deref())
                .ok_or_else(|| HarnessError::Config("datapath-conformance needs a golden file".into()))?;
            CommandResult::DatapathConformance(cmd_datapath_conformance(path)?)
        }
        Task::TallyReport => CommandResult::TallyReport(cmd_tally_report(&cfg.train, &cfg.tally)?),
    };
    Ok(RunReport::new(cfg, result))
}

pub fn cmd_train(cfg: &TrainConfig) -> Result<TrainReport> {
    Ok(train(cfg)?)
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn with_format(q: QuantizerConfig, format: LnsFormat) -> QuantizerConfig {
    if q.is_bypass() {
        q
    } else {
        QuantizerConfig { format, ..q }
    }
}

/// Trains every config over `seeds` consecutive seeds; returns per-config reports.
fn train_grid(configs: &[TrainConfig], seeds: usize) -> Result<Vec<Vec<TrainReport>>> {
    let jobs: Vec<TrainConfig> = configs
        .iter()
        .flat_map(|c| (0..seeds as u64).map(move |i| TrainConfig { seed: c.seed.wrapping_add(i), ..c.clone() }))
        .collect();
    let mut reports = jobs.par_iter().map(train).collect::<lns_core::Result<Vec<_>>>()?.into_iter();
    Ok(configs.iter().map(|_| reports.by_ref().take(seeds).collect()).collect())
}

fn test_accuracies(runs: &[TrainReport]) -> Vec<f64> {
    runs.iter().map(|r| r.final_metrics.test_accuracy).collect()
}

/// Short runs per base factor; the best median test accuracy wins, ties
/// going to the smallest `γ`.
pub fn cmd_base_factor_sweep(base: &TrainConfig, sweep: &BaseFactorSweep) -> Result<BaseFactorReport> {
    if sweep.gammas.is_empty() {
        return Err(HarnessError::Config("base-factor grid is empty".into()));
    }
    let mut gammas = sweep.gammas.clone();
    gammas.sort_unstable();
    gammas.dedup();
    let configs = gammas
        .iter()
        .map(|&g| {
            let fmt = LnsFormat::new(sweep.bitwidth, g)?;
            let q = base.quantizers;
            let mut cfg = base.clone();
            cfg.steps = sweep.steps;
            cfg.quantizers.weight = with_format(q.weight, fmt);
            cfg.quantizers.activation = with_format(q.activation, fmt);
            cfg.quantizers.error = with_format(q.error, fmt);
            cfg.quantizers.gradient = with_format(q.gradient, fmt);
            Ok(cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    let runs = train_grid(&configs, sweep.seeds.max(1))?;
    let rows: Vec<BaseFactorRow> = gammas
        .iter()
        .zip(&runs)
        .map(|(&gamma, r)| {
            let test_accuracies = test_accuracies(r);
            BaseFactorRow { gamma, median_test_accuracy: median(&test_accuracies), test_accuracies }
        })
        .collect();
    Ok(BaseFactorReport { bitwidth: sweep.bitwidth, steps: sweep.steps, selected_gamma: select_gamma(&rows), rows })
}

/// Highest median accuracy; ties go to the smallest `γ`.
pub fn select_gamma(rows: &[BaseFactorRow]) -> u32 {
    let mut best: Option<&BaseFactorRow> = None;
    for row in rows {
        let better = best.is_none_or(|b| {
            row.median_test_accuracy > b.median_test_accuracy
                || (row.median_test_accuracy == b.median_test_accuracy && row.gamma < b.gamma)
        });
        if better {
            best = Some(row);
        }
    }
    best.map_or(0, |b| b.gamma)
}

fn qu_config(base: &TrainConfig, algorithm: Algorithm, eta: f64, bitwidth: u32) -> TrainConfig {
    let update = base.update_quant.unwrap_or_else(|| UpdateQuantConfig::new(bitwidth));
    TrainConfig {
        optimizer: OptimizerConfig { algorithm, eta, ..base.optimizer },
        update_quant: Some(UpdateQuantConfig { bitwidth, mode: StorageMode::DirectLns, ..update }),
        ..base.clone()
    }
}

fn qu_cell(algorithm: Algorithm, eta: f64, bitwidth: u32, runs: &[TrainReport], reference: f64) -> QuCell {
    let test_accuracies = test_accuracies(runs);
    let med = median(&test_accuracies);
    let (zeroed, total) =
        runs.iter().fold((0u64, 0u64), |(z, t), r| (z + r.counters.zeroed_updates, t + r.counters.updated_elements));
    QuCell {
        algorithm,
        eta,
        bitwidth,
        median_test_accuracy: med,
        zeroed_fraction: if total == 0 { 0.0 } else { zeroed as f64 / total as f64 },
        drop: if reference.is_nan() { 0.0 } else { reference - med },
        test_accuracies,
    }
}

/// Learning rates are picked per optimizer on the first bitwidth, then held
/// fixed while the update precision is lowered.
pub fn cmd_qu_bitwidth_sweep(base: &TrainConfig, sweep: &QuBitwidthSweep) -> Result<QuSweepReport> {
    let reference =
        *sweep.bitwidths.first().ok_or_else(|| HarnessError::Config("QU sweep needs at least one bitwidth".into()))?;
    for &b in &sweep.bitwidths {
        lns_core::optim::update_format(&base.quantizers.weight.format, b)?;
    }
    let seeds = sweep.seeds.max(1);
    let candidates: Vec<(Algorithm, f64)> =
        sweep.optimizers.iter().flat_map(|o| o.etas.iter().map(move |&e| (o.algorithm, e))).collect();
    let configs: Vec<TrainConfig> = candidates.iter().map(|&(a, e)| qu_config(base, a, e, reference)).collect();
    let runs = train_grid(&configs, seeds)?;
    let tuning: Vec<QuCell> =
        candidates.iter().zip(&runs).map(|(&(a, e), r)| qu_cell(a, e, reference, r, f64::NAN)).collect();

    let mut chosen: Vec<(usize, &QuCell)> = Vec::new();
    for o in &sweep.optimizers {
        let mut best: Option<(usize, &QuCell)> = None;
        for (i, cell) in tuning.iter().enumerate().filter(|(_, c)| c.algorithm == o.algorithm) {
            let better = match best {
                None => true,
                Some((_, b)) => {
                    cell.median_test_accuracy > b.median_test_accuracy
                        || (cell.median_test_accuracy == b.median_test_accuracy && cell.eta < b.eta)
                }
            };
            if better {
                best = Some((i, cell));
            }
        }
        chosen.extend(best);
    }

    let lower: Vec<(Algorithm, f64, u32)> =
        chosen.iter().flat_map(|(_, c)| sweep.bitwidths[1..].iter().map(move |&b| (c.algorithm, c.eta, b))).collect();
    let configs: Vec<TrainConfig> = lower.iter().map(|&(a, e, b)| qu_config(base, a, e, b)).collect();
    let lower_runs = train_grid(&configs, seeds)?;
    let mut cells = Vec::new();
    for (i, c) in &chosen {
        cells.push(qu_cell(c.algorithm, c.eta, reference, &runs[*i], c.median_test_accuracy));
        for ((a, e, b), r) in lower.iter().zip(&lower_runs).filter(|((a, e, _), _)| *a == c.algorithm && *e == c.eta) {
            cells.push(qu_cell(*a, *e, *b, r, c.median_test_accuracy));
        }
    }
    Ok(QuSweepReport { reference_bitwidth: reference, tuning, cells })
}

fn sr_vector(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let scale = rng.random_range(-4.0..4.0f64).exp2();
    (0..d).map(|_| scale * rng.random_range(-1.0..1.0)).collect()
}

fn mul_slopes(records: &[ErrorRecord]) -> Vec<Slope> {
    let mul: Vec<&ErrorRecord> = records.iter().filter(|r| r.algorithm == Algorithm::Mul).collect();
    let mut out = Vec::new();
    let mut gammas: Vec<u64> = mul.iter().map(|r| r.gamma).collect();
    gammas.dedup();
    for g in gammas {
        let pts: Vec<_> = mul.iter().filter(|r| r.gamma == g).collect();
        if pts.len() > 1 {
            let xs: Vec<f64> = pts.iter().map(|r| r.eta).collect();
            let ys: Vec<f64> = pts.iter().map(|r| r.mean_r).collect();
            out.push(Slope { algorithm: Algorithm::Mul, axis: "eta", slope: loglog_slope(&xs, &ys) });
        }
    }
    let mut etas: Vec<f64> = mul.iter().map(|r| r.eta).collect();
    etas.sort_by(f64::total_cmp);
    etas.dedup();
    for e in etas {
        let pts: Vec<_> = mul.iter().filter(|r| r.eta == e).collect();
        if pts.len() > 1 {
            let xs: Vec<f64> = pts.iter().map(|r| 1.0 / r.gamma as f64).collect();
            let ys: Vec<f64> = pts.iter().map(|r| r.mean_r).collect();
            out.push(Slope { algorithm: Algorithm::Mul, axis: "inverse-gamma", slope: loglog_slope(&xs, &ys) });
        }
    }
    out
}

/// Update-error sweeps against their closed-form bounds, plus the
/// stochastic-rounding variance bound on random vectors.
pub fn cmd_theorem_check(check: &TheoremCheck, seed: u64) -> Result<TheoremReport> {
    let mut records = Vec::new();
    let mut mul_slope_rows = Vec::new();
    for spec in &check.sweeps {
        let rows = run_sweep(spec)?;
        mul_slope_rows.extend(mul_slopes(&rows));
        records.extend(rows);
    }
    let sr_checks = (0..check.sr_vectors)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(1_000_003).wrapping_add(i as u64));
            let x = sr_vector(&mut rng, check.sr_dim);
            check_sr_bound(&x, check.sr_trials, &mut rng)
        })
        .collect::<lns_core::Result<Vec<_>>>()?;
    let sr_max_analytic_deviation =
        sr_checks.iter().map(|c| (c.mean_sq_err - c.analytic).abs() / c.analytic).fold(0.0, f64::max);

    let mut failures = Vec::new();
    for r in records.iter().filter(|r| !r.pass) {
        failures.push(format!(
            "{} at eta={} gamma={}: mean r {:.4e} exceeds bound {:.4e}",
            r.algorithm.name(),
            r.eta,
            r.gamma,
            r.mean_r,
            r.bound
        ));
    }
    let mut gd_exceeds_mul = true;
    for gd in records.iter().filter(|r| r.algorithm == Algorithm::Gd) {
        let mul = records.iter().find(|r| r.algorithm == Algorithm::Mul && r.eta == gd.eta && r.gamma == gd.gamma);
        if let Some(mul) = mul {
            if gd.mean_r <= mul.mean_r {
                gd_exceeds_mul = false;
                failures.push(format!(
                    "gd error {:.4e} <= mul error {:.4e} at eta={} gamma={}",
                    gd.mean_r, mul.mean_r, gd.eta, gd.gamma
                ));
            }
        }
    }
    for s in &mul_slope_rows {
        if (s.slope - 1.0).abs() > check.slope_tolerance {
            failures.push(format!("mul slope along {} is {:.3}", s.axis, s.slope));
        }
    }
    for (i, c) in sr_checks.iter().enumerate().filter(|(_, c)| !c.pass) {
        failures.push(format!("SR vector {i}: {:.4e} exceeds bound {:.4e}", c.mean_sq_err, c.bound));
    }
    if sr_max_analytic_deviation > 0.05 {
        failures.push(format!("SR error deviates {:.2}% from the analytic value", 100.0 * sr_max_analytic_deviation));
    }
    Ok(TheoremReport {
        records,
        sr_checks,
        sr_max_analytic_deviation,
        mul_slopes: mul_slope_rows,
        gd_exceeds_mul,
        failures,
    })
}

pub fn cmd_datapath_conformance(golden: &Path) -> Result<ConformanceReport> {
    let text = std::fs::read_to_string(golden).map_err(io_err(golden))?;
    Ok(run_conformance(&parse_golden(&text)?))
}

/// Closed-form operation counts of one forward and one backward pass per
/// conversion mode. The first layer's input gradient is not computed.
pub fn cmd_tally_report(base: &TrainConfig, workload: &TallyWorkload) -> Result<TallyReport> {
    let fmt = base.quantizers.weight.format;
    let sizes = workload.layers.clone().unwrap_or_else(|| base.layer_sizes());
    let mut modes = vec![("exact".to_string(), Conversion::Exact)];
    for &b in &workload.lut_bits {
        modes.push((format!("hybrid:{b}"), Conversion::Hybrid(HybridSplit::new(&fmt, b)?)));
    }
    let rows: Vec<TallyRow> = modes
        .into_iter()
        .map(|(mode, conv)| {
            let mut forward = Default::default();
            let mut backward = Default::default();
            for (i, w) in sizes.windows(2).enumerate() {
                let (n_in, n_out) = (w[0], w[1]);
                let t = |flow| pass_tally(flow, workload.batch, n_in, n_out, workload.vector_size, &fmt, conv);
                forward += t(Dataflow::Forward);
                backward += t(Dataflow::BackwardWeight);
                if i > 0 {
                    backward += t(Dataflow::BackwardInput);
                }
            }
            TallyRow { mode, bins: conv.bins(&fmt), forward, backward, total: forward + backward }
        })
        .collect();
    let mut hybrid: Vec<(u32, u64)> =
        workload.lut_bits.iter().copied().zip(rows[1..].iter().map(|r| r.total.lut_multiplies)).collect();
    hybrid.sort_unstable();
    let lut_multiplies_monotone = hybrid.windows(2).all(|w| w[0].1 <= w[1].1)
        && hybrid.last().is_none_or(|&(b, n)| b < fmt.log2_gamma() || n == rows[0].total.lut_multiplies);
    Ok(TallyReport {
        layer_sizes: sizes,
        batch: workload.batch,
        vector_size: workload.vector_size,
        rows,
        lut_multiplies_monotone,
    })
}
