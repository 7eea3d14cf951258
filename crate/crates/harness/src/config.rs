//! Declarative experiment configuration, read from TOML.

use std::path::{Path, PathBuf};

use lns_core::analysis::SweepSpec;
use lns_core::optim::{Algorithm, OptimizerConfig};
use lns_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, HarnessError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Train,
    BaseFactorSweep,
    QuBitwidthSweep,
    TheoremCheck,
    DatapathConformance,
    TallyReport,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Train => "train",
            Task::BaseFactorSweep => "base-factor-sweep",
            Task::QuBitwidthSweep => "qu-bitwidth-sweep",
            Task::TheoremCheck => "theorem-check",
            Task::DatapathConformance => "datapath-conformance",
            Task::TallyReport => "tally-report",
        }
    }
}

/// Short training runs over a grid of base factors at a fixed bitwidth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaseFactorSweep {
    pub gammas: Vec<u32>,
    pub bitwidth: u32,
    pub steps: usize,
    pub seeds: usize,
}

impl Default for BaseFactorSweep {
    fn default() -> Self {
        BaseFactorSweep { gammas: vec![1, 2, 4, 8, 16, 32], bitwidth: 8, steps: 500, seeds: 1 }
    }
}

/// Learning rates tried for one optimizer on the reference bitwidth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerCandidates {
    pub algorithm: Algorithm,
    pub etas: Vec<f64>,
}

/// Training with direct quantized updates for every (optimizer, QU bitwidth).
///
/// Each optimizer's learning rate is the candidate with the best median test
/// accuracy at the first (reference) bitwidth, ties going to the smaller rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuBitwidthSweep {
    pub optimizers: Vec<OptimizerCandidates>,
    pub bitwidths: Vec<u32>,
    pub seeds: usize,
}

impl Default for QuBitwidthSweep {
    fn default() -> Self {
        QuBitwidthSweep {
            optimizers: vec![
                OptimizerCandidates { algorithm: Algorithm::Gd, etas: vec![0.1, 0.3, 1.0] },
                OptimizerCandidates {
                    algorithm: Algorithm::Madam,
                    etas: vec![2f64.powi(-7), 2f64.powi(-6), 2f64.powi(-5)],
                },
            ],
            bitwidths: vec![16, 14, 12, 10],
            seeds: 5,
        }
    }
}

/// Quantized-update error sweeps plus the stochastic-rounding variance check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TheoremCheck {
    pub sweeps: Vec<SweepSpec>,
    pub sr_vectors: usize,
    pub sr_dim: usize,
    pub sr_trials: usize,
    /// Allowed deviation of the MUL log-log slopes from 1.
    pub slope_tolerance: f64,
}

impl Default for TheoremCheck {
    fn default() -> Self {
        TheoremCheck {
            sweeps: vec![SweepSpec::eta_sweep(), SweepSpec::gamma_sweep()],
            sr_vectors: 100,
            sr_dim: 100,
            sr_trials: 10_000,
            slope_tolerance: 0.15,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Conformance {
    pub golden: Option<PathBuf>,
}

/// Workload of the operation tally: the training network (or explicit
/// `layers` widths) at `batch` samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TallyWorkload {
    #[serde(default)]
    pub layers: Option<Vec<usize>>,
    pub batch: usize,
    pub vector_size: usize,
    pub lut_bits: Vec<u32>,
}

impl Default for TallyWorkload {
    fn default() -> Self {
        TallyWorkload { layers: None, batch: 64, vector_size: 32, lut_bits: vec![0, 1, 2, 3] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: Task,
    /// Overrides every seed in the sections below when set.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(default = "TrainConfig::lns_preset")]
    pub train: TrainConfig,
    #[serde(default)]
    pub base_factor: BaseFactorSweep,
    #[serde(default)]
    pub qu_sweep: QuBitwidthSweep,
    #[serde(default)]
    pub theorem: TheoremCheck,
    #[serde(default)]
    pub conformance: Conformance,
    #[serde(default)]
    pub tally: TallyWorkload,
}

impl ExperimentConfig {
    /// Headline defaults for `task`.
    pub fn preset(task: Task) -> Self {
        ExperimentConfig {
            task,
            seed: None,
            output: None,
            train: TrainConfig::lns_preset(),
            base_factor: BaseFactorSweep::default(),
            qu_sweep: QuBitwidthSweep::default(),
            theorem: TheoremCheck::default(),
            conformance: Conformance::default(),
            tally: TallyWorkload::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// Copy with the top-level seed pushed into every section.
    pub fn resolved(&self) -> Self {
        let mut cfg = self.clone();
        if let Some(seed) = cfg.seed {
            cfg.train.seed = seed;
            for s in &mut cfg.theorem.sweeps {
                s.seed = seed;
            }
        }
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(HarnessError::Config(m));
        match self.task {
            Task::Train | Task::TallyReport => self.train.validate()?,
            Task::BaseFactorSweep => {
                let b = &self.base_factor;
                if b.gammas.is_empty() {
                    return fail("base-factor grid is empty".into());
                }
                if b.seeds == 0 {
                    return fail("base-factor sweep needs at least one seed".into());
                }
                if self.train.quantizers.weight.is_bypass() {
                    return fail("base-factor sweep needs LNS weight quantizers".into());
                }
                for &g in &b.gammas {
                    lns_core::LnsFormat::new(b.bitwidth, g)?;
                }
                self.train.validate()?;
            }
            Task::QuBitwidthSweep => {
                let q = &self.qu_sweep;
                if q.optimizers.is_empty() || q.bitwidths.is_empty() {
                    return fail("QU sweep needs at least one optimizer and one bitwidth".into());
                }
                if q.seeds == 0 {
                    return fail("QU sweep needs at least one seed".into());
                }
                if let Some(o) = q.optimizers.iter().find(|o| o.etas.is_empty()) {
                    return fail(format!("no learning rates given for {}", o.algorithm.name()));
                }
                for o in &q.optimizers {
                    for &eta in &o.etas {
                        OptimizerConfig::new(o.algorithm, eta).validate()?;
                    }
                }
                for &b in &q.bitwidths {
                    lns_core::optim::update_format(&self.train.quantizers.weight.format, b)?;
                }
                self.train.validate()?;
            }
            Task::TheoremCheck => {
                let t = &self.theorem;
                for s in &t.sweeps {
                    s.validate()?;
                }
                if t.sr_vectors > 0 && (t.sr_dim == 0 || t.sr_trials < 1000) {
                    return fail("SR check needs a positive dimension and at least 1000 trials".into());
                }
            }
            Task::DatapathConformance => {}
        }
        if self.tally.vector_size == 0 {
            return fail("tally vector size must be positive".into());
        }
        Ok(())
    }
}
