//! Weight-update rules and LNS weight storage.
//!
//! Multiplicative rules act on `log2|W|`:
//!
//! | algorithm  | `Δ log2|W|`               |
//! |------------|---------------------------|
//! | `mul`      | `−η · sign(W) · g`        |
//! | `sign-mul` | `−η · sign(W) · sign(g)`  |
//! | `madam`    | `−η · sign(W) · g*`       |
//!
//! with `g* = g / max(sqrt(ĝ2), ε)` and `ĝ2` the bias-corrected second moment.
//! `sign(0) = 0`, so zero weights and zero gradients leave weights unchanged.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format::{LnsFormat, LnsScalar, Rounder, RoundingMode, ScaleFactor, Sign};
use crate::quant::{QuantizerConfig, Role};
use crate::tensor::{compute_scales, LnsTensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    Gd,
    Mul,
    SignMul,
    Madam,
}

impl Algorithm {
    pub const ALL: [Algorithm; 4] = [Algorithm::Gd, Algorithm::Mul, Algorithm::SignMul, Algorithm::Madam];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Gd => "gd",
            Algorithm::Mul => "mul",
            Algorithm::SignMul => "sign-mul",
            Algorithm::Madam => "madam",
        }
    }

    pub fn is_multiplicative(self) -> bool {
        self != Algorithm::Gd
    }
}

fn sign0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn update_gd(w: &[f64], g: &[f64], eta: f64) -> Vec<f64> {
    w.iter().zip(g).map(|(w, g)| w - eta * g).collect()
}

/// Applies `Δ log2|W| = −η · sign(W) · d` elementwise.
pub fn log_space_step(w: &[f64], direction: &[f64], eta: f64) -> Vec<f64> {
    w.iter()
        .zip(direction)
        .map(|(&w, &d)| {
            if w == 0.0 {
                return 0.0;
            }
            w.signum() * (w.abs().log2() - eta * sign0(w) * d).exp2()
        })
        .collect()
}

pub fn update_mul(w: &[f64], g: &[f64], eta: f64) -> Vec<f64> {
    log_space_step(w, g, eta)
}

pub fn update_sign_mul(w: &[f64], g: &[f64], eta: f64) -> Vec<f64> {
    let s: Vec<f64> = g.iter().map(|&x| sign0(x)).collect();
    log_space_step(w, &s, eta)
}

/// Single Madam step; advances `state`.
pub fn update_madam(state: &mut OptimizerState, w: &[f64], g: &[f64]) -> Result<Vec<f64>> {
    let d = state.madam_direction(g)?;
    Ok(log_space_step(w, &d, state.config.eta))
}

fn default_beta2() -> f64 {
    0.999
}

fn default_beta1() -> f64 {
    0.9
}

fn default_epsilon() -> f64 {
    1e-12
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub algorithm: Algorithm,
    pub eta: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    /// Reserved; the updates here use second-moment normalization only.
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
}

impl OptimizerConfig {
    pub fn new(algorithm: Algorithm, eta: f64) -> Self {
        OptimizerConfig { algorithm, eta, beta2: default_beta2(), beta1: default_beta1(), epsilon: default_epsilon() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be finite and non-negative", self.eta)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::Config(format!("{name} = {b} must lie in (0, 1)")));
            }
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return Err(Error::Config(format!("epsilon {} must be positive", self.epsilon)));
        }
        Ok(())
    }
}

/// Per-parameter optimizer state. `second_moment` holds the bias-corrected
/// estimate `ĝ2_t`, updated as `ĝ2_t = ĝ2_{t−1} + (g² − ĝ2_{t−1})·(1−β2)/(1−β2^t)`,
/// which equals the usual EMA divided by `1 − β2^t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    pub second_moment: Vec<f64>,
    pub step_count: u64,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, len: usize) -> Result<Self> {
        config.validate()?;
        Ok(OptimizerState { config, second_moment: vec![0.0; len], step_count: 0 })
    }

    fn check_len(&self, g: &[f64]) -> Result<()> {
        if g.len() != self.second_moment.len() {
            return Err(Error::Data(format!(
                "gradient has {} elements, optimizer state {}",
                g.len(),
                self.second_moment.len()
            )));
        }
        Ok(())
    }

    fn madam_direction(&mut self, g: &[f64]) -> Result<Vec<f64>> {
        self.check_len(g)?;
        self.step_count += 1;
        let b2 = self.config.beta2;
        let k = (1.0 - b2) / (1.0 - b2.powi(self.step_count.min(i32::MAX as u64) as i32));
        let eps = self.config.epsilon;
        Ok(self
            .second_moment
            .iter_mut()
            .zip(g)
            .map(|(m, &g)| {
                *m += (g * g - *m) * k;
                g / m.sqrt().max(eps)
            })
            .collect())
    }

    /// The per-element quantity multiplied by `−η · sign(W)` in log space
    /// (multiplicative rules) or by `−η` in linear space (GD). Advances the state.
    pub fn direction(&mut self, g: &[f64]) -> Result<Vec<f64>> {
        match self.config.algorithm {
            Algorithm::Madam => self.madam_direction(g),
            Algorithm::SignMul => {
                self.check_len(g)?;
                self.step_count += 1;
                Ok(g.iter().map(|&x| sign0(x)).collect())
            }
            Algorithm::Gd | Algorithm::Mul => {
                self.check_len(g)?;
                self.step_count += 1;
                Ok(g.to_vec())
            }
        }
    }

    /// Full-precision update of `w`.
    pub fn apply(&mut self, w: &[f64], g: &[f64]) -> Result<Vec<f64>> {
        if w.len() != g.len() {
            return Err(Error::Data(format!("weight/gradient lengths differ: {} vs {}", w.len(), g.len())));
        }
        let eta = self.config.eta;
        let d = self.direction(g)?;
        Ok(match self.config.algorithm {
            Algorithm::Gd => update_gd(w, &d, eta),
            _ => log_space_step(w, &d, eta),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum StorageMode {
    /// A full-precision copy is updated and re-quantized every step.
    FullPrecisionShadow,
    /// Only LNS exponents are stored and updated.
    #[default]
    DirectLns,
}

fn default_headroom() -> f64 {
    4.0
}

/// Precision and storage of the weight-update quantizer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UpdateQuantConfig {
    pub bitwidth: u32,
    #[serde(default)]
    pub rounding: RoundingMode,
    #[serde(default)]
    pub mode: StorageMode,
    /// Factor applied to the initial group maxima to obtain the frozen scales.
    #[serde(default = "default_headroom")]
    pub scale_headroom: f64,
}

impl UpdateQuantConfig {
    pub fn new(bitwidth: u32) -> Self {
        UpdateQuantConfig {
            bitwidth,
            rounding: RoundingMode::NearestEven,
            mode: StorageMode::DirectLns,
            scale_headroom: default_headroom(),
        }
    }
}

/// Update format for a forward format: `γ_U = γ · 2^(B_U − B)` keeps the
/// dynamic range while adding `B_U − B` fractional exponent bits.
pub fn update_format(forward: &LnsFormat, bitwidth: u32) -> Result<LnsFormat> {
    if bitwidth < forward.bitwidth() {
        return Err(Error::Config(format!(
            "update bitwidth {bitwidth} is below the forward weight bitwidth {}",
            forward.bitwidth()
        )));
    }
    let extra = bitwidth - forward.bitwidth();
    let gamma = (forward.gamma() as u64) << extra;
    if gamma > u32::MAX as u64 / 2 {
        return Err(Error::Config(format!("update base factor {gamma} is too large")));
    }
    LnsFormat::new(bitwidth, gamma as u32)
}

/// Counters from one quantized update.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub elements: u64,
    /// Elements with a nonzero proposed update whose stored value did not change.
    pub zeroed: u64,
    /// Elements pushed against the representable range.
    pub clipped: u64,
}

impl std::ops::AddAssign for UpdateStats {
    fn add_assign(&mut self, o: UpdateStats) {
        self.elements += o.elements;
        self.zeroed += o.zeroed;
        self.clipped += o.clipped;
    }
}

/// Weights kept at update precision with scales frozen at construction.
#[derive(Debug, Clone)]
pub struct WeightStore {
    mode: StorageMode,
    shadow: Option<Vec<f64>>,
    lns: LnsTensor,
    forward: LnsFormat,
    qu: QuantizerConfig,
    rounder: Rounder,
}

impl WeightStore {
    pub fn new(
        values: &[f64],
        shape: &[usize],
        weight_cfg: &QuantizerConfig,
        update: &UpdateQuantConfig,
    ) -> Result<Self> {
        if !(update.scale_headroom >= 1.0 && update.scale_headroom.is_finite()) {
            return Err(Error::Config(format!("scale headroom {} must be at least 1", update.scale_headroom)));
        }
        let fmt = update_format(&weight_cfg.format, update.bitwidth)?;
        let scales: Vec<ScaleFactor> = compute_scales(values, shape, weight_cfg.granularity)?
            .into_iter()
            .map(|s| ScaleFactor { value: s.value * update.scale_headroom, ..s })
            .collect();
        let lns = LnsTensor::quantize_with_scales(
            values,
            shape,
            fmt,
            weight_cfg.granularity,
            scales,
            &mut Rounder::nearest(),
        )?;
        let shadow = (update.mode == StorageMode::FullPrecisionShadow).then(|| lns.decode());
        let qu = QuantizerConfig::new(Role::Update, fmt, weight_cfg.granularity).with_rounding(update.rounding);
        Ok(WeightStore {
            mode: update.mode,
            shadow,
            lns,
            forward: weight_cfg.format,
            qu,
            rounder: Rounder::new(update.rounding),
        })
    }

    pub fn mode(&self) -> StorageMode {
        self.mode
    }

    pub fn shadow(&self) -> Option<&[f64]> {
        self.shadow.as_deref()
    }

    /// The master weights at update precision.
    pub fn lns(&self) -> &LnsTensor {
        &self.lns
    }

    pub fn update_config(&self) -> &QuantizerConfig {
        &self.qu
    }

    /// Master weights narrowed to the forward format by dropping low exponent bits.
    pub fn forward_tensor(&self) -> Result<LnsTensor> {
        self.lns.narrow(self.forward)
    }

    pub fn forward_values(&self) -> Result<Vec<f64>> {
        Ok(self.forward_tensor()?.decode())
    }

    fn range_of(&self, i: usize) -> (f64, f64) {
        let s = self.lns.scale_of(i);
        let fmt = self.lns.format();
        (s * fmt.min_magnitude(), s)
    }
}

/// One optimizer step on a weight store.
///
/// Shadow mode updates the full-precision copy (clipped to the update range)
/// and re-quantizes it. Direct mode adds `η · γ_U · sign(W) · d` to the stored
/// exponents for `sign-mul`/`madam`, and decodes, updates and re-quantizes for
/// `gd`/`mul`.
pub fn quantized_update(store: &mut WeightStore, state: &mut OptimizerState, g: &[f64]) -> Result<UpdateStats> {
    let n = store.lns.len();
    if g.len() != n || state.second_moment.len() != n {
        return Err(Error::Data(format!(
            "weight store has {n} elements, gradient {}, optimizer state {}",
            g.len(),
            state.second_moment.len()
        )));
    }
    let eta = state.config.eta;
    let algorithm = state.config.algorithm;
    let direction = state.direction(g)?;
    let before: Vec<LnsScalar> = store.lns.elements().to_vec();
    let mut stats = UpdateStats { elements: n as u64, ..Default::default() };
    let proposes = |i: usize, w: f64| -> bool {
        match algorithm {
            Algorithm::Gd => direction[i] != 0.0 && eta != 0.0,
            _ => direction[i] != 0.0 && eta != 0.0 && w != 0.0,
        }
    };

    let direct_exponents =
        store.mode == StorageMode::DirectLns && matches!(algorithm, Algorithm::SignMul | Algorithm::Madam);
    if direct_exponents {
        let gamma_u = store.lns.format().gamma() as f64;
        let max = store.lns.format().max_exponent() as f64;
        let rounder = &mut store.rounder;
        for (i, e) in store.lns.elements_mut().iter_mut().enumerate() {
            if e.is_zero || direction[i] == 0.0 || eta == 0.0 {
                continue;
            }
            let s = if e.sign == Sign::Negative { -1.0 } else { 1.0 };
            let target = rounder.round(e.exponent as f64 + eta * gamma_u * s * direction[i]);
            if !(0.0..=max).contains(&target) {
                stats.clipped += 1;
            }
            e.exponent = target.clamp(0.0, max) as u32;
        }
    } else {
        let current = match &store.shadow {
            Some(sh) => sh.clone(),
            None => store.lns.decode(),
        };
        let mut next = match algorithm {
            Algorithm::Gd => update_gd(&current, &direction, eta),
            _ => log_space_step(&current, &direction, eta),
        };
        for (i, v) in next.iter_mut().enumerate() {
            let (lo, hi) = store.range_of(i);
            let a = v.abs();
            if *v != 0.0 && (a > hi || a < lo) {
                stats.clipped += 1;
                *v = v.signum() * a.clamp(lo, hi);
            }
        }
        let shape = store.lns.shape().to_vec();
        let scales = store.lns.scales().to_vec();
        store.lns = LnsTensor::quantize_with_scales(
            &next,
            &shape,
            *store.lns.format(),
            store.lns.granularity(),
            scales,
            &mut store.rounder,
        )?;
        if let Some(sh) = store.shadow.as_mut() {
            *sh = next;
        }
    }
    for (i, (old, new)) in before.iter().zip(store.lns.elements()).enumerate() {
        let w = if old.is_zero { 0.0 } else { 1.0 };
        if proposes(i, w) && old == new {
            stats.zeroed += 1;
        }
    }
    Ok(stats)
}
