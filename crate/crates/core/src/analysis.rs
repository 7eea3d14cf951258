//! Quantized weight-update error measurement and bound checks.
//!
//! The bound checks use the simplified log quantizer `w ↦ sign(w)·2^(k/γ)`
//! with `k = SR(γ·log2|w|)`, i.e. no scale factor and no clamping.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format::{Rounder, RoundingMode};
use crate::optim::{update_gd, update_mul, update_sign_mul, Algorithm};

/// `Σ_k (log2|q_k| − log2|w_k|)²` over pairs where both values are nonzero,
/// together with the number of excluded pairs.
pub fn update_error_with_count(full: &[f64], quant: &[f64]) -> Result<(f64, usize)> {
    if full.len() != quant.len() {
        return Err(Error::Data(format!("length mismatch: {} vs {}", full.len(), quant.len())));
    }
    let mut excluded = 0;
    let mut r = 0.0;
    for (&w, &q) in full.iter().zip(quant) {
        if w == 0.0 || q == 0.0 {
            excluded += 1;
            continue;
        }
        let d = q.abs().log2() - w.abs().log2();
        r += d * d;
    }
    if excluded == full.len() {
        return Err(Error::Data("every element is zero; log-space error is undefined".into()));
    }
    Ok((r, excluded))
}

pub fn measure_update_error(full: &[f64], quant: &[f64]) -> Result<f64> {
    update_error_with_count(full, quant).map(|(r, _)| r)
}

/// Simplified log quantizer with base factor `gamma`.
pub fn simple_log_quantize(w: f64, gamma: f64, rounder: &mut Rounder) -> f64 {
    if w == 0.0 {
        return 0.0;
    }
    w.signum() * (rounder.round(gamma * w.abs().log2()) / gamma).exp2()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SrBoundCheck {
    pub d: usize,
    pub trials: usize,
    pub mean_sq_err: f64,
    pub std_err: f64,
    /// `Σ q_i (1 − q_i)` with `q_i` the fractional parts.
    pub analytic: f64,
    /// `√d · ||x||`.
    pub bound: f64,
    pub pass: bool,
}

/// Empirical `E||SR(x) − x||²` against `√d·||x||`, passing when the mean is
/// within three standard errors of the bound.
pub fn check_sr_bound<R: Rng + ?Sized>(x: &[f64], trials: usize, rng: &mut R) -> Result<SrBoundCheck> {
    if trials < 1000 {
        return Err(Error::Usage(format!("need at least 1000 trials, got {trials}")));
    }
    let d = x.len();
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..trials {
        let e: f64 = x
            .iter()
            .map(|&v| {
                let r = crate::format::stochastic_round(v, rng) as f64 - v;
                r * r
            })
            .sum();
        sum += e;
        sum_sq += e * e;
    }
    let n = trials as f64;
    let mean = sum / n;
    let var = ((sum_sq / n - mean * mean) * n / (n - 1.0)).max(0.0);
    let std_err = (var / n).sqrt();
    let analytic = x
        .iter()
        .map(|v| {
            let q = v - v.floor();
            q * (1.0 - q)
        })
        .sum();
    let bound = (d as f64).sqrt() * x.iter().map(|v| v * v).sum::<f64>().sqrt();
    Ok(SrBoundCheck { d, trials, mean_sq_err: mean, std_err, analytic, bound, pass: mean <= bound + 3.0 * std_err })
}

/// Averaged quantized-update error at one `(algorithm, η, γ)` point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorRecord {
    pub step: u64,
    pub algorithm: Algorithm,
    pub eta: f64,
    pub gamma: u64,
    pub d: usize,
    pub trials: usize,
    pub mean_r: f64,
    pub std_err: f64,
    pub bound: f64,
    pub pass: bool,
    /// Fraction of elements whose quantized update left the weight unchanged.
    pub zeroed_fraction: f64,
    /// Zero-valued elements left out of the sums.
    pub excluded: usize,
}

/// Right-hand side of the error bound matching `algorithm`.
pub fn theorem_bound(algorithm: Algorithm, updated: &[f64], g: &[f64], eta: f64, gamma: f64) -> f64 {
    let d = updated.iter().filter(|w| **w != 0.0).count() as f64;
    match algorithm {
        Algorithm::Gd => {
            let norm = updated.iter().filter(|w| **w != 0.0).map(|w| w.abs().log2().powi(2)).sum::<f64>().sqrt();
            d.sqrt() / gamma * norm
        }
        Algorithm::Mul => d.sqrt() * eta / gamma * g.iter().map(|v| v * v).sum::<f64>().sqrt(),
        Algorithm::SignMul | Algorithm::Madam => d * eta / gamma,
    }
}

fn full_update(algorithm: Algorithm, w: &[f64], g: &[f64], eta: f64) -> Vec<f64> {
    match algorithm {
        Algorithm::Gd => update_gd(w, g, eta),
        Algorithm::Mul => update_mul(w, g, eta),
        // A single Madam step from a fresh state normalizes each element to its sign.
        Algorithm::SignMul | Algorithm::Madam => update_sign_mul(w, g, eta),
    }
}

/// Runs the quantized update `trials` times with stochastic rounding and
/// compares the mean error with the matching bound (3σ slack).
pub fn check_theorem_bound(
    algorithm: Algorithm,
    w: &[f64],
    g: &[f64],
    eta: f64,
    gamma: u64,
    trials: usize,
    seed: u64,
) -> Result<ErrorRecord> {
    if w.len() != g.len() {
        return Err(Error::Data(format!("weight/gradient lengths differ: {} vs {}", w.len(), g.len())));
    }
    if trials == 0 {
        return Err(Error::Usage("trials must be at least 1".into()));
    }
    let gf = gamma as f64;
    let updated = full_update(algorithm, w, g, eta);
    let bound = theorem_bound(algorithm, &updated, g, eta, gf);
    let mut rounder = Rounder::new(RoundingMode::Stochastic { seed });
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    let mut zeroed = 0usize;
    let mut excluded = 0;
    for _ in 0..trials {
        let q: Vec<f64> = updated.iter().map(|&v| simple_log_quantize(v, gf, &mut rounder)).collect();
        let (r, ex) = update_error_with_count(&updated, &q)?;
        excluded = ex;
        zeroed += q.iter().zip(w).filter(|(q, w)| **w != 0.0 && q == w).count();
        sum += r;
        sum_sq += r * r;
    }
    let n = trials as f64;
    let mean = sum / n;
    let std_err = if trials > 1 { (((sum_sq / n - mean * mean) * n / (n - 1.0)).max(0.0) / n).sqrt() } else { 0.0 };
    let live = w.iter().filter(|v| **v != 0.0).count().max(1);
    Ok(ErrorRecord {
        step: 0,
        algorithm,
        eta,
        gamma,
        d: w.len() - excluded,
        trials,
        mean_r: mean,
        std_err,
        bound,
        pass: mean <= bound + 3.0 * std_err,
        zeroed_fraction: zeroed as f64 / (n * live as f64),
        excluded,
    })
}

fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Random weights and gradients for the bound checks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Workload {
    pub d: usize,
    /// Weights are `±2^u` with `u` uniform in `[log2_min, 0]`, snapped to the `γ` grid.
    pub log2_min: f64,
    /// Multiplies every weight (use powers of two to stay on the grid).
    pub weight_scale: f64,
    /// Standard deviation of the Gaussian gradients.
    pub grad_std: f64,
}

impl Default for Workload {
    fn default() -> Self {
        Workload { d: 1024, log2_min: -8.0, weight_scale: 1.0, grad_std: 2f64.powi(-12) }
    }
}

impl Workload {
    pub fn sample(&self, gamma: u64, seed: u64) -> (Vec<f64>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gf = gamma as f64;
        let normal = Normal::new(0.0, self.grad_std).expect("valid std");
        let w = (0..self.d)
            .map(|_| {
                let u = (self.log2_min * rng.random::<f64>() * gf).round() / gf;
                let s = if rng.random::<bool>() { 1.0 } else { -1.0 };
                s * u.exp2() * self.weight_scale
            })
            .collect();
        let g = (0..self.d).map(|_| normal.sample(&mut rng)).collect();
        (w, g)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub eta_grid: Vec<f64>,
    pub gamma_grid: Vec<u64>,
    pub algorithms: Vec<Algorithm>,
    pub trials: usize,
    #[serde(default)]
    pub workload: Workload,
    #[serde(default)]
    pub seed: u64,
}

impl SweepSpec {
    /// `η ∈ {2^−3 … 2^−9}` at `γ = 2^10`.
    pub fn eta_sweep() -> Self {
        SweepSpec {
            eta_grid: (3..=9).map(|k| 2f64.powi(-k)).collect(),
            gamma_grid: vec![1 << 10],
            algorithms: Algorithm::ALL.to_vec(),
            trials: 256,
            workload: Workload::default(),
            seed: 0,
        }
    }

    /// `γ ∈ {2^6 … 2^12}` at `η = 2^−6`.
    pub fn gamma_sweep() -> Self {
        SweepSpec {
            eta_grid: vec![2f64.powi(-6)],
            gamma_grid: (6..=12).map(|k| 1u64 << k).collect(),
            ..Self::eta_sweep()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.eta_grid.is_empty() || self.gamma_grid.is_empty() || self.algorithms.is_empty() {
            return Err(Error::Config("sweep grids must be non-empty".into()));
        }
        if self.trials == 0 {
            return Err(Error::Config("trials must be at least 1".into()));
        }
        if let Some(e) = self.eta_grid.iter().find(|e| !(**e >= 0.0 && e.is_finite())) {
            return Err(Error::Config(format!("learning rate {e} must be finite and non-negative")));
        }
        if let Some(g) = self.gamma_grid.iter().find(|g| !g.is_power_of_two()) {
            return Err(Error::Config(format!("base factor {g} is not a power of two")));
        }
        if self.workload.d == 0 {
            return Err(Error::Config("workload dimension must be positive".into()));
        }
        Ok(())
    }
}

/// Every `(γ, η, algorithm)` point, evaluated in parallel. The workload at a
/// given `γ` is shared by all algorithms and learning rates; each point draws
/// its rounding stream from its own seed, so results do not depend on
/// scheduling. Rows come back ordered by `γ`, then `η`, then algorithm.
pub fn run_sweep(spec: &SweepSpec) -> Result<Vec<ErrorRecord>> {
    spec.validate()?;
    let mut points = Vec::new();
    for &gamma in &spec.gamma_grid {
        for &eta in &spec.eta_grid {
            for &alg in &spec.algorithms {
                points.push((gamma, eta, alg));
            }
        }
    }
    points
        .par_iter()
        .enumerate()
        .map(|(i, &(gamma, eta, alg))| {
            let (w, g) = spec.workload.sample(gamma, mix(spec.seed, gamma));
            check_theorem_bound(alg, &w, &g, eta, gamma, spec.trials, mix(spec.seed ^ 0x5EED, i as u64))
        })
        .collect()
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let cov: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    cov / var
}
