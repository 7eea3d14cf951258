//! Dense layer stack with quantization-aware forward and backward passes.
//!
//! Each layer computes `X_l = Q_A(act(X_{l−1} · Q_W(W_l)ᵀ))`. Quantizers use the
//! straight-through estimator: gradients flow through them unchanged, after
//! which the activation gradient is quantized by `Q_E` before propagating and
//! the weight gradient by `Q_G` when it is produced.

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::datapath::{Conversion, LnsSlice, MacConfig, MacUnit, OperationTally};
use crate::error::{Error, Result};
use crate::format::{Granularity, LnsFormat, RoundingMode};
use crate::quant::{ConversionMode, Quantizer, QuantizerConfig, Role};
use crate::tensor::LnsTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    #[default]
    Relu,
    /// Tanh approximation.
    Gelu,
    Identity,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Gelu => 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()),
            Activation::Identity => x,
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Gelu => {
                let u = GELU_C * (x + GELU_A * x * x * x);
                let t = u.tanh();
                let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Affine layer without bias; weights are `outputs × inputs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weight: Array2<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn inputs(&self) -> usize {
        self.weight.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.nrows()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub layers: Vec<Layer>,
}

impl Network {
    /// He-initialized MLP with `sizes = [in, hidden…, out]`; the last layer is linear.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], hidden: Activation, rng: &mut R) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::Model(format!("invalid layer sizes {sizes:?}")));
        }
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let normal = Normal::new(0.0, (2.0 / w[0] as f64).sqrt()).expect("positive std");
                let weight = Array2::from_shape_fn((w[1], w[0]), |_| normal.sample(rng));
                let activation = if i + 2 == sizes.len() { Activation::Identity } else { hidden };
                Layer { weight, activation }
            })
            .collect();
        Ok(Network { layers })
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        for pair in layers.windows(2) {
            if pair[0].outputs() != pair[1].inputs() {
                return Err(Error::Model(format!(
                    "layer output {} does not feed layer input {}",
                    pair[0].outputs(),
                    pair[1].inputs()
                )));
            }
        }
        Ok(Network { layers })
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len()).sum()
    }
}

/// Quantizer configurations for the four forward/backward tensor classes.
/// Omitted roles default to the 8-bit, `γ = 8` LNS setting of [`QuantSet::lns`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuantSet {
    pub weight: QuantizerConfig,
    pub activation: QuantizerConfig,
    pub error: QuantizerConfig,
    pub gradient: QuantizerConfig,
}

impl Default for QuantSet {
    fn default() -> Self {
        QuantSet::lns(LnsFormat::new(8, 8).expect("valid format"))
    }
}

impl QuantSet {
    pub fn full_precision() -> Self {
        let b = QuantizerConfig::bypass();
        QuantSet { weight: b, activation: b, error: b, gradient: b }
    }

    /// Per-channel weights and weight gradients, per-tensor activations and
    /// activation gradients, nearest rounding throughout.
    pub fn lns(format: LnsFormat) -> Self {
        QuantSet {
            weight: QuantizerConfig::new(Role::Weight, format, Granularity::PerChannel),
            activation: QuantizerConfig::new(Role::Activation, format, Granularity::PerTensor),
            error: QuantizerConfig::new(Role::Error, format, Granularity::PerTensor),
            gradient: QuantizerConfig::new(Role::Gradient, format, Granularity::PerChannel),
        }
    }

    /// Re-seeds every stochastic quantizer from one base seed.
    pub fn reseeded(mut self, seed: u64) -> Self {
        for (i, q) in
            [&mut self.weight, &mut self.activation, &mut self.error, &mut self.gradient].into_iter().enumerate()
        {
            if let RoundingMode::Stochastic { .. } = q.rounding {
                q.rounding =
                    RoundingMode::Stochastic { seed: seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64) };
            }
        }
        self
    }
}

/// Live quantizers (with their rounding streams) for one training run.
#[derive(Debug, Clone)]
pub struct Quantizers {
    pub weight: Quantizer,
    pub activation: Quantizer,
    pub error: Quantizer,
    pub gradient: Quantizer,
}

impl Quantizers {
    pub fn new(set: &QuantSet) -> Self {
        Quantizers {
            weight: Quantizer::new(set.weight),
            activation: Quantizer::new(set.activation),
            error: Quantizer::new(set.error),
            gradient: Quantizer::new(set.gradient),
        }
    }
}

fn fake_quantize_matrix(q: &mut Quantizer, m: &Array2<f64>) -> Result<Array2<f64>> {
    if q.is_bypass() {
        return Ok(m.clone());
    }
    let shape = [m.nrows(), m.ncols()];
    let flat: Vec<f64> = m.iter().copied().collect();
    let out = q.fake_quantize(&flat, &shape)?;
    Ok(Array2::from_shape_vec((shape[0], shape[1]), out).expect("shape preserved"))
}

fn quantize_matrix(q: &mut Quantizer, m: &Array2<f64>) -> Result<LnsTensor> {
    let flat: Vec<f64> = m.iter().copied().collect();
    q.quantize_tensor(&flat, &[m.nrows(), m.ncols()])
}

/// What backward needs from one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerCache {
    /// Layer input as seen by the affine map (already quantized upstream).
    pub input: Array2<f64>,
    /// `Q_W(W)`.
    pub weight: Array2<f64>,
    /// Pre-activation values.
    pub pre_activation: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub logits: Array2<f64>,
    pub caches: Vec<LayerCache>,
    pub tally: OperationTally,
    /// Dot products whose partial sum saturated in the datapath.
    pub saturations: u64,
}

/// Weight and activation gradients. `activations[l]` is the (quantized)
/// gradient with respect to the output of layer `l`.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    pub weights: Vec<Array2<f64>>,
    pub activations: Vec<Array2<f64>>,
    pub weight_format: Option<LnsFormat>,
    pub activation_format: Option<LnsFormat>,
}

fn datapath_conversion(cfg: &QuantizerConfig) -> Option<Conversion> {
    match cfg.conversion {
        ConversionMode::RealReference => None,
        ConversionMode::ExactDatapath => Some(Conversion::Exact),
        ConversionMode::Hybrid(split) => Some(Conversion::Hybrid(split)),
    }
}

fn lane_uniform(g: Granularity) -> bool {
    matches!(g, Granularity::PerTensor | Granularity::PerChannel)
}

/// `x · wᵀ` through the MAC simulator. Both operands are encoded in LNS; the
/// weight scale must be constant along each row and the input scale along each
/// sample so that every dot product shares one scale pair.
fn datapath_affine(
    x: &Array2<f64>,
    w: &Array2<f64>,
    q: &mut Quantizers,
    conversion: Conversion,
    tally: &mut OperationTally,
    saturations: &mut u64,
) -> Result<(Array2<f64>, Array2<f64>, Array2<f64>)> {
    let wc = *q.weight.config();
    let ac = *q.activation.config();
    if wc.is_bypass() || ac.is_bypass() {
        return Err(Error::Config("datapath conversion needs active weight and activation quantizers".into()));
    }
    if wc.format != ac.format {
        return Err(Error::Config(format!(
            "datapath needs one operand format, got weight {:?} and activation {:?}",
            wc.format, ac.format
        )));
    }
    if !lane_uniform(wc.granularity) || !lane_uniform(ac.granularity) {
        return Err(Error::Config("datapath needs per-tensor or per-channel scaling on both operands".into()));
    }
    let wq = quantize_matrix(&mut q.weight, w)?;
    let xq = quantize_matrix(&mut q.activation, x)?;
    let unit = MacUnit::new(MacConfig::for_format(wc.format), conversion)?;
    let (n, k) = (x.nrows(), x.ncols());
    let o = w.nrows();
    let mut z = Array2::zeros((n, o));
    for r in 0..n {
        let xs = &xq.elements()[r * k..(r + 1) * k];
        let sx = xq.scale_of(r * k);
        for c in 0..o {
            let ws = &wq.elements()[c * k..(c + 1) * k];
            let sw = wq.scale_of(c * k);
            let ps = unit.dot_long(LnsSlice::new(wc.format, ws), LnsSlice::new(wc.format, xs), tally)?;
            *saturations += ps.saturated as u64;
            z[[r, c]] = ps.to_f64() * sw * sx;
        }
    }
    let to_matrix = |t: &LnsTensor, rows, cols| Array2::from_shape_vec((rows, cols), t.decode()).expect("shape");
    Ok((z, to_matrix(&xq, n, k), to_matrix(&wq, o, k)))
}

/// Quantized forward pass over a batch `x` (`batch × inputs`).
pub fn forward(network: &Network, x: ArrayView2<'_, f64>, q: &mut Quantizers) -> Result<ForwardOutput> {
    let mut h = x.to_owned();
    let mut caches = Vec::with_capacity(network.layers.len());
    let mut tally = OperationTally::default();
    let mut saturations = 0;
    for (i, layer) in network.layers.iter().enumerate() {
        if h.ncols() != layer.inputs() {
            return Err(Error::Model(format!("layer {i} expects {} inputs, got {}", layer.inputs(), h.ncols())));
        }
        let (z, input, weight) = match datapath_conversion(q.weight.config()) {
            Some(conv) => datapath_affine(&h, &layer.weight, q, conv, &mut tally, &mut saturations)?,
            None => {
                let wq = fake_quantize_matrix(&mut q.weight, &layer.weight)?;
                (h.dot(&wq.t()), h, wq)
            }
        };
        let act = z.mapv(|v| layer.activation.apply(v));
        h = fake_quantize_matrix(&mut q.activation, &act)?;
        caches.push(LayerCache { input, weight, pre_activation: z });
    }
    Ok(ForwardOutput { logits: h, caches, tally, saturations })
}

/// Reverse pass from the loss gradient with respect to the logits.
pub fn backward(
    loss_grad: ArrayView2<'_, f64>,
    caches: &[LayerCache],
    network: &Network,
    q: &mut Quantizers,
) -> Result<GradientBundle> {
    if caches.len() != network.layers.len() {
        return Err(Error::Usage(format!(
            "backward needs {} layer caches, got {}",
            network.layers.len(),
            caches.len()
        )));
    }
    let n = network.layers.len();
    let mut weights = vec![Array2::zeros((0, 0)); n];
    let mut activations = vec![Array2::zeros((0, 0)); n];
    let mut upstream = loss_grad.to_owned();
    for l in (0..n).rev() {
        let cache = &caches[l];
        if upstream.dim() != cache.pre_activation.dim() {
            return Err(Error::Usage(format!(
                "gradient shape {:?} does not match layer {l} output {:?}",
                upstream.dim(),
                cache.pre_activation.dim()
            )));
        }
        let dx = fake_quantize_matrix(&mut q.error, &upstream)?;
        let act = network.layers[l].activation;
        let dz = &dx * &cache.pre_activation.mapv(|v| act.derivative(v));
        let dw = dz.t().dot(&cache.input);
        weights[l] = fake_quantize_matrix(&mut q.gradient, &dw)?;
        upstream = dz.dot(&cache.weight);
        activations[l] = dx;
    }
    let fmt = |c: &QuantizerConfig| (!c.is_bypass()).then_some(c.format);
    Ok(GradientBundle {
        weights,
        activations,
        weight_format: fmt(q.gradient.config()),
        activation_format: fmt(q.error.config()),
    })
}

/// Mean softmax cross-entropy over the batch and its gradient.
pub fn loss_softmax_xent(logits: ArrayView2<'_, f64>, labels: &[usize]) -> Result<(f64, Array2<f64>)> {
    let (n, k) = logits.dim();
    if labels.len() != n {
        return Err(Error::Data(format!("{} labels for {n} rows", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::Data(format!("label {bad} outside {k} classes")));
    }
    let mut grad = Array2::zeros((n, k));
    let mut loss = 0.0;
    for (r, row) in logits.axis_iter(Axis(0)).enumerate() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_z = max + sum.ln();
        loss += log_z - row[labels[r]];
        for c in 0..k {
            let p = (row[c] - log_z).exp();
            grad[[r, c]] = (p - if c == labels[r] { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    Ok((loss / n as f64, grad))
}

pub fn predict(logits: ArrayView2<'_, f64>) -> Vec<usize> {
    logits
        .axis_iter(Axis(0))
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

pub fn accuracy(logits: ArrayView2<'_, f64>, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = predict(logits).iter().zip(labels).filter(|(p, y)| p == y).count();
    hits as f64 / labels.len() as f64
}
