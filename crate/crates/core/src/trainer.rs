//! Mini-batch training of a toy network with quantized forward/backward passes
//! and optionally quantized weight updates.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, DatasetSpec};
use crate::datapath::OperationTally;
use crate::error::{Error, Result};
use crate::format::LnsFormat;
use crate::nn::{accuracy, backward, forward, loss_softmax_xent, Activation, Network, QuantSet, Quantizers};
use crate::optim::{
    quantized_update, Algorithm, OptimizerConfig, OptimizerState, UpdateQuantConfig, UpdateStats, WeightStore,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkSpec {
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
}

/// Plain gradient descent for the first `steps` steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Warmup {
    pub steps: usize,
    pub eta: f64,
}

/// Omitted fields take their values from [`TrainConfig::lns_preset`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub network: NetworkSpec,
    pub quantizers: QuantSet,
    pub optimizer: OptimizerConfig,
    /// `None` keeps full-precision master weights; written as `"full-precision"`.
    #[serde(with = "update_quant_repr")]
    pub update_quant: Option<UpdateQuantConfig>,
    pub dataset: DatasetSpec,
    pub test_samples: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub eval_every: usize,
    pub warmup: Option<Warmup>,
    pub seed: u64,
}

mod update_quant_repr {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use crate::optim::UpdateQuantConfig;

    #[derive(Serialize, Deserialize)]
    #[serde(rename_all = "kebab-case")]
    enum Keyword {
        FullPrecision,
    }

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Keyword(Keyword),
        Quantized(UpdateQuantConfig),
    }

    pub fn serialize<S: Serializer>(v: &Option<UpdateQuantConfig>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            None => Repr::Keyword(Keyword::FullPrecision),
            Some(c) => Repr::Quantized(*c),
        }
        .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<UpdateQuantConfig>, D::Error> {
        Ok(match Repr::deserialize(d)? {
            Repr::Keyword(_) => None,
            Repr::Quantized(c) => Some(c),
        })
    }
}

/// Headline 8-bit setting: `B = 8`, `γ = 8` for all four tensor classes.
pub fn lns8() -> LnsFormat {
    LnsFormat::new(8, 8).expect("valid format")
}

impl Default for NetworkSpec {
    fn default() -> Self {
        NetworkSpec { hidden: vec![64], activation: Activation::Relu }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::lns_preset()
    }
}

impl TrainConfig {
    /// Full-precision arm on the digit task, Madam with `η = 2^−7`.
    pub fn full_precision() -> Self {
        TrainConfig {
            network: NetworkSpec::default(),
            quantizers: QuantSet::full_precision(),
            optimizer: OptimizerConfig::new(Algorithm::Madam, 2f64.powi(-7)),
            update_quant: None,
            dataset: DatasetSpec::Digits { samples: 6000, noise: 0.1 },
            test_samples: 1000,
            steps: 2000,
            batch_size: 64,
            eval_every: 0,
            warmup: None,
            seed: 0,
        }
    }

    /// 8-bit LNS forward/backward with 16-bit quantized Madam updates.
    pub fn lns_preset() -> Self {
        TrainConfig {
            quantizers: QuantSet::lns(lns8()),
            update_quant: Some(UpdateQuantConfig::new(16)),
            ..Self::full_precision()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.network.hidden.contains(&0) {
            return Err(Error::Config("hidden layer sizes must be positive".into()));
        }
        if self.test_samples == 0 || self.test_samples >= self.dataset.samples() {
            return Err(Error::Config(format!(
                "test_samples {} must lie in [1, {})",
                self.test_samples,
                self.dataset.samples()
            )));
        }
        if let Some(w) = &self.warmup {
            if !(w.eta >= 0.0 && w.eta.is_finite()) {
                return Err(Error::Config(format!("warmup learning rate {} must be finite and non-negative", w.eta)));
            }
        }
        if let Some(qu) = &self.update_quant {
            crate::optim::update_format(&self.quantizers.weight.format, qu.bitwidth)?;
        }
        Ok(())
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        let input = match self.dataset {
            DatasetSpec::Digits { .. } => 65,
            _ => 3,
        };
        let mut sizes = vec![input];
        sizes.extend(&self.network.hidden);
        sizes.push(self.dataset.classes());
        sizes
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: f64,
    pub batch_accuracy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub step: usize,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub test_loss: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub datapath_saturations: u64,
    pub updated_elements: u64,
    pub zeroed_updates: u64,
    pub clipped_updates: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub history: Vec<StepMetrics>,
    pub evals: Vec<EvalMetrics>,
    pub final_metrics: EvalMetrics,
    pub counters: Counters,
    pub tally: OperationTally,
}

fn mix(seed: u64, stream: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17) ^ stream.wrapping_mul(0xD1B5_4A32_D192_ED03)
}

fn flat(m: &Array2<f64>) -> Vec<f64> {
    m.iter().copied().collect()
}

fn evaluate(net: &Network, set: &QuantSet, train: &Dataset, test: &Dataset, step: usize) -> Result<EvalMetrics> {
    let mut q = Quantizers::new(set);
    let tr = forward(net, train.features.view(), &mut q)?;
    let te = forward(net, test.features.view(), &mut q)?;
    let (test_loss, _) = loss_softmax_xent(te.logits.view(), &test.labels)?;
    Ok(EvalMetrics {
        step,
        train_accuracy: accuracy(tr.logits.view(), &train.labels),
        test_accuracy: accuracy(te.logits.view(), &test.labels),
        test_loss,
    })
}

/// Trains per `cfg`. Deterministic given the config (including its seed).
pub fn train(cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    let data = cfg.dataset.generate(mix(cfg.seed, 1))?;
    let (train_set, test_set) = data.split(cfg.test_samples)?;
    let mut init_rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, 2));
    let mut net = Network::new(&cfg.layer_sizes(), cfg.network.activation, &mut init_rng)?;
    let qset = cfg.quantizers.reseeded(mix(cfg.seed, 3));
    let mut quantizers = Quantizers::new(&qset);

    let mut stores = match &cfg.update_quant {
        Some(qu) => {
            let mut v = Vec::with_capacity(net.layers.len());
            for layer in &mut net.layers {
                let mut qu = *qu;
                if let crate::format::RoundingMode::Stochastic { seed } = qu.rounding {
                    qu.rounding =
                        crate::format::RoundingMode::Stochastic { seed: mix(cfg.seed ^ seed, 4 + v.len() as u64) };
                }
                let shape = [layer.weight.nrows(), layer.weight.ncols()];
                let store = WeightStore::new(&flat(&layer.weight), &shape, &cfg.quantizers.weight, &qu)?;
                layer.weight = Array2::from_shape_vec((shape[0], shape[1]), store.forward_values()?).expect("shape");
                v.push(store);
            }
            Some(v)
        }
        None => None,
    };
    let mut states: Vec<OptimizerState> =
        net.layers.iter().map(|l| OptimizerState::new(cfg.optimizer, l.weight.len())).collect::<Result<_>>()?;
    let mut warm_states: Vec<OptimizerState> = match &cfg.warmup {
        Some(w) => net
            .layers
            .iter()
            .map(|l| OptimizerState::new(OptimizerConfig::new(Algorithm::Gd, w.eta), l.weight.len()))
            .collect::<Result<_>>()?,
        None => vec![],
    };

    let mut order_rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, 5));
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut cursor = order.len();
    let mut history = Vec::with_capacity(cfg.steps);
    let mut evals = Vec::new();
    let mut counters = Counters::default();
    let mut tally = OperationTally::default();
    let mut update_stats = UpdateStats::default();

    for step in 0..cfg.steps {
        if cfg.eval_every > 0 && step % cfg.eval_every == 0 {
            evals.push(evaluate(&net, &qset, &train_set, &test_set, step)?);
        }
        let bs = cfg.batch_size.min(train_set.len());
        if cursor + bs > order.len() {
            order.shuffle(&mut order_rng);
            cursor = 0;
        }
        let batch = train_set.select(&order[cursor..cursor + bs]);
        cursor += bs;

        let out = forward(&net, batch.features.view(), &mut quantizers)?;
        counters.datapath_saturations += out.saturations;
        tally += out.tally;
        let (loss, grad) = loss_softmax_xent(out.logits.view(), &batch.labels)?;
        history.push(StepMetrics { step, loss, batch_accuracy: accuracy(out.logits.view(), &batch.labels) });
        let bundle = backward(grad.view(), &out.caches, &net, &mut quantizers)?;

        let warm = cfg.warmup.is_some_and(|w| step < w.steps);
        for (l, layer) in net.layers.iter_mut().enumerate() {
            let g = flat(&bundle.weights[l]);
            let state = if warm { &mut warm_states[l] } else { &mut states[l] };
            let (r, c) = layer.weight.dim();
            match stores.as_mut() {
                Some(stores) => {
                    update_stats += quantized_update(&mut stores[l], state, &g)?;
                    layer.weight = Array2::from_shape_vec((r, c), stores[l].forward_values()?).expect("shape");
                }
                None => {
                    let w = state.apply(&flat(&layer.weight), &g)?;
                    layer.weight = Array2::from_shape_vec((r, c), w).expect("shape");
                }
            }
        }
    }
    counters.updated_elements = update_stats.elements;
    counters.zeroed_updates = update_stats.zeroed;
    counters.clipped_updates = update_stats.clipped;
    let final_metrics = evaluate(&net, &qset, &train_set, &test_set, cfg.steps)?;
    if cfg.eval_every > 0 {
        evals.push(final_metrics);
    }
    Ok(TrainReport { history, evals, final_metrics, counters, tally })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(mut cfg: TrainConfig) -> TrainConfig {
        cfg.dataset = DatasetSpec::Blobs { samples: 200, separation: 6.0 };
        cfg.test_samples = 50;
        cfg.network.hidden = vec![8];
        cfg.steps = 30;
        cfg.batch_size = 16;
        cfg
    }

    #[test]
    fn deterministic_given_seed() {
        let cfg = small(TrainConfig::lns_preset());
        assert_eq!(train(&cfg).unwrap(), train(&cfg).unwrap());
        let other = TrainConfig { seed: 9, ..cfg.clone() };
        assert_ne!(train(&cfg).unwrap().history, train(&other).unwrap().history);
    }

    #[test]
    fn zero_steps_reports_initial_metrics() {
        let cfg = TrainConfig { steps: 0, ..small(TrainConfig::full_precision()) };
        let r = train(&cfg).unwrap();
        assert!(r.history.is_empty());
        assert_eq!(r.final_metrics.step, 0);
    }

    #[test]
    fn validation_errors() {
        let base = small(TrainConfig::lns_preset());
        assert!(train(&TrainConfig { batch_size: 0, ..base.clone() }).is_err());
        assert!(train(&TrainConfig { test_samples: 500, ..base.clone() }).is_err());
        let narrow = TrainConfig { update_quant: Some(UpdateQuantConfig::new(6)), ..base };
        assert!(matches!(train(&narrow), Err(Error::Config(_))));
    }

    #[test]
    fn config_serde_round_trip() {
        let cfg = TrainConfig { warmup: Some(Warmup { steps: 3, eta: 0.1 }), ..TrainConfig::lns_preset() };
        let s = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<TrainConfig>(&s).unwrap(), cfg);
        let fp = TrainConfig::full_precision();
        let s = serde_json::to_string(&fp).unwrap();
        assert!(s.contains(r#""update_quant":"full-precision""#));
        assert_eq!(serde_json::from_str::<TrainConfig>(&s).unwrap(), fp);
    }

    #[test]
    fn omitted_fields_follow_the_preset() {
        let cfg: TrainConfig = serde_json::from_str(r#"{"steps": 10}"#).unwrap();
        assert_eq!(cfg, TrainConfig { steps: 10, ..TrainConfig::lns_preset() });
        let cfg: TrainConfig = serde_json::from_str(r#"{"update_quant": "full-precision"}"#).unwrap();
        assert_eq!(cfg.update_quant, None);
        assert!(serde_json::from_str::<TrainConfig>(r#"{"update_quant": "off"}"#).is_err());
    }
}
