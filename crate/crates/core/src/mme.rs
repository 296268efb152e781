//! Missing Modality Evaluator: pseudo-labels from paired complete/masked
//! predictions, an MLP regressor over pooled masked features, and the frozen
//! generate/skip gate used at inference.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::backbone::{clamp_prediction, predict_batch, BackboneParams};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::missing::{apply, MissingPlan, ModalBundle, Modality, Scenario};
use crate::nn::{Bindings, Mlp, Params};
use crate::optim::Sgd;
use crate::rng::seeded;
use crate::tensor::Tensor;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvaluatorConfig {
    /// Divergence threshold inside the pseudo-label.
    pub epsilon: f64,
    /// Gate threshold F: predicted damage must exceed it to trigger
    /// generation.
    pub gate_threshold: f64,
    /// Label range R (labels live in [-R/2, R/2]).
    pub label_range: f64,
    /// Hidden layer widths of the evaluator MLP.
    pub hidden: Vec<usize>,
}

impl Default for EvaluatorConfig {
    fn default() -> Self {
        EvaluatorConfig { epsilon: 0.3, gate_threshold: 0.0, label_range: 6.0, hidden: vec![64] }
    }
}

impl EvaluatorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::Config(format!("epsilon {} outside (0, 1)", self.epsilon)));
        }
        if self.label_range <= 0.0 {
            return Err(Error::Config(format!("label range {} must be > 0", self.label_range)));
        }
        Ok(())
    }

    /// Upper bound of any pseudo-label (and of clamped predicted damage).
    pub fn damage_cap(&self) -> f64 {
        1.0 - self.epsilon
    }
}

/// Degree-of-damage regression target: max(0, |y_pred − y_miss| / R − ε).
/// Symmetric in its arguments and shift-invariant; zero until the divergence
/// exceeds ε of the label range, strictly increasing beyond.
pub fn pseudo_label(y_pred: f64, y_miss: f64, cfg: &EvaluatorConfig) -> f64 {
    assert!(y_pred.is_finite() && y_miss.is_finite(), "pseudo_label on non-finite predictions");
    f64::max(0.0, (y_pred - y_miss).abs() / cfg.label_range - cfg.epsilon)
}

#[derive(Clone, Debug)]
pub struct EvaluatorParams {
    pub mlp: Mlp,
    pub input_dim: usize,
    pub frozen: bool,
}

impl Params for EvaluatorParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.mlp.visit(&format!("{prefix}mme.mlp"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.mlp.visit_mut(&format!("{prefix}mme.mlp"), f);
    }
}

/// Evaluator input encoding: per-modality mean-pooled raw features followed
/// by the three presence bits.
pub fn evaluator_input(bundle: &ModalBundle) -> Tensor {
    let mut row = Vec::new();
    for m in Modality::ALL {
        row.extend(bundle.features[m.index()].mean_rows());
    }
    for m in Modality::ALL {
        row.push(if bundle.present[m.index()] { 1.0 } else { 0.0 });
    }
    let w = row.len();
    Tensor::from_vec(vec![1, w], row)
}

impl EvaluatorParams {
    pub fn init(cfg: &EvaluatorConfig, input_dim: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut dims = vec![input_dim];
        dims.extend(&cfg.hidden);
        dims.push(1);
        let mut rng = seeded(seed, "mme.init");
        Ok(EvaluatorParams { mlp: Mlp::init(&mut rng, &dims), input_dim, frozen: false })
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    /// Raw MLP output for one bundle.
    pub fn raw_score(&self, bundle: &ModalBundle) -> f64 {
        let input = evaluator_input(bundle);
        assert_eq!(
            input.cols(),
            self.input_dim,
            "evaluator input width {} vs trained width {}",
            input.cols(),
            self.input_dim
        );
        let mut g = Graph::new();
        let mut reg = Bindings::new();
        let bound = self.mlp.bind(&mut g, &mut reg, false, "mme.mlp");
        let x = g.input(&input);
        let y = bound.apply(&mut g, x);
        g.value(y).item()
    }

    /// Predicted damage, clamped into the pseudo-label range [0, 1−ε].
    pub fn predicted_damage(&self, bundle: &ModalBundle, cfg: &EvaluatorConfig) -> f64 {
        self.raw_score(bundle).clamp(0.0, cfg.damage_cap())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GateDecision {
    Generate,
    Skip,
}

/// Generate/skip verdict for a bundle with missing modalities. Complete
/// bundles are normally routed around the gate; calling anyway returns Skip.
pub fn gate(bundle: &ModalBundle, params: &EvaluatorParams, cfg: &EvaluatorConfig) -> GateDecision {
    assert!(params.frozen, "gate requires frozen evaluator parameters");
    if bundle.is_complete() {
        return GateDecision::Skip;
    }
    if params.predicted_damage(bundle, cfg) > cfg.gate_threshold {
        GateDecision::Generate
    } else {
        GateDecision::Skip
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvaluatorTrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
}

/// One (input, target) pair of the evaluator's supervised problem.
#[derive(Debug)]
pub struct EvaluatorExample {
    pub input: Tensor,
    pub target: f64,
}

/// Builds the evaluator training set: every sample crossed with every
/// scenario, zero-fill masked, pseudo-labelled against the complete
/// prediction. Predictions are clamped into the label range first.
pub fn build_examples(
    backbone: &BackboneParams,
    dataset: &Dataset,
    scenarios: &[Scenario],
    cfg: &EvaluatorConfig,
) -> Result<Vec<EvaluatorExample>> {
    if !backbone.frozen {
        return Err(Error::Contract("evaluator training requires a frozen backbone".into()));
    }
    let complete: Vec<f64> = predict_batch(backbone, &dataset.bundles)
        .into_iter()
        .map(|p| clamp_prediction(p, cfg.label_range))
        .collect();
    let mut examples = Vec::with_capacity(dataset.len() * scenarios.len());
    for scenario in scenarios {
        let plan = MissingPlan::new(scenario.clone(), 1.0, 0)?;
        let masked = apply(&dataset.bundles, &plan)?;
        let miss_preds: Vec<f64> = predict_batch(backbone, &masked)
            .into_iter()
            .map(|p| clamp_prediction(p, cfg.label_range))
            .collect();
        for ((bundle, y_pred), y_miss) in masked.into_iter().zip(&complete).zip(&miss_preds) {
            let target = pseudo_label(*y_pred, *y_miss, cfg);
            examples.push(EvaluatorExample { input: evaluator_input(&bundle), target });
        }
    }
    Ok(examples)
}

/// Trains the MLP on pseudo-labels with L1 loss and freezes it. Returns the
/// frozen parameters and per-epoch mean training losses.
pub fn train_evaluator(
    backbone: &BackboneParams,
    dataset: &Dataset,
    scenarios: &[Scenario],
    cfg: &EvaluatorConfig,
    opts: &EvaluatorTrainSettings,
    seed: u64,
) -> Result<(EvaluatorParams, Vec<f64>)> {
    let examples = build_examples(backbone, dataset, scenarios, cfg)?;
    if examples.is_empty() {
        return Err(Error::Contract("evaluator training set is empty".into()));
    }
    let input_dim = examples[0].input.cols();
    let mut params = EvaluatorParams::init(cfg, input_dim, seed)?;
    let losses = train_on_examples(&mut params, &examples, opts, seed)?;
    params.freeze();
    Ok((params, losses))
}

/// SGD over prepared examples; exposed separately for targeted tests.
pub fn train_on_examples(
    params: &mut EvaluatorParams,
    examples: &[EvaluatorExample],
    opts: &EvaluatorTrainSettings,
    seed: u64,
) -> Result<Vec<f64>> {
    if params.frozen {
        return Err(Error::Contract("cannot train a frozen evaluator".into()));
    }
    let mut rng = seeded(seed, "mme.train");
    let mut sgd = Sgd::new(opts.lr, opts.momentum);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut epoch_losses = Vec::with_capacity(opts.epochs);
    for _ in 0..opts.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0.0_f64;
        for batch in order.chunks(opts.batch_size) {
            let mut g = Graph::new();
            let mut reg = Bindings::new();
            let bound = params.mlp.bind(&mut g, &mut reg, true, "mme.mlp");
            let mut losses = Vec::with_capacity(batch.len());
            for &i in batch {
                let x = g.input(&examples[i].input);
                let y = bound.apply(&mut g, x);
                let t = g.scalar(examples[i].target);
                let d = g.sub(y, t);
                losses.push(g.abs(d));
            }
            let stacked = g.concat_rows(&losses);
            let loss = g.mean_rows(stacked);
            g.backward(loss);
            total += g.value(loss).item();
            batches += 1.0;
            let grads = Sgd::collect_grads(&g, &reg);
            sgd.step(params, &grads);
        }
        epoch_losses.push(total / batches.max(1.0));
    }
    Ok(epoch_losses)
}

/// Mean L1 of the evaluator over examples (forward only).
pub fn examples_l1(params: &EvaluatorParams, examples: &[EvaluatorExample]) -> f64 {
    let mut g = Graph::new();
    let mut reg = Bindings::new();
    let bound = params.mlp.bind(&mut g, &mut reg, false, "mme.mlp");
    let mut total = 0.0;
    for e in examples {
        let x = g.input(&e.input);
        let y = bound.apply(&mut g, x);
        total += (g.value(y).item() - e.target).abs();
    }
    total / examples.len().max(1) as f64
}
