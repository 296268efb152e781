//! MULT-style multimodal backbone: per-modality input projections, pairwise
//! directional cross-modal transformer stacks, per-modality self-attention
//! stacks, and a pooled regression head.
//!
//! The forward pass is exposed in stages so the prompt pipeline can splice
//! itself between them; `forward` composes the stages for plain use. Prompt
//! tokens can be injected ahead of the self-attention stage, optionally in a
//! masked "do-nothing" mode (tokens hidden from attention keys and pooling)
//! that exists for plumbing tests.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, ModalDims};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::missing::{ModalBundle, Modality};
use crate::nn::{Bindings, Block, BoundBlock, BoundLinear, Linear, Params};
use crate::optim::Sgd;
use crate::rng::seeded;
use crate::tensor::Tensor;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_cross_layers: usize,
    pub n_self_layers: usize,
    pub ffn_hidden: usize,
    pub d_in: [usize; 3],
    pub seq_len: [usize; 3],
}

impl BackboneConfig {
    /// Desk-scale defaults: d_model 32, 4 heads, 2 cross + 2 self layers.
    pub fn desk_default(dims: ModalDims) -> Self {
        BackboneConfig {
            d_model: 32,
            n_heads: 4,
            n_cross_layers: 2,
            n_self_layers: 2,
            ffn_hidden: 64,
            d_in: dims.dim,
            seq_len: dims.len,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        for v in [self.d_model, self.n_cross_layers, self.n_self_layers, self.ffn_hidden] {
            if v == 0 {
                return Err(Error::Config("backbone dimensions must be >= 1".into()));
            }
        }
        if self.d_in.iter().chain(self.seq_len.iter()).any(|&v| v == 0) {
            return Err(Error::Config("modality dims must be >= 1".into()));
        }
        Ok(())
    }
}

/// Index of the directional cross stack src -> dst among the six ordered
/// modality pairs.
pub fn pair_index(src: Modality, dst: Modality) -> usize {
    let pos = dst
        .others()
        .iter()
        .position(|&m| m == src)
        .expect("cross pair requires distinct modalities");
    dst.index() * 2 + pos
}

#[derive(Clone, Debug)]
pub struct BackboneParams {
    pub config: BackboneConfig,
    pub proj: Vec<Linear>,
    /// Indexed by [`pair_index`], each a stack of cross blocks.
    pub cross: Vec<Vec<Block>>,
    /// Per target modality: projects the two concatenated cross streams back
    /// to d_model.
    pub merge: Vec<Linear>,
    pub self_blocks: Vec<Vec<Block>>,
    pub head: Linear,
    pub frozen: bool,
}

impl BackboneParams {
    pub fn init(config: &BackboneConfig, seed: u64, tag: &str) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded(seed, tag);
        let d = config.d_model;
        let proj = (0..3).map(|m| Linear::init(&mut rng, config.d_in[m], d)).collect();
        let cross = (0..6)
            .map(|_| {
                (0..config.n_cross_layers)
                    .map(|_| Block::init(&mut rng, d, config.n_heads, config.ffn_hidden))
                    .collect()
            })
            .collect();
        let merge = (0..3).map(|_| Linear::init(&mut rng, 2 * d, d)).collect();
        let self_blocks = (0..3)
            .map(|_| {
                (0..config.n_self_layers)
                    .map(|_| Block::init(&mut rng, d, config.n_heads, config.ffn_hidden))
                    .collect()
            })
            .collect();
        let head = Linear::init(&mut rng, 3 * d, 1);
        Ok(BackboneParams { config: config.clone(), proj, cross, merge, self_blocks, head, frozen: false })
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn bind(&self, g: &mut Graph, reg: &mut Bindings) -> BoundBackbone {
        let train = !self.frozen;
        BoundBackbone {
            proj: self.proj.iter().enumerate().map(|(i, l)| l.bind(g, reg, train, &format!("bb.proj.{i}"))).collect(),
            cross: self
                .cross
                .iter()
                .enumerate()
                .map(|(p, stack)| {
                    stack
                        .iter()
                        .enumerate()
                        .map(|(i, b)| b.bind(g, reg, train, &format!("bb.cross.{p}.{i}")))
                        .collect()
                })
                .collect(),
            merge: self.merge.iter().enumerate().map(|(i, l)| l.bind(g, reg, train, &format!("bb.merge.{i}"))).collect(),
            self_blocks: self
                .self_blocks
                .iter()
                .enumerate()
                .map(|(m, stack)| {
                    stack
                        .iter()
                        .enumerate()
                        .map(|(i, b)| b.bind(g, reg, train, &format!("bb.self.{m}.{i}")))
                        .collect()
                })
                .collect(),
            head: self.head.bind(g, reg, train, "bb.head"),
        }
    }
}

impl Params for BackboneParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        for (i, l) in self.proj.iter().enumerate() {
            l.visit(&format!("{prefix}bb.proj.{i}"), f);
        }
        for (p, stack) in self.cross.iter().enumerate() {
            for (i, b) in stack.iter().enumerate() {
                b.visit(&format!("{prefix}bb.cross.{p}.{i}"), f);
            }
        }
        for (i, l) in self.merge.iter().enumerate() {
            l.visit(&format!("{prefix}bb.merge.{i}"), f);
        }
        for (m, stack) in self.self_blocks.iter().enumerate() {
            for (i, b) in stack.iter().enumerate() {
                b.visit(&format!("{prefix}bb.self.{m}.{i}"), f);
            }
        }
        self.head.visit(&format!("{prefix}bb.head"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (i, l) in self.proj.iter_mut().enumerate() {
            l.visit_mut(&format!("{prefix}bb.proj.{i}"), f);
        }
        for (p, stack) in self.cross.iter_mut().enumerate() {
            for (i, b) in stack.iter_mut().enumerate() {
                b.visit_mut(&format!("{prefix}bb.cross.{p}.{i}"), f);
            }
        }
        for (i, l) in self.merge.iter_mut().enumerate() {
            l.visit_mut(&format!("{prefix}bb.merge.{i}"), f);
        }
        for (m, stack) in self.self_blocks.iter_mut().enumerate() {
            for (i, b) in stack.iter_mut().enumerate() {
                b.visit_mut(&format!("{prefix}bb.self.{m}.{i}"), f);
            }
        }
        self.head.visit_mut(&format!("{prefix}bb.head"), f);
    }
}

/// Prompt-token injection ahead of the self-attention stage.
pub enum Injection {
    None,
    /// Tokens prepended along the sequence axis per modality.
    Tokens([Option<Var>; 3]),
    /// Tokens prepended but hidden from attention keys and pooling — a
    /// do-nothing injection used to test the plumbing.
    Masked([Option<Var>; 3]),
}

/// Prediction plus the named intermediate streams.
pub struct ForwardTrace {
    pub prediction: Var,
    /// Post-cross-attention features per modality.
    pub cross_out: [Var; 3],
    /// Self-attention inputs (after any injection).
    pub self_in: [Var; 3],
    /// Self-attention outputs per modality.
    pub self_out: [Var; 3],
}

pub struct BoundBackbone {
    pub proj: Vec<BoundLinear>,
    pub cross: Vec<Vec<BoundBlock>>,
    pub merge: Vec<BoundLinear>,
    pub self_blocks: Vec<Vec<BoundBlock>>,
    pub head: BoundLinear,
}

impl BoundBackbone {
    pub fn project(&self, g: &mut Graph, inputs: [Var; 3]) -> [Var; 3] {
        [0, 1, 2].map(|m| self.proj[m].apply(g, inputs[m]))
    }

    /// Runs the six directional cross stacks and merges the two incoming
    /// streams per target modality.
    pub fn cross_stage(&self, g: &mut Graph, streams: [Var; 3]) -> [Var; 3] {
        Modality::ALL.map(|dst| {
            let mut merged_parts = Vec::with_capacity(2);
            for src in dst.others() {
                let mut x = streams[dst.index()];
                for block in &self.cross[pair_index(src, dst)] {
                    x = block.apply(g, x, Some(streams[src.index()]), 0);
                }
                merged_parts.push(x);
            }
            let cat = g.concat_cols(&merged_parts);
            self.merge[dst.index()].apply(g, cat)
        })
    }

    pub fn self_stage(&self, g: &mut Graph, streams: [Var; 3], masked: [usize; 3]) -> [Var; 3] {
        Modality::ALL.map(|m| {
            let mut x = streams[m.index()];
            for block in &self.self_blocks[m.index()] {
                x = block.apply(g, x, None, masked[m.index()]);
            }
            x
        })
    }

    /// Mean-pools each stream from `pool_start` and regresses the
    /// concatenated pooled vector.
    pub fn pool_and_head(&self, g: &mut Graph, streams: [Var; 3], pool_start: [usize; 3]) -> Var {
        let pooled: Vec<Var> =
            (0..3).map(|m| g.mean_rows_from(streams[m], pool_start[m])).collect();
        let cat = g.concat_cols(&pooled);
        self.head.apply(g, cat)
    }

    /// Full staged forward for one bundle. Absent modalities must already be
    /// substituted upstream (zeros or generated features).
    pub fn forward(&self, g: &mut Graph, bundle: &ModalBundle, injection: &Injection) -> ForwardTrace {
        let inputs = [0, 1, 2].map(|m| g.input(&bundle.features[m]));
        let projected = self.project(g, inputs);
        let cross_out = self.cross_stage(g, projected);
        let mut masked = [0usize; 3];
        let self_in: [Var; 3] = match injection {
            Injection::None => cross_out,
            Injection::Tokens(tokens) | Injection::Masked(tokens) => {
                let out = [0, 1, 2].map(|m| match tokens[m] {
                    Some(t) => {
                        if matches!(injection, Injection::Masked(_)) {
                            masked[m] = g.value(t).rows();
                        }
                        g.concat_rows(&[t, cross_out[m]])
                    }
                    None => cross_out[m],
                });
                out
            }
        };
        let self_out = self.self_stage(g, self_in, masked);
        let prediction = self.pool_and_head(g, self_out, masked);
        ForwardTrace { prediction, cross_out, self_in, self_out }
    }
}

/// Clamps a raw head output into the label range [-R/2, R/2].
pub fn clamp_prediction(y: f64, label_range: f64) -> f64 {
    y.clamp(-label_range / 2.0, label_range / 2.0)
}

/// Batched forward returning raw scalar predictions.
pub fn predict_batch(params: &BackboneParams, bundles: &[ModalBundle]) -> Vec<f64> {
    let mut out = Vec::with_capacity(bundles.len());
    // Chunked so graph memory stays bounded on large datasets.
    for chunk in bundles.chunks(256) {
        let mut g = Graph::new();
        let mut reg = Bindings::new();
        let bb = params.bind(&mut g, &mut reg);
        for b in chunk {
            let trace = bb.forward(&mut g, b, &Injection::None);
            out.push(g.value(trace.prediction).item());
        }
    }
    out
}

/// Mean L1 loss of the backbone over a dataset (forward only).
pub fn dataset_l1_loss(params: &BackboneParams, dataset: &Dataset) -> f64 {
    let preds = predict_batch(params, &dataset.bundles);
    preds
        .iter()
        .zip(&dataset.bundles)
        .map(|(p, b)| (p - b.label).abs())
        .sum::<f64>()
        / dataset.len().max(1) as f64
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
}

/// Trains the backbone on complete bundles with L1 regression loss.
/// `dropout` enables the modality-dropout augmentation: with the given
/// probability a sample has one uniformly chosen modality zeroed for that
/// step. Returns the mean training loss per epoch.
pub fn train_backbone(
    params: &mut BackboneParams,
    dataset: &Dataset,
    opts: &TrainSettings,
    seed: u64,
    dropout: Option<f64>,
) -> Result<Vec<f64>> {
    if params.frozen {
        return Err(Error::Contract("cannot train a frozen backbone".into()));
    }
    for (i, b) in dataset.bundles.iter().enumerate() {
        if !b.is_complete() {
            return Err(Error::Contract(format!(
                "pretraining requires complete bundles; sample {i} has missing modalities"
            )));
        }
    }
    let mut rng = seeded(seed, "backbone.train");
    let mut sgd = Sgd::new(opts.lr, opts.momentum);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut epoch_losses = Vec::with_capacity(opts.epochs);
    for _epoch in 0..opts.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0.0_f64;
        for batch in order.chunks(opts.batch_size) {
            let mut g = Graph::new();
            let mut reg = Bindings::new();
            let bb = params.bind(&mut g, &mut reg);
            let mut losses = Vec::with_capacity(batch.len());
            for &i in batch {
                let bundle = match dropout {
                    Some(p) if rng.gen::<f64>() < p => {
                        let victim = Modality::ALL[rng.gen_range(0..3)];
                        let mut b = dataset.bundles[i].clone();
                        let shape = b.features[victim.index()].shape().to_vec();
                        b.features[victim.index()] = Tensor::zeros(shape);
                        b.present[victim.index()] = false;
                        b
                    }
                    _ => dataset.bundles[i].clone(),
                };
                let trace = bb.forward(&mut g, &bundle, &Injection::None);
                let label = g.scalar(bundle.label);
                let diff = g.sub(trace.prediction, label);
                losses.push(g.abs(diff));
            }
            let stacked = g.concat_rows(&losses);
            let loss = g.mean_rows(stacked);
            g.backward(loss);
            epoch_loss += g.value(loss).item();
            batches += 1.0;
            let grads = Sgd::collect_grads(&g, &reg);
            sgd.step(params, &grads);
        }
        epoch_losses.push(epoch_loss / batches.max(1.0));
    }
    Ok(epoch_losses)
}

/// Initializes, trains, and freezes a backbone in one call.
pub fn pretrain(
    config: &BackboneConfig,
    dataset: &Dataset,
    opts: &TrainSettings,
    seed: u64,
    dropout: Option<f64>,
) -> Result<(BackboneParams, Vec<f64>)> {
    let tag = if dropout.is_some() { "backbone.init.md" } else { "backbone.init" };
    let mut params = BackboneParams::init(config, seed, tag)?;
    let losses = train_backbone(&mut params, dataset, opts, seed, dropout)?;
    params.freeze();
    Ok((params, losses))
}
