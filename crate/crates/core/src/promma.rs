//! The assembled adaptation model: frozen backbone + frozen evaluator gate,
//! with the trainable prompt stack spliced between the backbone stages.
//!
//! Routing per sample:
//!   * complete            -> frozen backbone, untouched
//!   * missing, gate skip  -> frozen backbone on the zero-filled bundle
//!   * missing, gate fire  -> generation + prompt pipeline + trained head
//!
//! Mutual-information prompt weights are computed per batch from detached
//! pooled streams and applied as constants, so no gradient flows through the
//! weighting path.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::backbone::{BackboneParams, BoundBackbone};
use crate::dataset::Dataset;
use crate::dpw::{pairwise_weights, sample_weights};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::mipd::{
    decouple_prompts, CrossGenParams, DecouplerParams, FphiParams, PromptBank, PromptConfig,
};
use crate::missing::{apply, MissingPlan, ModalBundle, Modality, Scenario};
use crate::mme::{gate, EvaluatorConfig, EvaluatorParams, GateDecision};
use crate::mpdc::{channel_weights, extend_fuse, residual_connect, MpdcParams};
use crate::nn::{bind, Bindings, Linear, Params};
use crate::optim::Sgd;
use crate::rng::seeded;
use crate::tensor::Tensor;

/// Which stages of the prompt pipeline are active. The ablation harness
/// toggles the first three; `residual` exists so tests can isolate the
/// prompt-reinjection path inside MPDC.
#[derive(Clone, Copy, Debug)]
pub struct ModuleFlags {
    /// Evaluator gate + generation + prompt decoupling + alignment. When
    /// off, every incomplete sample takes the zero-fill backbone path.
    pub mme_mipd: bool,
    /// Weighted prompt prepending ahead of self-attention.
    pub dpw: bool,
    /// Channel-softmax fusion + residual prompt connection after
    /// self-attention.
    pub mpdc: bool,
    /// The residual reinjection inside MPDC (kept separate so the
    /// zero-initialized-residual identity can be asserted bit-for-bit).
    pub residual: bool,
}

impl ModuleFlags {
    pub fn full() -> Self {
        ModuleFlags { mme_mipd: true, dpw: true, mpdc: true, residual: true }
    }

    pub fn none() -> Self {
        ModuleFlags { mme_mipd: false, dpw: false, mpdc: false, residual: false }
    }
}

pub struct PrommaModel {
    pub backbone: BackboneParams,
    pub evaluator: EvaluatorParams,
    pub eval_cfg: EvaluatorConfig,
    pub prompt_cfg: PromptConfig,
    pub bank: PromptBank,
    pub decoupler: DecouplerParams,
    pub crossgen: CrossGenParams,
    pub fphi: FphiParams,
    pub mpdc: MpdcParams,
    pub head: Linear,
    pub tau: f64,
    pub flags: ModuleFlags,
}

impl PrommaModel {
    /// Builds the trainable stack around a frozen backbone and evaluator.
    /// The alignment feature paths and the classifier head warm-start from
    /// the pretrained backbone.
    pub fn init(
        backbone: BackboneParams,
        evaluator: EvaluatorParams,
        eval_cfg: EvaluatorConfig,
        prompt_cfg: PromptConfig,
        tau: f64,
        flags: ModuleFlags,
        seed: u64,
    ) -> Result<Self> {
        if !backbone.frozen {
            return Err(Error::Contract("adaptation requires a frozen backbone".into()));
        }
        if !evaluator.frozen {
            return Err(Error::Contract("adaptation requires a frozen evaluator".into()));
        }
        let d_model = backbone.config.d_model;
        let d_in = backbone.config.d_in;
        let bank = PromptBank::init(&prompt_cfg, d_model, seed);
        let decoupler = DecouplerParams::init(&prompt_cfg, seed);
        let crossgen = CrossGenParams::init(&prompt_cfg, d_in, seed);
        let mut fphi = FphiParams::init(&prompt_cfg, d_in, d_model, seed);
        fphi.warm_start(&backbone);
        let mpdc = MpdcParams::init(prompt_cfg.d_prompt, d_model);
        let head = backbone.head.clone();
        Ok(PrommaModel {
            backbone,
            evaluator,
            eval_cfg,
            prompt_cfg,
            bank,
            decoupler,
            crossgen,
            fphi,
            mpdc,
            head,
            tau,
            flags,
        })
    }
}

/// Only the prompt-stack parameters are trainable; the backbone and
/// evaluator are checkpointed separately and stay frozen.
impl Params for PrommaModel {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.bank.visit(prefix, f);
        self.decoupler.visit(prefix, f);
        self.crossgen.visit(prefix, f);
        self.fphi.visit(prefix, f);
        self.mpdc.visit(prefix, f);
        self.head.visit(&format!("{prefix}head"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.bank.visit_mut(prefix, f);
        self.decoupler.visit_mut(prefix, f);
        self.crossgen.visit_mut(prefix, f);
        self.fphi.visit_mut(prefix, f);
        self.mpdc.visit_mut(prefix, f);
        self.head.visit_mut(&format!("{prefix}head"), f);
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BatchStats {
    pub complete: usize,
    pub skipped: usize,
    pub generated: usize,
}

impl BatchStats {
    pub fn merge(&mut self, other: &BatchStats) {
        self.complete += other.complete;
        self.skipped += other.skipped;
        self.generated += other.generated;
    }
}

pub struct BatchForward {
    /// Raw head outputs for every sample, batch order.
    pub preds: Vec<f64>,
    /// (batch index, prediction node) for generate-path samples.
    pub gen_preds: Vec<(usize, Var)>,
    /// MI weights actually applied, per generate-path sample.
    pub weights: Vec<(usize, [f64; 3])>,
    pub stats: BatchStats,
}

/// Which consumer of the shared complete prompt should read a detached copy
/// instead of the trainable leaf. Test-only: isolates the gradient
/// contribution of the other path without changing any forward value.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PcomPath {
    Decouple,
    Residual,
}

#[derive(Clone, Copy, Default)]
pub struct ForwardOptions<'w> {
    pub train: bool,
    /// Overrides the computed MI weights per batch index.
    pub preset_weights: Option<&'w [(usize, [f64; 3])]>,
    /// Detaches the shared prompt in the named path.
    pub detach_pcom: Option<PcomPath>,
}

impl PrommaModel {
    /// Runs one batch through the routed pipeline on the given graph. With
    /// `opts.train` the prompt-stack leaves are registered as trainable.
    pub fn forward_batch(
        &self,
        g: &mut Graph,
        reg: &mut Bindings,
        bundles: &[ModalBundle],
        opts: ForwardOptions<'_>,
    ) -> Result<BatchForward> {
        let train = opts.train;
        let preset_weights = opts.preset_weights;
        let bb = self.backbone.bind(g, reg);
        let mut preds = vec![0.0; bundles.len()];
        let mut stats = BatchStats::default();

        // Route samples.
        let mut gen_idx: Vec<usize> = Vec::new();
        for (i, b) in bundles.iter().enumerate() {
            if b.is_complete() {
                stats.complete += 1;
                preds[i] = frozen_prediction(g, &bb, b);
            } else if self.flags.mme_mipd
                && gate(b, &self.evaluator, &self.eval_cfg) == GateDecision::Generate
            {
                gen_idx.push(i);
            } else {
                stats.skipped += 1;
                preds[i] = frozen_prediction(g, &bb, b);
            }
        }
        stats.generated = gen_idx.len();
        let mut out = BatchForward { preds, gen_preds: Vec::new(), weights: Vec::new(), stats };
        if gen_idx.is_empty() {
            return Ok(out);
        }

        // Bind the prompt stack once per graph.
        let p_com = bind(g, reg, train, "bank.p_com".into(), &self.bank.p_com);
        let p_com_detached = opts.detach_pcom.map(|_| g.input(&self.bank.p_com));
        let pick = |path: PcomPath| match (opts.detach_pcom, p_com_detached) {
            (Some(p), Some(detached)) if p == path => detached,
            _ => p_com,
        };
        let p_com_decouple = pick(PcomPath::Decouple);
        let p_com_residual = pick(PcomPath::Residual);
        let p_wei = bind(g, reg, train, "bank.p_wei".into(), &self.bank.p_wei);
        let dec = self.decoupler.bind(g, reg, train);
        let crossgen = self.crossgen.bind(g, reg, train);
        let fphi = self.fphi.bind(g, reg, train);
        let f_psi = self.mpdc.bind(g, reg, train);
        let head = self.head.bind(g, reg, train, "head");
        let specs = decouple_prompts(g, &dec, p_com_decouple, self.bank.prompt_len);

        // Phase A: generation + alignment + frozen cross stage.
        let seq_len = self.backbone.config.seq_len;
        let mut cross_streams: Vec<[Var; 3]> = Vec::with_capacity(gen_idx.len());
        for &i in &gen_idx {
            let b = &bundles[i];
            let raw: [Var; 3] = [0, 1, 2].map(|m| g.input(&b.features[m]));
            let sources: Vec<(Modality, Var)> = b
                .present_modalities()
                .iter()
                .map(|m| (*m, raw[m.index()]))
                .collect();
            let aligned: [Var; 3] = Modality::ALL.map(|m| {
                if b.present[m.index()] {
                    fphi.assemble(g, m, specs[m.index()], raw[m.index()], false)
                } else {
                    let generated =
                        crossgen.generate(g, &sources, m, seq_len[m.index()]);
                    fphi.assemble(g, m, specs[m.index()], generated, true)
                }
            });
            cross_streams.push(bb.cross_stage(g, aligned));
        }

        // MI weights from detached pooled streams, one estimate per batch.
        let pooled: Option<[Tensor; 3]> = if gen_idx.len() >= 2 {
            Some([0, 1, 2].map(|m| {
                let rows: Vec<Vec<f64>> = cross_streams
                    .iter()
                    .map(|s| g.value(s[m]).mean_rows())
                    .collect();
                Tensor::from_rows(&rows)
            }))
        } else {
            None
        };
        let estimate = match &pooled {
            Some(embs) => Some(pairwise_weights(embs, self.tau)?),
            None => None,
        };

        // Phase B: weighting, self stage, fusion, head.
        for (slot, &i) in gen_idx.iter().enumerate() {
            let b = &bundles[i];
            let w = if let Some(preset) = preset_weights {
                preset
                    .iter()
                    .find(|(idx, _)| *idx == i)
                    .map(|(_, w)| *w)
                    .unwrap_or([1.0 / 3.0; 3])
            } else {
                match &estimate {
                    Some(est) => sample_weights(est, b.present),
                    None => [1.0 / 3.0; 3],
                }
            };
            out.weights.push((i, w));

            let xprime = cross_streams[slot];
            let self_in: [Var; 3] = if self.flags.dpw {
                [0, 1, 2].map(|m| {
                    let scaled = g.scale(p_wei, w[m]);
                    g.concat_rows(&[scaled, xprime[m]])
                })
            } else {
                xprime
            };
            let self_out = bb.self_stage(g, self_in, [0; 3]);
            let fused: [Var; 3] = if self.flags.mpdc {
                let cw = channel_weights(g, self_out);
                let added = [0, 1, 2].map(|m| extend_fuse(g, cw[m], self_out[m]));
                if self.flags.residual {
                    [0, 1, 2].map(|m| residual_connect(g, added[m], p_com_residual, &f_psi))
                } else {
                    added
                }
            } else {
                self_out
            };
            let pooled_rows: Vec<Var> = (0..3).map(|m| g.mean_rows(fused[m])).collect();
            let cat = g.concat_cols(&pooled_rows);
            let pred = head.apply(g, cat);
            out.preds[i] = g.value(pred).item();
            out.gen_preds.push((i, pred));
        }
        Ok(out)
    }

    /// Forward-only predictions over an arbitrary bundle list, chunked so
    /// graph memory stays bounded. Returns raw scores and routing counters.
    pub fn predict(&self, bundles: &[ModalBundle], batch_size: usize) -> Result<(Vec<f64>, BatchStats)> {
        let mut preds = Vec::with_capacity(bundles.len());
        let mut stats = BatchStats::default();
        for chunk in chunks_min2(bundles, batch_size.max(2)) {
            let mut g = Graph::new();
            let mut reg = Bindings::new();
            let fwd = self.forward_batch(&mut g, &mut reg, chunk, ForwardOptions::default())?;
            preds.extend(fwd.preds);
            stats.merge(&fwd.stats);
        }
        Ok((preds, stats))
    }
}

fn frozen_prediction(g: &mut Graph, bb: &BoundBackbone, bundle: &ModalBundle) -> f64 {
    let trace = bb.forward(g, bundle, &crate::backbone::Injection::None);
    g.value(trace.prediction).item()
}

/// Splits into chunks of `size`, merging a trailing singleton into the
/// previous chunk so every chunk has at least two samples when possible.
fn chunks_min2(bundles: &[ModalBundle], size: usize) -> Vec<&[ModalBundle]> {
    let mut out = Vec::new();
    let n = bundles.len();
    let mut start = 0;
    while start < n {
        let mut end = (start + size).min(n);
        if n - end == 1 {
            end = n;
        }
        out.push(&bundles[start..end]);
        start = end;
    }
    out
}

#[derive(Clone, Debug)]
pub struct AdaptTrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Scenarios sampled uniformly per batch during training.
    pub scenarios: Vec<Scenario>,
    /// Missing rate applied to each training batch.
    pub rate: f64,
}

/// Trains the prompt stack on a complete dataset by corrupting each batch
/// with a uniformly drawn scenario at the configured rate. Only
/// generate-path samples contribute gradient. Returns per-epoch mean losses
/// over those samples.
pub fn train_promma(
    model: &mut PrommaModel,
    dataset: &Dataset,
    opts: &AdaptTrainSettings,
    seed: u64,
) -> Result<Vec<f64>> {
    if opts.scenarios.is_empty() {
        return Err(Error::Config("training scenario list is empty".into()));
    }
    let mut rng = seeded(seed, "promma.train");
    let mut sgd = Sgd::new(opts.lr, opts.momentum);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut epoch_losses = Vec::with_capacity(opts.epochs);
    for _ in 0..opts.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut count = 0usize;
        for batch_ids in order.chunks(opts.batch_size) {
            let scenario = opts.scenarios[rng.gen_range(0..opts.scenarios.len())].clone();
            let plan = MissingPlan::new(scenario, opts.rate, rng.gen())?;
            let batch: Vec<ModalBundle> =
                batch_ids.iter().map(|&i| dataset.bundles[i].clone()).collect();
            let masked = apply(&batch, &plan)?;

            let mut g = Graph::new();
            let mut reg = Bindings::new();
            let opts_fwd = ForwardOptions { train: true, ..Default::default() };
            let fwd = model.forward_batch(&mut g, &mut reg, &masked, opts_fwd)?;
            if fwd.gen_preds.is_empty() {
                continue;
            }
            let mut losses = Vec::with_capacity(fwd.gen_preds.len());
            for (i, pred) in &fwd.gen_preds {
                let label = g.scalar(masked[*i].label);
                let diff = g.sub(*pred, label);
                losses.push(g.abs(diff));
            }
            let stacked = g.concat_rows(&losses);
            let loss = g.mean_rows(stacked);
            g.backward(loss);
            total += g.value(loss).item() * fwd.gen_preds.len() as f64;
            count += fwd.gen_preds.len();
            let grads = Sgd::collect_grads(&g, &reg);
            sgd.step(model, &grads);
        }
        epoch_losses.push(if count > 0 { total / count as f64 } else { 0.0 });
    }
    Ok(epoch_losses)
}
