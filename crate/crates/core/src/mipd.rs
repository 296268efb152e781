//! Modality-invariant prompt disentanglement: cross-modal feature generation
//! (Conv1D + GELU per directed pair), decoupling of the shared complete
//! prompt into modality-specific prompts, and dimension-aligned assembly of
//! the streams that feed the cross-modal stage.

use serde::{Deserialize, Serialize};

use crate::backbone::{pair_index, BackboneParams};
use crate::graph::{Graph, Var};
use crate::missing::Modality;
use crate::nn::{bind, Bindings, BoundLinear, BoundResidualMlp, Linear, Params, ResidualMlp};
use crate::rng::seeded;
use crate::tensor::Tensor;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PromptConfig {
    /// Rows of the shared complete prompt.
    pub len_com: usize,
    /// Rows of the shared weight prompt.
    pub len_wei: usize,
    /// Width of the complete prompt (the decoupler works in this space).
    pub d_prompt: usize,
    /// Per-modality specific-prompt lengths (a, v, t).
    pub prompt_len: [usize; 3],
    /// Init scale for prompt banks.
    pub init_std: f64,
    /// Kernel width of the cross-modal generators.
    pub conv_width: usize,
    /// Hidden width of the decoupler MLPs.
    pub decoupler_hidden: usize,
}

impl PromptConfig {
    pub fn desk_default(d_model: usize) -> Self {
        PromptConfig {
            len_com: 50,
            len_wei: 50,
            d_prompt: d_model,
            prompt_len: [39, 50, 50],
            init_std: 0.02,
            conv_width: 3,
            decoupler_hidden: d_model,
        }
    }
}

/// Shared trainable prompt banks.
#[derive(Clone, Debug)]
pub struct PromptBank {
    pub p_com: Tensor,
    pub p_wei: Tensor,
    pub prompt_len: [usize; 3],
}

impl PromptBank {
    pub fn init(cfg: &PromptConfig, d_model: usize, seed: u64) -> Self {
        let mut rng = seeded(seed, "prompts.init");
        PromptBank {
            p_com: Tensor::randn(&mut rng, vec![cfg.len_com, cfg.d_prompt], cfg.init_std),
            p_wei: Tensor::randn(&mut rng, vec![cfg.len_wei, d_model], cfg.init_std),
            prompt_len: cfg.prompt_len,
        }
    }
}

impl Params for PromptBank {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&format!("{prefix}bank.p_com"), &self.p_com);
        f(&format!("{prefix}bank.p_wei"), &self.p_wei);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&format!("{prefix}bank.p_com"), &mut self.p_com);
        f(&format!("{prefix}bank.p_wei"), &mut self.p_wei);
    }
}

// ── Cross-modal generators ──────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct ConvParams {
    pub kernel: Tensor,
    pub bias: Tensor,
}

/// One Conv1D + GELU generator per ordered (src -> dst) pair, indexed by
/// [`pair_index`].
#[derive(Clone, Debug)]
pub struct CrossGenParams {
    pub conv: Vec<ConvParams>,
}

impl CrossGenParams {
    pub fn init(cfg: &PromptConfig, d_in: [usize; 3], seed: u64) -> Self {
        assert!(cfg.conv_width % 2 == 1, "conv width must be odd, got {}", cfg.conv_width);
        let mut rng = seeded(seed, "crossgen.init");
        let mut conv = vec![
            ConvParams { kernel: Tensor::zeros(vec![1, 1, 1]), bias: Tensor::zeros(vec![1]) };
            6
        ];
        for dst in Modality::ALL {
            for src in dst.others() {
                let (ds, dd) = (d_in[src.index()], d_in[dst.index()]);
                let std = (1.0 / (cfg.conv_width * ds) as f64).sqrt();
                conv[pair_index(src, dst)] = ConvParams {
                    kernel: Tensor::randn(&mut rng, vec![cfg.conv_width, ds, dd], std),
                    bias: Tensor::zeros(vec![dd]),
                };
            }
        }
        CrossGenParams { conv }
    }

    pub fn bind(&self, g: &mut Graph, reg: &mut Bindings, train: bool) -> BoundCrossGen {
        BoundCrossGen {
            conv: self
                .conv
                .iter()
                .enumerate()
                .map(|(i, c)| {
                    (
                        bind(g, reg, train, format!("gen.{i}.k"), &c.kernel),
                        bind(g, reg, train, format!("gen.{i}.b"), &c.bias),
                    )
                })
                .collect(),
        }
    }
}

impl Params for CrossGenParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        for (i, c) in self.conv.iter().enumerate() {
            f(&format!("{prefix}gen.{i}.k"), &c.kernel);
            f(&format!("{prefix}gen.{i}.b"), &c.bias);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (i, c) in self.conv.iter_mut().enumerate() {
            f(&format!("{prefix}gen.{i}.k"), &mut c.kernel);
            f(&format!("{prefix}gen.{i}.b"), &mut c.bias);
        }
    }
}

pub struct BoundCrossGen {
    conv: Vec<(Var, Var)>,
}

impl BoundCrossGen {
    /// Generates the absent target modality from every present source:
    /// GELU(Conv1D(src)) per direction, linearly resampled to the target
    /// length, averaged when two sources exist. `sources` must be nonempty
    /// (the caller guarantees at least one surviving modality).
    pub fn generate(
        &self,
        g: &mut Graph,
        sources: &[(Modality, Var)],
        target: Modality,
        target_len: usize,
    ) -> Var {
        assert!(!sources.is_empty(), "generation requires at least one present source modality");
        let gens: Vec<Var> = sources
            .iter()
            .map(|(src, x)| {
                let (kernel, bias) = self.conv[pair_index(*src, target)];
                let y = g.conv1d(*x, kernel, bias);
                let y = g.gelu(y);
                g.resample_rows(y, target_len)
            })
            .collect();
        if gens.len() == 1 {
            gens[0]
        } else {
            let sum = g.add(gens[0], gens[1]);
            g.scale(sum, 0.5)
        }
    }
}

// ── Prompt decoupler ────────────────────────────────────────────────

/// Per-modality decoupling MLPs with structurally identical architectures.
/// Residual with a zero-initialized output layer, so each starts as the
/// identity on the shared prompt.
#[derive(Clone, Debug)]
pub struct DecouplerParams {
    pub per_modality: Vec<ResidualMlp>,
}

impl DecouplerParams {
    pub fn init(cfg: &PromptConfig, seed: u64) -> Self {
        let mut rng = seeded(seed, "decoupler.init");
        DecouplerParams {
            per_modality: (0..3)
                .map(|_| ResidualMlp::init(&mut rng, cfg.d_prompt, cfg.decoupler_hidden))
                .collect(),
        }
    }

    pub fn bind(&self, g: &mut Graph, reg: &mut Bindings, train: bool) -> Vec<BoundResidualMlp> {
        self.per_modality
            .iter()
            .enumerate()
            .map(|(m, d)| d.bind(g, reg, train, &format!("dec.{m}")))
            .collect()
    }
}

impl Params for DecouplerParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        for (m, d) in self.per_modality.iter().enumerate() {
            d.visit(&format!("{prefix}dec.{m}"), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (m, d) in self.per_modality.iter_mut().enumerate() {
            d.visit_mut(&format!("{prefix}dec.{m}"), f);
        }
    }
}

/// Adjusts the token axis to `target` rows: truncate when longer, tile
/// cyclically when shorter.
pub fn resize_rows(g: &mut Graph, x: Var, target: usize) -> Var {
    let rows = g.value(x).rows();
    if rows == target {
        return x;
    }
    if rows > target {
        return g.row_slice(x, 0, target);
    }
    let mut parts = Vec::new();
    let mut remaining = target;
    while remaining > 0 {
        let take = remaining.min(rows);
        parts.push(if take == rows { x } else { g.row_slice(x, 0, take) });
        remaining -= take;
    }
    g.concat_rows(&parts)
}

/// Decouples the shared complete prompt into per-modality specific prompts,
/// resized to each modality's prompt length.
pub fn decouple_prompts(
    g: &mut Graph,
    decoupler: &[BoundResidualMlp],
    p_com: Var,
    prompt_len: [usize; 3],
) -> [Var; 3] {
    [0, 1, 2].map(|m| {
        let spec = decoupler[m].apply(g, p_com);
        resize_rows(g, spec, prompt_len[m])
    })
}

// ── Dimension alignment ─────────────────────────────────────────────

/// Per-modality alignment of prompt rows and feature rows into the model
/// width. The concatenated [prompt ; features] block has rows of two
/// different widths, so each row type gets its own linear map into d_model;
/// the feature path is warm-started from the frozen backbone projection.
#[derive(Clone, Debug)]
pub struct FphiParams {
    pub feat: Vec<Linear>,
    pub prompt: Vec<Linear>,
}

impl FphiParams {
    pub fn init(cfg: &PromptConfig, d_in: [usize; 3], d_model: usize, seed: u64) -> Self {
        let mut rng = seeded(seed, "fphi.init");
        FphiParams {
            feat: (0..3).map(|m| Linear::init(&mut rng, d_in[m], d_model)).collect(),
            prompt: (0..3).map(|_| Linear::init(&mut rng, cfg.d_prompt, d_model)).collect(),
        }
    }

    /// Copies the backbone's input projections into the feature paths so the
    /// prompt pipeline starts from the pretrained representation.
    pub fn warm_start(&mut self, backbone: &BackboneParams) {
        for m in 0..3 {
            self.feat[m] = backbone.proj[m].clone();
        }
    }

    pub fn bind(&self, g: &mut Graph, reg: &mut Bindings, train: bool) -> BoundFphi {
        BoundFphi {
            feat: self
                .feat
                .iter()
                .enumerate()
                .map(|(m, l)| l.bind(g, reg, train, &format!("fphi.feat.{m}")))
                .collect(),
            prompt: self
                .prompt
                .iter()
                .enumerate()
                .map(|(m, l)| l.bind(g, reg, train, &format!("fphi.prompt.{m}")))
                .collect(),
        }
    }
}

impl Params for FphiParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        for (m, l) in self.feat.iter().enumerate() {
            l.visit(&format!("{prefix}fphi.feat.{m}"), f);
        }
        for (m, l) in self.prompt.iter().enumerate() {
            l.visit(&format!("{prefix}fphi.prompt.{m}"), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (m, l) in self.feat.iter_mut().enumerate() {
            l.visit_mut(&format!("{prefix}fphi.feat.{m}"), f);
        }
        for (m, l) in self.prompt.iter_mut().enumerate() {
            l.visit_mut(&format!("{prefix}fphi.prompt.{m}"), f);
        }
    }
}

pub struct BoundFphi {
    pub feat: Vec<BoundLinear>,
    pub prompt: Vec<BoundLinear>,
}

impl BoundFphi {
    /// Assembles one modality's aligned stream: generated modalities get
    /// their specific prompt prepended before alignment, present modalities
    /// are aligned as-is.
    pub fn assemble(
        &self,
        g: &mut Graph,
        m: Modality,
        spec_prompt: Var,
        features: Var,
        generated: bool,
    ) -> Var {
        let projected = self.feat[m.index()].apply(g, features);
        if generated {
            let prompt_rows = self.prompt[m.index()].apply(g, spec_prompt);
            g.concat_rows(&[prompt_rows, projected])
        } else {
            projected
        }
    }
}
