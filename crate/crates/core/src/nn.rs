//! Parameter containers and layer forward functions shared by the backbone
//! and the prompt modules.
//!
//! Parameters are plain [`Tensor`]s owned by small structs; a forward pass
//! binds them onto a [`Graph`] (trainable or frozen) and works with the
//! returned `Var` handles. Trainable bindings are registered by name so the
//! optimizer and checkpoints see one flat, deterministically ordered view.

use rand::Rng;

use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Flat visitor over named parameters. Visit order is fixed per type, which
/// makes checksums, checkpoints, and optimizer state deterministic.
pub trait Params {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor));
}

/// Trainable leaf registry for one graph build.
#[derive(Default)]
pub struct Bindings {
    entries: Vec<(String, Var)>,
}

impl Bindings {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: String, var: Var) {
        self.entries.push((name, var));
    }

    pub fn entries(&self) -> &[(String, Var)] {
        &self.entries
    }
}

/// Binds a tensor as a graph leaf; trainable leaves are registered.
pub fn bind(
    g: &mut Graph,
    reg: &mut Bindings,
    trainable: bool,
    name: String,
    t: &Tensor,
) -> Var {
    if trainable {
        let v = g.param(t);
        reg.register(name, v);
        v
    } else {
        g.input(t)
    }
}

/// FNV-1a checksum over parameter names and little-endian payloads. Used to
/// assert that frozen parameter sets were not touched.
pub fn checksum(p: &dyn Params) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    let mut eat = |bytes: &[u8]| {
        for &b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    };
    p.visit("", &mut |name, t| {
        eat(name.as_bytes());
        for v in t.data() {
            eat(&v.to_le_bytes());
        }
    });
    h
}

/// Collects `(name, tensor)` snapshots in visit order.
pub fn named_tensors(p: &dyn Params) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    p.visit("", &mut |name, t| out.push((name.to_string(), t.clone())));
    out
}

// ── Linear ──────────────────────────────────────────────────────────

/// Row-wise affine map: x[r x d_in] -> x·W + b.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: Tensor,
    pub b: Tensor,
}

pub struct BoundLinear {
    pub w: Var,
    pub b: Var,
}

impl Linear {
    pub fn init<R: Rng>(rng: &mut R, d_in: usize, d_out: usize) -> Self {
        let std = (1.0 / d_in as f64).sqrt();
        Linear {
            w: Tensor::randn(rng, vec![d_in, d_out], std),
            b: Tensor::zeros(vec![1, d_out]),
        }
    }

    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        Linear { w: Tensor::zeros(vec![d_in, d_out]), b: Tensor::zeros(vec![1, d_out]) }
    }

    pub fn d_in(&self) -> usize {
        self.w.rows()
    }

    pub fn d_out(&self) -> usize {
        self.w.cols()
    }

    pub fn bind(&self, g: &mut Graph, reg: &mut Bindings, train: bool, name: &str) -> BoundLinear {
        BoundLinear {
            w: bind(g, reg, train, format!("{name}.w"), &self.w),
            b: bind(g, reg, train, format!("{name}.b"), &self.b),
        }
    }
}

impl BoundLinear {
    pub fn apply(&self, g: &mut Graph, x: Var) -> Var {
        let y = g.matmul(x, self.w);
        g.add_row(y, self.b)
    }
}

impl Params for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&format!("{prefix}.w"), &self.w);
        f(&format!("{prefix}.b"), &self.b);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&format!("{prefix}.w"), &mut self.w);
        f(&format!("{prefix}.b"), &mut self.b);
    }
}

// ── Layer norm ──────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
}

pub struct BoundLayerNorm {
    pub gamma: Var,
    pub beta: Var,
}

impl LayerNorm {
    pub fn identity(d: usize) -> Self {
        LayerNorm {
            gamma: Tensor::from_vec(vec![1, d], vec![1.0; d]),
            beta: Tensor::zeros(vec![1, d]),
        }
    }

    pub fn bind(&self, g: &mut Graph, reg: &mut Bindings, train: bool, name: &str) -> BoundLayerNorm {
        BoundLayerNorm {
            gamma: bind(g, reg, train, format!("{name}.g"), &self.gamma),
            beta: bind(g, reg, train, format!("{name}.b"), &self.beta),
        }
    }
}

impl BoundLayerNorm {
    pub fn apply(&self, g: &mut Graph, x: Var) -> Var {
        g.layer_norm(x, self.gamma, self.beta)
    }
}

impl Params for LayerNorm {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&format!("{prefix}.g"), &self.gamma);
        f(&format!("{prefix}.b"), &self.beta);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&format!("{prefix}.g"), &mut self.gamma);
        f(&format!("{prefix}.b"), &mut self.beta);
    }
}

// ── MLP with GELU hidden activations ────────────────────────────────

#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

pub struct BoundMlp {
    layers: Vec<BoundLinear>,
}

impl Mlp {
    /// `dims` lists input, hidden..., output widths.
    pub fn init<R: Rng>(rng: &mut R, dims: &[usize]) -> Self {
        assert!(dims.len() >= 2, "mlp needs at least input and output dims");
        let layers = dims.windows(2).map(|w| Linear::init(rng, w[0], w[1])).collect();
        Mlp { layers }
    }

    pub fn bind(&self, g: &mut Graph, reg: &mut Bindings, train: bool, name: &str) -> BoundMlp {
        BoundMlp {
            layers: self
                .layers
                .iter()
                .enumerate()
                .map(|(i, l)| l.bind(g, reg, train, &format!("{name}.{i}")))
                .collect(),
        }
    }
}

impl BoundMlp {
    pub fn apply(&self, g: &mut Graph, x: Var) -> Var {
        let last = self.layers.len() - 1;
        let mut h = x;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.apply(g, h);
            if i != last {
                h = g.gelu(h);
            }
        }
        h
    }
}

impl Params for Mlp {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&format!("{prefix}.{i}"), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&format!("{prefix}.{i}"), f);
        }
    }
}

// ── Residual MLP (identity at init) ─────────────────────────────────

/// x + W2·gelu(W1·x + b1) + b2 with the output layer zero-initialized, so the
/// map is exactly the identity until trained.
#[derive(Clone, Debug)]
pub struct ResidualMlp {
    pub inner: Linear,
    pub outer: Linear,
}

pub struct BoundResidualMlp {
    inner: BoundLinear,
    outer: BoundLinear,
}

impl ResidualMlp {
    pub fn init<R: Rng>(rng: &mut R, d: usize, hidden: usize) -> Self {
        ResidualMlp { inner: Linear::init(rng, d, hidden), outer: Linear::zeros(hidden, d) }
    }

    pub fn bind(&self, g: &mut Graph, reg: &mut Bindings, train: bool, name: &str) -> BoundResidualMlp {
        BoundResidualMlp {
            inner: self.inner.bind(g, reg, train, &format!("{name}.in")),
            outer: self.outer.bind(g, reg, train, &format!("{name}.out")),
        }
    }
}

impl BoundResidualMlp {
    pub fn apply(&self, g: &mut Graph, x: Var) -> Var {
        let h = self.inner.apply(g, x);
        let h = g.gelu(h);
        let h = self.outer.apply(g, h);
        g.add(x, h)
    }
}

impl Params for ResidualMlp {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.inner.visit(&format!("{prefix}.in"), f);
        self.outer.visit(&format!("{prefix}.out"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.inner.visit_mut(&format!("{prefix}.in"), f);
        self.outer.visit_mut(&format!("{prefix}.out"), f);
    }
}

// ── Transformer block ───────────────────────────────────────────────

/// Pre-norm transformer block. Self-attention when no source stream is
/// given; cross-attention (queries from `x`, keys/values from the source)
/// otherwise.
#[derive(Clone, Debug)]
pub struct Block {
    pub ln_x: LayerNorm,
    pub ln_src: LayerNorm,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub ln_ff: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
    pub n_heads: usize,
}

pub struct BoundBlock {
    ln_x: BoundLayerNorm,
    ln_src: BoundLayerNorm,
    wq: BoundLinear,
    wk: BoundLinear,
    wv: BoundLinear,
    wo: BoundLinear,
    ln_ff: BoundLayerNorm,
    ff1: BoundLinear,
    ff2: BoundLinear,
    n_heads: usize,
}

impl Block {
    pub fn init<R: Rng>(rng: &mut R, d: usize, n_heads: usize, ffn_hidden: usize) -> Self {
        assert!(n_heads > 0 && d % n_heads == 0, "d_model {d} not divisible by {n_heads} heads");
        Block {
            ln_x: LayerNorm::identity(d),
            ln_src: LayerNorm::identity(d),
            wq: Linear::init(rng, d, d),
            wk: Linear::init(rng, d, d),
            wv: Linear::init(rng, d, d),
            wo: Linear::init(rng, d, d),
            ln_ff: LayerNorm::identity(d),
            ff1: Linear::init(rng, d, ffn_hidden),
            ff2: Linear::init(rng, ffn_hidden, d),
            n_heads,
        }
    }

    pub fn bind(&self, g: &mut Graph, reg: &mut Bindings, train: bool, name: &str) -> BoundBlock {
        BoundBlock {
            ln_x: self.ln_x.bind(g, reg, train, &format!("{name}.lnx")),
            ln_src: self.ln_src.bind(g, reg, train, &format!("{name}.lns")),
            wq: self.wq.bind(g, reg, train, &format!("{name}.wq")),
            wk: self.wk.bind(g, reg, train, &format!("{name}.wk")),
            wv: self.wv.bind(g, reg, train, &format!("{name}.wv")),
            wo: self.wo.bind(g, reg, train, &format!("{name}.wo")),
            ln_ff: self.ln_ff.bind(g, reg, train, &format!("{name}.lnf")),
            ff1: self.ff1.bind(g, reg, train, &format!("{name}.ff1")),
            ff2: self.ff2.bind(g, reg, train, &format!("{name}.ff2")),
            n_heads: self.n_heads,
        }
    }
}

impl BoundBlock {
    /// `masked_keys` leading key positions are hidden from attention; used by
    /// the do-nothing injection test mode.
    pub fn apply(&self, g: &mut Graph, x: Var, source: Option<Var>, masked_keys: usize) -> Var {
        let xh = self.ln_x.apply(g, x);
        let sh = match source {
            Some(s) => self.ln_src.apply(g, s),
            None => xh,
        };
        let q = self.wq.apply(g, xh);
        let k = self.wk.apply(g, sh);
        let v = self.wv.apply(g, sh);
        let d = g.value(q).cols();
        let dh = d / self.n_heads;
        let heads: Vec<Var> = (0..self.n_heads)
            .map(|h| {
                let qh = g.col_slice(q, h * dh, (h + 1) * dh);
                let kh = g.col_slice(k, h * dh, (h + 1) * dh);
                let vh = g.col_slice(v, h * dh, (h + 1) * dh);
                g.attention(qh, kh, vh, masked_keys)
            })
            .collect();
        let merged = g.concat_cols(&heads);
        let att = self.wo.apply(g, merged);
        let x = g.add(x, att);
        let xh2 = self.ln_ff.apply(g, x);
        let h = self.ff1.apply(g, xh2);
        let h = g.gelu(h);
        let h = self.ff2.apply(g, h);
        g.add(x, h)
    }
}

impl Params for Block {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.ln_x.visit(&format!("{prefix}.lnx"), f);
        self.ln_src.visit(&format!("{prefix}.lns"), f);
        self.wq.visit(&format!("{prefix}.wq"), f);
        self.wk.visit(&format!("{prefix}.wk"), f);
        self.wv.visit(&format!("{prefix}.wv"), f);
        self.wo.visit(&format!("{prefix}.wo"), f);
        self.ln_ff.visit(&format!("{prefix}.lnf"), f);
        self.ff1.visit(&format!("{prefix}.ff1"), f);
        self.ff2.visit(&format!("{prefix}.ff2"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.ln_x.visit_mut(&format!("{prefix}.lnx"), f);
        self.ln_src.visit_mut(&format!("{prefix}.lns"), f);
        self.wq.visit_mut(&format!("{prefix}.wq"), f);
        self.wk.visit_mut(&format!("{prefix}.wk"), f);
        self.wv.visit_mut(&format!("{prefix}.wv"), f);
        self.wo.visit_mut(&format!("{prefix}.wo"), f);
        self.ln_ff.visit_mut(&format!("{prefix}.lnf"), f);
        self.ff1.visit_mut(&format!("{prefix}.ff1"), f);
        self.ff2.visit_mut(&format!("{prefix}.ff2"), f);
    }
}
