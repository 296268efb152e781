//! Reverse-mode automatic differentiation over a linear op tape.
//!
//! Ops are recorded in insertion order (which is a topological order by
//! construction) and evaluated eagerly; `backward` walks the tape in exact
//! reverse order, so gradients are chain-rule exact and bit-reproducible
//! across runs. Everything is f64; matmul inner kernels are delegated to
//! `matrixmultiply::dgemm`, which is deterministic and single-threaded.

use crate::tensor::{assert_finite, Tensor};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Op record. Inputs are tape indices; saved buffers hold whatever the
/// backward pass needs beyond input/output values.
#[derive(Debug)]
enum Op {
    Leaf,
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    /// x + row broadcast over every row of x.
    AddRow { x: usize, row: usize },
    Scale { x: usize, c: f64 },
    Abs { x: usize },
    Gelu { x: usize },
    Matmul { a: usize, b: usize },
    /// a · bᵀ without materializing the transpose.
    MatmulNt { a: usize, b: usize },
    Conv1d { x: usize, kernel: usize, bias: usize },
    /// Row-wise softmax; the first `masked` columns are excluded from the
    /// normalization and receive exactly zero weight.
    SoftmaxRows { x: usize, masked: usize },
    /// Column-wise softmax (across rows, per column).
    SoftmaxCols { x: usize },
    LayerNorm { x: usize, gamma: usize, beta: usize, inv_std: Vec<f64>, xhat: Vec<f64> },
    ConcatRows { parts: Vec<usize> },
    RowSlice { x: usize, start: usize },
    ConcatCols { parts: Vec<usize> },
    ColSlice { x: usize, start: usize },
    /// Mean over rows `start..`, producing a 1 x d tensor.
    MeanRowsFrom { x: usize, start: usize },
    SumAll { x: usize },
    /// Linear time-axis resampling; per output row (lo, hi, frac).
    ResampleRows { x: usize, taps: Vec<(usize, usize, f64)> },
}

struct Node {
    op: Op,
    value: Tensor,
    /// True when this node can influence some grad-requiring leaf.
    needs_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Eagerly evaluated computation tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

fn dgemm_rm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    // Row-major output with trailing stride 1.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> Var {
        assert_finite("graph op", value.data());
        self.nodes.push(Node { op, value, needs_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Constant input; gradients never flow into it.
    pub fn input(&mut self, t: &Tensor) -> Var {
        self.push(Op::Leaf, t.clone(), false)
    }

    /// Trainable leaf; `grad()` is populated after `backward`.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push(Op::Leaf, t.clone(), true)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.input(&Tensor::scalar(v))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.val(v)
    }

    /// Accumulated gradient of a leaf (or any node), if it required one.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let n = &self.nodes[v.0];
        n.grad
            .as_ref()
            .map(|g| Tensor::from_vec(n.value.shape().to_vec(), g.clone()))
    }

    /// Zeroes every gradient accumulator on the tape.
    pub fn reset_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    // ── Elementwise and structural ops ──────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.val(a), self.val(b));
        assert_eq!(
            ta.shape(),
            tb.shape(),
            "add shape mismatch: {:?} vs {:?}",
            ta.shape(),
            tb.shape()
        );
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::from_vec(ta.shape().to_vec(), data);
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::Add { a: a.0, b: b.0 }, value, ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.val(a), self.val(b));
        assert_eq!(
            ta.shape(),
            tb.shape(),
            "sub shape mismatch: {:?} vs {:?}",
            ta.shape(),
            tb.shape()
        );
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x - y).collect();
        let value = Tensor::from_vec(ta.shape().to_vec(), data);
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::Sub { a: a.0, b: b.0 }, value, ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.val(a), self.val(b));
        assert_eq!(
            ta.shape(),
            tb.shape(),
            "mul shape mismatch: {:?} vs {:?}",
            ta.shape(),
            tb.shape()
        );
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::from_vec(ta.shape().to_vec(), data);
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::Mul { a: a.0, b: b.0 }, value, ng)
    }

    /// Adds a 1 x d row tensor to every row of a r x d tensor.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let (tx, tr) = (self.val(x), self.val(row));
        let (r, c) = (tx.rows(), tx.cols());
        assert_eq!(
            tr.numel(),
            c,
            "add_row width mismatch: {:?} vs {:?}",
            tx.shape(),
            tr.shape()
        );
        let rd = tr.data();
        let mut data = tx.data().to_vec();
        for i in 0..r {
            for j in 0..c {
                data[i * c + j] += rd[j];
            }
        }
        let value = Tensor::from_vec(vec![r, c], data);
        let ng = self.needs(x) || self.needs(row);
        self.push(Op::AddRow { x: x.0, row: row.0 }, value, ng)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        assert!(c.is_finite(), "scale by non-finite constant {c}");
        let tx = self.val(x);
        let data = tx.data().iter().map(|v| v * c).collect();
        let value = Tensor::from_vec(tx.shape().to_vec(), data);
        let ng = self.needs(x);
        self.push(Op::Scale { x: x.0, c }, value, ng)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let tx = self.val(x);
        let data = tx.data().iter().map(|v| v.abs()).collect();
        let value = Tensor::from_vec(tx.shape().to_vec(), data);
        let ng = self.needs(x);
        self.push(Op::Abs { x: x.0 }, value, ng)
    }

    /// Exact GELU: x · Φ(x) with Φ the Gaussian CDF via erf.
    pub fn gelu(&mut self, x: Var) -> Var {
        let tx = self.val(x);
        let data = tx.data().iter().map(|&v| v * gauss_cdf(v)).collect();
        let value = Tensor::from_vec(tx.shape().to_vec(), data);
        let ng = self.needs(x);
        self.push(Op::Gelu { x: x.0 }, value, ng)
    }

    // ── Linear algebra ──────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.val(a), self.val(b));
        let (m, k) = (ta.rows(), ta.cols());
        let (kb, n) = (tb.rows(), tb.cols());
        assert_eq!(
            k, kb,
            "matmul inner dimension mismatch: {:?} vs {:?}",
            ta.shape(),
            tb.shape()
        );
        let mut c = vec![0.0; m * n];
        dgemm_rm(m, k, n, ta.data(), (k as isize, 1), tb.data(), (n as isize, 1), 0.0, &mut c);
        let value = Tensor::from_vec(vec![m, n], c);
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::Matmul { a: a.0, b: b.0 }, value, ng)
    }

    /// a[m x k] · bᵀ where b is n x k.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.val(a), self.val(b));
        let (m, k) = (ta.rows(), ta.cols());
        let (n, kb) = (tb.rows(), tb.cols());
        assert_eq!(
            k, kb,
            "matmul_nt inner dimension mismatch: {:?} vs {:?}ᵀ",
            ta.shape(),
            tb.shape()
        );
        let mut c = vec![0.0; m * n];
        dgemm_rm(m, k, n, ta.data(), (k as isize, 1), tb.data(), (1, k as isize), 0.0, &mut c);
        let value = Tensor::from_vec(vec![m, n], c);
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::MatmulNt { a: a.0, b: b.0 }, value, ng)
    }

    /// Temporal convolution with zero "same" padding: input [L x d_in],
    /// kernel [w x d_in x d_out] (w odd), bias [d_out], output [L x d_out].
    /// Tap orientation is true convolution: out[i] sums k[j] · x[i + (w-1)/2 - j].
    pub fn conv1d(&mut self, x: Var, kernel: Var, bias: Var) -> Var {
        let (tx, tk, tb) = (self.val(x), self.val(kernel), self.val(bias));
        let ks = tk.shape();
        assert_eq!(ks.len(), 3, "conv1d kernel must be [w x d_in x d_out], got {ks:?}");
        let (w, d_in, d_out) = (ks[0], ks[1], ks[2]);
        assert!(w % 2 == 1, "conv1d kernel width must be odd, got {w}");
        let (l, xd) = (tx.rows(), tx.cols());
        assert_eq!(xd, d_in, "conv1d channel mismatch: input {:?} vs kernel {ks:?}", tx.shape());
        assert_eq!(tb.numel(), d_out, "conv1d bias len {} vs d_out {d_out}", tb.numel());
        let off = (w - 1) / 2;
        let (xd_, kd, bd) = (tx.data(), tk.data(), tb.data());
        let mut out = vec![0.0; l * d_out];
        for i in 0..l {
            for co in 0..d_out {
                let mut s = bd[co];
                for j in 0..w {
                    let p = i as isize + off as isize - j as isize;
                    if p < 0 || p >= l as isize {
                        continue;
                    }
                    let p = p as usize;
                    for ci in 0..d_in {
                        s += kd[(j * d_in + ci) * d_out + co] * xd_[p * d_in + ci];
                    }
                }
                out[i * d_out + co] = s;
            }
        }
        let value = Tensor::from_vec(vec![l, d_out], out);
        let ng = self.needs(x) || self.needs(kernel) || self.needs(bias);
        self.push(Op::Conv1d { x: x.0, kernel: kernel.0, bias: bias.0 }, value, ng)
    }

    // ── Normalizations ──────────────────────────────────────────────

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        self.softmax_rows_masked(x, 0)
    }

    /// Row softmax with the first `masked` columns forced to exactly zero
    /// weight and excluded from the normalization.
    pub fn softmax_rows_masked(&mut self, x: Var, masked: usize) -> Var {
        let tx = self.val(x);
        let (r, c) = (tx.rows(), tx.cols());
        assert!(masked < c, "softmax mask {masked} leaves no columns of {c}");
        let xd = tx.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xd[i * c..(i + 1) * c];
            let max = row[masked..].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in masked..c {
                let e = (row[j] - max).exp();
                out[i * c + j] = e;
                sum += e;
            }
            for j in masked..c {
                out[i * c + j] /= sum;
            }
        }
        let value = Tensor::from_vec(vec![r, c], out);
        let ng = self.needs(x);
        self.push(Op::SoftmaxRows { x: x.0, masked }, value, ng)
    }

    /// Softmax along axis 0: each column becomes a distribution over rows.
    pub fn softmax_cols(&mut self, x: Var) -> Var {
        let tx = self.val(x);
        let (r, c) = (tx.rows(), tx.cols());
        assert!(r > 0, "softmax_cols on empty tensor");
        let xd = tx.data();
        let mut out = vec![0.0; r * c];
        for j in 0..c {
            let mut max = f64::NEG_INFINITY;
            for i in 0..r {
                max = max.max(xd[i * c + j]);
            }
            let mut sum = 0.0;
            for i in 0..r {
                let e = (xd[i * c + j] - max).exp();
                out[i * c + j] = e;
                sum += e;
            }
            for i in 0..r {
                out[i * c + j] /= sum;
            }
        }
        let value = Tensor::from_vec(vec![r, c], out);
        let ng = self.needs(x);
        self.push(Op::SoftmaxCols { x: x.0 }, value, ng)
    }

    /// Row-wise layer normalization with learnable gain and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let (tx, tg, tb) = (self.val(x), self.val(gamma), self.val(beta));
        let (r, c) = (tx.rows(), tx.cols());
        assert_eq!(tg.numel(), c, "layer_norm gamma len {} vs width {c}", tg.numel());
        assert_eq!(tb.numel(), c, "layer_norm beta len {} vs width {c}", tb.numel());
        let (xd, gd, bd) = (tx.data(), tg.data(), tb.data());
        let mut out = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let mut xhat = vec![0.0; r * c];
        for i in 0..r {
            let row = &xd[i * c..(i + 1) * c];
            let mu = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                let h = (row[j] - mu) * is;
                xhat[i * c + j] = h;
                out[i * c + j] = h * gd[j] + bd[j];
            }
        }
        let value = Tensor::from_vec(vec![r, c], out);
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(
            Op::LayerNorm { x: x.0, gamma: gamma.0, beta: beta.0, inv_std, xhat },
            value,
            ng,
        )
    }

    // ── Shape surgery ───────────────────────────────────────────────

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let c = self.val(parts[0]).cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.val(p);
            assert_eq!(t.cols(), c, "concat_rows width mismatch: {:?} vs width {c}", t.shape());
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let value = Tensor::from_vec(vec![rows, c], data);
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(Op::ConcatRows { parts: parts.iter().map(|p| p.0).collect() }, value, ng)
    }

    pub fn row_slice(&mut self, x: Var, start: usize, end: usize) -> Var {
        let tx = self.val(x);
        let (r, c) = (tx.rows(), tx.cols());
        assert!(start <= end && end <= r, "row_slice {start}..{end} out of {r} rows");
        let data = tx.data()[start * c..end * c].to_vec();
        let value = Tensor::from_vec(vec![end - start, c], data);
        let ng = self.needs(x);
        self.push(Op::RowSlice { x: x.0, start }, value, ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let r = self.val(parts[0]).rows();
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let t = self.val(p);
                assert_eq!(t.rows(), r, "concat_cols height mismatch: {:?} vs {r} rows", t.shape());
                t.cols()
            })
            .collect();
        let c: usize = widths.iter().sum();
        let mut data = vec![0.0; r * c];
        let mut col0 = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let t = self.val(p);
            for i in 0..r {
                data[i * c + col0..i * c + col0 + w].copy_from_slice(t.row(i));
            }
            col0 += w;
        }
        let value = Tensor::from_vec(vec![r, c], data);
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(Op::ConcatCols { parts: parts.iter().map(|p| p.0).collect() }, value, ng)
    }

    pub fn col_slice(&mut self, x: Var, start: usize, end: usize) -> Var {
        let tx = self.val(x);
        let (r, c) = (tx.rows(), tx.cols());
        assert!(start <= end && end <= c, "col_slice {start}..{end} out of {c} cols");
        let w = end - start;
        let mut data = vec![0.0; r * w];
        for i in 0..r {
            data[i * w..(i + 1) * w].copy_from_slice(&tx.data()[i * c + start..i * c + end]);
        }
        let value = Tensor::from_vec(vec![r, w], data);
        let ng = self.needs(x);
        self.push(Op::ColSlice { x: x.0, start }, value, ng)
    }

    /// Mean over rows `start..`, yielding 1 x d.
    pub fn mean_rows_from(&mut self, x: Var, start: usize) -> Var {
        let tx = self.val(x);
        let (r, c) = (tx.rows(), tx.cols());
        assert!(start < r, "mean_rows_from start {start} out of {r} rows");
        let count = (r - start) as f64;
        let mut out = vec![0.0; c];
        for i in start..r {
            for j in 0..c {
                out[j] += tx.data()[i * c + j];
            }
        }
        for o in &mut out {
            *o /= count;
        }
        let value = Tensor::from_vec(vec![1, c], out);
        let ng = self.needs(x);
        self.push(Op::MeanRowsFrom { x: x.0, start }, value, ng)
    }

    pub fn mean_rows(&mut self, x: Var) -> Var {
        self.mean_rows_from(x, 0)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let tx = self.val(x);
        let s: f64 = tx.data().iter().sum();
        let ng = self.needs(x);
        self.push(Op::SumAll { x: x.0 }, Tensor::scalar(s), ng)
    }

    /// Resamples the row (time) axis to `new_len` by linear interpolation
    /// with aligned endpoints.
    pub fn resample_rows(&mut self, x: Var, new_len: usize) -> Var {
        let tx = self.val(x);
        let (l, c) = (tx.rows(), tx.cols());
        assert!(l > 0 && new_len > 0, "resample_rows on empty axis");
        let taps: Vec<(usize, usize, f64)> = (0..new_len)
            .map(|i| {
                let pos = if new_len == 1 {
                    (l - 1) as f64 / 2.0
                } else {
                    i as f64 * (l - 1) as f64 / (new_len - 1) as f64
                };
                let lo = pos.floor() as usize;
                let hi = (lo + 1).min(l - 1);
                (lo, hi, pos - lo as f64)
            })
            .collect();
        let mut out = vec![0.0; new_len * c];
        for (i, &(lo, hi, f)) in taps.iter().enumerate() {
            for j in 0..c {
                out[i * c + j] = (1.0 - f) * tx.data()[lo * c + j] + f * tx.data()[hi * c + j];
            }
        }
        let value = Tensor::from_vec(vec![new_len, c], out);
        let ng = self.needs(x);
        self.push(Op::ResampleRows { x: x.0, taps }, value, ng)
    }

    // ── Composites ──────────────────────────────────────────────────

    /// Scaled dot-product attention softmax(q·kᵀ/√d)·v built from primitive
    /// ops. `masked_keys` leading key rows get exactly zero weight (used for
    /// the do-nothing prompt-injection test mode).
    pub fn attention(&mut self, q: Var, k: Var, v: Var, masked_keys: usize) -> Var {
        let d = self.val(q).cols();
        assert!(d > 0, "attention head dimension must be positive");
        assert_eq!(self.val(k).cols(), d, "attention q/k width mismatch");
        assert_eq!(
            self.val(k).rows(),
            self.val(v).rows(),
            "attention k/v length mismatch: {:?} vs {:?}",
            self.val(k).shape(),
            self.val(v).shape()
        );
        let scores = self.matmul_nt(q, k);
        let scaled = self.scale(scores, 1.0 / (d as f64).sqrt());
        let weights = self.softmax_rows_masked(scaled, masked_keys);
        self.matmul(weights, v)
    }

    // ── Backward pass ───────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Each call runs an independent sweep
    /// whose result is added into the persistent per-node accumulators, so
    /// repeated calls accumulate until `reset_grads`.
    pub fn backward(&mut self, loss: Var) {
        assert_eq!(
            self.val(loss).numel(),
            1,
            "backward needs a scalar loss, got shape {:?}",
            self.val(loss).shape()
        );
        let mut sweep: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].needs_grad {
            sweep[loss.0] = Some(vec![1.0]);
        }
        for id in (0..=loss.0).rev() {
            if sweep[id].is_none() {
                continue;
            }
            self.step_back(id, &mut sweep);
        }
        for (n, s) in self.nodes.iter_mut().zip(sweep) {
            if let Some(g) = s {
                assert_finite("backward", &g);
                let buf = n.grad.get_or_insert_with(|| vec![0.0; n.value.numel()]);
                for (b, v) in buf.iter_mut().zip(&g) {
                    *b += v;
                }
            }
        }
    }

    fn accum(&self, sweep: &mut [Option<Vec<f64>>], id: usize, g: &[f64]) {
        if !self.nodes[id].needs_grad {
            return;
        }
        let buf = sweep[id].get_or_insert_with(|| vec![0.0; self.nodes[id].value.numel()]);
        debug_assert_eq!(buf.len(), g.len());
        for (b, v) in buf.iter_mut().zip(g) {
            *b += v;
        }
    }

    fn step_back(&self, id: usize, sweep: &mut [Option<Vec<f64>>]) {
        let dy = sweep[id].clone().expect("sweep grad present");
        // Dispatch clones small index data out of the op to satisfy borrows.
        enum Plan {
            None,
            One(usize, Vec<f64>),
            Two((usize, Vec<f64>), (usize, Vec<f64>)),
            Many(Vec<(usize, Vec<f64>)>),
        }
        let plan = match &self.nodes[id].op {
            Op::Leaf => Plan::None,
            Op::Add { a, b } => Plan::Two((*a, dy.clone()), (*b, dy)),
            Op::Sub { a, b } => {
                let neg = dy.iter().map(|v| -v).collect();
                Plan::Two((*a, dy), (*b, neg))
            }
            Op::Mul { a, b } => {
                let (ia, ib) = (*a, *b);
                let da: Vec<f64> =
                    dy.iter().zip(self.nodes[ib].value.data()).map(|(g, v)| g * v).collect();
                let db: Vec<f64> =
                    dy.iter().zip(self.nodes[ia].value.data()).map(|(g, v)| g * v).collect();
                Plan::Two((ia, da), (ib, db))
            }
            Op::AddRow { x, row } => {
                let c = self.nodes[*row].value.numel();
                let mut drow = vec![0.0; c];
                for (i, g) in dy.iter().enumerate() {
                    drow[i % c] += g;
                }
                Plan::Two((*x, dy), (*row, drow))
            }
            Op::Scale { x, c } => {
                let dx = dy.iter().map(|g| g * c).collect();
                Plan::One(*x, dx)
            }
            Op::Abs { x } => {
                let xv = self.nodes[*x].value.data();
                // Subgradient at 0 is taken as 0.
                let dx = dy
                    .iter()
                    .zip(xv)
                    .map(|(g, v)| if *v > 0.0 { *g } else if *v < 0.0 { -*g } else { 0.0 })
                    .collect();
                Plan::One(*x, dx)
            }
            Op::Gelu { x } => {
                let xv = self.nodes[*x].value.data();
                let dx = dy.iter().zip(xv).map(|(g, &v)| g * gelu_grad(v)).collect();
                Plan::One(*x, dx)
            }
            Op::Matmul { a, b } => {
                let (ia, ib) = (*a, *b);
                let (m, k) = (self.nodes[ia].value.rows(), self.nodes[ia].value.cols());
                let n = self.nodes[ib].value.cols();
                let mut da = vec![0.0; m * k];
                let mut db = vec![0.0; k * n];
                // dA = dC · Bᵀ ; dB = Aᵀ · dC
                dgemm_rm(m, n, k, &dy, (n as isize, 1), self.nodes[ib].value.data(), (1, n as isize), 0.0, &mut da);
                dgemm_rm(k, m, n, self.nodes[ia].value.data(), (1, k as isize), &dy, (n as isize, 1), 0.0, &mut db);
                Plan::Two((ia, da), (ib, db))
            }
            Op::MatmulNt { a, b } => {
                let (ia, ib) = (*a, *b);
                let (m, k) = (self.nodes[ia].value.rows(), self.nodes[ia].value.cols());
                let n = self.nodes[ib].value.rows();
                let mut da = vec![0.0; m * k];
                let mut db = vec![0.0; n * k];
                // C = A·Bᵀ: dA = dC · B ; dB = dCᵀ · A
                dgemm_rm(m, n, k, &dy, (n as isize, 1), self.nodes[ib].value.data(), (k as isize, 1), 0.0, &mut da);
                dgemm_rm(n, m, k, &dy, (1, n as isize), self.nodes[ia].value.data(), (k as isize, 1), 0.0, &mut db);
                Plan::Two((ia, da), (ib, db))
            }
            Op::Conv1d { x, kernel, bias } => {
                let (ix, ik, ib) = (*x, *kernel, *bias);
                let ks = self.nodes[ik].value.shape().to_vec();
                let (w, d_in, d_out) = (ks[0], ks[1], ks[2]);
                let off = (w - 1) / 2;
                let l = self.nodes[ix].value.rows();
                let xd = self.nodes[ix].value.data();
                let kd = self.nodes[ik].value.data();
                let mut dx = vec![0.0; l * d_in];
                let mut dk = vec![0.0; w * d_in * d_out];
                let mut db = vec![0.0; d_out];
                for i in 0..l {
                    for co in 0..d_out {
                        let g = dy[i * d_out + co];
                        db[co] += g;
                        for j in 0..w {
                            let p = i as isize + off as isize - j as isize;
                            if p < 0 || p >= l as isize {
                                continue;
                            }
                            let p = p as usize;
                            for ci in 0..d_in {
                                dk[(j * d_in + ci) * d_out + co] += g * xd[p * d_in + ci];
                                dx[p * d_in + ci] += g * kd[(j * d_in + ci) * d_out + co];
                            }
                        }
                    }
                }
                Plan::Many(vec![(ix, dx), (ik, dk), (ib, db)])
            }
            Op::SoftmaxRows { x, masked } => {
                let (ix, m) = (*x, *masked);
                let y = self.nodes[id].value.data();
                let (r, c) = (self.nodes[id].value.rows(), self.nodes[id].value.cols());
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    let mut dot = 0.0;
                    for j in m..c {
                        dot += dy[i * c + j] * y[i * c + j];
                    }
                    for j in m..c {
                        dx[i * c + j] = y[i * c + j] * (dy[i * c + j] - dot);
                    }
                }
                Plan::One(ix, dx)
            }
            Op::SoftmaxCols { x } => {
                let ix = *x;
                let y = self.nodes[id].value.data();
                let (r, c) = (self.nodes[id].value.rows(), self.nodes[id].value.cols());
                let mut dx = vec![0.0; r * c];
                for j in 0..c {
                    let mut dot = 0.0;
                    for i in 0..r {
                        dot += dy[i * c + j] * y[i * c + j];
                    }
                    for i in 0..r {
                        dx[i * c + j] = y[i * c + j] * (dy[i * c + j] - dot);
                    }
                }
                Plan::One(ix, dx)
            }
            Op::LayerNorm { x, gamma, beta, inv_std, xhat } => {
                let (ix, ig, ibe) = (*x, *gamma, *beta);
                let (r, c) = (self.nodes[ix].value.rows(), self.nodes[ix].value.cols());
                let gd = self.nodes[ig].value.data();
                let mut dx = vec![0.0; r * c];
                let mut dg = vec![0.0; c];
                let mut db = vec![0.0; c];
                for i in 0..r {
                    let mut mean_dh = 0.0;
                    let mut mean_dh_h = 0.0;
                    for j in 0..c {
                        let dh = dy[i * c + j] * gd[j];
                        mean_dh += dh;
                        mean_dh_h += dh * xhat[i * c + j];
                    }
                    mean_dh /= c as f64;
                    mean_dh_h /= c as f64;
                    for j in 0..c {
                        let dh = dy[i * c + j] * gd[j];
                        dx[i * c + j] =
                            inv_std[i] * (dh - mean_dh - xhat[i * c + j] * mean_dh_h);
                        dg[j] += dy[i * c + j] * xhat[i * c + j];
                        db[j] += dy[i * c + j];
                    }
                }
                Plan::Many(vec![(ix, dx), (ig, dg), (ibe, db)])
            }
            Op::ConcatRows { parts } => {
                let parts = parts.clone();
                let c = self.nodes[id].value.cols();
                let mut outs = Vec::with_capacity(parts.len());
                let mut row0 = 0;
                for p in parts {
                    let pr = self.nodes[p].value.rows();
                    outs.push((p, dy[row0 * c..(row0 + pr) * c].to_vec()));
                    row0 += pr;
                }
                Plan::Many(outs)
            }
            Op::RowSlice { x, start } => {
                let (ix, s) = (*x, *start);
                let (r, c) = (self.nodes[ix].value.rows(), self.nodes[ix].value.cols());
                let sr = self.nodes[id].value.rows();
                let mut dx = vec![0.0; r * c];
                dx[s * c..(s + sr) * c].copy_from_slice(&dy);
                Plan::One(ix, dx)
            }
            Op::ConcatCols { parts } => {
                let parts = parts.clone();
                let (r, c) = (self.nodes[id].value.rows(), self.nodes[id].value.cols());
                let mut outs = Vec::with_capacity(parts.len());
                let mut col0 = 0;
                for p in parts {
                    let w = self.nodes[p].value.cols();
                    let mut dp = vec![0.0; r * w];
                    for i in 0..r {
                        dp[i * w..(i + 1) * w].copy_from_slice(&dy[i * c + col0..i * c + col0 + w]);
                    }
                    outs.push((p, dp));
                    col0 += w;
                }
                Plan::Many(outs)
            }
            Op::ColSlice { x, start } => {
                let (ix, s) = (*x, *start);
                let (r, c) = (self.nodes[ix].value.rows(), self.nodes[ix].value.cols());
                let w = self.nodes[id].value.cols();
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    dx[i * c + s..i * c + s + w].copy_from_slice(&dy[i * w..(i + 1) * w]);
                }
                Plan::One(ix, dx)
            }
            Op::MeanRowsFrom { x, start } => {
                let (ix, s) = (*x, *start);
                let (r, c) = (self.nodes[ix].value.rows(), self.nodes[ix].value.cols());
                let scale = 1.0 / (r - s) as f64;
                let mut dx = vec![0.0; r * c];
                for i in s..r {
                    for j in 0..c {
                        dx[i * c + j] = dy[j] * scale;
                    }
                }
                Plan::One(ix, dx)
            }
            Op::SumAll { x } => {
                let ix = *x;
                let n = self.nodes[ix].value.numel();
                Plan::One(ix, vec![dy[0]; n])
            }
            Op::ResampleRows { x, taps } => {
                let ix = *x;
                let taps = taps.clone();
                let (l, c) = (self.nodes[ix].value.rows(), self.nodes[ix].value.cols());
                let mut dx = vec![0.0; l * c];
                for (i, (lo, hi, f)) in taps.into_iter().enumerate() {
                    for j in 0..c {
                        dx[lo * c + j] += (1.0 - f) * dy[i * c + j];
                        dx[hi * c + j] += f * dy[i * c + j];
                    }
                }
                Plan::One(ix, dx)
            }
        };
        match plan {
            Plan::None => {}
            Plan::One(i, g) => self.accum(sweep, i, &g),
            Plan::Two((i, gi), (j, gj)) => {
                self.accum(sweep, i, &gi);
                self.accum(sweep, j, &gj);
            }
            Plan::Many(v) => {
                for (i, g) in v {
                    self.accum(sweep, i, &g);
                }
            }
        }
    }
}

/// Gaussian CDF Φ(x) via the error function.
pub fn gauss_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    gauss_cdf(x) + x * pdf
}
