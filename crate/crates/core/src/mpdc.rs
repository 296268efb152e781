//! Multi-level prompt dynamic connection: per-channel softmax fusion weights
//! across modalities, broadcast addition onto the self-attention outputs, and
//! residual reinjection of the shared complete prompt through a trainable
//! linear map that starts at zero (identity at initialization).

use crate::graph::{Graph, Var};
use crate::nn::{Bindings, BoundLinear, Linear, Params};
use crate::tensor::Tensor;

/// The residual prompt map F_psi: d_prompt -> d_model, zero-initialized
/// weight and bias.
#[derive(Clone, Debug)]
pub struct MpdcParams {
    pub f_psi: Linear,
}

impl MpdcParams {
    pub fn init(d_prompt: usize, d_model: usize) -> Self {
        MpdcParams { f_psi: Linear::zeros(d_prompt, d_model) }
    }

    pub fn bind(&self, g: &mut Graph, reg: &mut Bindings, train: bool) -> BoundLinear {
        self.f_psi.bind(g, reg, train, "mpdc.fpsi")
    }
}

impl Params for MpdcParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.f_psi.visit(&format!("{prefix}mpdc.fpsi"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.f_psi.visit_mut(&format!("{prefix}mpdc.fpsi"), f);
    }
}

/// Per-channel fusion weights: the row-mean of each modality's stream is
/// softmaxed across the three modalities, channel by channel. Returns one
/// 1 x d weight row per modality; for every channel the three weights form a
/// probability simplex.
pub fn channel_weights(g: &mut Graph, streams: [Var; 3]) -> [Var; 3] {
    let means: Vec<Var> = streams.iter().map(|s| g.mean_rows(*s)).collect();
    let stacked = g.concat_rows(&means);
    let sm = g.softmax_cols(stacked);
    [0, 1, 2].map(|m| g.row_slice(sm, m, m + 1))
}

/// Row-replicates the weight vector over the stream's shape and adds it
/// elementwise; no rows are introduced.
pub fn extend_fuse(g: &mut Graph, weights_row: Var, stream: Var) -> Var {
    g.add_row(stream, weights_row)
}

/// Adds the projected complete prompt onto the leading prompt-aligned rows,
/// leaving any remaining rows untouched. With a zero-initialized map this is
/// exactly the identity.
pub fn residual_connect(g: &mut Graph, fused: Var, p_com: Var, f_psi: &BoundLinear) -> Var {
    let projected = f_psi.apply(g, p_com);
    let rows = g.value(fused).rows();
    let p_rows = g.value(projected).rows();
    let k = rows.min(p_rows);
    let head = g.row_slice(fused, 0, k);
    let prompt_head = g.row_slice(projected, 0, k);
    let head = g.add(head, prompt_head);
    if k == rows {
        head
    } else {
        let tail = g.row_slice(fused, k, rows);
        g.concat_rows(&[head, tail])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{max_rel_err, DEFAULT_STEP};
    use crate::rng::seeded;

    fn three_streams(seed: u64, rows: usize, d: usize) -> [Tensor; 3] {
        let mut rng = seeded(seed, "mpdc");
        [0; 3].map(|_| Tensor::randn(&mut rng, vec![rows, d], 1.0))
    }

    #[test]
    fn identical_streams_weight_one_third() {
        let mut g = Graph::new();
        let t = Tensor::from_rows(&[vec![0.3, -1.0], vec![0.7, 2.0]]);
        let s = [g.input(&t), g.input(&t), g.input(&t)];
        let w = channel_weights(&mut g, s);
        for m in 0..3 {
            for v in g.value(w[m]).data() {
                assert!((v - 1.0 / 3.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn per_channel_weights_form_simplex() {
        let streams = three_streams(3, 5, 7);
        let mut g = Graph::new();
        let s = [g.input(&streams[0]), g.input(&streams[1]), g.input(&streams[2])];
        let w = channel_weights(&mut g, s);
        for c in 0..7 {
            let sum: f64 = (0..3).map(|m| g.value(w[m]).data()[c]).sum();
            assert!((sum - 1.0).abs() < 1e-12, "channel {c} sums to {sum}");
            for m in 0..3 {
                let v = g.value(w[m]).data()[c];
                assert!(v > 0.0 && v < 1.0);
            }
        }
    }

    #[test]
    fn dominant_channel_mean_takes_nearly_all_weight() {
        let mut g = Graph::new();
        let quiet = Tensor::zeros(vec![4, 2]);
        let loud = Tensor::from_vec(vec![4, 2], vec![10.0; 8]);
        let s = [g.input(&loud), g.input(&quiet), g.input(&quiet)];
        let w = channel_weights(&mut g, s);
        for c in 0..2 {
            assert!(g.value(w[0]).data()[c] > 0.99);
        }
    }

    #[test]
    fn zero_weight_vector_leaves_stream_unchanged() {
        let streams = three_streams(5, 4, 3);
        let mut g = Graph::new();
        let x = g.input(&streams[0]);
        let zero = g.input(&Tensor::zeros(vec![1, 3]));
        let fused = extend_fuse(&mut g, zero, x);
        assert_eq!(g.value(fused), g.value(x));
    }

    #[test]
    fn constant_weight_vector_shifts_everything_by_constant() {
        let streams = three_streams(6, 4, 3);
        let mut g = Graph::new();
        let x = g.input(&streams[0]);
        let c = g.input(&Tensor::from_vec(vec![1, 3], vec![0.25; 3]));
        let fused = extend_fuse(&mut g, c, x);
        for (a, b) in g.value(fused).data().iter().zip(g.value(x).data()) {
            assert!((a - (b + 0.25)).abs() < 1e-15);
        }
    }

    #[test]
    fn channel_weighting_and_fusion_gradcheck() {
        for seed in 0..5 {
            let streams = three_streams(seed, 3, 4);
            let err = max_rel_err(
                &|g, vars| {
                    let w = channel_weights(g, [vars[0], vars[1], vars[2]]);
                    let fused = [0, 1, 2].map(|m| extend_fuse(g, w[m], vars[m]));
                    let cat = g.concat_rows(&fused);
                    let sq = g.mul(cat, cat);
                    g.sum_all(sq)
                },
                &streams,
                DEFAULT_STEP,
            );
            assert!(err < 1e-4, "seed {seed}: rel err {err}");
        }
    }

    #[test]
    fn zero_initialized_residual_is_identity_bitwise() {
        let params = MpdcParams::init(6, 4);
        let streams = three_streams(9, 5, 4);
        let mut rng = seeded(9, "pcom");
        let p_com = Tensor::randn(&mut rng, vec![6, 6], 0.02);
        let mut g = Graph::new();
        let mut reg = Bindings::new();
        let f_psi = params.bind(&mut g, &mut reg, false);
        let x = g.input(&streams[0]);
        let p = g.input(&p_com);
        let out = residual_connect(&mut g, x, p, &f_psi);
        assert_eq!(g.value(out), g.value(x));
    }

    #[test]
    fn long_prompt_is_truncated_to_stream_rows() {
        let mut params = MpdcParams::init(3, 2);
        params.f_psi.w = Tensor::from_vec(vec![3, 2], vec![1.0; 6]);
        let mut g = Graph::new();
        let mut reg = Bindings::new();
        let f_psi = params.bind(&mut g, &mut reg, false);
        // Prompt has 5 rows, stream only 2: no shape error, 2 rows used.
        let p = g.input(&Tensor::from_vec(vec![5, 3], vec![0.5; 15]));
        let x = g.input(&Tensor::zeros(vec![2, 2]));
        let out = residual_connect(&mut g, x, p, &f_psi);
        assert_eq!(g.value(out).shape(), &[2, 2]);
        for v in g.value(out).data() {
            assert!((v - 1.5).abs() < 1e-15);
        }
    }

    #[test]
    fn prompt_perturbation_is_linear_and_localized() {
        let mut params = MpdcParams::init(4, 3);
        let mut rng = seeded(12, "fpsi");
        params.f_psi = Linear::init(&mut rng, 4, 3);
        let stream = Tensor::randn(&mut rng, vec![7, 3], 1.0);
        let p_com = Tensor::randn(&mut rng, vec![4, 4], 0.5);
        let delta = Tensor::randn(&mut rng, vec![4, 4], 0.1);

        let run = |p: &Tensor| {
            let mut g = Graph::new();
            let mut reg = Bindings::new();
            let f_psi = params.bind(&mut g, &mut reg, false);
            let x = g.input(&stream);
            let pv = g.input(p);
            let out = residual_connect(&mut g, x, pv, &f_psi);
            g.value(out).clone()
        };
        let base = run(&p_com);
        let perturbed_input = Tensor::from_vec(
            vec![4, 4],
            p_com.data().iter().zip(delta.data()).map(|(a, b)| a + b).collect(),
        );
        let shifted = run(&perturbed_input);
        let double = Tensor::from_vec(
            vec![4, 4],
            p_com.data().iter().zip(delta.data()).map(|(a, b)| a + 2.0 * b).collect(),
        );
        let shifted2 = run(&double);

        // Rows beyond the prompt length are untouched.
        for r in 4..7 {
            for c in 0..3 {
                assert_eq!(base.at(r, c).to_bits(), shifted.at(r, c).to_bits());
            }
        }
        // Linear response: doubling the perturbation doubles the shift.
        for r in 0..4 {
            for c in 0..3 {
                let d1 = shifted.at(r, c) - base.at(r, c);
                let d2 = shifted2.at(r, c) - base.at(r, c);
                assert!((d2 - 2.0 * d1).abs() < 1e-9, "row {r} col {c}: {d1} vs {d2}");
            }
        }
    }
}
