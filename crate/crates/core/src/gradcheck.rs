//! Central finite-difference gradient checking.
//!
//! The numeric side rebuilds a fresh forward-only graph per probe, so it
//! shares no code path with `Graph::backward` and serves as an independent
//! oracle for it.

use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Default probe step for central differences.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Builds the scalar loss from graph-bound copies of `params`; the slice
/// order matches the `params` argument of [`max_rel_err`].
pub type LossFn<'a> = dyn Fn(&mut Graph, &[Var]) -> Var + 'a;

/// Maximum relative error between reverse-mode gradients and central finite
/// differences, over every element of every tensor in `params`.
pub fn max_rel_err(build: &LossFn, params: &[Tensor], step: f64) -> f64 {
    // Analytic gradients: one graph, one backward sweep.
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p)).collect();
    let loss = build(&mut g, &vars);
    g.backward(loss);
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(params)
        .map(|(v, p)| g.grad(*v).unwrap_or_else(|| Tensor::zeros(p.shape().to_vec())))
        .collect();

    let eval = |probe: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = probe.iter().map(|p| g.input(p)).collect();
        let loss = build(&mut g, &vars);
        g.value(loss).item()
    };

    let mut worst = 0.0_f64;
    for (pi, p) in params.iter().enumerate() {
        for ei in 0..p.numel() {
            let mut plus = params.to_vec();
            plus[pi].data_mut()[ei] += step;
            let mut minus = params.to_vec();
            minus[pi].data_mut()[ei] -= step;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * step);
            let a = analytic[pi].data()[ei];
            let rel = (a - numeric).abs() / f64::max(a.abs().max(numeric.abs()), 1e-6);
            if rel > worst {
                worst = rel;
            }
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_loss_checks_exactly() {
        let x = Tensor::from_vec(vec![1, 3], vec![0.5, -1.25, 2.0]);
        let err = max_rel_err(
            &|g, vars| {
                let sq = g.mul(vars[0], vars[0]);
                g.sum_all(sq)
            },
            &[x],
            DEFAULT_STEP,
        );
        assert!(err < 1e-8, "rel err {err}");
    }
}
