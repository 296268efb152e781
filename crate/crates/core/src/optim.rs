//! SGD with classical momentum over named parameters.

use std::collections::BTreeMap;

use crate::graph::Graph;
use crate::nn::{Bindings, Params};
use crate::tensor::Tensor;

pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: BTreeMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Sgd { lr, momentum, velocity: BTreeMap::new() }
    }

    /// Pulls gradients for every registered binding out of the graph.
    pub fn collect_grads(g: &Graph, binds: &Bindings) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (name, var) in binds.entries() {
            if let Some(grad) = g.grad(*var) {
                out.insert(name.clone(), grad);
            }
        }
        out
    }

    /// v <- m·v + g ; p <- p − lr·v, applied by name. Parameters without a
    /// gradient entry are untouched.
    pub fn step(&mut self, model: &mut dyn Params, grads: &BTreeMap<String, Tensor>) {
        let lr = self.lr;
        let momentum = self.momentum;
        let velocity = &mut self.velocity;
        model.visit_mut("", &mut |name, t| {
            let Some(grad) = grads.get(name) else { return };
            assert_eq!(
                grad.shape(),
                t.shape(),
                "gradient shape {:?} vs parameter {name} shape {:?}",
                grad.shape(),
                t.shape()
            );
            let vel = velocity.entry(name.to_string()).or_insert_with(|| vec![0.0; t.numel()]);
            for ((p, v), g) in t.data_mut().iter_mut().zip(vel.iter_mut()).zip(grad.data()) {
                *v = momentum * *v + g;
                *p -= lr * *v;
            }
        });
    }
}
