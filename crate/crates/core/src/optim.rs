//! Named parameter store and SGD with momentum.
//!
//! Parameters are registered once under a unique name and leased onto a
//! [`Graph`] as leaf nodes each forward pass. After backward, the graph
//! gradients are folded back into the store with
//! [`ParamStore::absorb_grads`], and [`ParamStore::sgd_step`] applies
//!
//! ```text
//! v <- momentum * v + grad + weight_decay * w
//! w <- w - lr * v
//! ```
//!
//! with a per-parameter weight-decay coefficient (gate logits get a
//! different one than network weights).

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::tensor::Tensor;

pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Vec<f32>,
    pub velocity: Vec<f32>,
    pub weight_decay: f32,
    /// Buffers (running statistics) are stored but never stepped.
    pub trainable: bool,
}

#[derive(Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn register(&mut self, name: &str, value: Tensor, weight_decay: f32) -> Result<()> {
        self.insert(name, value, weight_decay, true)
    }

    /// Registers a non-trainable buffer (e.g. batchnorm running stats).
    pub fn register_buffer(&mut self, name: &str, value: Tensor) -> Result<()> {
        self.insert(name, value, 0.0, false)
    }

    fn insert(&mut self, name: &str, value: Tensor, weight_decay: f32, trainable: bool) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(Error::invalid("param_store", format!("duplicate parameter '{name}'")));
        }
        let n = value.len();
        self.index.insert(name.to_string(), self.params.len());
        self.params.push(Parameter {
            name: name.to_string(),
            value: value.detached(),
            grad: vec![0.0; n],
            velocity: vec![0.0; n],
            weight_decay,
            trainable,
        });
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Option<&Parameter> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    /// Replaces a stored value; the shape must not change.
    pub fn set_value(&mut self, name: &str, value: Tensor) -> Result<()> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))?;
        let p = &mut self.params[i];
        if p.value.shape() != value.shape() {
            return Err(Error::shape(
                "param_store",
                "replacement value",
                format!("{:?}", p.value.shape()),
                format!("{:?}", value.shape()),
            ));
        }
        p.value = value.detached();
        Ok(())
    }

    /// Puts the parameter on the graph as a differentiable leaf and
    /// remembers the lease so gradients can be folded back later.
    pub fn lease(&self, name: &str, graph: &mut Graph) -> Result<Tensor> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))?;
        let t = graph.leaf(&self.params[i].value);
        graph.mark_lease(t.node.expect("leaf has a node"), i);
        Ok(t)
    }

    /// Adds the graph's accumulated leaf gradients into the store. Call
    /// once per backward pass, before resetting the graph.
    pub fn absorb_grads(&mut self, graph: &Graph) {
        for &(node, idx) in graph.leases() {
            if let Some(g) = graph.node_grad(node) {
                let slot = &mut self.params[idx].grad;
                for (s, v) in slot.iter_mut().zip(g) {
                    *s += v;
                }
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    /// One SGD step over every trainable parameter.
    pub fn sgd_step(&mut self, lr: f32, momentum: f32) -> Result<()> {
        for p in &mut self.params {
            if !p.trainable {
                continue;
            }
            let wd = p.weight_decay;
            let w = p.value.data_mut();
            for ((wi, vi), &gi) in w.iter_mut().zip(&mut p.velocity).zip(&p.grad) {
                let v = momentum * *vi + gi + wd * *wi;
                if !v.is_finite() {
                    return Err(Error::NonFiniteUpdate {
                        name: p.name.clone(),
                        velocity: v,
                        grad: gi,
                    });
                }
                *vi = v;
                *wi -= lr * v;
            }
        }
        Ok(())
    }

    /// Parameters in registration order (deterministic serialization).
    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Sum over trainable parameters of wd * |w|^2, the decay term's
    /// contribution to the effective objective. Diagnostic only.
    pub fn decay_energy(&self) -> f64 {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| {
                p.weight_decay as f64
                    * p.value.data().iter().map(|&w| (w as f64) * (w as f64)).sum::<f64>()
            })
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_two_step_unroll() {
        // momentum 0.9, unit gradient, lr 0.1, no decay:
        // v1 = 1, w1 = -0.1; v2 = 1.9, w2 = -0.29.
        let mut store = ParamStore::new();
        store.register("w", Tensor::scalar(0.0), 0.0).unwrap();
        for _ in 0..2 {
            store.zero_grads();
            let mut g = Graph::new();
            let w = store.lease("w", &mut g).unwrap();
            // loss = w so d loss/dw = 1.
            let loss = g.sum_all(&w).unwrap();
            g.backward(&loss).unwrap();
            store.absorb_grads(&g);
            store.sgd_step(0.1, 0.9).unwrap();
        }
        let w = store.value("w").unwrap().item();
        assert!((w + 0.29).abs() < 1e-6, "w = {w}");
    }

    #[test]
    fn weight_decay_shrinks_parameters_without_gradient() {
        let mut store = ParamStore::new();
        store.register("w", Tensor::scalar(1.0), 0.5).unwrap();
        store.sgd_step(0.1, 0.0).unwrap();
        // v = 0 + 0 + 0.5*1; w = 1 - 0.05.
        assert!((store.value("w").unwrap().item() - 0.95).abs() < 1e-6);
    }

    #[test]
    fn buffers_are_not_stepped() {
        let mut store = ParamStore::new();
        store.register_buffer("running", Tensor::scalar(2.0)).unwrap();
        store.sgd_step(0.1, 0.9).unwrap();
        assert_eq!(store.value("running").unwrap().item(), 2.0);
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let mut store = ParamStore::new();
        store.register("w", Tensor::scalar(0.0), 0.0).unwrap();
        assert!(store.register("w", Tensor::scalar(0.0), 0.0).is_err());
    }

    #[test]
    fn non_finite_update_names_the_parameter() {
        let mut store = ParamStore::new();
        store.register("layer.weight", Tensor::scalar(0.0), 0.0).unwrap();
        let mut g = Graph::new();
        let w = store.lease("layer.weight", &mut g).unwrap();
        let loss = g.sum_all(&w).unwrap();
        g.backward(&loss).unwrap();
        store.absorb_grads(&g);
        // Poison the gradient.
        store.params[0].grad[0] = f32::NAN;
        let err = store.sgd_step(0.1, 0.9).unwrap_err();
        assert!(err.to_string().contains("layer.weight"), "{err}");
    }
}
