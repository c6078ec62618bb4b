use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::graph::{Graph, Gradients, Var};
use crate::tensor::Tensor;

/// Named, ordered collection of parameter tensors owned by one network.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Arc<Tensor>>,
}

/// Parameters of a store placed on a graph, either trainable or frozen.
pub struct Bound<'g> {
    vars: Vec<Var<'g>>,
    trainable: bool,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a tensor and returns its index.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        self.names.push(name.into());
        self.values.push(Arc::new(value));
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, i: usize) -> &Tensor {
        &self.values[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Tensor {
        Arc::make_mut(&mut self.values[i])
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.values.iter().map(|v| v.as_ref()))
    }

    pub fn num_elements(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// SHA-256 over names, shapes and the exact bit patterns of every value.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, v) in self.iter() {
            h.update(name.as_bytes());
            for d in v.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for x in v.data() {
                h.update(x.to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Places every tensor on `graph`; frozen bindings are constants.
    pub fn bind<'g>(&self, graph: &'g Graph, trainable: bool) -> Bound<'g> {
        let vars = self
            .values
            .iter()
            .map(|v| {
                if trainable {
                    graph.input(v.clone())
                } else {
                    graph.constant(v.clone())
                }
            })
            .collect();
        Bound { vars, trainable }
    }

    /// Replaces values by position after checking names and shapes agree.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<(), String> {
        if self.names != other.names {
            return Err("parameter names differ".into());
        }
        for (i, v) in other.values.iter().enumerate() {
            if self.values[i].shape() != v.shape() {
                return Err(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    self.names[i],
                    v.shape(),
                    self.values[i].shape()
                ));
            }
        }
        self.values = other.values.clone();
        Ok(())
    }
}

impl<'g> Bound<'g> {
    pub fn get(&self, i: usize) -> Var<'g> {
        self.vars[i]
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    /// Gradient per parameter, zeros where the loss does not reach.
    pub fn grads(&self, grads: &Gradients) -> Vec<Tensor> {
        self.vars.iter().map(|v| grads.wrt_or_zeros(*v)).collect()
    }
}

/// Kaiming-normal weights for a `[O, C, kh, kw]` convolution (fan-in scaling).
pub fn kaiming_normal<R: Rng + ?Sized>(shape: [usize; 4], gain: f64, rng: &mut R) -> Tensor {
    let fan_in = (shape[1] * shape[2] * shape[3]).max(1) as f64;
    let std = gain / fan_in.sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    let data = (0..shape.iter().product::<usize>())
        .map(|_| normal.sample(rng))
        .collect();
    Tensor::from_vec(shape, data)
}

/// Adaptive-moment optimizer with bias correction and a constant learning rate.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self::with_betas(lr, 0.9, 0.999)
    }

    pub fn with_betas(lr: f64, beta1: f64, beta2: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor]) {
        assert_eq!(params.len(), grads.len(), "one gradient per parameter");
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| Tensor::zeros(g.shape())).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        for (i, g) in grads.iter().enumerate() {
            let p = params.get_mut(i);
            assert_eq!(p.shape(), g.shape(), "gradient shape mismatch");
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mv = b1 * *mv + (1.0 - b1) * gv;
                *vv = b2 * *vv + (1.0 - b2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn adam_minimises_quadratic() {
        let mut store = ParamStore::new();
        store.add("x", Tensor::from_vec([1, 1, 1, 2], vec![3.0, -2.0]));
        let mut adam = Adam::new(0.1);
        for _ in 0..500 {
            let g = Graph::new();
            let p = store.bind(&g, true);
            let loss = p.get(0).square().sum();
            let grads = g.backward(loss);
            let gs = p.grads(&grads);
            adam.step(&mut store, &gs);
        }
        assert!(store.get(0).max_abs() < 1e-2);
        assert_eq!(adam.steps_taken(), 500);
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut store = ParamStore::new();
        store.add("x", Tensor::scalar(1.0));
        let mut adam = Adam::new(0.001);
        adam.step(&mut store, &[Tensor::scalar(42.0)]);
        assert!((store.get(0).data()[0] - 0.999).abs() < 1e-9);
    }

    #[test]
    fn checksum_tracks_bits() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut a = ParamStore::new();
        a.add("w", kaiming_normal([2, 3, 3, 3], 1.0, &mut rng));
        let b = a.clone();
        assert_eq!(a.checksum(), b.checksum());
        a.get_mut(0).data_mut()[5] += 1e-15;
        assert_ne!(a.checksum(), b.checksum());
    }

    #[test]
    fn frozen_binding_yields_no_gradients() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::scalar(2.0));
        let g = Graph::new();
        let p = store.bind(&g, false);
        let x = g.input(Tensor::scalar(3.0));
        let loss = x.mul(p.get(0)).sum();
        let grads = g.backward(loss);
        assert!(grads.wrt(p.get(0)).is_none());
        assert_eq!(grads.wrt(x).unwrap().data(), &[2.0]);
    }
}
