//! Small reverse-mode autodiff engine specialized for the 3D segmentation
//! networks: f64 tensors, a Wengert-list tape over the handful of ops the
//! architecture needs, and Adam.
//!
//! Everything is deterministic: parallel kernels partition their output so
//! each element is reduced sequentially by exactly one thread, so results are
//! bit-identical regardless of thread count.

mod conv;
pub mod tape;

pub use tape::{NodeId, Tape};

use serde::{Deserialize, Serialize};

/// A value tensor: `[channels, depth, height, width]`.
pub type Tensor = ndarray::Array4<f64>;

/// Handle to one parameter tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// One learnable tensor with its gradient accumulator.
#[derive(Clone, Debug)]
pub struct ParamTensor {
    pub data: Vec<f64>,
    pub grad: Vec<f64>,
    pub shape: Vec<usize>,
}

/// Flat storage for every learnable tensor of a model.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    tensors: Vec<ParamTensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(&mut self, shape: Vec<usize>, data: Vec<f64>) -> ParamId {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "shape/data length mismatch");
        let grad = vec![0.0; data.len()];
        self.tensors.push(ParamTensor { data, grad, shape });
        ParamId(self.tensors.len() - 1)
    }

    pub fn data(&self, id: ParamId) -> &[f64] {
        &self.tensors[id.0].data
    }

    pub fn data_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.tensors[id.0].data
    }

    pub fn grad(&self, id: ParamId) -> &[f64] {
        &self.tensors[id.0].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.tensors[id.0].grad
    }

    pub fn shape(&self, id: ParamId) -> &[usize] {
        &self.tensors[id.0].shape
    }

    pub fn zero_grads(&mut self) {
        for t in &mut self.tensors {
            t.grad.fill(0.0);
        }
    }

    /// Number of parameter tensors.
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn total_params(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamTensor)> {
        self.tensors.iter().enumerate().map(|(i, t)| (ParamId(i), t))
    }
}

/// Adam hyperparameters besides the learning rate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// Adam optimizer state (first/second moments per parameter).
#[derive(Clone, Debug)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub step: u64,
    pub(crate) m: Vec<Vec<f64>>,
    pub(crate) v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, cfg: AdamConfig) -> Self {
        let m = store.tensors.iter().map(|t| vec![0.0; t.data.len()]).collect();
        let v = store.tensors.iter().map(|t| vec![0.0; t.data.len()]).collect();
        Adam { cfg, step: 0, m, v }
    }

    /// One update from the gradients currently held in the store.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.cfg.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.cfg.beta2.powi(self.step as i32);
        for (t, (m, v)) in store.tensors.iter_mut().zip(self.m.iter_mut().zip(&mut self.v)) {
            for i in 0..t.data.len() {
                let g = t.grad[i];
                m[i] = self.cfg.beta1 * m[i] + (1.0 - self.cfg.beta1) * g;
                v[i] = self.cfg.beta2 * v[i] + (1.0 - self.cfg.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                t.data[i] -= lr * m_hat / (v_hat.sqrt() + self.cfg.epsilon);
            }
        }
    }

    /// Moment buffers, for checkpointing.
    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.m, &self.v)
    }

    /// Restores optimizer state from checkpointed buffers.
    pub fn restore(store: &ParamStore, cfg: AdamConfig, step: u64, m: Vec<Vec<f64>>, v: Vec<Vec<f64>>) -> crate::Result<Self> {
        let shapes_ok = m.len() == store.len()
            && v.len() == store.len()
            && store.tensors.iter().zip(&m).all(|(t, b)| t.data.len() == b.len())
            && store.tensors.iter().zip(&v).all(|(t, b)| t.data.len() == b.len());
        if !shapes_ok {
            return Err(crate::Error::Checkpoint(
                "optimizer moment buffers do not match the parameter store".into(),
            ));
        }
        Ok(Adam { cfg, step, m, v })
    }
}
