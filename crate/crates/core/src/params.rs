//! Named, trainable parameter storage shared by every layer.
//!
//! All model state lives in one [`ParamStore`]: trainable weights, biases,
//! and the non-trainable running statistics kept by batch normalization.
//! Layers hold [`ParamId`] handles rather than the buffers themselves, so a
//! forward pass can borrow the store mutably while the layer structs stay
//! immutable. Keeping everything in one store also makes checkpointing and
//! the optimizer step trivial: both just walk the entries in registration
//! order, which is deterministic.

use crate::tensor::TensorError;
use rand::Rng;
use std::collections::HashMap;

/// Handle to one entry in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub grad: Vec<f64>,
    pub trainable: bool,
    velocity: Vec<f64>,
}

/// Flat registry of parameters, indexed both by [`ParamId`] and by name.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    by_name: HashMap<String, usize>,
    grads_ready: bool,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter with explicit initial values. Names must be
    /// unique; they are the stable key used by checkpoints.
    pub fn register(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        values: Vec<f64>,
        trainable: bool,
    ) -> Result<ParamId, TensorError> {
        let name = name.into();
        let expected: usize = shape.iter().product();
        if values.len() != expected {
            return Err(TensorError::LengthMismatch {
                shape,
                expected,
                got: values.len(),
            });
        }
        if self.by_name.contains_key(&name) {
            return Err(TensorError::DuplicateParam { name });
        }
        let id = self.entries.len();
        self.by_name.insert(name.clone(), id);
        let n = values.len();
        self.entries.push(ParamEntry {
            name,
            shape,
            values,
            grad: vec![0.0; n],
            trainable,
            velocity: Vec::new(),
        });
        Ok(ParamId(id))
    }

    /// Glorot-uniform initialization: values drawn from
    /// `U[-sqrt(6/(fan_in+fan_out)), +sqrt(6/(fan_in+fan_out))]`.
    pub fn register_glorot(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        fan_in: usize,
        fan_out: usize,
        rng: &mut (impl Rng + ?Sized),
    ) -> Result<ParamId, TensorError> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n: usize = shape.iter().product();
        let values: Vec<f64> = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
        self.register(name, shape, values, true)
    }

    pub fn register_zeros(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        trainable: bool,
    ) -> Result<ParamId, TensorError> {
        let n: usize = shape.iter().product();
        self.register(name, shape, vec![0.0; n], trainable)
    }

    pub fn register_filled(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        fill: f64,
        trainable: bool,
    ) -> Result<ParamId, TensorError> {
        let n: usize = shape.iter().product();
        self.register(name, shape, vec![fill; n], trainable)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id_by_name(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn shape(&self, id: ParamId) -> &[usize] {
        &self.entries[id.0].shape
    }

    pub fn values(&self, id: ParamId) -> &[f64] {
        &self.entries[id.0].values
    }

    pub fn values_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.entries[id.0].values
    }

    pub fn grad(&self, id: ParamId) -> &[f64] {
        &self.entries[id.0].grad
    }

    /// Adds `delta` into the parameter's gradient buffer. Called by the
    /// graph when back-propagation reaches a leaf.
    pub fn accumulate_grad(&mut self, id: ParamId, delta: &[f64]) {
        let grad = &mut self.entries[id.0].grad;
        debug_assert_eq!(grad.len(), delta.len());
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += d;
        }
    }

    pub fn zero_grads(&mut self) {
        for entry in &mut self.entries {
            entry.grad.iter_mut().for_each(|g| *g = 0.0);
        }
        self.grads_ready = false;
    }

    pub(crate) fn mark_grads_ready(&mut self) {
        self.grads_ready = true;
    }

    pub fn grads_ready(&self) -> bool {
        self.grads_ready
    }

    /// Iterates entries in registration order (the checkpoint order).
    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.trainable)
            .map(|(i, _)| ParamId(i))
            .collect()
    }

    pub fn trainable_value_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.values.len())
            .sum()
    }

    /// Euclidean norm over every trainable parameter's gradient buffer,
    /// treating them as one flat vector.
    pub fn grad_norm(&self) -> f64 {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .flat_map(|e| e.grad.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Scales every trainable parameter's gradient in place (global-norm
    /// gradient clipping applies `max_norm / grad_norm()` here).
    pub fn scale_grads(&mut self, factor: f64) {
        for entry in &mut self.entries {
            if !entry.trainable {
                continue;
            }
            for g in &mut entry.grad {
                *g *= factor;
            }
        }
    }

    /// One SGD update over every trainable parameter:
    /// `v = momentum * v - lr * grad; p += v`. With `momentum == 0` this is
    /// the plain rule `p -= lr * grad`. Errors if no backward pass has
    /// populated gradients since the last `zero_grads`.
    pub fn sgd_step(&mut self, learning_rate: f64, momentum: f64) -> Result<(), TensorError> {
        if !self.grads_ready {
            return Err(TensorError::MissingGradients);
        }
        for entry in &mut self.entries {
            if !entry.trainable {
                continue;
            }
            if momentum == 0.0 {
                for (p, g) in entry.values.iter_mut().zip(&entry.grad) {
                    *p -= learning_rate * g;
                }
            } else {
                if entry.velocity.is_empty() {
                    entry.velocity = vec![0.0; entry.values.len()];
                }
                for ((p, g), v) in entry
                    .values
                    .iter_mut()
                    .zip(&entry.grad)
                    .zip(&mut entry.velocity)
                {
                    *v = momentum * *v - learning_rate * g;
                    *p += *v;
                }
            }
        }
        Ok(())
    }
}
