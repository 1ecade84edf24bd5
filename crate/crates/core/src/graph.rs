//! Reverse-mode automatic differentiation over a flat op tape.
//!
//! A [`Graph`] is built fresh for every forward pass (one per minibatch
//! during training). Each builder method validates shapes, computes the
//! result eagerly, and records the op plus whatever context its backward
//! rule needs (pooling argmaxes, dropout masks, normalization statistics).
//! Because nodes only ever reference earlier nodes, a single reverse sweep
//! over the tape is a valid topological order for back-propagation.
//!
//! Parameters enter the graph through [`Graph::param`], which memoizes one
//! leaf per parameter so gradients from every use site accumulate into the
//! same buffer in the [`ParamStore`].

use crate::params::{ParamId, ParamStore};
use crate::tensor::{Tensor, TensorError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;

/// Handle to a node in a [`Graph`]. Only valid for the graph that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Probability floor applied inside the cross-entropy op so that a
/// confidently wrong prediction yields a large finite loss instead of an
/// infinite one.
pub const CROSS_ENTROPY_EPS: f64 = 1e-12;

/// Padding policy for 1-d convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Zero-pad so the output has the same length as the input.
    Same,
    /// No padding; output length is `len - kernel + 1`.
    Valid,
}

/// Whether stochastic layers (dropout) and batch statistics are live.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

enum Op {
    Input,
    Param(ParamId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    EMax {
        a: NodeId,
        b: NodeId,
        take_a: Vec<bool>,
    },
    Scale {
        x: NodeId,
        factor: f64,
    },
    MatVec {
        w: NodeId,
        x: NodeId,
    },
    Relu(NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Sqr(NodeId),
    Softmax(NodeId),
    Pick {
        x: NodeId,
        index: usize,
    },
    CrossEntropy {
        probs: NodeId,
        target: usize,
    },
    SumAll(NodeId),
    Concat {
        parts: Vec<NodeId>,
    },
    ConcatRows {
        parts: Vec<NodeId>,
    },
    SliceRows {
        x: NodeId,
        start: usize,
    },
    Reshape(NodeId),
    Conv1d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        pad_left: usize,
    },
    MaxPool1d {
        x: NodeId,
        argmax: Vec<usize>,
    },
    BnTrain {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    BnInfer {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Dropout {
        x: NodeId,
        mask: Vec<f64>,
    },
}

struct Node {
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Vec<f64>,
    op: Op,
}

/// Op tape plus per-node values and gradients.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_leaves: HashMap<usize, NodeId>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn values(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].values
    }

    /// Value of a single-element node.
    pub fn scalar_value(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].values.len(), 1);
        self.nodes[id.0].values[0]
    }

    /// Gradient accumulated at a node by the most recent [`Graph::backward`].
    pub fn grad(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].grad
    }

    pub fn to_tensor(&self, id: NodeId) -> Tensor {
        Tensor::new(self.nodes[id.0].shape.clone(), self.nodes[id.0].values.clone())
            .expect("node shape and values always agree")
    }

    fn push(&mut self, shape: Vec<usize>, values: Vec<f64>, op: Op) -> NodeId {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        let n = values.len();
        self.nodes.push(Node {
            shape,
            values,
            grad: vec![0.0; n],
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Leaf node around caller-provided data. No gradient is propagated
    /// beyond it (inspect via [`Graph::grad`] if needed).
    pub fn input(&mut self, tensor: &Tensor) -> NodeId {
        self.push(tensor.shape().to_vec(), tensor.values().to_vec(), Op::Input)
    }

    pub fn input_slice(&mut self, shape: Vec<usize>, values: &[f64]) -> Result<NodeId, TensorError> {
        let expected: usize = shape.iter().product();
        if values.len() != expected {
            return Err(TensorError::LengthMismatch {
                shape,
                expected,
                got: values.len(),
            });
        }
        Ok(self.push(shape, values.to_vec(), Op::Input))
    }

    pub fn constant(&mut self, value: f64) -> NodeId {
        self.push(vec![1], vec![value], Op::Input)
    }

    /// Leaf for a stored parameter. Repeated calls for the same parameter
    /// return the same node, so every use shares one gradient buffer.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        if let Some(&node) = self.param_leaves.get(&id.0) {
            return node;
        }
        let node = self.push(
            store.shape(id).to_vec(),
            store.values(id).to_vec(),
            Op::Param(id),
        );
        self.param_leaves.insert(id.0, node);
        node
    }

    fn require_same_shape(
        &self,
        context: &str,
        a: NodeId,
        b: NodeId,
    ) -> Result<(), TensorError> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(TensorError::shape_mismatch(
                context,
                &self.nodes[a.0].shape,
                &self.nodes[b.0].shape,
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.require_same_shape("add", a, b)?;
        let values: Vec<f64> = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(x, y)| x + y)
            .collect();
        Ok(self.push(self.nodes[a.0].shape.clone(), values, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.require_same_shape("sub", a, b)?;
        let values: Vec<f64> = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(x, y)| x - y)
            .collect();
        Ok(self.push(self.nodes[a.0].shape.clone(), values, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.require_same_shape("mul", a, b)?;
        let values: Vec<f64> = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(x, y)| x * y)
            .collect();
        Ok(self.push(self.nodes[a.0].shape.clone(), values, Op::Mul(a, b)))
    }

    /// Elementwise maximum. Ties route the gradient to `a`.
    pub fn emax(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.require_same_shape("elementwise max", a, b)?;
        let mut take_a = Vec::with_capacity(self.nodes[a.0].values.len());
        let values: Vec<f64> = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(x, y)| {
                take_a.push(x >= y);
                x.max(*y)
            })
            .collect();
        Ok(self.push(
            self.nodes[a.0].shape.clone(),
            values,
            Op::EMax { a, b, take_a },
        ))
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        let values: Vec<f64> = self.nodes[x.0].values.iter().map(|v| v * factor).collect();
        self.push(self.nodes[x.0].shape.clone(), values, Op::Scale { x, factor })
    }

    /// `w` of shape `[m, n]` times vector `x` of shape `[n]`, yielding `[m]`.
    pub fn matvec(&mut self, w: NodeId, x: NodeId) -> Result<NodeId, TensorError> {
        let wshape = &self.nodes[w.0].shape;
        let xshape = &self.nodes[x.0].shape;
        if wshape.len() != 2 {
            return Err(TensorError::shape_mismatch("matvec weight", &[0, 0], wshape));
        }
        if xshape.len() != 1 || xshape[0] != wshape[1] {
            return Err(TensorError::shape_mismatch(
                "matvec input",
                &[wshape[1]],
                xshape,
            ));
        }
        let (m, n) = (wshape[0], wshape[1]);
        let wv = &self.nodes[w.0].values;
        let xv = &self.nodes[x.0].values;
        let mut out = vec![0.0; m];
        for i in 0..m {
            let row = &wv[i * n..(i + 1) * n];
            out[i] = row.iter().zip(xv).map(|(a, b)| a * b).sum();
        }
        Ok(self.push(vec![m], out, Op::MatVec { w, x }))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let values: Vec<f64> = self.nodes[x.0].values.iter().map(|v| v.max(0.0)).collect();
        self.push(self.nodes[x.0].shape.clone(), values, Op::Relu(x))
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let values: Vec<f64> = self.nodes[x.0].values.iter().map(|v| v.tanh()).collect();
        self.push(self.nodes[x.0].shape.clone(), values, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let values: Vec<f64> = self.nodes[x.0]
            .values
            .iter()
            .map(|v| 1.0 / (1.0 + (-v).exp()))
            .collect();
        self.push(self.nodes[x.0].shape.clone(), values, Op::Sigmoid(x))
    }

    pub fn sqr(&mut self, x: NodeId) -> NodeId {
        let values: Vec<f64> = self.nodes[x.0].values.iter().map(|v| v * v).collect();
        self.push(self.nodes[x.0].shape.clone(), values, Op::Sqr(x))
    }

    /// Numerically stable softmax over a vector.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let shape = &self.nodes[x.0].shape;
        if shape.len() != 1 || shape[0] == 0 {
            return Err(TensorError::shape_mismatch("softmax", &[1], shape));
        }
        let xv = &self.nodes[x.0].values;
        let max = xv.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = xv.iter().map(|v| (v - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        let values: Vec<f64> = exps.iter().map(|e| e / sum).collect();
        Ok(self.push(shape.clone(), values, Op::Softmax(x)))
    }

    /// Extracts one element of a vector as a scalar node.
    pub fn pick(&mut self, x: NodeId, index: usize) -> Result<NodeId, TensorError> {
        let shape = &self.nodes[x.0].shape;
        if shape.len() != 1 {
            return Err(TensorError::shape_mismatch("pick", &[1], shape));
        }
        if index >= shape[0] {
            return Err(TensorError::IndexOutOfRange {
                context: "pick".to_string(),
                index,
                len: shape[0],
            });
        }
        let v = self.nodes[x.0].values[index];
        Ok(self.push(vec![1], vec![v], Op::Pick { x, index }))
    }

    /// `-ln(max(p[target], eps))` over a probability vector.
    pub fn cross_entropy(&mut self, probs: NodeId, target: usize) -> Result<NodeId, TensorError> {
        let shape = &self.nodes[probs.0].shape;
        if shape.len() != 1 {
            return Err(TensorError::shape_mismatch("cross entropy", &[1], shape));
        }
        if target >= shape[0] {
            return Err(TensorError::IndexOutOfRange {
                context: "cross entropy target".to_string(),
                index: target,
                len: shape[0],
            });
        }
        // Clamp only genuine underflow; a NaN probability must surface as a
        // NaN loss so divergence checks can see it.
        let raw = self.nodes[probs.0].values[target];
        let p = if raw < CROSS_ENTROPY_EPS { CROSS_ENTROPY_EPS } else { raw };
        Ok(self.push(vec![1], vec![-p.ln()], Op::CrossEntropy { probs, target }))
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let total: f64 = self.nodes[x.0].values.iter().sum();
        self.push(vec![1], vec![total], Op::SumAll(x))
    }

    /// Concatenates one-dimensional nodes end to end.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::EmptySequence {
                context: "concat".to_string(),
            });
        }
        let mut values = Vec::new();
        for &p in parts {
            let shape = &self.nodes[p.0].shape;
            if shape.len() != 1 {
                return Err(TensorError::shape_mismatch("concat part", &[1], shape));
            }
            values.extend_from_slice(&self.nodes[p.0].values);
        }
        let len = values.len();
        Ok(self.push(
            vec![len],
            values,
            Op::Concat {
                parts: parts.to_vec(),
            },
        ))
    }

    /// Stacks matrices `[n_i, c]` (all with the same column count) into one
    /// `[sum n_i, c]` matrix. Used to pool samples before batch
    /// normalization so the statistics cover the whole minibatch.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::EmptySequence {
                context: "concat_rows".to_string(),
            });
        }
        let cols = {
            let first = &self.nodes[parts[0].0].shape;
            if first.len() != 2 {
                return Err(TensorError::shape_mismatch("concat_rows part", &[0, 0], first));
            }
            first[1]
        };
        let mut rows = 0;
        let mut values = Vec::new();
        for &p in parts {
            let shape = &self.nodes[p.0].shape;
            if shape.len() != 2 || shape[1] != cols {
                return Err(TensorError::shape_mismatch(
                    "concat_rows part",
                    &[shape.first().copied().unwrap_or(0), cols],
                    shape,
                ));
            }
            rows += shape[0];
            values.extend_from_slice(&self.nodes[p.0].values);
        }
        Ok(self.push(
            vec![rows, cols],
            values,
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
        ))
    }

    /// Takes rows `start .. start + rows` of a `[n, c]` node.
    pub fn slice_rows(
        &mut self,
        x: NodeId,
        start: usize,
        rows: usize,
    ) -> Result<NodeId, TensorError> {
        let shape = &self.nodes[x.0].shape;
        if shape.len() != 2 {
            return Err(TensorError::shape_mismatch("slice_rows", &[0, 0], shape));
        }
        let (n, c) = (shape[0], shape[1]);
        if start + rows > n {
            return Err(TensorError::IndexOutOfRange {
                context: "slice_rows".to_string(),
                index: start + rows,
                len: n,
            });
        }
        let values = self.nodes[x.0].values[start * c..(start + rows) * c].to_vec();
        Ok(self.push(vec![rows, c], values, Op::SliceRows { x, start }))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != self.nodes[x.0].values.len() {
            return Err(TensorError::shape_mismatch(
                "reshape",
                &shape,
                &self.nodes[x.0].shape,
            ));
        }
        let values = self.nodes[x.0].values.clone();
        Ok(self.push(shape, values, Op::Reshape(x)))
    }

    /// 1-d convolution. `x` is `[len, in_channels]`, `w` is
    /// `[filters, in_channels, kernel]`, `b` is `[filters]`; the output is
    /// `[out_len, filters]`.
    pub fn conv1d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        padding: Padding,
    ) -> Result<NodeId, TensorError> {
        let xshape = self.nodes[x.0].shape.clone();
        let wshape = self.nodes[w.0].shape.clone();
        if xshape.len() != 2 {
            return Err(TensorError::shape_mismatch("conv1d input", &[0, 0], &xshape));
        }
        if wshape.len() != 3 {
            return Err(TensorError::shape_mismatch(
                "conv1d weight",
                &[0, 0, 0],
                &wshape,
            ));
        }
        let (len, cin) = (xshape[0], xshape[1]);
        let (f, wcin, k) = (wshape[0], wshape[1], wshape[2]);
        if wcin != cin {
            return Err(TensorError::shape_mismatch(
                "conv1d weight channels vs input",
                &[f, cin, k],
                &wshape,
            ));
        }
        if self.nodes[b.0].shape != [f] {
            return Err(TensorError::shape_mismatch(
                "conv1d bias",
                &[f],
                &self.nodes[b.0].shape,
            ));
        }
        let (pad_left, out_len) = match padding {
            Padding::Same => ((k - 1) / 2, len),
            Padding::Valid => {
                if len < k {
                    return Err(TensorError::KernelTooWide { kernel: k, len });
                }
                (0, len - k + 1)
            }
        };
        let xv = &self.nodes[x.0].values;
        let wv = &self.nodes[w.0].values;
        let bv = &self.nodes[b.0].values;
        let mut out = vec![0.0; out_len * f];
        for t in 0..out_len {
            let base = t as isize - pad_left as isize;
            for fi in 0..f {
                let mut acc = bv[fi];
                let wbase = fi * cin * k;
                for dk in 0..k {
                    let ti = base + dk as isize;
                    if ti < 0 || ti >= len as isize {
                        continue;
                    }
                    let xrow = ti as usize * cin;
                    for ci in 0..cin {
                        acc += xv[xrow + ci] * wv[wbase + ci * k + dk];
                    }
                }
                out[t * f + fi] = acc;
            }
        }
        Ok(self.push(vec![out_len, f], out, Op::Conv1d { x, w, b, pad_left }))
    }

    /// Max pooling along the time axis of a `[len, c]` node. Trailing
    /// elements that do not fill a window are dropped.
    pub fn maxpool1d(
        &mut self,
        x: NodeId,
        window: usize,
        stride: usize,
    ) -> Result<NodeId, TensorError> {
        let shape = self.nodes[x.0].shape.clone();
        if shape.len() != 2 {
            return Err(TensorError::shape_mismatch("maxpool1d", &[0, 0], &shape));
        }
        let (len, c) = (shape[0], shape[1]);
        if window == 0 || stride == 0 || window > len {
            return Err(TensorError::PoolTooLarge {
                window,
                stride,
                len,
            });
        }
        let out_len = (len - window) / stride + 1;
        let xv = &self.nodes[x.0].values;
        let mut out = vec![0.0; out_len * c];
        let mut argmax = vec![0usize; out_len * c];
        for t in 0..out_len {
            let start = t * stride;
            for ci in 0..c {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = start * c + ci;
                for dt in 0..window {
                    let idx = (start + dt) * c + ci;
                    if xv[idx] > best {
                        best = xv[idx];
                        best_idx = idx;
                    }
                }
                out[t * c + ci] = best;
                argmax[t * c + ci] = best_idx;
            }
        }
        Ok(self.push(vec![out_len, c], out, Op::MaxPool1d { x, argmax }))
    }

    /// Batch normalization over the rows of `x` (`[n, c]`) using batch
    /// statistics with biased variance. Returns the normalized node plus the
    /// per-channel batch mean and variance so the caller can maintain
    /// running statistics.
    pub fn batchnorm_train(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<(NodeId, Vec<f64>, Vec<f64>), TensorError> {
        let shape = self.nodes[x.0].shape.clone();
        if shape.len() != 2 {
            return Err(TensorError::shape_mismatch("batchnorm input", &[0, 0], &shape));
        }
        let (n, c) = (shape[0], shape[1]);
        if n == 0 {
            return Err(TensorError::EmptyBatch);
        }
        self.check_bn_affine(c, gamma, beta)?;
        let xv = &self.nodes[x.0].values;
        let mut mean = vec![0.0; c];
        for row in 0..n {
            for ci in 0..c {
                mean[ci] += xv[row * c + ci];
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; c];
        for row in 0..n {
            for ci in 0..c {
                let d = xv[row * c + ci] - mean[ci];
                var[ci] += d * d;
            }
        }
        var.iter_mut().for_each(|v| *v /= n as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; n * c];
        let mut out = vec![0.0; n * c];
        let gv = &self.nodes[gamma.0].values;
        let bv = &self.nodes[beta.0].values;
        for row in 0..n {
            for ci in 0..c {
                let h = (xv[row * c + ci] - mean[ci]) * inv_std[ci];
                xhat[row * c + ci] = h;
                out[row * c + ci] = gv[ci] * h + bv[ci];
            }
        }
        let node = self.push(
            shape,
            out,
            Op::BnTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        );
        Ok((node, mean, var))
    }

    /// Batch normalization using fixed (running) statistics.
    pub fn batchnorm_infer(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<NodeId, TensorError> {
        let shape = self.nodes[x.0].shape.clone();
        if shape.len() != 2 {
            return Err(TensorError::shape_mismatch("batchnorm input", &[0, 0], &shape));
        }
        let (n, c) = (shape[0], shape[1]);
        if n == 0 {
            return Err(TensorError::EmptyBatch);
        }
        self.check_bn_affine(c, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(TensorError::shape_mismatch(
                "batchnorm running statistics",
                &[c],
                &[running_mean.len()],
            ));
        }
        let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let xv = &self.nodes[x.0].values;
        let gv = &self.nodes[gamma.0].values;
        let bv = &self.nodes[beta.0].values;
        let mut xhat = vec![0.0; n * c];
        let mut out = vec![0.0; n * c];
        for row in 0..n {
            for ci in 0..c {
                let h = (xv[row * c + ci] - running_mean[ci]) * inv_std[ci];
                xhat[row * c + ci] = h;
                out[row * c + ci] = gv[ci] * h + bv[ci];
            }
        }
        Ok(self.push(
            shape,
            out,
            Op::BnInfer {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    fn check_bn_affine(&self, c: usize, gamma: NodeId, beta: NodeId) -> Result<(), TensorError> {
        for (name, id) in [("batchnorm gamma", gamma), ("batchnorm beta", beta)] {
            if self.nodes[id.0].shape != [c] {
                return Err(TensorError::shape_mismatch(
                    name,
                    &[c],
                    &self.nodes[id.0].shape,
                ));
            }
        }
        Ok(())
    }

    /// Inverted dropout: in train mode each element is kept with probability
    /// `1 - rate` and scaled by `1 / (1 - rate)`, so the expected value is
    /// unchanged and inference needs no rescaling. The mask is a pure
    /// function of `seed`. Infer mode (or a zero rate) is the identity.
    pub fn dropout(
        &mut self,
        x: NodeId,
        rate: f64,
        mode: Mode,
        seed: u64,
    ) -> Result<NodeId, TensorError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::InvalidDropoutRate { rate });
        }
        if mode == Mode::Infer || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - rate;
        let scale = 1.0 / keep;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = self.nodes[x.0].values.len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.gen::<f64>() < keep { scale } else { 0.0 })
            .collect();
        let values: Vec<f64> = self.nodes[x.0]
            .values
            .iter()
            .zip(&mask)
            .map(|(v, m)| v * m)
            .collect();
        Ok(self.push(self.nodes[x.0].shape.clone(), values, Op::Dropout { x, mask }))
    }

    /// Back-propagates from a scalar loss node, accumulating parameter
    /// gradients into `store`. Call once per graph.
    pub fn backward(&mut self, loss: NodeId, store: &mut ParamStore) -> Result<(), TensorError> {
        if self.nodes[loss.0].values.len() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: self.nodes[loss.0].shape.clone(),
            });
        }
        self.nodes[loss.0].grad[0] = 1.0;
        for i in (0..=loss.0).rev() {
            let grad = std::mem::take(&mut self.nodes[i].grad);
            if grad.iter().all(|g| *g == 0.0) {
                self.nodes[i].grad = grad;
                continue;
            }
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Input);
            self.propagate(&op, &grad, store);
            self.nodes[i].op = op;
            self.nodes[i].grad = grad;
        }
        store.mark_grads_ready();
        Ok(())
    }

    fn propagate(&mut self, op: &Op, grad: &[f64], store: &mut ParamStore) {
        match op {
            Op::Input => {}
            Op::Param(pid) => store.accumulate_grad(*pid, grad),
            Op::Add(a, b) => {
                for (g, d) in self.nodes[a.0].grad.iter_mut().zip(grad) {
                    *g += d;
                }
                for (g, d) in self.nodes[b.0].grad.iter_mut().zip(grad) {
                    *g += d;
                }
            }
            Op::Sub(a, b) => {
                for (g, d) in self.nodes[a.0].grad.iter_mut().zip(grad) {
                    *g += d;
                }
                for (g, d) in self.nodes[b.0].grad.iter_mut().zip(grad) {
                    *g -= d;
                }
            }
            Op::Mul(a, b) => {
                // Gradient of a*b: da += g*b, db += g*a.
                let av = self.nodes[a.0].values.clone();
                let bv = self.nodes[b.0].values.clone();
                for ((g, d), b_val) in self.nodes[a.0].grad.iter_mut().zip(grad).zip(&bv) {
                    *g += d * b_val;
                }
                for ((g, d), a_val) in self.nodes[b.0].grad.iter_mut().zip(grad).zip(&av) {
                    *g += d * a_val;
                }
            }
            Op::EMax { a, b, take_a } => {
                for (i, (&d, &ta)) in grad.iter().zip(take_a).enumerate() {
                    if ta {
                        self.nodes[a.0].grad[i] += d;
                    } else {
                        self.nodes[b.0].grad[i] += d;
                    }
                }
            }
            Op::Scale { x, factor } => {
                for (g, d) in self.nodes[x.0].grad.iter_mut().zip(grad) {
                    *g += factor * d;
                }
            }
            Op::MatVec { w, x } => {
                let n = self.nodes[x.0].shape[0];
                let m = self.nodes[w.0].shape[0];
                let xv = self.nodes[x.0].values.clone();
                {
                    let wg = &mut self.nodes[w.0].grad;
                    for i in 0..m {
                        let gi = grad[i];
                        if gi == 0.0 {
                            continue;
                        }
                        let row = i * n;
                        for j in 0..n {
                            wg[row + j] += gi * xv[j];
                        }
                    }
                }
                let mut gx = vec![0.0; n];
                {
                    let wv = &self.nodes[w.0].values;
                    for i in 0..m {
                        let gi = grad[i];
                        if gi == 0.0 {
                            continue;
                        }
                        let row = i * n;
                        for j in 0..n {
                            gx[j] += gi * wv[row + j];
                        }
                    }
                }
                for (g, d) in self.nodes[x.0].grad.iter_mut().zip(&gx) {
                    *g += d;
                }
            }
            Op::Relu(x) => {
                let xv = self.nodes[x.0].values.clone();
                for ((g, d), v) in self.nodes[x.0].grad.iter_mut().zip(grad).zip(&xv) {
                    if *v > 0.0 {
                        *g += d;
                    }
                }
            }
            Op::Tanh(x) => {
                let xv = self.nodes[x.0].values.clone();
                for ((g, d), v) in self.nodes[x.0].grad.iter_mut().zip(grad).zip(&xv) {
                    let y = v.tanh();
                    *g += d * (1.0 - y * y);
                }
            }
            Op::Sigmoid(x) => {
                let xv = self.nodes[x.0].values.clone();
                for ((g, d), v) in self.nodes[x.0].grad.iter_mut().zip(grad).zip(&xv) {
                    let y = 1.0 / (1.0 + (-v).exp());
                    *g += d * y * (1.0 - y);
                }
            }
            Op::Sqr(x) => {
                let xv = self.nodes[x.0].values.clone();
                for ((g, d), v) in self.nodes[x.0].grad.iter_mut().zip(grad).zip(&xv) {
                    *g += d * 2.0 * v;
                }
            }
            Op::Softmax(x) => {
                // dx_i = y_i * (g_i - sum_j g_j y_j)
                let y: Vec<f64> = {
                    let xv = &self.nodes[x.0].values;
                    let max = xv.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let exps: Vec<f64> = xv.iter().map(|v| (v - max).exp()).collect();
                    let sum: f64 = exps.iter().sum();
                    exps.iter().map(|e| e / sum).collect()
                };
                let dot: f64 = grad.iter().zip(&y).map(|(g, yi)| g * yi).sum();
                for ((g, d), yi) in self.nodes[x.0].grad.iter_mut().zip(grad).zip(&y) {
                    *g += yi * (d - dot);
                }
            }
            Op::Pick { x, index } => {
                self.nodes[x.0].grad[*index] += grad[0];
            }
            Op::CrossEntropy { probs, target } => {
                let p = self.nodes[probs.0].values[*target];
                // Inside the clamp region the loss is constant in p.
                if p > CROSS_ENTROPY_EPS {
                    self.nodes[probs.0].grad[*target] -= grad[0] / p;
                }
            }
            Op::SumAll(x) => {
                let d = grad[0];
                for g in self.nodes[x.0].grad.iter_mut() {
                    *g += d;
                }
            }
            Op::Concat { parts } | Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.nodes[p.0].values.len();
                    for (g, d) in self.nodes[p.0]
                        .grad
                        .iter_mut()
                        .zip(&grad[offset..offset + n])
                    {
                        *g += d;
                    }
                    offset += n;
                }
            }
            Op::SliceRows { x, start } => {
                let c = self.nodes[x.0].shape[1];
                let offset = start * c;
                for (i, d) in grad.iter().enumerate() {
                    self.nodes[x.0].grad[offset + i] += d;
                }
            }
            Op::Reshape(x) => {
                for (g, d) in self.nodes[x.0].grad.iter_mut().zip(grad) {
                    *g += d;
                }
            }
            Op::Conv1d { x, w, b, pad_left } => {
                let xshape = self.nodes[x.0].shape.clone();
                let wshape = self.nodes[w.0].shape.clone();
                let (len, cin) = (xshape[0], xshape[1]);
                let (f, k) = (wshape[0], wshape[2]);
                let out_len = grad.len() / f;
                let xv = self.nodes[x.0].values.clone();
                let wv = self.nodes[w.0].values.clone();
                {
                    let bg = &mut self.nodes[b.0].grad;
                    for t in 0..out_len {
                        for fi in 0..f {
                            bg[fi] += grad[t * f + fi];
                        }
                    }
                }
                {
                    let wg = &mut self.nodes[w.0].grad;
                    for t in 0..out_len {
                        let base = t as isize - *pad_left as isize;
                        for fi in 0..f {
                            let gout = grad[t * f + fi];
                            if gout == 0.0 {
                                continue;
                            }
                            let wbase = fi * cin * k;
                            for dk in 0..k {
                                let ti = base + dk as isize;
                                if ti < 0 || ti >= len as isize {
                                    continue;
                                }
                                let xrow = ti as usize * cin;
                                for ci in 0..cin {
                                    wg[wbase + ci * k + dk] += gout * xv[xrow + ci];
                                }
                            }
                        }
                    }
                }
                {
                    let xg = &mut self.nodes[x.0].grad;
                    for t in 0..out_len {
                        let base = t as isize - *pad_left as isize;
                        for fi in 0..f {
                            let gout = grad[t * f + fi];
                            if gout == 0.0 {
                                continue;
                            }
                            let wbase = fi * cin * k;
                            for dk in 0..k {
                                let ti = base + dk as isize;
                                if ti < 0 || ti >= len as isize {
                                    continue;
                                }
                                let xrow = ti as usize * cin;
                                for ci in 0..cin {
                                    xg[xrow + ci] += gout * wv[wbase + ci * k + dk];
                                }
                            }
                        }
                    }
                }
            }
            Op::MaxPool1d { x, argmax } => {
                for (o, &src) in argmax.iter().enumerate() {
                    self.nodes[x.0].grad[src] += grad[o];
                }
            }
            Op::BnTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let c = inv_std.len();
                let n = xhat.len() / c;
                let gv = self.nodes[gamma.0].values.clone();
                let mut sum_dxhat = vec![0.0; c];
                let mut sum_dxhat_xhat = vec![0.0; c];
                for row in 0..n {
                    for ci in 0..c {
                        let idx = row * c + ci;
                        let dxhat = grad[idx] * gv[ci];
                        sum_dxhat[ci] += dxhat;
                        sum_dxhat_xhat[ci] += dxhat * xhat[idx];
                    }
                }
                {
                    let gg = &mut self.nodes[gamma.0].grad;
                    for row in 0..n {
                        for ci in 0..c {
                            let idx = row * c + ci;
                            gg[ci] += grad[idx] * xhat[idx];
                        }
                    }
                }
                {
                    let bg = &mut self.nodes[beta.0].grad;
                    for row in 0..n {
                        for ci in 0..c {
                            bg[ci] += grad[row * c + ci];
                        }
                    }
                }
                let nf = n as f64;
                let xg = &mut self.nodes[x.0].grad;
                for row in 0..n {
                    for ci in 0..c {
                        let idx = row * c + ci;
                        let dxhat = grad[idx] * gv[ci];
                        xg[idx] += inv_std[ci] / nf
                            * (nf * dxhat - sum_dxhat[ci] - xhat[idx] * sum_dxhat_xhat[ci]);
                    }
                }
            }
            Op::BnInfer {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let c = inv_std.len();
                let n = xhat.len() / c;
                let gv = self.nodes[gamma.0].values.clone();
                {
                    let gg = &mut self.nodes[gamma.0].grad;
                    for row in 0..n {
                        for ci in 0..c {
                            let idx = row * c + ci;
                            gg[ci] += grad[idx] * xhat[idx];
                        }
                    }
                }
                {
                    let bg = &mut self.nodes[beta.0].grad;
                    for row in 0..n {
                        for ci in 0..c {
                            bg[ci] += grad[row * c + ci];
                        }
                    }
                }
                let xg = &mut self.nodes[x.0].grad;
                for row in 0..n {
                    for ci in 0..c {
                        let idx = row * c + ci;
                        xg[idx] += grad[idx] * gv[ci] * inv_std[ci];
                    }
                }
            }
            Op::Dropout { x, mask } => {
                for ((g, d), m) in self.nodes[x.0].grad.iter_mut().zip(grad).zip(mask) {
                    *g += d * m;
                }
            }
        }
    }
}
