//! Neural layers assembled from graph ops.
//!
//! A layer struct owns only [`ParamId`] handles; the actual buffers live in
//! the shared [`ParamStore`]. Forward methods append nodes to a caller-owned
//! [`Graph`], so one graph can hold a whole minibatch and batch
//! normalization can see statistics across samples.

use crate::graph::{Graph, Mode, NodeId, Padding};
use crate::params::{ParamId, ParamStore};
use crate::tensor::TensorError;
use rand::Rng;

/// Variance floor inside batch normalization.
pub const BN_EPS: f64 = 1e-5;
/// Weight of the previous running statistic in the exponential moving
/// average: `running = BN_MOMENTUM * running + (1 - BN_MOMENTUM) * batch`.
pub const BN_MOMENTUM: f64 = 0.9;
/// Initial forget-gate bias; starting open keeps early gradients flowing
/// through long sequences.
pub const LSTM_FORGET_BIAS: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
    Identity,
}

impl Activation {
    fn apply(self, g: &mut Graph, x: NodeId) -> NodeId {
        match self {
            Activation::Relu => g.relu(x),
            Activation::Tanh => g.tanh(x),
            Activation::Sigmoid => g.sigmoid(x),
            Activation::Identity => x,
        }
    }
}

/// Fully connected layer: `activation(W x + b)`.
#[derive(Debug, Clone)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
    pub activation: Activation,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Dense {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
    ) -> Result<Self, TensorError> {
        let w = store.register_glorot(
            format!("{name}.w"),
            vec![out_dim, in_dim],
            in_dim,
            out_dim,
            rng,
        )?;
        let b = store.register_zeros(format!("{name}.b"), vec![out_dim], true)?;
        Ok(Dense {
            w,
            b,
            activation,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: NodeId,
    ) -> Result<NodeId, TensorError> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let z = g.matvec(w, x)?;
        let z = g.add(z, b)?;
        Ok(self.activation.apply(g, z))
    }
}

/// 1-d convolution layer over `[len, in_channels]` inputs.
#[derive(Debug, Clone)]
pub struct Conv1dLayer {
    pub w: ParamId,
    pub b: ParamId,
    pub padding: Padding,
    pub in_channels: usize,
    pub filters: usize,
    pub kernel: usize,
}

impl Conv1dLayer {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        in_channels: usize,
        filters: usize,
        kernel: usize,
        padding: Padding,
    ) -> Result<Self, TensorError> {
        let w = store.register_glorot(
            format!("{name}.w"),
            vec![filters, in_channels, kernel],
            in_channels * kernel,
            filters * kernel,
            rng,
        )?;
        let b = store.register_zeros(format!("{name}.b"), vec![filters], true)?;
        Ok(Conv1dLayer {
            w,
            b,
            padding,
            in_channels,
            filters,
            kernel,
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: NodeId,
    ) -> Result<NodeId, TensorError> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.conv1d(x, w, b, self.padding)
    }
}

/// Batch normalization over the rows of a `[n, channels]` node.
///
/// Training uses the statistics of the rows actually present and folds them
/// into running estimates; inference uses the running estimates only. The
/// running buffers are registered as non-trainable parameters so they travel
/// with checkpoints.
#[derive(Debug, Clone)]
pub struct BatchNorm1d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
}

impl BatchNorm1d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
    ) -> Result<Self, TensorError> {
        let gamma = store.register_filled(format!("{name}.gamma"), vec![channels], 1.0, true)?;
        let beta = store.register_zeros(format!("{name}.beta"), vec![channels], true)?;
        let running_mean =
            store.register_zeros(format!("{name}.running_mean"), vec![channels], false)?;
        let running_var =
            store.register_filled(format!("{name}.running_var"), vec![channels], 1.0, false)?;
        Ok(BatchNorm1d {
            gamma,
            beta,
            running_mean,
            running_var,
            channels,
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &mut ParamStore,
        x: NodeId,
        mode: Mode,
    ) -> Result<NodeId, TensorError> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        match mode {
            Mode::Train => {
                let (node, mean, var) = g.batchnorm_train(x, gamma, beta, BN_EPS)?;
                for (rm, m) in store
                    .values_mut(self.running_mean)
                    .iter_mut()
                    .zip(&mean)
                {
                    *rm = BN_MOMENTUM * *rm + (1.0 - BN_MOMENTUM) * m;
                }
                for (rv, v) in store.values_mut(self.running_var).iter_mut().zip(&var) {
                    *rv = BN_MOMENTUM * *rv + (1.0 - BN_MOMENTUM) * v;
                }
                Ok(node)
            }
            Mode::Infer => {
                let mean = store.values(self.running_mean).to_vec();
                let var = store.values(self.running_var).to_vec();
                g.batchnorm_infer(x, gamma, beta, &mean, &var, BN_EPS)
            }
        }
    }
}

/// One direction of a recurrent layer with input, forget, cell, and output
/// gates. Each gate has its own `[hidden, input + hidden]` weight block
/// applied to the concatenation `[x_t, h_{t-1}]`, plus a `[hidden]` bias.
#[derive(Debug, Clone)]
pub struct Lstm {
    pub w_input: ParamId,
    pub w_forget: ParamId,
    pub w_cell: ParamId,
    pub w_output: ParamId,
    pub b_input: ParamId,
    pub b_forget: ParamId,
    pub b_cell: ParamId,
    pub b_output: ParamId,
    pub input_dim: usize,
    pub hidden: usize,
}

impl Lstm {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        input_dim: usize,
        hidden: usize,
    ) -> Result<Self, TensorError> {
        let cols = input_dim + hidden;
        let gate_w = |store: &mut ParamStore, rng: &mut dyn rand::RngCore, gate: &str| {
            store.register_glorot(
                format!("{name}.w_{gate}"),
                vec![hidden, cols],
                cols,
                hidden,
                rng,
            )
        };
        let w_input = gate_w(store, rng, "input")?;
        let w_forget = gate_w(store, rng, "forget")?;
        let w_cell = gate_w(store, rng, "cell")?;
        let w_output = gate_w(store, rng, "output")?;
        let b_input = store.register_zeros(format!("{name}.b_input"), vec![hidden], true)?;
        let b_forget = store.register_filled(
            format!("{name}.b_forget"),
            vec![hidden],
            LSTM_FORGET_BIAS,
            true,
        )?;
        let b_cell = store.register_zeros(format!("{name}.b_cell"), vec![hidden], true)?;
        let b_output = store.register_zeros(format!("{name}.b_output"), vec![hidden], true)?;
        Ok(Lstm {
            w_input,
            w_forget,
            w_cell,
            w_output,
            b_input,
            b_forget,
            b_cell,
            b_output,
            input_dim,
            hidden,
        })
    }

    /// Runs the recurrence over `steps` (each a `[input_dim]` node) and
    /// returns the hidden state after every step.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        steps: &[NodeId],
    ) -> Result<Vec<NodeId>, TensorError> {
        if steps.is_empty() {
            return Err(TensorError::EmptySequence {
                context: "lstm input".to_string(),
            });
        }
        let w_i = g.param(store, self.w_input);
        let w_f = g.param(store, self.w_forget);
        let w_g = g.param(store, self.w_cell);
        let w_o = g.param(store, self.w_output);
        let b_i = g.param(store, self.b_input);
        let b_f = g.param(store, self.b_forget);
        let b_g = g.param(store, self.b_cell);
        let b_o = g.param(store, self.b_output);
        let zeros = vec![0.0; self.hidden];
        let mut h = g.input_slice(vec![self.hidden], &zeros)?;
        let mut c = g.input_slice(vec![self.hidden], &zeros)?;
        let mut states = Vec::with_capacity(steps.len());
        for &x in steps {
            let shape = g.shape(x).to_vec();
            if shape != [self.input_dim] {
                return Err(TensorError::shape_mismatch(
                    "lstm step input",
                    &[self.input_dim],
                    &shape,
                ));
            }
            let joint = g.concat(&[x, h])?;
            let gate = |g: &mut Graph, w: NodeId, b: NodeId| -> Result<NodeId, TensorError> {
                let z = g.matvec(w, joint)?;
                g.add(z, b)
            };
            let i_pre = gate(g, w_i, b_i)?;
            let i = g.sigmoid(i_pre);
            let f_pre = gate(g, w_f, b_f)?;
            let f = g.sigmoid(f_pre);
            let g_pre = gate(g, w_g, b_g)?;
            let cell_in = g.tanh(g_pre);
            let o_pre = gate(g, w_o, b_o)?;
            let o = g.sigmoid(o_pre);
            let keep = g.mul(f, c)?;
            let write = g.mul(i, cell_in)?;
            c = g.add(keep, write)?;
            let c_act = g.tanh(c);
            h = g.mul(o, c_act)?;
            states.push(h);
        }
        Ok(states)
    }
}

/// Forward and backward recurrences whose per-step states are concatenated,
/// then reduced with an elementwise max over time.
#[derive(Debug, Clone)]
pub struct BiLstm {
    pub forward_dir: Lstm,
    pub backward_dir: Lstm,
    pub hidden: usize,
}

impl BiLstm {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        input_dim: usize,
        hidden: usize,
    ) -> Result<Self, TensorError> {
        let forward_dir = Lstm::new(store, rng, &format!("{name}.fwd"), input_dim, hidden)?;
        let backward_dir = Lstm::new(store, rng, &format!("{name}.bwd"), input_dim, hidden)?;
        Ok(BiLstm {
            forward_dir,
            backward_dir,
            hidden,
        })
    }

    /// Per-step `[2 * hidden]` states in input time order: the forward state
    /// for step `t` followed by the backward state for the same step.
    pub fn forward_states(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        steps: &[NodeId],
    ) -> Result<Vec<NodeId>, TensorError> {
        let fwd = self.forward_dir.forward(g, store, steps)?;
        let reversed: Vec<NodeId> = steps.iter().rev().copied().collect();
        let bwd = self.backward_dir.forward(g, store, &reversed)?;
        let t_max = steps.len();
        let mut out = Vec::with_capacity(t_max);
        for t in 0..t_max {
            out.push(g.concat(&[fwd[t], bwd[t_max - 1 - t]])?);
        }
        Ok(out)
    }

    /// Elementwise max over the per-step states: one `[2 * hidden]` vector.
    pub fn forward_maxpool(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        steps: &[NodeId],
    ) -> Result<NodeId, TensorError> {
        let states = self.forward_states(g, store, steps)?;
        let mut acc = states[0];
        for &s in &states[1..] {
            acc = g.emax(acc, s)?;
        }
        Ok(acc)
    }
}

/// Stacks `[d]` vectors into a `[n, d]` matrix (for cross-sample batch
/// normalization).
pub fn stack_vectors(g: &mut Graph, parts: &[NodeId]) -> Result<NodeId, TensorError> {
    let mut rows = Vec::with_capacity(parts.len());
    for &p in parts {
        let d = g.shape(p).to_vec();
        if d.len() != 1 {
            return Err(TensorError::shape_mismatch("stack_vectors part", &[1], &d));
        }
        rows.push(g.reshape(p, vec![1, d[0]])?);
    }
    g.concat_rows(&rows)
}

/// Extracts row `row` of a `[n, d]` node as a `[d]` vector.
pub fn unstack_row(g: &mut Graph, stacked: NodeId, row: usize) -> Result<NodeId, TensorError> {
    let d = g.shape(stacked)[1];
    let slice = g.slice_rows(stacked, row, 1)?;
    g.reshape(slice, vec![d])
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(1234)
    }

    #[test]
    fn dense_applies_affine_then_activation() {
        let mut store = ParamStore::new();
        let mut r = rng();
        let layer = Dense::new(&mut store, &mut r, "d", 2, 2, Activation::Relu).unwrap();
        store.values_mut(layer.w).copy_from_slice(&[1.0, 0.0, 0.0, -1.0]);
        store.values_mut(layer.b).copy_from_slice(&[0.5, 0.5]);
        let mut g = Graph::new();
        let x = g.input_slice(vec![2], &[2.0, 3.0]).unwrap();
        let y = layer.forward(&mut g, &store, x).unwrap();
        // Pre-activation: [2.5, -2.5]; relu keeps only the first.
        assert_eq!(g.values(y), &[2.5, 0.0]);
    }

    #[test]
    fn lstm_with_zero_weights_emits_zero_states() {
        let mut store = ParamStore::new();
        let mut r = rng();
        let lstm = Lstm::new(&mut store, &mut r, "l", 3, 4).unwrap();
        for id in [
            lstm.w_input,
            lstm.w_forget,
            lstm.w_cell,
            lstm.w_output,
            lstm.b_input,
            lstm.b_forget,
            lstm.b_cell,
            lstm.b_output,
        ] {
            store.values_mut(id).iter_mut().for_each(|v| *v = 0.0);
        }
        let mut g = Graph::new();
        let steps: Vec<_> = (0..5)
            .map(|i| {
                g.input_slice(vec![3], &[i as f64, 1.0, -1.0]).unwrap()
            })
            .collect();
        let states = lstm.forward(&mut g, &store, &steps).unwrap();
        assert_eq!(states.len(), 5);
        for s in states {
            // Cell input is tanh(0) = 0, so the cell and hidden state stay 0.
            assert!(g.values(s).iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn lstm_rejects_empty_sequence() {
        let mut store = ParamStore::new();
        let mut r = rng();
        let lstm = Lstm::new(&mut store, &mut r, "l", 3, 4).unwrap();
        let mut g = Graph::new();
        assert!(matches!(
            lstm.forward(&mut g, &store, &[]),
            Err(TensorError::EmptySequence { .. })
        ));
    }

    #[test]
    fn lstm_forget_bias_is_one() {
        let mut store = ParamStore::new();
        let mut r = rng();
        let lstm = Lstm::new(&mut store, &mut r, "l", 3, 4).unwrap();
        assert!(store
            .values(lstm.b_forget)
            .iter()
            .all(|v| (*v - LSTM_FORGET_BIAS).abs() < 1e-15));
        assert!(store.values(lstm.b_input).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn bilstm_palindrome_with_tied_weights_mirrors_halves() {
        let mut store = ParamStore::new();
        let mut r = rng();
        let bi = BiLstm::new(&mut store, &mut r, "bi", 2, 3).unwrap();
        // Tie the backward direction to the forward one.
        let pairs = [
            (bi.forward_dir.w_input, bi.backward_dir.w_input),
            (bi.forward_dir.w_forget, bi.backward_dir.w_forget),
            (bi.forward_dir.w_cell, bi.backward_dir.w_cell),
            (bi.forward_dir.w_output, bi.backward_dir.w_output),
            (bi.forward_dir.b_input, bi.backward_dir.b_input),
            (bi.forward_dir.b_forget, bi.backward_dir.b_forget),
            (bi.forward_dir.b_cell, bi.backward_dir.b_cell),
            (bi.forward_dir.b_output, bi.backward_dir.b_output),
        ];
        for (src, dst) in pairs {
            let vals = store.values(src).to_vec();
            store.values_mut(dst).copy_from_slice(&vals);
        }
        let seq = [
            [0.5, -0.3],
            [1.0, 0.2],
            [-0.7, 0.9],
            [1.0, 0.2],
            [0.5, -0.3],
        ];
        let mut g = Graph::new();
        let steps: Vec<_> = seq
            .iter()
            .map(|s| g.input_slice(vec![2], s).unwrap())
            .collect();
        let states = bi.forward_states(&mut g, &store, &steps).unwrap();
        let t_max = states.len();
        for t in 0..t_max {
            let here = g.values(states[t]).to_vec();
            let mirror = g.values(states[t_max - 1 - t]).to_vec();
            // Forward half at t equals backward half at the mirrored step.
            for i in 0..3 {
                assert_relative_eq!(here[i], mirror[3 + i], max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn bilstm_pooled_output_dim_is_twice_hidden() {
        let mut store = ParamStore::new();
        let mut r = rng();
        let bi = BiLstm::new(&mut store, &mut r, "bi", 4, 6).unwrap();
        let mut g = Graph::new();
        let steps: Vec<_> = (0..3)
            .map(|i| {
                let v: Vec<f64> = (0..4).map(|j| (i * 4 + j) as f64 * 0.1).collect();
                g.input_slice(vec![4], &v).unwrap()
            })
            .collect();
        let pooled = bi.forward_maxpool(&mut g, &store, &steps).unwrap();
        assert_eq!(g.shape(pooled), &[12]);
    }

    #[test]
    fn bilstm_maxpool_dominates_each_state() {
        let mut store = ParamStore::new();
        let mut r = rng();
        let bi = BiLstm::new(&mut store, &mut r, "bi", 2, 3).unwrap();
        let mut g = Graph::new();
        let steps: Vec<_> = (0..4)
            .map(|i| {
                g.input_slice(vec![2], &[(i as f64).sin(), (i as f64).cos()])
                    .unwrap()
            })
            .collect();
        let states = bi.forward_states(&mut g, &store, &steps).unwrap();
        let pooled = bi.forward_maxpool(&mut g, &store, &steps).unwrap();
        let pv = g.values(pooled).to_vec();
        for s in states {
            for (p, v) in pv.iter().zip(g.values(s)) {
                assert!(p >= v);
            }
        }
    }

    #[test]
    fn batchnorm_updates_running_statistics_in_train_mode() {
        let mut store = ParamStore::new();
        let bn = BatchNorm1d::new(&mut store, "bn", 1).unwrap();
        let mut g = Graph::new();
        let x = g.input_slice(vec![4, 1], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        bn.forward(&mut g, &mut store, x, Mode::Train).unwrap();
        // Batch mean 2.5, biased variance 1.25, folded in at 1 - 0.9 = 0.1.
        assert_relative_eq!(store.values(bn.running_mean)[0], 0.25, max_relative = 1e-12);
        assert_relative_eq!(
            store.values(bn.running_var)[0],
            0.9 + 0.1 * 1.25,
            max_relative = 1e-12
        );
    }

    #[test]
    fn batchnorm_infer_uses_running_statistics_only() {
        let mut store = ParamStore::new();
        let bn = BatchNorm1d::new(&mut store, "bn", 1).unwrap();
        store.values_mut(bn.running_mean)[0] = 2.0;
        store.values_mut(bn.running_var)[0] = 4.0;
        let mut g = Graph::new();
        let x = g.input_slice(vec![1, 1], &[4.0]).unwrap();
        let y = bn.forward(&mut g, &mut store, x, Mode::Infer).unwrap();
        // (4 - 2) / sqrt(4 + eps) with gamma 1, beta 0.
        assert_relative_eq!(g.values(y)[0], 1.0, max_relative = 1e-4);
        // Running stats untouched by inference.
        assert_eq!(store.values(bn.running_mean)[0], 2.0);
    }

    #[test]
    fn stack_then_unstack_round_trips() {
        let mut g = Graph::new();
        let a = g.input_slice(vec![3], &[1.0, 2.0, 3.0]).unwrap();
        let b = g.input_slice(vec![3], &[4.0, 5.0, 6.0]).unwrap();
        let stacked = stack_vectors(&mut g, &[a, b]).unwrap();
        assert_eq!(g.shape(stacked), &[2, 3]);
        let back = unstack_row(&mut g, stacked, 1).unwrap();
        assert_eq!(g.values(back), &[4.0, 5.0, 6.0]);
    }
}
