//! The three modality encoders and their input types.
//!
//! Each student contributes three views:
//!
//! * a 120-wide one-hot profile vector (static view),
//! * a per-semester sequence of 20 performance measurements (temporal view),
//! * zero or more embedded counseling notes (text view).
//!
//! The encoders map these to fixed-width vectors of 50, 40, and twice the
//! note hidden width respectively. Batch normalization layers normalize
//! across the whole minibatch: encoder forward methods take every sample in
//! the batch at once, stitch the per-sample activations into one matrix at
//! each normalization point, and slice them back apart afterwards. This
//! keeps the statistics meaningful even though samples have ragged sequence
//! lengths.

use crate::graph::{Graph, Mode, NodeId, Padding};
use crate::layers::{
    stack_vectors, unstack_row, Activation, BatchNorm1d, BiLstm, Conv1dLayer, Dense,
};
use crate::params::{ParamId, ParamStore};
use crate::tensor::TensorError;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Width of the one-hot profile vector.
pub const STATIC_INPUT_LEN: usize = 120;
/// Number of performance variables recorded per semester.
pub const PERF_WIDTH: usize = 20;
/// Output width of the static encoder.
pub const STATIC_OUT_DIM: usize = 50;
/// Output width of the temporal encoder.
pub const TEMPORAL_OUT_DIM: usize = 40;
/// Hidden sizes of the two stacked recurrent layers in the temporal encoder.
pub const TEMPORAL_LSTM1_HIDDEN: usize = 75;
pub const TEMPORAL_LSTM2_HIDDEN: usize = 55;
/// Intermediate dense width between the recurrent stack and the output.
pub const TEMPORAL_DENSE_DIM: usize = 50;
/// The static encoder's convolution stack: (filters, kernel width) per stage.
pub const STATIC_CONV_STACK: [(usize, usize); 3] = [(8, 11), (16, 5), (32, 3)];
/// Default hidden width of the note encoder (its output is twice this).
pub const DEFAULT_NOTE_HIDDEN: usize = 32;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("static input has {got} entries, expected {STATIC_INPUT_LEN}")]
    StaticLength { got: usize },
    #[error("static input entry {index} is {value}, expected 0 or 1")]
    StaticNotBinary { index: usize, value: f64 },
    #[error("performance sequence is empty")]
    EmptyPerformance,
    #[error("performance row {row} has width {got}, expected {PERF_WIDTH}")]
    PerformanceWidth { row: usize, got: usize },
    #[error("performance row {row} contains a non-finite value")]
    PerformanceNotFinite { row: usize },
    #[error("note vector {index} has dimension {got}, expected {expected}")]
    NoteDim {
        index: usize,
        got: usize,
        expected: usize,
    },
    #[error("note vector {index} contains a non-finite value")]
    NoteNotFinite { index: usize },
    #[error(transparent)]
    Engine(#[from] TensorError),
}

/// Validated one-hot profile vector: exactly [`STATIC_INPUT_LEN`] entries,
/// each 0 or 1.
#[derive(Debug, Clone, PartialEq)]
pub struct StaticInput(Vec<f64>);

impl StaticInput {
    pub fn new(values: Vec<f64>) -> Result<Self, EncoderError> {
        if values.len() != STATIC_INPUT_LEN {
            return Err(EncoderError::StaticLength { got: values.len() });
        }
        for (index, &value) in values.iter().enumerate() {
            if value != 0.0 && value != 1.0 {
                return Err(EncoderError::StaticNotBinary { index, value });
            }
        }
        Ok(StaticInput(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

/// Validated per-semester measurement rows: at least one row, each
/// [`PERF_WIDTH`] wide and finite.
#[derive(Debug, Clone, PartialEq)]
pub struct PerformanceSequence(Vec<Vec<f64>>);

impl PerformanceSequence {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self, EncoderError> {
        if rows.is_empty() {
            return Err(EncoderError::EmptyPerformance);
        }
        for (row, values) in rows.iter().enumerate() {
            if values.len() != PERF_WIDTH {
                return Err(EncoderError::PerformanceWidth {
                    row,
                    got: values.len(),
                });
            }
            if values.iter().any(|v| !v.is_finite()) {
                return Err(EncoderError::PerformanceNotFinite { row });
            }
        }
        Ok(PerformanceSequence(rows))
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Embedded note vectors in chronological order; may be empty.
#[derive(Debug, Clone, PartialEq)]
pub struct NoteSequence {
    dim: usize,
    vectors: Vec<Vec<f64>>,
}

impl NoteSequence {
    pub fn new(dim: usize, vectors: Vec<Vec<f64>>) -> Result<Self, EncoderError> {
        for (index, v) in vectors.iter().enumerate() {
            if v.len() != dim {
                return Err(EncoderError::NoteDim {
                    index,
                    got: v.len(),
                    expected: dim,
                });
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(EncoderError::NoteNotFinite { index });
            }
        }
        Ok(NoteSequence { dim, vectors })
    }

    pub fn empty(dim: usize) -> Self {
        NoteSequence {
            dim,
            vectors: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn vectors(&self) -> &[Vec<f64>] {
        &self.vectors
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }
}

/// One student's model-ready inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleInput {
    pub static_input: StaticInput,
    pub performance: PerformanceSequence,
    pub notes: NoteSequence,
}

/// Deterministic source of per-call dropout seeds. One stream per training
/// step, seeded from the training RNG, makes every mask reproducible.
pub struct SeedStream {
    rng: ChaCha8Rng,
}

impl SeedStream {
    pub fn new(seed: u64) -> Self {
        SeedStream {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn next_seed(&mut self) -> u64 {
        self.rng.gen()
    }
}

/// Profile encoder: three convolution / batchnorm / pool / dropout stages
/// over the one-hot vector treated as a length-120 single-channel signal,
/// then a dense projection to [`STATIC_OUT_DIM`].
#[derive(Debug, Clone)]
pub struct StaticEncoder {
    stages: Vec<(Conv1dLayer, BatchNorm1d)>,
    project: Dense,
    dropout_rate: f64,
}

impl StaticEncoder {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        dropout_rate: f64,
    ) -> Result<Self, TensorError> {
        let mut stages = Vec::new();
        let mut channels = 1;
        let mut length = STATIC_INPUT_LEN;
        for (i, (filters, kernel)) in STATIC_CONV_STACK.iter().enumerate() {
            let conv = Conv1dLayer::new(
                store,
                rng,
                &format!("static.conv{}", i + 1),
                channels,
                *filters,
                *kernel,
                Padding::Same,
            )?;
            let bn = BatchNorm1d::new(store, &format!("static.bn{}", i + 1), *filters)?;
            stages.push((conv, bn));
            channels = *filters;
            length /= 2;
        }
        let project = Dense::new(
            store,
            rng,
            "static.project",
            length * channels,
            STATIC_OUT_DIM,
            Activation::Identity,
        )?;
        Ok(StaticEncoder {
            stages,
            project,
            dropout_rate,
        })
    }

    /// Encodes the whole minibatch. `inputs` are `[STATIC_INPUT_LEN, 1]`
    /// nodes; the result is one `[STATIC_OUT_DIM]` node per sample.
    pub fn forward_batch(
        &self,
        g: &mut Graph,
        store: &mut ParamStore,
        inputs: &[NodeId],
        mode: Mode,
        seeds: &mut SeedStream,
    ) -> Result<Vec<NodeId>, TensorError> {
        let mut stage_out: Vec<NodeId> = inputs.to_vec();
        for (conv, bn) in &self.stages {
            let conved: Vec<NodeId> = stage_out
                .iter()
                .map(|&x| conv.forward(g, store, x))
                .collect::<Result<_, _>>()?;
            // Normalize across every sample's time axis at once.
            let lens: Vec<usize> = conved.iter().map(|&n| g.shape(n)[0]).collect();
            let stitched = g.concat_rows(&conved)?;
            let normed = bn.forward(g, store, stitched, mode)?;
            let mut next = Vec::with_capacity(stage_out.len());
            let mut offset = 0;
            for len in lens {
                let part = g.slice_rows(normed, offset, len)?;
                offset += len;
                let pooled = g.maxpool1d(part, 2, 2)?;
                let dropped = g.dropout(pooled, self.dropout_rate, mode, seeds.next_seed())?;
                next.push(dropped);
            }
            stage_out = next;
        }
        stage_out
            .into_iter()
            .map(|x| {
                let numel: usize = g.shape(x).iter().product();
                let flat = g.reshape(x, vec![numel])?;
                self.project.forward(g, store, flat)
            })
            .collect()
    }
}

/// Performance encoder: two stacked recurrent layers with dropout and batch
/// normalization between them, then two dense layers off the final state.
#[derive(Debug, Clone)]
pub struct TemporalEncoder {
    lstm1: crate::layers::Lstm,
    bn1: BatchNorm1d,
    lstm2: crate::layers::Lstm,
    bn2: BatchNorm1d,
    dense1: Dense,
    bn3: BatchNorm1d,
    dense2: Dense,
    dropout_rate: f64,
}

impl TemporalEncoder {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        dropout_rate: f64,
    ) -> Result<Self, TensorError> {
        let lstm1 = crate::layers::Lstm::new(
            store,
            rng,
            "temporal.lstm1",
            PERF_WIDTH,
            TEMPORAL_LSTM1_HIDDEN,
        )?;
        let bn1 = BatchNorm1d::new(store, "temporal.bn1", TEMPORAL_LSTM1_HIDDEN)?;
        let lstm2 = crate::layers::Lstm::new(
            store,
            rng,
            "temporal.lstm2",
            TEMPORAL_LSTM1_HIDDEN,
            TEMPORAL_LSTM2_HIDDEN,
        )?;
        let bn2 = BatchNorm1d::new(store, "temporal.bn2", TEMPORAL_LSTM2_HIDDEN)?;
        let dense1 = Dense::new(
            store,
            rng,
            "temporal.dense1",
            TEMPORAL_LSTM2_HIDDEN,
            TEMPORAL_DENSE_DIM,
            Activation::Relu,
        )?;
        let bn3 = BatchNorm1d::new(store, "temporal.bn3", TEMPORAL_DENSE_DIM)?;
        let dense2 = Dense::new(
            store,
            rng,
            "temporal.dense2",
            TEMPORAL_DENSE_DIM,
            TEMPORAL_OUT_DIM,
            Activation::Identity,
        )?;
        Ok(TemporalEncoder {
            lstm1,
            bn1,
            lstm2,
            bn2,
            dense1,
            bn3,
            dense2,
            dropout_rate,
        })
    }

    /// Runs one recurrent stage over every sample, applies dropout per
    /// sample, and batch-normalizes across the stitched `[sum T_i, hidden]`
    /// matrix. Returns per-sample per-step state nodes.
    fn recurrent_stage(
        &self,
        g: &mut Graph,
        store: &mut ParamStore,
        lstm: &crate::layers::Lstm,
        bn: &BatchNorm1d,
        sequences: &[Vec<NodeId>],
        mode: Mode,
        seeds: &mut SeedStream,
    ) -> Result<Vec<Vec<NodeId>>, TensorError> {
        let mut stacked_per_sample = Vec::with_capacity(sequences.len());
        let mut lens = Vec::with_capacity(sequences.len());
        for steps in sequences {
            let states = lstm.forward(g, store, steps)?;
            let stacked = stack_vectors(g, &states)?;
            let dropped = g.dropout(stacked, self.dropout_rate, mode, seeds.next_seed())?;
            lens.push(states.len());
            stacked_per_sample.push(dropped);
        }
        let stitched = g.concat_rows(&stacked_per_sample)?;
        let normed = bn.forward(g, store, stitched, mode)?;
        let mut out = Vec::with_capacity(sequences.len());
        let mut offset = 0;
        for len in lens {
            let block = g.slice_rows(normed, offset, len)?;
            offset += len;
            let mut steps = Vec::with_capacity(len);
            for t in 0..len {
                steps.push(unstack_row(g, block, t)?);
            }
            out.push(steps);
        }
        Ok(out)
    }

    /// Encodes the minibatch: each element of `sequences` is one sample's
    /// per-semester `[PERF_WIDTH]` nodes. Returns one `[TEMPORAL_OUT_DIM]`
    /// node per sample.
    pub fn forward_batch(
        &self,
        g: &mut Graph,
        store: &mut ParamStore,
        sequences: &[Vec<NodeId>],
        mode: Mode,
        seeds: &mut SeedStream,
    ) -> Result<Vec<NodeId>, TensorError> {
        let stage1 = self.recurrent_stage(g, store, &self.lstm1, &self.bn1, sequences, mode, seeds)?;
        let stage2 = self.recurrent_stage(g, store, &self.lstm2, &self.bn2, &stage1, mode, seeds)?;
        // The final state of the second recurrence feeds the dense stack.
        let mut heads = Vec::with_capacity(stage2.len());
        for steps in &stage2 {
            let last = *steps.last().expect("sequences are non-empty");
            let d1 = self.dense1.forward(g, store, last)?;
            let dropped = g.dropout(d1, self.dropout_rate, mode, seeds.next_seed())?;
            heads.push(dropped);
        }
        let stacked = stack_vectors(g, &heads)?;
        let normed = self.bn3.forward(g, store, stacked, mode)?;
        let mut out = Vec::with_capacity(heads.len());
        for i in 0..heads.len() {
            let row = unstack_row(g, normed, i)?;
            out.push(self.dense2.forward(g, store, row)?);
        }
        Ok(out)
    }
}

/// Note encoder: a bidirectional recurrence over the embedded notes with an
/// elementwise max over time. Students without notes contribute a trainable
/// default vector instead, so the encoder is total.
#[derive(Debug, Clone)]
pub struct NotesEncoder {
    bilstm: BiLstm,
    empty_default: ParamId,
    pub hidden: usize,
}

impl NotesEncoder {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        embed_dim: usize,
        hidden: usize,
    ) -> Result<Self, TensorError> {
        let bilstm = BiLstm::new(store, rng, "notes.bilstm", embed_dim, hidden)?;
        let empty_default =
            store.register_zeros("notes.empty_default", vec![2 * hidden], true)?;
        Ok(NotesEncoder {
            bilstm,
            empty_default,
            hidden,
        })
    }

    pub fn out_dim(&self) -> usize {
        2 * self.hidden
    }

    /// Encodes one sample's notes (each a `[embed_dim]` node, chronological).
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        notes: &[NodeId],
    ) -> Result<NodeId, TensorError> {
        if notes.is_empty() {
            return Ok(g.param(store, self.empty_default));
        }
        self.bilstm.forward_maxpool(g, store, notes)
    }
}
