//! The full retention model: configured encoders, fusion, cascade heads,
//! and a bit-exact parameter checkpoint format.
//!
//! A model owns its parameter store. Forward passes build a fresh graph per
//! minibatch; the caller keeps the graph to run `backward` and read outputs.
//! Modalities can be switched off individually (for ablation runs); the
//! fused vector concatenates the enabled encoder outputs in the fixed order
//! temporal, static, notes.

use crate::cascade::{CascadeHeads, TaskOutputNodes};
use crate::encoders::{
    NotesEncoder, SampleInput, SeedStream, StaticEncoder, TemporalEncoder, DEFAULT_NOTE_HIDDEN,
    STATIC_INPUT_LEN, STATIC_OUT_DIM, TEMPORAL_OUT_DIM,
};
use crate::graph::{Graph, Mode, NodeId};
use crate::params::ParamStore;
use crate::tensor::TensorError;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use thiserror::Error;

/// Checkpoint format marker; bump when the line layout changes.
const CHECKPOINT_HEADER: &str = "retention-checkpoint v1";

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("model configuration invalid: {0}")]
    Config(String),
    #[error("sample {index}: note vectors are {got}-dimensional, model expects {expected}")]
    NoteDimMismatch {
        index: usize,
        got: usize,
        expected: usize,
    },
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: String, message: String },
    #[error(transparent)]
    Engine(#[from] TensorError),
}

/// Hyperparameters that shape the network. Serialized into checkpoints so a
/// saved model rebuilds itself without outside knowledge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Dimension of the note embedding vectors fed to the note encoder.
    pub note_embed_dim: usize,
    /// Hidden width of the note encoder; its output is twice this.
    pub note_hidden: usize,
    /// Hidden width of each task head.
    pub head_hidden: usize,
    /// Dropout rate used everywhere dropout appears.
    pub dropout_rate: f64,
    pub use_static: bool,
    pub use_temporal: bool,
    pub use_notes: bool,
    /// Extends the masking hierarchy below the timing task when set.
    pub mask_rule_3: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            note_embed_dim: 64,
            note_hidden: DEFAULT_NOTE_HIDDEN,
            head_hidden: crate::cascade::DEFAULT_HEAD_HIDDEN,
            dropout_rate: 0.2,
            use_static: true,
            use_temporal: true,
            use_notes: true,
            mask_rule_3: false,
        }
    }
}

impl ModelConfig {
    /// Width of the fused representation under this configuration.
    pub fn z_dim(&self) -> usize {
        let mut d = 0;
        if self.use_temporal {
            d += TEMPORAL_OUT_DIM;
        }
        if self.use_static {
            d += STATIC_OUT_DIM;
        }
        if self.use_notes {
            d += 2 * self.note_hidden;
        }
        d
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.use_static || self.use_temporal || self.use_notes) {
            return Err(ModelError::Config(
                "at least one modality must be enabled".into(),
            ));
        }
        if self.use_notes && (self.note_embed_dim == 0 || self.note_hidden == 0) {
            return Err(ModelError::Config(
                "note embedding and hidden dims must be positive".into(),
            ));
        }
        if self.head_hidden == 0 {
            return Err(ModelError::Config("head hidden width must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(ModelError::Config(format!(
                "dropout rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }
}

/// The trainable model: parameter store plus the wiring to run it.
pub struct RetentionModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    static_enc: Option<StaticEncoder>,
    temporal_enc: Option<TemporalEncoder>,
    notes_enc: Option<NotesEncoder>,
    heads: CascadeHeads,
}

impl RetentionModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let temporal_enc = if config.use_temporal {
            Some(TemporalEncoder::new(&mut store, &mut rng, config.dropout_rate)?)
        } else {
            None
        };
        let static_enc = if config.use_static {
            Some(StaticEncoder::new(&mut store, &mut rng, config.dropout_rate)?)
        } else {
            None
        };
        let notes_enc = if config.use_notes {
            Some(NotesEncoder::new(
                &mut store,
                &mut rng,
                config.note_embed_dim,
                config.note_hidden,
            )?)
        } else {
            None
        };
        let heads = CascadeHeads::new(&mut store, &mut rng, config.z_dim(), config.head_hidden)?;
        Ok(RetentionModel {
            config,
            store,
            static_enc,
            temporal_enc,
            notes_enc,
            heads,
        })
    }

    pub fn heads(&self) -> &CascadeHeads {
        &self.heads
    }

    /// Builds the fused representation for every sample in the batch on one
    /// shared graph, so normalization statistics span the whole batch.
    pub fn fuse_batch(
        &mut self,
        g: &mut Graph,
        samples: &[&SampleInput],
        mode: Mode,
        dropout_seed: u64,
    ) -> Result<Vec<NodeId>, ModelError> {
        let expected = self.config.note_embed_dim;
        for (index, s) in samples.iter().enumerate() {
            if self.config.use_notes && s.notes.dim() != expected {
                return Err(ModelError::NoteDimMismatch {
                    index,
                    got: s.notes.dim(),
                    expected,
                });
            }
        }
        let mut seeds = SeedStream::new(dropout_seed);
        let store = &mut self.store;

        let temporal_out = match &self.temporal_enc {
            Some(enc) => {
                let sequences: Vec<Vec<NodeId>> = samples
                    .iter()
                    .map(|s| {
                        s.performance
                            .rows()
                            .iter()
                            .map(|row| g.input_slice(vec![row.len()], row))
                            .collect()
                    })
                    .collect::<Result<_, _>>()?;
                Some(enc.forward_batch(g, store, &sequences, mode, &mut seeds)?)
            }
            None => None,
        };
        let static_out = match &self.static_enc {
            Some(enc) => {
                let inputs: Vec<NodeId> = samples
                    .iter()
                    .map(|s| g.input_slice(vec![STATIC_INPUT_LEN, 1], s.static_input.values()))
                    .collect::<Result<_, _>>()?;
                Some(enc.forward_batch(g, store, &inputs, mode, &mut seeds)?)
            }
            None => None,
        };
        let notes_out = match &self.notes_enc {
            Some(enc) => {
                let mut outs = Vec::with_capacity(samples.len());
                for s in samples {
                    let notes: Vec<NodeId> = s
                        .notes
                        .vectors()
                        .iter()
                        .map(|v| g.input_slice(vec![v.len()], v))
                        .collect::<Result<_, _>>()?;
                    outs.push(enc.forward(g, store, &notes)?);
                }
                Some(outs)
            }
            None => None,
        };

        (0..samples.len())
            .map(|i| {
                let mut parts = Vec::new();
                if let Some(t) = &temporal_out {
                    parts.push(t[i]);
                }
                if let Some(s) = &static_out {
                    parts.push(s[i]);
                }
                if let Some(n) = &notes_out {
                    parts.push(n[i]);
                }
                g.concat(&parts).map_err(ModelError::from)
            })
            .collect()
    }

    /// Full forward pass: fused representations through all five heads.
    pub fn forward_batch(
        &mut self,
        g: &mut Graph,
        samples: &[&SampleInput],
        mode: Mode,
        dropout_seed: u64,
    ) -> Result<Vec<TaskOutputNodes>, ModelError> {
        let fused = self.fuse_batch(g, samples, mode, dropout_seed)?;
        fused
            .into_iter()
            .map(|z| self.heads.forward(g, &mut self.store, z).map_err(ModelError::from))
            .collect()
    }

    /// Writes every parameter (trainable and running statistics) with full
    /// bit patterns, plus the configuration needed to rebuild the model.
    pub fn save_checkpoint(&self, path: &Path) -> Result<(), ModelError> {
        let err = |message: String| ModelError::Checkpoint {
            path: path.display().to_string(),
            message,
        };
        let meta = serde_json::to_string(&self.config).map_err(|e| err(e.to_string()))?;
        let mut body = String::new();
        body.push_str(CHECKPOINT_HEADER);
        body.push('\n');
        body.push_str(&meta);
        body.push('\n');
        for (_, entry) in self.store.iter() {
            let shape: Vec<String> = entry.shape.iter().map(|d| d.to_string()).collect();
            write!(
                body,
                "{}\t{}\t{}\t",
                entry.name,
                if entry.trainable { 1 } else { 0 },
                shape.join(",")
            )
            .expect("writing to a string cannot fail");
            for (i, v) in entry.values.iter().enumerate() {
                if i > 0 {
                    body.push(' ');
                }
                write!(body, "{:016x}", v.to_bits()).expect("writing to a string cannot fail");
            }
            body.push('\n');
        }
        let mut file = std::fs::File::create(path).map_err(|e| err(e.to_string()))?;
        file.write_all(body.as_bytes()).map_err(|e| err(e.to_string()))?;
        Ok(())
    }

    /// Rebuilds a model from a checkpoint; values restore bit for bit.
    pub fn load_checkpoint(path: &Path) -> Result<Self, ModelError> {
        let err = |message: String| ModelError::Checkpoint {
            path: path.display().to_string(),
            message,
        };
        let file = std::fs::File::open(path).map_err(|e| err(e.to_string()))?;
        let mut lines = BufReader::new(file).lines();
        let header = lines
            .next()
            .ok_or_else(|| err("file is empty".into()))?
            .map_err(|e| err(e.to_string()))?;
        if header != CHECKPOINT_HEADER {
            return Err(err(format!(
                "unrecognized header {header:?}, expected {CHECKPOINT_HEADER:?}"
            )));
        }
        let meta = lines
            .next()
            .ok_or_else(|| err("missing configuration line".into()))?
            .map_err(|e| err(e.to_string()))?;
        let config: ModelConfig =
            serde_json::from_str(&meta).map_err(|e| err(format!("configuration line: {e}")))?;
        // Architecture (names, shapes, order) is fully determined by the
        // configuration; only the stored values differ from a fresh build.
        let mut model = RetentionModel::new(config, 0)?;
        let mut restored = 0usize;
        for (lineno, line) in lines.enumerate() {
            let line = line.map_err(|e| err(e.to_string()))?;
            if line.is_empty() {
                continue;
            }
            let n = lineno + 3;
            let mut cols = line.split('\t');
            let (name, trainable, shape, values) =
                match (cols.next(), cols.next(), cols.next(), cols.next()) {
                    (Some(a), Some(b), Some(c), Some(d)) => (a, b, c, d),
                    _ => return Err(err(format!("line {n}: expected 4 tab-separated columns"))),
                };
            let id = model
                .store
                .id_by_name(name)
                .ok_or_else(|| err(format!("line {n}: unknown parameter {name:?}")))?;
            let entry_shape = model.store.shape(id).to_vec();
            let parsed_shape: Vec<usize> = if shape.is_empty() {
                Vec::new()
            } else {
                shape
                    .split(',')
                    .map(|s| s.parse::<usize>())
                    .collect::<Result<_, _>>()
                    .map_err(|e| err(format!("line {n}: bad shape: {e}")))?
            };
            if parsed_shape != entry_shape {
                return Err(err(format!(
                    "line {n}: parameter {name:?} has shape {parsed_shape:?}, model expects {entry_shape:?}"
                )));
            }
            let expected_trainable = model.store.entry(id).trainable;
            if (trainable == "1") != expected_trainable {
                return Err(err(format!(
                    "line {n}: parameter {name:?} trainability flag does not match the model"
                )));
            }
            let slot = model.store.values_mut(id);
            let mut count = 0usize;
            for (i, hex) in values.split(' ').enumerate() {
                if i >= slot.len() {
                    return Err(err(format!("line {n}: too many values for {name:?}")));
                }
                let bits = u64::from_str_radix(hex, 16)
                    .map_err(|e| err(format!("line {n}: bad value {hex:?}: {e}")))?;
                slot[i] = f64::from_bits(bits);
                count += 1;
            }
            if count != slot.len() {
                return Err(err(format!(
                    "line {n}: {name:?} has {count} values, expected {}",
                    slot.len()
                )));
            }
            restored += 1;
        }
        let total = model.store.iter().count();
        if restored != total {
            return Err(err(format!(
                "checkpoint restored {restored} of {total} parameters"
            )));
        }
        Ok(model)
    }
}
