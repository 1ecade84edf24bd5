//! Multimodal student retention modeling.
//!
//! The crate trains one shared representation from three views of a student
//! record: a one-hot profile vector, a per-semester performance sequence,
//! and free-text counseling notes. Five task heads hang off that
//! representation in a cascade: dropout risk, temporary-vs-permanent,
//! next-semester timing, duration regression, and dropout cause. Later heads
//! are trained only where the earlier labels make them meaningful.
//!
//! Everything runs on a small reverse-mode autodiff engine ([`graph`]) with
//! f64 values throughout, so runs are reproducible bit for bit from a seed.

pub mod cascade;
pub mod data;
pub mod embed;
pub mod encoders;
pub mod eval;
pub mod fairness;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod model;
pub mod params;
pub mod tensor;
pub mod train;
