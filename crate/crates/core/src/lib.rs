//! Laboratory for spectrally-initialized low-rank adaptation (LoRA, PiSSA,
//! MiLoRA) on a self-contained tiny-transformer stack.
//!
//! Everything numeric is f64 and deterministic: the same seeds and configs
//! produce bit-identical results on the same build.

pub mod adapters;
pub mod analysis;
pub mod linalg;
pub mod nn;
pub mod seeds;
pub mod trainer;

pub use adapters::{AdapterConfig, Scheme, SplitMode};
pub use linalg::{Matrix, SvdFactorization};
pub use nn::{Model, Placement, TransformerConfig};
pub use trainer::{TaskKind, TaskSpec, TrainConfig, TrainMode};
