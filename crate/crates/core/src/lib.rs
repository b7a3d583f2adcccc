//! Desk-scale engine for trimodal contrastive representation learning on
//! synthetic mammography-like data: paired image views, structured
//! manifestation vectors, and templated text reports are embedded into a
//! shared unit hypersphere, trained with intra-image and cross-modal
//! contrastive objectives, and batches are composed by a
//! manifestation-driven hard-negative sampler with annealed hardness.
//!
//! Everything runs on explicit seeds and produces bit-reproducible results;
//! the `parallel` feature only changes throughput, never values.

pub mod error;
pub mod eval;
pub mod manifestation;
pub mod maninneg;
pub mod matrix;
pub mod model;
pub mod objectives;
pub mod opt;
pub mod par;
pub mod rng;
pub mod synthdata;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
