//! Desk-scale song-generation training stack.
//!
//! A lyrics-conditioned language model predicts mixed song tokens while a
//! smaller AR decoder predicts vocal and accompaniment tokens in parallel
//! under a delay pattern. Tokens come from residual vector quantization over
//! a synthetic song corpus; alignment runs multi-preference DPO with
//! interpolation-based model merging. Everything is seeded and bit-exactly
//! reproducible on one thread.

pub mod error;
pub mod kernels;
pub mod rng;
pub mod tensor;

pub mod checkpoint;
pub mod optim;
pub mod params;
pub mod tape;

pub mod corpus;
pub mod rvq;

pub mod lelm;

pub mod generation;
pub mod trainer;

pub mod alignment;
pub mod evalx;

pub mod config;
pub mod pipeline;

pub use error::{Error, Result};
pub use tensor::Tensor;
