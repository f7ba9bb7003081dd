//! A small, self-contained sequence-model engine built around three ideas:
//! locality-sensitive-hashing attention (single and multi-round), reversible
//! residual blocks with reconstruction-based backprop, and chunked
//! feed-forward / loss evaluation.
//!
//! Everything runs on a plain row-major [`Tensor`] with hand-written
//! forward and backward passes; there is no autodiff tape. A thread-local
//! allocation meter ([`meter`]) counts live tensor floats so the memory
//! behaviour of the different backprop strategies can be measured directly.
//!
//! Module map:
//!
//! ```text
//! tensor / meter      dense substrate + allocation meter
//! lsh                 angular LSH, bucket sort, chunk geometry
//! attention           dense, streaming, shared-QK, LSH (1..n rounds), multi-head
//! feedforward         position-wise feed-forward sublayer
//! reversible          reversible blocks, chunked FF, chunked log-prob loss
//! model / checkpoint  the language model and its on-disk format
//! dup                 0w0w duplication task
//! optim / trainer     Adam, training loop, hash-count evaluation matrix
//! bench               attention timing and memory reports
//! ```

#![allow(clippy::too_many_arguments)]

pub mod attention;
pub mod bench;
pub mod checkpoint;
pub mod dup;
mod error;
pub mod feedforward;
pub mod lsh;
pub mod meter;
pub mod model;
pub mod optim;
pub mod reversible;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use meter::{meter_scope, MemMeter};
pub use tensor::{Permutation, Scalar, Tensor};
