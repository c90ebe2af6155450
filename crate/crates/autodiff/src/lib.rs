//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! Operations record onto an append-only [`Tape`]; [`grad`] replays it in
//! reverse. The backward sweep is built from the same public operations, so
//! running it with `create_graph` records a differentiable graph and exact
//! higher-order gradients fall out — the ingredient needed to differentiate
//! through unrolled optimization steps ([`sgd_step`]).
//!
//! Randomness is counter-based ([`rng::Rng`]) and bit-stable across runs and
//! platforms.

pub mod check;
pub mod error;
pub mod ops;
pub mod params;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use params::{sgd_step, ParamSet};
pub use rng::{randn_init, seed_chain, Rng};
pub use tape::{grad, grad_tensors, Tape};
pub use tensor::{Shape, Tensor};
