//! Variable-way few-shot garment landmark detection on a procedural benchmark.

pub mod baselines;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod meta;
pub mod model;
