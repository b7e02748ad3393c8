//! Synthetic data, the toy training task and the grouped-versus-dense benchmark.

pub mod bench;
pub mod synth;
pub mod toy;
