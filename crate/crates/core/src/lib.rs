// Validation guards use `!(x > 0)` so NaN parameters fail closed.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

//! Quantization and perturbation laboratory.
//!
//! The crate views quantization as additive noise: `fake_quant` simulates
//! low-precision storage in f32, `quant_perturbation` extracts the noise
//! tensor Δ with t = fake_quant(t) + Δ, and the `perturb` module generates
//! artificial noise families matched to that intensity. A small trainable
//! decoder-only transformer (`toymodel`) provides injection sites for
//! weight/activation experiments, and `harness` drives seeded sweeps from
//! JSON configs into CSV/JSON reports.

pub mod harness;
pub mod metrics;
pub mod perturb;
pub mod quant;
pub mod tensor;
pub mod toymodel;

pub use quant::{QuantScheme, QuantizedTensor};
pub use tensor::{RngStream, Tensor, TensorStats};
