//! Exemplar-free class-incremental learning over frozen embedding spaces.
//!
//! Each task trains its own residual adapter on top of a frozen backbone
//! embedding (Stage-I). After every task, per-class Gaussian statistics of the
//! adapted features are stored, and a task-shared Mixture of Projectors is
//! trained on pseudo-features sampled from all stored classes (Stage-II).
//! At test time a sample is pushed through every task branch and the branch
//! with the least uncertain class distribution makes the prediction.
//!
//! The [`harness`] module drives whole experiments: synthetic and file-backed
//! task streams, the ablation grid, metrics and checkpoints.

// `!(x > 0.0)` also rejects NaN; index loops mirror the matrix algebra.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod encoders;
pub mod error;
pub mod harness;
pub mod inference;
pub mod memory;
pub mod mop;
pub mod numerics;
pub mod training;

pub use error::{CilError, ErrorCategory, Result};

/// Uniform access to a module's trainable buffers. The order of the slices
/// matches the order in which the module registers parameters on a tape.
pub trait ParamSet {
    fn param_slices(&self) -> Vec<&[f64]>;
    fn param_slices_mut(&mut self) -> Vec<&mut [f64]>;

    fn num_params(&self) -> usize {
        self.param_slices().iter().map(|s| s.len()).sum()
    }

    fn checksum(&self) -> u64 {
        param_checksum(&self.param_slices())
    }
}

/// FNV-1a over the bit patterns of every value.
pub fn param_checksum(slices: &[&[f64]]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for s in slices {
        for v in s.iter() {
            for b in v.to_bits().to_le_bytes() {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        // slice boundary
        h ^= 0xff;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
