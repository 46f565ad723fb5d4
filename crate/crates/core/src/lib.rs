//! Accelerated approximate machine unlearning at desk scale: Blend dataset
//! condensation, the A-AMU objective, baseline unlearners and an
//! evaluation harness over synthetic Gaussian-class data.

// `!(x > 0.0)` is used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod blend;
pub mod error;
pub mod eval;
pub mod gaussianize;
pub mod harness;
pub mod nn;
pub mod partition;
pub mod unlearn;

pub use error::{Error, Result};

/// Derives an independent seed for sub-stream `stream` of `base`
/// (splitmix64 finaliser over the combined words).
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x6A09_E667_F3BC_C909);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
