//! Supervised affine calibration for few-shot in-context classifiers.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod backend;
pub mod baselines;
pub mod domain;
pub mod ensemble;
pub mod harness;
pub mod error;
pub mod objective;
mod par;
pub mod solver;
pub mod surrogate;

pub use domain::*;
pub use error::{CalibError, Result};

/// Mixes a base seed with a tag (splitmix64 finalizer).
pub(crate) fn derive_seed(base: u64, tag: u64) -> u64 {
    let mut z = base ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// First eight bytes of the SHA-256 of `s`.
pub(crate) fn hash_str(s: &str) -> u64 {
    use sha2::{Digest, Sha256};
    let d = Sha256::digest(s.as_bytes());
    u64::from_le_bytes(d[..8].try_into().expect("32-byte digest"))
}
