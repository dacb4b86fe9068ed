//! Numerical core for meta-learned hybrid beamforming: channel generation,
//! sum-rate evaluation, the precoder network with exact gradients, MLDG and
//! baseline backbone training, augmented fine-tuning, and classical
//! reference precoders.
//!
//! The crate is `no_std` and only needs `alloc`; file formats and the
//! experiment runner live in the `sage-hbf` crate.
#![no_std]
// `!(x > 0.0)` style checks deliberately reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod adapt;
pub mod baselines;
pub mod beamforming;
pub mod channel;
pub mod error;
pub mod metatrain;
pub mod model;

pub use error::{Error, Result};
