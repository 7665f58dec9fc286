//! Differentially private split learning with patch-wise random CutMix.
//!
//! The crate simulates clients, a mixer and a server exchanging smashed
//! data and gradients, and provides the privacy accountant, attack
//! harnesses and numerical checks used to evaluate the mechanisms.

pub mod accountant;
pub mod attacks;
pub mod data;
pub mod error;
pub mod mechanisms;
pub mod mixing;
pub mod protocol;
pub mod rng;
pub mod splitmodel;
pub mod tensor;
pub mod verification;

pub use error::{Error, Result};
