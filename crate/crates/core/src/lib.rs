//! Domain-generalized real-vs-attack classification trained by second-order
//! meta-learning with depth regularization.
//!
//! The crate carries its own reverse-mode autodiff ([`tensor`]) so the
//! meta-objective can be differentiated through the inner update. On top of
//! it sit the three-part network ([`nets`]), the synthetic multi-domain data
//! ([`datagen`]), the meta-training loop and its variants ([`metalearn`]),
//! evaluation ([`metrics`]) and the leave-one-domain-out protocol
//! ([`protocol`]). [`verify`] holds the numerical self-checks and [`cli`] the
//! command-line front end.

pub mod cli;
pub mod datagen;
pub mod error;
pub mod metalearn;
pub mod metrics;
pub mod nets;
pub mod protocol;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
