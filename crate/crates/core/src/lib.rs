//! Federated domain-generalization simulator built around a parameter-free,
//! token-level mixture of prompt experts.
//!
//! The pipeline per image: capacity-constrained clustering of its tokens
//! ([`clustering`]), optimal one-to-one assignment of clusters to experts through
//! static keys ([`transport`], [`router`]), a token-share weighted prompt, and a
//! frozen proxy classifier trained with cross-entropy plus a KL pull toward its
//! zero-shot predictions ([`model`]). [`federation`] runs the rounds over clients
//! built from [`data`].

pub mod clustering;
pub mod config;
pub mod data;
pub mod error;
pub mod federation;
pub mod model;
pub mod report;
pub mod router;
pub mod tensor;
pub mod transport;

pub use error::{Error, Result};
