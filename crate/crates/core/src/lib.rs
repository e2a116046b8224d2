//! Dialogue path sampling on an extended Brownian bridge.
//!
//! Multi-turn dialogues are mapped utterance by utterance into a latent space
//! where they lie on a Brownian bridge. Sampled bridge paths stand in for
//! augmented dialogues: they are mixed into a small encoder–decoder
//! transformer, and the model distills its own expectation-conditioned
//! predictions into the path-conditioned ones.

pub mod bridge;
pub mod checkpoint;
pub mod corpus;
pub mod decode;
pub mod distill;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod hull;
pub mod infer;
pub mod mapper;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod seed;
pub mod seq2seq;
pub mod tensor;

pub use error::{Error, Result};
