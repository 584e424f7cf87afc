//! Contrastive pretraining and discrete-time survival prediction.
//!
//! The crate trains an encoder with time- and event-aware contrastive
//! objectives, fine-tunes a discrete-time hazard head, and evaluates with
//! censoring-aware metrics (time-dependent concordance, integrated Brier
//! score). Everything is deterministic given a seed.

pub mod autodiff;
pub mod config;
pub mod data;
pub mod losses;
pub mod metrics;
pub mod optim;
pub mod pipeline;
pub mod survival;

pub use autodiff::{Graph, NodeId, Tensor};
