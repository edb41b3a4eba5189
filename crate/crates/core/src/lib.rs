//! Core library for a video-conditioned music latent pipeline.
//!
//! The crate is organized bottom-up: dense tensors with reverse-mode
//! autodiff ([`tensor`], [`graph`]), the visual adaptor ([`adaptor`]),
//! contrastive pre-training ([`contrastive`]), the flow-matching
//! generator ([`flowgen`]), beat tracking ([`beat`]), synchronization
//! metrics ([`metrics`]), synthetic paired data ([`synthdata`]), and the
//! pipeline entry points the CLI wires together ([`pipeline`]).

pub mod adaptor;
pub mod beat;
pub mod checkpoint;
pub mod config;
pub mod contrastive;
pub mod dataset;
pub mod error;
pub mod flowgen;
pub mod gradcheck;
pub mod graph;
pub mod metrics;
pub mod optim;
pub mod pipeline;
pub mod params;
pub mod synthdata;
pub mod tensor;
pub mod tensor_io;
pub mod wav;

pub use error::{Error, Result};
pub use graph::{Gradients, Graph, NodeId};
pub use params::Params;
pub use tensor::Tensor;
