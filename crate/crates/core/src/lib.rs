//! Capsule-network text classification with graph routing.
//!
//! A small reverse-mode tape ([`Tape`]) drives every layer; routing variants
//! (dynamic, leaky, GCN-only and graph routing with learned intra-layer
//! adjacency and attention) live in [`routing`]. Works without `std`.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod adjacency;
pub mod capsule;
pub mod consistency;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod model;
pub mod optim;
pub mod real;
pub mod routing;
pub mod tape;
pub mod tensor;

pub use adjacency::{Metric, NormMode, WdMode};
pub use capsule::LayerTag;
pub use error::{Error, Result};
pub use model::{Batch, BatchOutput, Init, LossKind, Model, ModelConfig, StepStats};
pub use optim::{Adam, ParamId, ParamStore, Parameter};
pub use real::Real;
pub use routing::{RoutingConfig, RoutingVariant};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
