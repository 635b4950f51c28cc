//! Temporal refinement of 3D detection proposals with attention-guided
//! token condensation, a deduplicating point memory and grouped
//! hierarchical fusion.
//!
//! The crate is `no_std` with `alloc`. File formats, the training harness
//! and the command line live in the `ftkn` crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod decoder;
pub mod error;
pub mod fusion;
pub mod geometry;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod memory;
pub mod model;
pub mod optim;
pub mod params;
pub mod scaling;
pub mod tensor;

pub use decoder::{decode_box, encode_box, Refinement};
pub use error::{Error, Result};
pub use geometry::{Box7, PointSet, ProposalTrajectory, PAD_ID};
pub use fusion::{FusionSchedule, GroupPlan, GroupStrategy};
pub use graph::{Grads, Graph, OpCounter, Var};
pub use memory::FocalStore;
pub use model::{FasterModel, ModelConfig, ProposalSample};
pub use params::{ParamId, ParamStore};
pub use scaling::{Scorer, TokenSequence, Tokens};
pub use tensor::Tensor;
