//! Synthetic scenes, file formats, the per-frame refinement pipeline,
//! staged training, evaluation and the experiment runners.

pub mod bank;
pub mod config;
pub mod error;
pub mod eval;
pub mod experiments;
pub mod io;
pub mod pipeline;
pub mod report;
pub mod rpn;
pub mod samples;
pub mod scene;
pub mod seeds;
pub mod train;

pub use ftkn_core as core;

pub use config::{PipelineConfig, Preset};
pub use error::{HarnessError, Result};
pub use scene::{generate_scene, Frame, Scene};
