//! Scene encoder: fused multi-view feature clouds, end-effector frame
//! canonicalisation, farthest-point sampling and attention pooling.

pub mod backbone;
pub mod bench;
pub mod checkpoint;
pub mod cloud;
pub mod config;
pub mod decoders;
pub mod encoder;
pub mod error;
pub mod geometry;
pub mod nn;
pub mod pipeline;
pub mod ply;
pub mod sampling;
pub mod sweep;
pub mod synth;
pub mod tensor_io;
pub mod train;

pub use error::{Error, Result};
