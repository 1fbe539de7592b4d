//! Fixed-size recurrent voxel memory for transformers.
//!
//! The crate is organized around a small reverse-mode tensor core
//! ([`tensor`]) on top of which the voxel memory module ([`memory`]),
//! a minimal transformer backbone ([`backbone`]), procedurally
//! generated diagnostic tasks ([`toys`]), a deterministic training
//! loop ([`trainer`]), trace export ([`inspect`]) and the command-line
//! entry points ([`cli`]) are built.

pub mod backbone;
pub mod cli;
pub mod error;
pub mod inspect;
pub mod memory;
pub mod tensor;
pub mod toys;
pub mod trainer;

pub use error::{Error, Result};
