//! Joint reconstruction and registration for limited-angle tomosynthesis.
//!
//! Two projection stacks of the same object in different deformation states
//! are reconstructed together with the motion between them. Three strategies
//! are provided: reconstruct-then-register (`pipeline::sequential`),
//! interleaved partial reconstruction and registration (`pipeline::iterative`),
//! and a fully coupled objective over volume and transform minimized by
//! alternating sub-solves (`pipeline::simultaneous`).
//!
//! The heavy kernels (projection, warping) run data-parallel under the
//! `parallel` feature (on by default) and fall back to plain loops without it;
//! `par::set_threads(1)` forces the sequential path at runtime for
//! bit-reproducible runs.

pub mod error;
pub mod par;
pub mod volume;

pub mod geometry;
pub mod projector;
pub mod transform;

pub mod optimize;

pub mod phantom;

pub mod metrics;
pub mod pipeline;

pub mod config;
pub mod experiment;
pub mod io;

pub use error::{Error, Result};
pub use volume::{GridSpec, Volume};
