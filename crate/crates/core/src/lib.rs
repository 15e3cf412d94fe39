//! Device-free visible-light localization.
//!
//! A single ceiling LED lights an empty room; nine tilted ceiling
//! photodetectors record the diffusely reflected power. A person standing in
//! the room shadows some reflection paths and adds others, shifting the
//! received signal strengths. This crate simulates those shifts (ΔRSS),
//! builds fingerprint datasets on a position grid, trains neural-network
//! ensembles that invert ΔRSS to (x, y), and serves live estimates.

pub mod channel;
pub mod ensemble;
pub mod error;
pub mod eval;
pub mod fingerprint;
pub mod geometry;
pub mod neural;
pub mod scene;
pub mod service;

pub use error::{Error, Result};
