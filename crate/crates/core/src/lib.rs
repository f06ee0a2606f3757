//! Hierarchical piano hand-motion synthesis.
//!
//! MIDI plus fingering goes in; 21-joint hand trajectories come out. The
//! cascade runs a prior-driven fingertip baseline, learned fingertip
//! refinement with hard key-contact masking, a wrist stage, and a
//! graph-network pose stage. Overlapping windows are stitched at the end.

pub mod error;
pub mod keyboard;
pub mod nn;
pub mod score;
pub mod types;

pub use error::{Error, Result};
pub mod baseline;
pub mod eval;
pub mod gradsuite;
pub mod pipeline;
pub mod pose;
pub mod prior;
pub mod refine;
pub mod wrist;
