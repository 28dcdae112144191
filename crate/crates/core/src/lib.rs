//! Turn a front-view block sketch into a stable 3D block arrangement.
//!
//! The pipeline extracts a relation graph from the sketch, grounds it to
//! poses by composing per-relation diffusion models, and inserts hidden
//! supports until a static-equilibrium check passes.

pub mod datagen;
pub mod diffusion;
pub mod eval;
pub mod geometry;
pub mod grounding;
pub mod models;
pub mod patterns;
pub mod relations;
pub mod sampler;
pub mod sketchio;
pub mod stability;
