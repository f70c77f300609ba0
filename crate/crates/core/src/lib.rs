//! Affinity maturation on a synthetic antibody/antigen world.
//!
//! The crate covers the whole loop: a deterministic toy world with an exact
//! binding-energy oracle, a conditional flow model over chain coordinates,
//! sequence and structure affinity predictors, structure-guided sampling,
//! inverse-folding mutation proposals, co-teaching refinement of the
//! predictors on noisy labels, and the iterative design pipeline.

pub mod checkpoint;
pub mod coteach;
pub mod dataset;
pub mod error;
pub mod flow;
pub mod guidance;
pub mod inverse_folding;
pub mod nn;
pub mod pipeline;
pub mod predictors;
pub mod residue;
pub mod rng;
pub mod stats;
pub mod structure;
pub mod tables;
pub mod world;

pub use error::{Error, Result};
pub use residue::{ResidueType, Sequence};
pub use rng::Rng;
pub use structure::{Structure, Vec3};
pub use world::ToyWorld;
