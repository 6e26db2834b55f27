//! Inference for dynamic-tree belief networks.
//!
//! A dynamic tree is a layered belief network in which every node below the
//! top layer picks its parent from a small menu of candidates in the layer
//! above. The network is therefore a mixture of tree-shaped models, one per
//! joint parent choice, weighted by the product of the menu probabilities.
//!
//! The crate provides:
//!
//! * [`model`]: the generative model itself, builders, sampling, validation;
//! * [`tree_bp`]: exact belief propagation on one fixed tree of the mixture;
//! * [`oracle`]: exact posteriors by enumerating every tree (small models);
//! * [`svi`]: structured variational inference over trees and states jointly,
//!   plus EM parameter learning on top of it;
//! * [`mean_field`]: the fully factorized variational baseline;
//! * [`loopy`]: loopy belief propagation on the multi-parent graph;
//! * [`harness`]: seeded experiment drivers comparing the methods.

// State and menu recursions are written as indexed loops so they read like
// the sums they implement.
#![allow(clippy::needless_range_loop)]

pub mod error;
pub mod harness;
pub mod io;
pub mod loopy;
pub mod math;
pub mod mean_field;
pub mod model;
pub mod oracle;
pub mod svi;
pub mod tree_bp;

pub use error::{InferenceError, ModelError};
pub use model::{Assignment, Cpt, DynamicTreeModel, Evidence, NodeRef, ParentMenu, TreeStructure};
