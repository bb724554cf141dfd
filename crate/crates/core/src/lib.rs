//! Variance-based sensitivity analysis of layered-model activations under
//! simultaneously applied, parameterized image transformations.
//!
//! The crate is organized bottom-up:
//!
//! * [`inputspace`] describes the augmented input space and builds sample plans
//!   (Sobol/Saltelli designs, Shapley permutation designs, spike-and-slab draws).
//! * [`augment`] holds the image transforms and their composition.
//! * [`convnet`] is a small feed-forward network with named checkpoints.
//! * [`estimators`] turns evaluated plans into Sobol indices and Shapley effects.
//! * [`pipeline`] wires plans, transforms and the network together.
//! * [`maskeval`], [`classsense`] and [`statan`] analyse the resulting maps.

pub mod augment;
pub mod classsense;
pub mod container;
pub mod convnet;
pub mod dataset;
pub mod error;
pub mod estimators;
pub mod inputspace;
pub mod maskeval;
pub mod numeric;
pub mod pipeline;
pub mod rng;
pub mod statan;

pub use augment::{ChannelSemantics, Image, Transform, TransformKind};
pub use container::Container;
pub use convnet::{ActivationRecord, Network};
pub use error::{Error, Result};
pub use estimators::{SensitivityKind, SensitivityMap, VarianceStats};
pub use inputspace::{InputSpaceModel, SamplePlan, Scheme, VariableGroup, VariableSpec};
