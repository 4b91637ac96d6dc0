//! Saliency-driven feature modulation for online continual learning.
//!
//! The crate is organized along the experiment pipeline:
//!
//! * [`datastream`] builds task streams and attaches target saliency maps,
//! * [`saliency`] holds the saliency predictor, its KL objective and metrics,
//! * [`modulation`] pairs a classifier with the saliency encoder,
//! * [`learners`] provides the continual-learning losses and replay buffer,
//! * [`harness`] runs the single-pass training loop and evaluation,
//! * [`robustness`] covers spurious-feature and adversarial experiments.

pub mod backbone;
pub mod batch;
pub mod datastream;
pub mod error;
pub mod harness;
pub mod learners;
pub mod modulation;
pub mod nn;
pub mod robustness;
pub mod saliency;

pub use backbone::{Arch, BackboneSpec, NUM_STAGES};
pub use datastream::{ImageSize, LabeledCollection, Sample, TaskStream};
pub use error::{Result, SamError};
pub use modulation::{IntegrationVariant, ModulatedBackbone, ModulationScheme};
