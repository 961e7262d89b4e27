//! Deep mixture of diverse experts: a two-layer class ontology, overlapping
//! task groups, multi-task softmax experts with a manifold penalty, and a
//! stacking head that fuses their outputs.

pub mod codec;
pub mod dataset;
pub mod error;
pub mod expert;
pub mod fusion;
pub mod harness;
pub mod linalg;
pub mod ontology;
pub mod scalar;
pub mod taskgroups;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Dataset64 = dataset::Dataset<f64>;
pub type Dataset32 = dataset::Dataset<f32>;
pub type AffinityMatrix64 = ontology::AffinityMatrix<f64>;
pub type AffinityMatrix32 = ontology::AffinityMatrix<f32>;
pub type ExpertModel64 = expert::ExpertModel<f64>;
pub type ExpertModel32 = expert::ExpertModel<f32>;
pub type MixtureModel64 = fusion::MixtureModel<f64>;
pub type MixtureModel32 = fusion::MixtureModel<f32>;
pub type EarlyFusionModel64 = fusion::EarlyFusionModel<f64>;
pub type EarlyFusionModel32 = fusion::EarlyFusionModel<f32>;
