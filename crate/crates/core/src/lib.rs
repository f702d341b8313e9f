//! Uncertainty-aware interactive segmentation.
//!
//! An ensemble of masks is decoded from latent draws of a trainable Gaussian
//! mixture, fused by majority vote and clustered into candidate regions. A
//! clinician's selections recalibrate the mixture online.

pub mod checkpoint;
pub mod clinician;
pub mod codec;
pub mod data;
pub mod domain;
pub mod engine;
pub mod error;
pub mod eval;
pub mod graph;
pub mod kmeans;
pub mod model;
pub mod optim;
pub mod parallel;
pub mod samplingnet;
pub mod segnet;
pub mod space;
pub mod tensor;
pub mod train;

pub use domain::{AnnotatedCase, BinaryMask, ImageSample, InteractionEvent, Polarity, Rle, SoftMask};
pub use engine::{Session, SessionConfig, SessionMode, SessionStatus};
pub use error::{Error, Result};
pub use model::{Model, ModelConfig};
pub use space::MixtureSpace;
