//! Hierarchically branched diffusion models.
//!
//! A branched model splits class-conditional reverse diffusion into a tree of
//! branches, each owning one output head of a shared-trunk network over a
//! diffusion-time interval and a subset of classes. This crate provides
//! branch discovery from data, the multi-task denoiser and its label-guided
//! baseline, training, branched sampling (including transmutation, hybrids
//! and cached multi-class generation), class extension, evaluation metrics
//! and the file formats used by the `branchdiff` command line tool.
//!
//! Numeric code is generic over [`Scalar`]; the aliases at the crate root
//! fix the working precision to `f32`.

pub mod autodiff;
pub mod data;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod evaluation;
pub mod hierarchy;
pub mod matrix;
pub mod rng;
pub mod sampling;
pub mod scalar;
pub mod training;

pub use error::{Error, Result};
pub use hierarchy::{Branch, BranchHierarchy};
pub use matrix::Matrix;
pub use scalar::Scalar;

pub type Mat = matrix::Matrix<f32>;
pub type Process = diffusion::Process<f32>;
pub type Store = autodiff::ParameterStore<f32>;
pub type BranchedModel = denoiser::MultiTaskDenoiser<f32>;
pub type LabelGuidedModel = denoiser::LabelGuidedDenoiser<f32>;
pub type Samples = sampling::SampleBatch<f32>;
