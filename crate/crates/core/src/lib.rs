//! Segmentation-guided diffusion editing at desk scale.
//!
//! A toy DDPM is trained on procedurally generated labelled scenes; per-timestep
//! pixel classifiers read its decoder activations; edits to a segmentation map
//! are realised by guiding the reverse process with the classifier's gradient
//! inside a region of interest while the outside is re-noised from the source.

pub mod autodiff;
pub mod checkpoint;
pub mod classifier;
pub mod dataset;
pub mod diffusion;
pub mod edit;
pub mod editor;
pub mod error;
pub mod evaluation;
pub mod fixtures;
pub mod gradcheck;
pub mod metrics;
pub mod optim;
pub mod par;
pub mod scene;
pub mod segmap;
pub mod tensor;
pub mod train;
pub mod unet;

pub use error::{Error, Result};
pub use tensor::Tensor;
