//! Dense human body-surface reconstruction from sparse, noisy and partially
//! missing motion-capture landmarks.
//!
//! The pipeline denoises landmarks with an autoencoder, estimates joints
//! with an attention network, and regresses quaternion pose and shape
//! coefficients through a cascade of residual regressors that drive a
//! linear-blend-skinning body model. Training is unsupervised: the only
//! inputs are landmark coordinates and their validity mask.

pub mod archive;
pub mod autodiff;
pub mod body;
pub mod data;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod ik;
pub mod inference;
pub mod losses;
pub mod networks;
pub mod training;
pub mod verify;

pub use error::{Error, Result};
