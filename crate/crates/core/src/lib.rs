//! Dual swap disentangling: an autoencoder whose latent code is split into
//! one part per generative factor, trained by swapping parts between pairs
//! of images that share a factor.
//!
//! The crate is self-contained: [`autodiff`] provides the tensors, gradients
//! and optimizer, [`dataset`] synthesizes the Square images, [`model`] and
//! [`trainer`] hold the network and its objectives, [`eval`] measures how
//! informative each code part is, and [`oracle`] checks the disentangling
//! claim on a linear world where the ground truth is known.

pub mod autodiff;
pub mod dataset;
mod error;
pub mod eval;
pub mod model;
pub mod oracle;
pub mod ppm;
pub mod rng;
mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;

/// The guide in `book/`, compiled so its examples run as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    mod autodiff {}
    #[doc = include_str!("../../../book/src/dataset.md")]
    mod dataset {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/oracle.md")]
    mod oracle {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
