//! Kolmogorov–Arnold networks expressed as multichannel MLPs.
//!
//! The crate provides B-spline and truncated-power bases, the banded change
//! of basis between them, network layers built on a small reverse-mode tape,
//! multilevel refinement, optimizers and spectral diagnostics.

pub mod autodiff;
pub mod cob;
pub mod error;
pub mod net;
pub mod optim;
pub mod refine;
pub mod spectra;
pub mod spline;
pub mod tensor;

pub use error::{KanError, Result};
pub use tensor::Tensor;
