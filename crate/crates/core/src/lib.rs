//! Permutation-invariant multi-modal segmentation with learned modality routing.

pub mod bind;
pub mod cli;
pub mod classifier;
pub mod error;
pub mod gradcheck;
pub mod eval;
pub mod io;
pub mod model;
pub mod ops;
pub mod parallel;
pub mod params;
pub mod routing;
pub mod seed;
pub mod segnet;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod training;
pub mod verify;

pub use error::{PimmsError, Result};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
