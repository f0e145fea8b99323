//! Hand segmentation and fingertip detection from depth images.

pub mod checkpoint;
pub mod detect;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod kernels;
pub mod labeling;
pub mod network;
pub mod optim;
pub mod pgm;
pub mod pipeline;
pub mod preprocess;
pub mod seeding;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Shape4, Tensor4};
