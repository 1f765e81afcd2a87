pub mod error;
pub mod features;
pub mod gradcam;
pub mod gradcamo;
pub mod gradcheck;
pub mod manifest;
pub mod model;
pub mod ops;
pub mod render;
pub mod report;
pub mod synth;
pub mod tape;
pub mod tbf;
pub mod tensor;
pub mod train;
pub mod volume;
pub mod whitening;

pub use error::{Error, Result};
pub use tape::{Tape, Var};
pub use tensor::{Real, Tensor};
