pub mod attention;
pub mod audio;
pub mod bench;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod model;
pub mod scene;
pub mod smoke;
pub mod tensor;
pub mod training;

pub use error::{DssError, Result};
